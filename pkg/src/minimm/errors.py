"""Exception taxonomy shared across the package.

Every error the CLI can surface maps to one of these classes; the CLI
prints ``<ClassName>: <message>`` as a single line on stderr.
"""


class MiniMMError(Exception):
    """Base class for all package errors."""


class ShapeError(MiniMMError):
    """Operand dimensions disagree (matmul inner dims, head dims, ...)."""


class StructureError(MiniMMError):
    """A composite value is internally inconsistent (packing lengths, grids)."""


class ContractError(MiniMMError):
    """An operation was called outside its contract (empty batch, non-scalar loss)."""


class ConfigError(MiniMMError):
    """Invalid or unknown configuration value."""


class NumericsError(MiniMMError):
    """NaN/Inf produced while checked mode is active, or training diverged."""


class SequenceOverflowError(MiniMMError):
    """Assembled sequence exceeds the model's maximum length."""


class LineageError(MiniMMError):
    """Training stages run out of order or from a missing upstream checkpoint."""


class IntegrityError(MiniMMError):
    """Checkpoint file is corrupt (bad magic, version, or checksum)."""
