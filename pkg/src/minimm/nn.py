"""Small module system: parameter registration, name paths, shared layers."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a model; ``trainable`` gates gradient flow."""

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name_path: str | None = None

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)


class Module:
    """Base class; children and parameters register through attribute assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            path = f"{prefix}.{name}" if prefix else name
            p.name_path = path
            yield path, p
        for name, child in self._children.items():
            path = f"{prefix}.{name}" if prefix else name
            yield from child.named_parameters(path)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        super().__init__()
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = (rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)).astype(dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.table = Parameter((rng.standard_normal((num, dim)) * 0.02).astype(dtype))

    def forward(self, ids) -> Tensor:
        return F.embedding(self.table, ids)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        super().__init__()
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        ms = (x * x).mean(axis=-1, keepdims=True)
        return x * ((ms + self.eps) ** -0.5) * self.gain


class Mlp(Module):
    """Two-layer SiLU MLP."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None, dtype=np.float32):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(x)))


class Attention(Module):
    """Multi-head projection bundle; the caller owns masking and rope."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def project_qkv(self, x: Tensor):
        """[..., n, dim] -> three [..., heads, n, head_dim] tensors."""
        lead = x.shape[:-2]
        n = x.shape[-2]
        qkv = self.qkv(x).reshape(lead + (n, 3, self.heads, self.head_dim))
        ndim = qkv.ndim
        # [..., n, 3, heads, hd] -> [..., 3, heads, n, hd]
        axes = tuple(range(ndim - 4)) + (ndim - 3, ndim - 2, ndim - 4, ndim - 1)
        qkv = qkv.transpose(axes)
        idx_q = (slice(None),) * (ndim - 4) + (0,)
        idx_k = (slice(None),) * (ndim - 4) + (1,)
        idx_v = (slice(None),) * (ndim - 4) + (2,)
        return qkv[idx_q], qkv[idx_k], qkv[idx_v]

    def merge_heads(self, y: Tensor) -> Tensor:
        """[..., heads, n, head_dim] -> projected [..., n, dim]."""
        ndim = y.ndim
        axes = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
        merged = y.transpose(axes).reshape(y.shape[:-3] + (y.shape[-2], self.dim))
        return self.proj(merged)

    def forward(self, x: Tensor, mask=None, rope=None) -> Tensor:
        q, k, v = self.project_qkv(x)
        if rope is not None:
            q, k = rope(q), rope(k)
        return self.merge_heads(F.attention(q, k, v, mask=mask))
