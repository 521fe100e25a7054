import numpy as np
import pytest

from conftest import tiny_config
from minimm.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from minimm.errors import IntegrityError, StructureError
from minimm.model import UnifiedModel


@pytest.fixture()
def model():
    return UnifiedModel(tiny_config(), seed=2)


def test_round_trip_bit_identity(model, tmp_path):
    path = tmp_path / "a.ckpt"
    meta = {"stage": 1, "step": 7, "seed": 42, "lineage": [0, 1], "vae_pretrained": True}
    save_checkpoint(model, meta, path)
    fresh = UnifiedModel(tiny_config(), seed=99)
    got_meta = load_checkpoint(path, fresh)
    assert got_meta == meta
    for (na, pa), (nb, pb) in zip(model.named_parameters(), fresh.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data), na


def test_save_load_save_byte_identical(model, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    meta = {"stage": None, "step": 0, "seed": 1, "lineage": [], "vae_pretrained": False}
    save_checkpoint(model, meta, p1)
    fresh = UnifiedModel(tiny_config(), seed=77)
    load_checkpoint(p1, fresh)
    save_checkpoint(fresh, meta, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_single_byte_tamper_detected(model, tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(model, {"seed": 0}, path)
    blob = bytearray(path.read_bytes())
    blob[200] ^= 0x01  # flip one payload bit
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="checksum"):
        read_checkpoint(path)


def test_bad_magic_and_truncation(model, tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(model, {"seed": 0}, path)
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(IntegrityError, match="magic"):
        read_checkpoint(path)
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(IntegrityError):
        read_checkpoint(path)


def test_mismatched_architecture_rejected(model, tmp_path):
    import dataclasses

    from minimm.encoder import EncoderConfig

    path = tmp_path / "a.ckpt"
    save_checkpoint(model, {"seed": 0}, path)
    cfg = tiny_config()
    deeper = dataclasses.replace(
        cfg, encoder=EncoderConfig(patch_size=14, base_grid=8, layers=2, heads=2, hidden_dim=32)
    )
    other = UnifiedModel(deeper, seed=0)
    with pytest.raises(StructureError):
        load_checkpoint(path, other)


def test_state_readable_without_model(model, tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(model, {"seed": 5}, path)
    state, meta = read_checkpoint(path)
    assert meta["seed"] == 5
    own = dict(model.named_parameters())
    assert set(state) == set(own)
    some = next(iter(state))
    assert state[some].shape == own[some].data.shape
