import struct

import numpy as np
import pytest

from cachedlab.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, CheckpointError
from cachedlab.model import ModelConfig, init_params, parameter_shapes
from cachedlab.trainer import AdamState, TrainConfig

CFG = ModelConfig(vocab_size=20, d_model=8, heads=2, enc_layers=1, dec_layers=2, context_size=16, seed=5)


def _ckpt(optimizer=True):
    params = init_params(CFG)
    state = AdamState.zeros_like(params) if optimizer else None
    if state is not None:
        rng = np.random.default_rng(0)
        for k in state.m:
            state.m[k][...] = rng.normal(size=state.m[k].shape)
            state.v[k][...] = rng.random(size=state.v[k].shape)
        state.step = 7
    return Checkpoint.from_model(params, TrainConfig(chunk_size=16, truncate=4), state, global_step=7)


@pytest.mark.parametrize("optimizer", [True, False])
def test_round_trip_bitwise(tmp_path, optimizer):
    ck = _ckpt(optimizer)
    ck.save(tmp_path / "c.bin")
    back = Checkpoint.load(tmp_path / "c.bin")
    assert back.to_bytes() == ck.to_bytes()
    assert back.model_config == CFG and back.train_config == ck.train_config
    assert back.global_step == 7 and back.format_version == FORMAT_VERSION
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes() and back.params[k].dtype == v.dtype
    if optimizer:
        assert back.optimizer.step == 7
        assert all(np.array_equal(back.optimizer.v[k], ck.optimizer.v[k]) for k in ck.params)
    else:
        assert back.optimizer is None


def test_every_parameter_once():
    ck = _ckpt()
    assert list(ck.params) == list(parameter_shapes(CFG))
    restored = ck.to_params()
    assert all(np.array_equal(restored[k].values, ck.params[k]) for k in ck.params)


def test_float32_round_trip():
    cfg = ModelConfig(vocab_size=20, d_model=8, heads=2, enc_layers=1, dec_layers=1, context_size=16,
                      precision="float32")
    ck = Checkpoint.from_model(init_params(cfg))
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.params["token_embedding"].dtype == np.float32
    assert back.to_bytes() == ck.to_bytes()


def test_header_layout():
    blob = _ckpt().to_bytes()
    assert blob[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", blob[8:20])
    assert version == FORMAT_VERSION and blob[20:21] == b"{"


def test_rejects_bad_magic_and_version():
    blob = bytearray(_ckpt().to_bytes())
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXXXXXX" + bytes(blob[8:]))
    blob[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(blob))


def test_rejects_shape_mismatch():
    ck = _ckpt()
    ck.params["token_embedding"] = ck.params["token_embedding"][:, :4]
    with pytest.raises(CheckpointError, match="shape"):
        ck.to_bytes()
    ck = _ckpt()
    del ck.params["positional_table"]
    with pytest.raises(CheckpointError):
        ck.to_bytes()
