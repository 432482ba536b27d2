"""Versioned checkpoint container.

Layout::

    b"CACHEDCK"                      8-byte magic
    uint32 LE                        format version
    uint64 LE                        header length in bytes
    header                           UTF-8 JSON (sorted keys)
    payload                          raw little-endian float arrays, back to back

The header lists every array with its group (param / adam_m / adam_v), name,
shape, dtype and byte offset into the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, params_from_arrays, parameter_shapes
from .trainer.config import TrainConfig
from .trainer.optim import AdamState

MAGIC = b"CACHEDCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    optimizer: AdamState | None = None
    global_step: int = 0
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, params: ModelParams, train_config=None, optimizer=None, global_step=0) -> "Checkpoint":
        return cls(params.config, params.values(), train_config, optimizer, global_step)

    def to_params(self) -> ModelParams:
        return params_from_arrays(self.model_config, self.params)

    def to_bytes(self) -> bytes:
        expected = parameter_shapes(self.model_config)
        if list(self.params) != list(expected):
            raise CheckpointError("parameter names/order do not match the model config")
        entries, chunks, offset = [], [], 0

        def put(group, name, arr):
            nonlocal offset
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape),
                            "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)

        for name, arr in self.params.items():
            if arr.shape != expected[name]:
                raise CheckpointError(f"{name}: shape {arr.shape} != config shape {expected[name]}")
            put("param", name, arr)
        if self.optimizer is not None:
            for name in self.params:
                put("adam_m", name, self.optimizer.m[name])
                put("adam_v", name, self.optimizer.v[name])
        header = {
            "model_config": self.model_config.to_dict(),
            "train_config": None if self.train_config is None else self.train_config.to_dict(),
            "global_step": self.global_step,
            "adam_step": None if self.optimizer is None else self.optimizer.step,
            "arrays": entries,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", self.format_version, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", blob[8:20])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        header = json.loads(blob[20:20 + hlen].decode())
        payload = memoryview(blob)[20 + hlen:]
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for e in header["arrays"]:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            if e["name"] in groups[e["group"]]:
                raise CheckpointError(f"duplicate array {e['group']}/{e['name']}")
            groups[e["group"]][e["name"]] = arr
        mcfg = ModelConfig(**header["model_config"])
        expected = parameter_shapes(mcfg)
        if set(groups["param"]) != set(expected):
            raise CheckpointError("checkpoint parameters do not match its model config")
        for name, shape in expected.items():
            if groups["param"][name].shape != shape:
                raise CheckpointError(f"{name}: stored shape {groups['param'][name].shape} != {shape}")
        tcfg = None if header["train_config"] is None else TrainConfig(**header["train_config"])
        opt = None
        if header["adam_step"] is not None:
            opt = AdamState(groups["adam_m"], groups["adam_v"], header["adam_step"])
        params = {name: groups["param"][name] for name in expected}
        return cls(mcfg, params, tcfg, opt, header["global_step"], version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
