"""Checkpoint container: model parameters, optimizer moments, replay
buffer, and RNG stream position, restored bit-exactly at 64-bit.

Layout: 8-byte magic ``GEDICKPT``, little-endian u32 version, u64 JSON
header length, the UTF-8 JSON header, the raw float64 payload, and a
trailing u32 CRC32 over everything before it. The header carries the
model/train configs, an array manifest (name, shape, byte offset into the
payload), optimizer scalars, buffer counters, RNG state, and progress
counters. The CRC is verified before any state is applied, so truncated
or corrupted files never leave partially restored objects behind.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .autodiff import AdamState, Tensor
from .errors import ContractViolation, FormatError
from .model import GediModel, ModelConfig
from .sampling import ReplayBuffer

MAGIC = b"GEDICKPT"
VERSION = 1


def _optimizer_arrays(name: str, state: AdamState) -> dict[str, np.ndarray]:
    arrays = {}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"{name}.m.{i}"] = m
        arrays[f"{name}.v.{i}"] = v
    return arrays


def save_checkpoint(
    path: str,
    model: GediModel,
    optimizers: dict[str, AdamState] | None = None,
    buffer: ReplayBuffer | None = None,
    rng: np.random.Generator | None = None,
    progress: dict | None = None,
    train_config: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = dict(model.state_arrays())
    optimizer_meta: dict[str, dict] = {}
    if optimizers:
        for name, state in optimizers.items():
            arrays.update(_optimizer_arrays(f"optim.{name}", state))
            optimizer_meta[name] = {
                "lr": state.lr,
                "beta1": state.beta1,
                "beta2": state.beta2,
                "eps": state.eps,
                "step": state.step,
                "count": len(state.m),
            }
    buffer_meta = None
    if buffer is not None:
        buffer_meta = buffer.state_dict()
        contents = buffer.contents()
        if len(buffer):
            arrays["buffer.states"] = contents

    manifest = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()

    header = {
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "arrays": manifest,
        "payload_nbytes": len(payload),
        "optimizers": optimizer_meta,
        "buffer": buffer_meta,
        "rng_state": _encode_rng(rng) if rng is not None else None,
        "progress": progress or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<IQ", VERSION, len(header_bytes))
    blob += header_bytes
    blob += payload
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


class Checkpoint:
    def __init__(self, header: dict, arrays: dict[str, np.ndarray]):
        self.header = header
        self.arrays = arrays
        self.model_config = ModelConfig.from_dict(header["model_config"])
        self.train_config = header.get("train_config")
        self.progress = header.get("progress", {})

    def build_model(self) -> GediModel:
        model = GediModel(self.model_config, np.random.default_rng(0))
        self.restore_model(model)
        return model

    def restore_model(self, model: GediModel) -> None:
        if model.config.to_dict() != self.model_config.to_dict():
            raise ContractViolation(
                f"checkpoint model config {self.model_config.to_dict()} does not match target {model.config.to_dict()}"
            )
        model.load_state_arrays({k: v for k, v in self.arrays.items() if not k.startswith(("optim.", "buffer."))})

    def restore_optimizer(self, name: str, params: list[Tensor]) -> AdamState:
        meta = self.header["optimizers"].get(name)
        if meta is None:
            raise ContractViolation(f"checkpoint has no optimizer section '{name}'")
        if meta["count"] != len(params):
            raise ContractViolation("optimizer parameter count mismatch")
        state = AdamState(params, lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        state.step = int(meta["step"])
        state.m = [self.arrays[f"optim.{name}.m.{i}"].copy() for i in range(meta["count"])]
        state.v = [self.arrays[f"optim.{name}.v.{i}"].copy() for i in range(meta["count"])]
        return state

    def restore_buffer(self) -> ReplayBuffer | None:
        meta = self.header.get("buffer")
        if meta is None:
            return None
        buffer = ReplayBuffer(capacity=int(meta["capacity"]))
        states = self.arrays.get("buffer.states", np.empty((0, 0)))
        buffer.load(meta, states)
        return buffer

    def restore_rng(self) -> np.random.Generator | None:
        state = self.header.get("rng_state")
        return _decode_rng(state) if state else None


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 + 12 + 4 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted); no state applied")
    version, header_len = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header_end = 20 + header_len
    header = json.loads(blob[20:header_end].decode("utf-8"))
    payload = blob[header_end:-4]
    if len(payload) != header["payload_nbytes"]:
        raise FormatError(f"{path}: payload length mismatch (truncated)")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return Checkpoint(header, arrays)
