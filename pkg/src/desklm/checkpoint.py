"""Single-file checkpoint container with bit-exact round trips.

Layout: magic, version (u32 LE), header length (u64 LE), canonical JSON
header (config + digest, counters, scaler, health tail, tensor index), then
named tensors as 64-bit little-endian payloads in header order, then a
SHA-256 checksum of everything before it. No timestamps anywhere, so
save -> load -> save reproduces identical bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ModelConfig, Parameters
from .optim import ClipConfig, OptimizerState
from .precision import LossScaler
from .tensor import Tensor

MAGIC = b"DLMCKPT\x00"
VERSION = 1


@dataclass
class HealthRecord:
    step: int
    loss: float
    val_loss: float | None
    scale: float
    grad_norm: float | None
    act_norm: float

    def to_list(self) -> list:
        return [self.step, self.loss, self.val_loss, self.scale, self.grad_norm, self.act_norm]

    @classmethod
    def from_list(cls, row) -> "HealthRecord":
        return cls(*row)


@dataclass
class TrainerState:
    step: int
    tokens_seen: int
    params: Parameters
    opt_state: OptimizerState
    scaler: LossScaler
    clip: ClipConfig
    overrides: tuple[tuple[int, float], ...]
    seed: int
    control_consumed: int = 0


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    state: TrainerState
    health_tail: list[HealthRecord]
    checksum: str = ""


def config_digest(config: ModelConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = ckpt.state
    entries = []  # (key, array) in fixed order: params then adam moments, names sorted
    for name in sorted(state.params.tensors):
        entries.append((f"param/{name}", state.params.tensors[name].data))
    for name in sorted(state.opt_state.m):
        entries.append((f"adam_m/{name}", state.opt_state.m[name]))
    for name in sorted(state.opt_state.v):
        entries.append((f"adam_v/{name}", state.opt_state.v[name]))

    header = {
        "config": dataclasses.asdict(ckpt.config),
        "config_digest": config_digest(ckpt.config),
        "state": {
            "step": state.step,
            "tokens_seen": state.tokens_seen,
            "adam_t": state.opt_state.t,
            "scaler": dataclasses.asdict(state.scaler),
            "clip_max_norm": state.clip.max_norm,
            "overrides": [list(o) for o in state.overrides],
            "seed": state.seed,
            "control_consumed": state.control_consumed,
            "param_dtype": str(next(iter(state.params.tensors.values())).dtype),
        },
        "health_tail": [r.to_list() for r in ckpt.health_tail],
        "tensors": [
            {"key": key, "shape": list(arr.shape)} for key, arr in entries
        ],
    }
    blob = _canonical(header)
    body = bytearray()
    body += MAGIC
    body += np.uint32(VERSION).tobytes()
    body += np.uint64(len(blob)).tobytes()
    body += blob
    for _, arr in entries:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    path.write_bytes(bytes(body) + digest)
    return path


def read_header(path: str | Path) -> dict:
    """Parse just the JSON header (cheap: no tensor payload decode)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    hlen = int(np.frombuffer(raw[12:20], dtype="<u8")[0])
    return json.loads(raw[20 : 20 + hlen])


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 52 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic or truncated file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    hlen = int(np.frombuffer(raw[12:20], dtype="<u8")[0])
    header = json.loads(raw[20 : 20 + hlen])

    config = ModelConfig(**header["config"])
    if header["config_digest"] != config_digest(config):
        raise CheckpointError(f"{path}: embedded config digest mismatch")
    if expect_config is not None and config != expect_config:
        raise ConfigError(
            f"{path}: checkpoint config does not match the run config "
            f"(checkpoint d_model={config.d_model}, run d_model={expect_config.d_model})"
        )

    st = header["state"]
    dtype = np.dtype(st["param_dtype"])
    offset = 20 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape)
        arrays[entry["key"]] = arr.astype(np.float64)
        offset += n * 8

    params = Parameters()
    opt = OptimizerState(t=st["adam_t"])
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "param":
            params.tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        elif kind == "adam_m":
            opt.m[name] = arr
        elif kind == "adam_v":
            opt.v[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {kind!r}")

    state = TrainerState(
        step=st["step"],
        tokens_seen=st["tokens_seen"],
        params=params,
        opt_state=opt,
        scaler=LossScaler(**st["scaler"]),
        clip=ClipConfig(max_norm=st["clip_max_norm"]),
        overrides=tuple(tuple(o) for o in st["overrides"]),
        seed=st["seed"],
        control_consumed=st["control_consumed"],
    )
    tail = [HealthRecord.from_list(row) for row in header["health_tail"]]
    return Checkpoint(
        version=version,
        config=config,
        state=state,
        health_tail=tail,
        checksum=digest.hex(),
    )
