"""Binary checkpoint format.

Layout (all integers little-endian u32, all values little-endian float64)::

    b"LRTK" | version | config_len | config (UTF-8 "key=value" lines, sorted)
    | tensor_count | per tensor: name_len | name | rank | dims... | values

The config block carries ``model.*`` fields, the run kind, training config,
distillation config (students) and the seed. Optimizer moments, when saved,
are ordinary tensors named ``adam.m.<param>`` / ``adam.v.<param>``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .distill import DistillConfig
from .model import ModelConfig, TrackerParams, param_shapes

MAGIC = b"LRTK"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Checkpoint:
    params: TrackerParams
    meta: dict[str, str] = field(default_factory=dict)
    extra_tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")

    @property
    def distill_cfg(self) -> DistillConfig | None:
        d = {k[len("distill."):]: v for k, v in self.meta.items() if k.startswith("distill.")}
        return DistillConfig.from_dict(d) if d else None

    @property
    def train_seed(self) -> int | None:
        s = self.meta.get("train.seed")
        return None if s is None else int(s)


def encode(params: TrackerParams, meta: dict[str, str] | None = None,
           extra_tensors: dict[str, np.ndarray] | None = None, version: int = VERSION) -> bytes:
    cfg_lines = {f"model.{k}": _fmt(v) for k, v in params.config.to_dict().items()}
    for k, v in (meta or {}).items():
        cfg_lines[k] = _fmt(v)
    block = "".join(f"{k}={cfg_lines[k]}\n" for k in sorted(cfg_lines)).encode("utf-8")
    tensors = [(n, t.data) for n, t in params] + list((extra_tensors or {}).items())
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(block)), block,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} (need {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} but this reader supports version {VERSION}")
    block = r.take(r.u32("config length"), "config block").decode("utf-8")
    meta = dict(line.split("=", 1) for line in block.split("\n") if line)
    count = r.u32("tensor count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        name = r.take(r.u32(f"tensor {i} name length"), f"tensor {i} name").decode("utf-8")
        rank = r.u32(f"{name} rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * n, f"{name} values"), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")

    model_cfg = ModelConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    names = list(param_shapes(model_cfg))
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:5]}")
    params = TrackerParams(model_cfg, {n: Tensor(arrays[n], requires_grad=True) for n in names})
    extra = {n: a for n, a in arrays.items() if n not in params.tensors}
    return Checkpoint(params, {k: v for k, v in meta.items() if not k.startswith("model.")}, extra)


def save_checkpoint(params: TrackerParams, path, *, kind: str = "model", train_cfg=None,
                    distill_cfg: DistillConfig | None = None, optimizer=None,
                    meta: dict | None = None) -> Path:
    m: dict = {"kind": kind}
    if train_cfg is not None:
        m.update({f"train.{k}": v for k, v in train_cfg.to_dict().items()})
    if distill_cfg is not None:
        m.update({f"distill.{k}": v for k, v in distill_cfg.to_dict().items()})
    extra = None
    if optimizer is not None:
        m["adam.t"] = optimizer.t
        extra = optimizer.state_tensors()
    m.update(meta or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params, m, extra))
    return path


def save_loaded(ckpt: Checkpoint, path) -> Path:
    """Re-serialize a loaded checkpoint unchanged."""
    path = Path(path)
    path.write_bytes(encode(ckpt.params, ckpt.meta, ckpt.extra_tensors))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)
