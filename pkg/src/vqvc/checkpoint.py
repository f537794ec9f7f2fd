"""Binary checkpoint format.

Layout (little-endian):
    b"VQVC", u32 version,
    u32 header length, header: UTF-8 lines ``key=value`` sorted by key, values JSON,
    u32 tensor count, tensors,          # model parameters and ``cmvn.*`` statistics
    u32 tensor count, tensors           # Adam moments ``adam.m.*`` / ``adam.v.*``
where each tensor is u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
then row-major float32 data.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .features import FeatureConfig, SpeakerStats
from .nn.optim import AdamState

MAGIC = b"VQVC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    feature_config: FeatureConfig
    speakers: list[str]
    cmvn: dict[str, SpeakerStats]
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    train_state: dict = field(default_factory=dict)
    version: int = VERSION

    def build_model(self):
        from .model import VQVC
        model = VQVC(self.model_config, seed=0)
        load_params(model, self.params)
        return model


def load_params(model, params: dict[str, np.ndarray]) -> None:
    mine = model.params
    if set(mine) != set(params):
        missing = sorted(set(mine) ^ set(params))[:5]
        raise IncompatibleCheckpointError(f"parameter sets differ, e.g. {missing}")
    for name, p in mine.items():
        if p.shape != params[name].shape:
            raise IncompatibleCheckpointError(f"{name}: shape {params[name].shape} != model {p.shape}")
        p.data = np.array(params[name], dtype=np.float32)


def architecture_hash(cfg: ModelConfig) -> str:
    text = "\n".join(f"{k}={json.dumps(v)}" for k, v in sorted(cfg.to_dict().items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _header(ck: Checkpoint) -> bytes:
    kv = {f"arch.{k}": v for k, v in ck.model_config.to_dict().items()}
    kv["arch.hash"] = architecture_hash(ck.model_config)
    kv.update({f"features.{f.name}": getattr(ck.feature_config, f.name) for f in fields(FeatureConfig)})
    kv["speakers"] = list(ck.speakers)
    kv["cmvn.counts"] = {k: int(v.count) for k, v in sorted(ck.cmvn.items())}
    kv["adam.t"] = ck.adam.t
    kv["adam.beta1"] = ck.adam.beta1
    kv["adam.beta2"] = ck.adam.beta2
    kv["adam.eps"] = ck.adam.eps
    kv["step"] = ck.step
    for k, v in ck.train_state.items():
        kv[f"train.{k}"] = v
    lines = [f"{k}={json.dumps(v, sort_keys=True)}" for k, v in sorted(kv.items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return b"".join([struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                     struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()])


def _pack_block(tensors: dict[str, np.ndarray]) -> bytes:
    return struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(k, v) for k, v in tensors.items())


def save_checkpoint(ck: Checkpoint, path) -> None:
    header = _header(ck)
    tensors = dict(ck.params)
    for spk in sorted(ck.cmvn):
        tensors[f"cmvn.mean.{spk}"] = ck.cmvn[spk].mean
        tensors[f"cmvn.std.{spk}"] = ck.cmvn[spk].std
    adam = {}
    for name in sorted(ck.adam.m):
        adam[f"adam.m.{name}"] = ck.adam.m[name]
        adam[f"adam.v.{name}"] = ck.adam.v[name]
    blob = b"".join([MAGIC, struct.pack("<I", ck.version), struct.pack("<I", len(header)), header,
                     _pack_block(tensors), _pack_block(adam)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims)
        return name, data.astype(np.float32)

    def block(self) -> dict[str, np.ndarray]:
        return dict(self.tensor() for _ in range(self.u32()))


def _parse_header(text: str) -> dict:
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        try:
            kv[k] = json.loads(v)
        except json.JSONDecodeError as e:
            raise CorruptCheckpointError(f"bad header line {line!r}") from e
    return kv


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    rd = _Reader(raw)
    if rd.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = rd.u32()
    if version != VERSION:
        raise IncompatibleCheckpointError(f"{path}: format version {version}, expected {VERSION}")
    try:
        kv = _parse_header(rd.take(rd.u32()).decode("utf-8"))
    except UnicodeDecodeError as e:
        raise CorruptCheckpointError(f"{path}: header is not UTF-8") from e
    try:
        arch = {f.name: kv[f"arch.{f.name}"] for f in fields(ModelConfig)}
        model_config = ModelConfig(**arch)
        feature_config = FeatureConfig(**{f.name: kv[f"features.{f.name}"] for f in fields(FeatureConfig)})
    except (KeyError, TypeError, ValueError) as e:
        raise IncompatibleCheckpointError(f"{path}: bad architecture/feature header: {e}") from e
    if kv.get("arch.hash") != architecture_hash(model_config):
        raise IncompatibleCheckpointError(f"{path}: architecture fields do not match their hash")
    tensors = rd.block()
    adam_t = rd.block()
    if rd.pos != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - rd.pos} trailing bytes")
    params = {k: v for k, v in tensors.items() if not k.startswith("cmvn.")}
    cmvn = {}
    for spk, count in kv.get("cmvn.counts", {}).items():
        cmvn[spk] = SpeakerStats(spk, tensors[f"cmvn.mean.{spk}"].astype(np.float64),
                                 tensors[f"cmvn.std.{spk}"].astype(np.float64), count)
    adam = AdamState(beta1=kv["adam.beta1"], beta2=kv["adam.beta2"], eps=kv["adam.eps"], t=kv["adam.t"])
    for k, v in adam_t.items():
        kind, name = k[len("adam."):].split(".", 1)
        (adam.m if kind == "m" else adam.v)[name] = v
    train_state = {k[len("train."):]: v for k, v in kv.items() if k.startswith("train.")}
    ck = Checkpoint(model_config, feature_config, list(kv["speakers"]), cmvn, params, adam,
                    int(kv["step"]), train_state, version)
    ck.build_model()  # validates parameter names and shapes against the architecture
    return ck
