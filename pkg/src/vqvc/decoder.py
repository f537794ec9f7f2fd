"""Conditioning path and the conditional WaveNet decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .nn import functional as F
from .nn.functional import ShapeError
from .nn.tensor import Parameter, Tensor, as_tensor


@dataclass
class ConditioningPlan:
    upsample_factor: int
    speaker_onehot: np.ndarray  # (S,)
    local_features: np.ndarray  # (D + S, T)

    @property
    def length(self) -> int:
        return self.local_features.shape[-1]


def speaker_onehot(index: int, n_speakers: int, dtype=np.float32) -> np.ndarray:
    if not 0 <= index < n_speakers:
        raise IndexError(f"speaker index {index} outside [0, {n_speakers})")
    v = np.zeros(n_speakers, dtype=dtype)
    v[index] = 1
    return v


def _check_onehot(v: np.ndarray):
    v = np.asarray(v)
    if v.ndim != 1 or not np.all((v == 0) | (v == 1)) or v.sum() != 1:
        raise ValueError("speaker vector must be one-hot")


def upsample(quantized: np.ndarray, factor: int, target_len: int) -> np.ndarray:
    """Repeat latent n over samples [n*factor, (n+1)*factor), truncated to target_len."""
    return F.upsample_repeat(Tensor(np.asarray(quantized)), factor, target_len).data


def build_conditioning(quantized: np.ndarray, speaker: np.ndarray, target_len: int,
                       factor: int) -> ConditioningPlan:
    _check_onehot(speaker)
    up = upsample(quantized, factor, target_len)
    spk = np.broadcast_to(np.asarray(speaker, dtype=up.dtype)[:, None], (len(speaker), target_len))
    return ConditioningPlan(factor, np.asarray(speaker), np.concatenate([up, spk], axis=0))


def receptive_field(cfg: ModelConfig) -> int:
    return 1 + (cfg.kernel_size - 1) * sum(cfg.dilations)


class Decoder:
    """Gated dilated causal stack over embedded previous levels.

    Input at step t is the embedding of level x_{t-1}; row ``mu + 1`` of the
    embedding table is a learned start token used at t = 0.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        r, s, h, c = cfg.residual_channels, cfg.skip_channels, cfg.head_channels, cfg.cond_channels
        d, k = cfg.code_dim, cfg.kernel_size
        p = {
            "dec.post_vq.w": F.xavier_uniform(rng, (d, d, cfg.post_vq_kernel), d * cfg.post_vq_kernel,
                                              d * cfg.post_vq_kernel),
            "dec.post_vq.b": np.zeros(d, np.float32),
            "dec.embed": rng.uniform(-1.0, 1.0, size=(cfg.n_classes + 1, r)).astype(np.float32),
        }
        for i in range(cfg.n_layers):
            pre = f"dec.layer{i}."
            p[pre + "filter.w"] = F.xavier_uniform(rng, (r, r, k), r * k, r)
            p[pre + "filter.b"] = np.zeros(r, np.float32)
            p[pre + "gate.w"] = F.xavier_uniform(rng, (r, r, k), r * k, r)
            p[pre + "gate.b"] = np.zeros(r, np.float32)
            p[pre + "cond_filter.w"] = F.xavier_uniform(rng, (r, c), c, r)
            p[pre + "cond_gate.w"] = F.xavier_uniform(rng, (r, c), c, r)
            p[pre + "res.w"] = F.xavier_uniform(rng, (r, r), r, r)
            p[pre + "res.b"] = np.zeros(r, np.float32)
            p[pre + "skip.w"] = F.xavier_uniform(rng, (s, r), r, s)
            p[pre + "skip.b"] = np.zeros(s, np.float32)
        p["dec.head1.w"] = F.he_uniform(rng, (h, s), s)
        p["dec.head1.b"] = np.zeros(h, np.float32)
        # zero output layer: an untrained decoder predicts the uniform distribution
        p["dec.head2.w"] = np.zeros((cfg.n_classes, h), np.float32)
        p["dec.head2.b"] = np.zeros(cfg.n_classes, np.float32)
        self.params = {name: Parameter(v, name) for name, v in p.items()}

    @property
    def start_token(self) -> int:
        return self.cfg.n_classes

    def condition(self, quantized, speaker, target_len: int, factor: int, history: int = 0) -> Tensor:
        """Post-VQ causal conv, upsampling to sample rate and speaker concatenation.

        quantized: (..., D, N); speaker: one-hot (..., S). The first `history`
        latents only provide left context to the conv and are dropped before
        upsampling. Returns (..., D+S, target_len).
        """
        p = self.params
        z = F.conv1d(as_tensor(quantized), p["dec.post_vq.w"], p["dec.post_vq.b"], padding="causal")
        if history:
            z = F.time_slice(z, history, z.shape[-1])
        up = F.upsample_repeat(z, factor, target_len)
        spk = np.asarray(speaker, dtype=up.dtype)
        spk = np.broadcast_to(spk[..., :, None], spk.shape + (target_len,))
        spk = np.broadcast_to(spk, up.shape[:-2] + spk.shape[-2:])
        return F.concat([up, Tensor(np.ascontiguousarray(spk))], axis=-2)

    def shifted_inputs(self, levels: np.ndarray, prev=None) -> np.ndarray:
        levels = np.asarray(levels, dtype=np.int64)
        first = np.full(levels.shape[:-1] + (1,), self.start_token, dtype=np.int64)
        if prev is not None:
            first[..., 0] = prev
        return np.concatenate([first, levels[..., :-1]], axis=-1)

    def forward(self, inputs: np.ndarray, cond, capture: list | None = None) -> Tensor:
        """Logits (..., n_classes, T) from input tokens (..., T) that are already shifted.

        When `capture` is a list, each layer's input activations are appended.
        """
        cfg, p = self.cfg, self.params
        cond = as_tensor(cond)
        if cond.shape[-1] != np.shape(inputs)[-1]:
            raise ShapeError(f"conditioning length {cond.shape[-1]} != sequence length {np.shape(inputs)[-1]}")
        if cond.shape[-2] != cfg.cond_channels:
            raise ShapeError(f"conditioning has {cond.shape[-2]} channels, expected {cfg.cond_channels}")
        r = F.embedding(p["dec.embed"], inputs)
        skip = None
        for i, d in enumerate(cfg.dilations):
            pre = f"dec.layer{i}."
            if capture is not None:
                capture.append(r.data)
            a = F.add(F.conv1d(r, p[pre + "filter.w"], p[pre + "filter.b"], dilation=d, padding="causal"),
                      F.dense(cond, p[pre + "cond_filter.w"]))
            g = F.add(F.conv1d(r, p[pre + "gate.w"], p[pre + "gate.b"], dilation=d, padding="causal"),
                      F.dense(cond, p[pre + "cond_gate.w"]))
            z = F.gated(a, g)
            s = F.dense(z, p[pre + "skip.w"], p[pre + "skip.b"])
            skip = s if skip is None else F.add(skip, s)
            r = F.add(r, F.dense(z, p[pre + "res.w"], p[pre + "res.b"]))
        hid = F.relu(F.dense(F.relu(skip), p["dec.head1.w"], p["dec.head1.b"]))
        return F.dense(hid, p["dec.head2.w"], p["dec.head2.b"])

    def teacher_forced(self, levels, cond, prev=None, capture: list | None = None) -> Tensor:
        """Logits for every position of `levels` given the true history."""
        return self.forward(self.shifted_inputs(levels, prev), cond, capture)
