"""The full VQ-VAE/WaveNet model and crop-level loss evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc_mod
from .config import ModelConfig
from .decoder import Decoder
from .encoder import Encoder
from .nn import functional as F
from .nn.tensor import Parameter, Tensor
from .quantizer import Codebook, jitter, lookup, quantize, vq_losses


@dataclass
class Utterance:
    name: str
    speaker: str
    speaker_index: int
    features: np.ndarray  # (T_frames, feature_dim), normalized
    levels: np.ndarray  # (L,) mu-law levels


@dataclass
class Crop:
    frames: np.ndarray  # (feature_dim, window frames)
    lat_lo: int  # latent slice of the window's encoder output
    lat_hi: int
    history: int  # leading latents that only feed the causal post-VQ conv
    sample_offset: int  # first sample relative to the first non-history latent
    levels: np.ndarray  # (C,)
    prev: int  # level before the crop, or the start token
    speaker_index: int


@dataclass
class LossBreakdown:
    total: Tensor
    reconstruction: Tensor
    codebook: Tensor
    commitment: Tensor
    logits: Tensor
    indices: np.ndarray


class VQVC:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim, rng)
        self.decoder = Decoder(cfg, rng)

    @property
    def params(self) -> dict[str, Parameter]:
        out = dict(self.encoder.params)
        out[self.codebook.embeddings.name] = self.codebook.embeddings
        out.update(self.decoder.params)
        return out

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def cast(self, dtype) -> "VQVC":
        """Switch every parameter's storage dtype in place (used by gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def upsample_factor(self, frame_shift_samples: int) -> int:
        return frame_shift_samples * self.cfg.encoder_downsample

    def frame_margin(self) -> int:
        ds = self.cfg.encoder_downsample
        rf = enc_mod.receptive_field(self.encoder)
        return -(-rf // ds) * ds

    def n_latents(self, n_frames: int) -> int:
        return enc_mod.output_length(n_frames, self.cfg.encoder_downsample)

    def covered_samples(self, utt: Utterance, frame_shift_samples: int) -> int:
        return min(len(utt.levels), self.n_latents(len(utt.features)) * self.upsample_factor(frame_shift_samples))

    def make_crop(self, utt: Utterance, start: int, length: int, frame_shift_samples: int) -> Crop:
        ds = self.cfg.encoder_downsample
        factor = self.upsample_factor(frame_shift_samples)
        n_frames = len(utt.features)
        if start < 0 or length < 1 or start + length > self.covered_samples(utt, frame_shift_samples):
            raise ValueError(f"crop [{start}, {start + length}) outside the conditioned range of {utt.name}")
        n0, n1 = start // factor, -(-(start + length) // factor)
        hist = min(self.cfg.post_vq_kernel - 1, n0)
        lo = n0 - hist
        margin = self.frame_margin()
        fs = max(0, ds * lo - margin)
        fe = min(n_frames, ds * n1 + margin)
        prev = int(utt.levels[start - 1]) if start > 0 else self.decoder.start_token
        return Crop(frames=np.ascontiguousarray(utt.features[fs:fe].T, dtype=np.float32),
                    lat_lo=lo - fs // ds, lat_hi=n1 - fs // ds, history=hist,
                    sample_offset=start - n0 * factor, levels=np.asarray(utt.levels[start:start + length]),
                    prev=prev, speaker_index=utt.speaker_index)

    def encode(self, features) -> Tensor:
        return self.encoder(features)

    def crop_losses(self, crops: list[Crop], frame_shift_samples: int, beta: float = 0.25,
                    jitter_p: float = 0.0, rng: np.random.Generator | None = None) -> LossBreakdown:
        factor = self.upsample_factor(frame_shift_samples)
        length = len(crops[0].levels)
        if any(len(c.levels) != length for c in crops):
            raise ValueError("all crops in a batch must have the same length")
        emb = self.codebook.embeddings
        lats, idxs, conds = [], [], []
        for c in crops:
            lat = F.time_slice(self.encoder(c.frames), c.lat_lo, c.lat_hi)
            q = quantize(lat, self.codebook)
            idx = q.indices
            if jitter_p > 0:
                if rng is None:
                    raise ValueError("jitter needs a random generator")
                idx = jitter(idx, jitter_p, rng)
            st = F.straight_through(lat, lookup(emb.data, idx))
            onehot = np.zeros(self.cfg.n_speakers, np.float32)
            onehot[c.speaker_index] = 1
            cond = self.decoder.condition(st, onehot, (lat.shape[-1] - c.history) * factor, factor,
                                          history=c.history)
            cond = F.time_slice(cond, c.sample_offset, c.sample_offset + length)
            lats.append(lat)
            idxs.append(q.indices)
            conds.append(F.reshape(cond, (1,) + cond.shape))
        latents = F.concat(lats, axis=-1)
        indices = np.concatenate(idxs)
        vq = vq_losses(latents, indices, self.codebook, beta)
        levels = np.stack([c.levels for c in crops])
        prev = np.array([c.prev for c in crops])
        logits = self.decoder.teacher_forced(levels, F.concat(conds, axis=0), prev=prev)
        recon = F.softmax_xent(logits, levels)
        total = F.add(F.add(recon, vq.codebook_loss), vq.commitment_loss)
        return LossBreakdown(total, recon, vq.codebook_loss, vq.commitment_loss, logits, indices)
