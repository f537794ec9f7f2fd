"""Vector-quantization bottleneck and the jitter regularizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import functional as F
from .nn.functional import ShapeError
from .nn.tensor import Parameter, Tensor, as_tensor


class Codebook:
    def __init__(self, size: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        if size < 2:
            raise ValueError("codebook needs at least 2 entries")
        init = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)).astype(dtype)
        self.embeddings = Parameter(init, "vq.codebook")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class QuantizationResult:
    indices: np.ndarray  # (..., N)
    quantized: np.ndarray  # (..., D, N), exact codebook rows


@dataclass
class VqLosses:
    codebook_loss: Tensor
    commitment_loss: Tensor  # already weighted by beta
    beta: float


def _embeddings(cb) -> np.ndarray:
    if isinstance(cb, Codebook):
        return cb.embeddings.data
    if isinstance(cb, Tensor):
        return cb.data
    return np.asarray(cb)


def nearest_codes(latents: np.ndarray, emb: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """argmin_j ||h - e_j||^2 per column of (..., D, N); ties go to the lowest j."""
    lead, n = latents.shape[:-2], latents.shape[-1]
    h = np.moveaxis(latents, -1, -2).reshape(-1, latents.shape[-2]).astype(np.float64)
    e = emb.astype(np.float64)
    out = np.empty(h.shape[0], dtype=np.int64)
    for s in range(0, h.shape[0], chunk):
        diff = h[s:s + chunk, None, :] - e[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("ncd,ncd->nc", diff, diff), axis=1)
    return out.reshape(lead + (n,))


def quantize(latents, cb) -> QuantizationResult:
    h = latents.data if isinstance(latents, Tensor) else np.asarray(latents)
    emb = _embeddings(cb)
    if h.ndim < 2 or h.shape[-2] != emb.shape[1]:
        raise ShapeError(f"latents {h.shape} do not match codebook dimension {emb.shape[1]}")
    if not np.all(np.isfinite(h)):
        raise ValueError("latents contain non-finite values")
    idx = nearest_codes(h, emb)
    return QuantizationResult(idx, lookup(emb, idx))


def lookup(emb: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(emb[indices], -1, -2))


def straight_through(latents: Tensor, result: QuantizationResult) -> Tensor:
    """Decoder input: value of the codebook rows, gradient copied to the latents."""
    return F.straight_through(as_tensor(latents), result.quantized)


def vq_losses(latents: Tensor, indices: np.ndarray, cb, beta: float = 0.25) -> VqLosses:
    """codebook = mean ||sg(h) - e_k||^2, commitment = beta * mean ||h - sg(e_k)||^2,
    means taken over frames (squared norms summed over the code dimension)."""
    latents = as_tensor(latents)
    emb = cb.embeddings if isinstance(cb, Codebook) else cb
    n_frames = max(int(np.prod(indices.shape)), 1)
    e_k = F.embedding(emb, indices)
    d_cb = F.sub(F.stop_gradient(latents), e_k)
    d_cm = F.sub(latents, F.stop_gradient(e_k))
    codebook_loss = F.mul(F.total_sum(F.mul(d_cb, d_cb)), 1.0 / n_frames)
    commitment = F.mul(F.total_sum(F.mul(d_cm, d_cm)), beta / n_frames)
    return VqLosses(codebook_loss, commitment, beta)


def jitter(indices: np.ndarray, p: float, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    """Replace each frame's code with a temporal neighbour's with probability p.

    Neighbours are read from the original sequence; interior frames pick left
    or right uniformly, boundary frames use their only neighbour. Operates on
    the last axis. Two uniform draws per frame are always consumed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"jitter probability must be in [0, 1], got {p}")
    idx = np.asarray(indices)
    if not training:
        return idx.copy()
    n = idx.shape[-1]
    replace = rng.random(idx.shape) < p
    go_left = rng.random(idx.shape) < 0.5
    if n < 2:
        return idx.copy()
    pos = np.broadcast_to(np.arange(n), idx.shape)
    src = np.where(go_left, pos - 1, pos + 1)
    src = np.where(pos == 0, 1, src)
    src = np.where(pos == n - 1, n - 2, src)
    src = np.where(replace, src, pos)
    return np.take_along_axis(idx, src, axis=-1)


def codebook_perplexity(indices, n_codes: int | None = None) -> float:
    idx = np.asarray(indices).reshape(-1)
    if idx.size == 0:
        raise ValueError("perplexity needs at least one index")
    counts = np.bincount(idx, minlength=n_codes or 0).astype(np.float64)
    probs = counts[counts > 0] / idx.size
    return float(np.exp(-np.sum(probs * np.log(probs))))
