"""WAV reading/writing and mu-law companding."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile


class AudioFormatError(ValueError):
    pass


class UnsupportedChannelsError(AudioFormatError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedChannelsError("waveform must be mono (1-D)")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class QuantizedWaveform:
    levels: np.ndarray
    mu: int = 127
    sample_rate: int = 16000

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.levels.size and (self.levels.min() < 0 or self.levels.max() > self.mu):
            raise ValueError(f"levels must lie in [0, {self.mu}]")

    def __len__(self):
        return self.levels.shape[0]


def read_wav(path) -> Waveform:
    """Read a mono PCM (8/16/24/32-bit int) or 32-bit float WAV file.

    Integer PCM is divided by the largest magnitude of its type, so -32768
    maps to -1.0 for 16-bit input.
    """
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError) as e:
        raise AudioFormatError(f"{path}: {e}") from e
    if data.ndim != 1:
        raise UnsupportedChannelsError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit files come back left-justified in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    return Waveform(x, sr)


def write_wav(w: Waveform, path) -> None:
    """Write 16-bit mono PCM with the same 1/32768 scale `read_wav` uses;
    +1.0 saturates at 32767."""
    x = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate), pcm)


def _check_mu(mu):
    if int(mu) != mu or mu < 1:
        raise ValueError(f"mu must be a positive integer, got {mu}")


def mulaw_compress(x, mu: int = 127):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def mulaw_expand(y, mu: int = 127):
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * ((1.0 + mu) ** np.abs(y) - 1.0) / mu


def mulaw_encode(x, mu: int = 127):
    """Map samples in [-1, 1] to integer levels in [0, mu].

    Works on scalars and arrays; returns the same kind.
    """
    _check_mu(mu)
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(np.abs(x) > 1.0):
        raise ValueError("mu-law input must lie in [-1, 1]")
    f = mulaw_compress(x, mu)
    level = np.minimum(np.floor((f + 1.0) / 2.0 * (mu + 1)), mu).astype(np.int64)
    return level if level.ndim else int(level)


def mulaw_decode(level, mu: int = 127):
    """Inverse of `mulaw_encode`: the expanded value of each level's bin center."""
    _check_mu(mu)
    k = np.asarray(level)
    if k.size and (np.any(k < 0) or np.any(k > mu) or np.any(k != np.floor(k))):
        raise ValueError(f"mu-law level must be an integer in [0, {mu}]")
    y = 2.0 * (k.astype(np.float64) + 0.5) / (mu + 1) - 1.0
    x = mulaw_expand(y, mu)
    return x if x.ndim else float(x)


def quantize_waveform(w: Waveform, mu: int = 127) -> QuantizedWaveform:
    return QuantizedWaveform(mulaw_encode(w.samples, mu), mu, w.sample_rate)


def dequantize_waveform(q: QuantizedWaveform) -> Waveform:
    return Waveform(mulaw_decode(q.levels, q.mu), q.sample_rate)
