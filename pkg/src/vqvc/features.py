"""MFCC + delta + double-delta features with per-speaker CMVN."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import Waveform

STD_FLOOR = 1e-8
FEATURE_MAGIC = b"VQF1"


class TooShortError(ValueError):
    pass


class MissingDataError(ValueError):
    pass


class SpeakerMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int | None = None  # None: next power of two >= frame samples
    n_mels: int = 40
    n_mfcc: int = 13
    log_floor: float = 1e-10
    delta_window: int = 2
    cmvn_after_deltas: bool = True

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame_shift_ms must not exceed frame_length_ms")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")
        if self.sample_rate <= 0 or self.frame_shift_samples < 1:
            raise ValueError("sample rate and frame shift must be positive")
        n = self.n_fft
        if n < self.frame_samples or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two >= {self.frame_samples}")

    @property
    def frame_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def frame_shift_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        if self.fft_size is not None:
            return int(self.fft_size)
        return 1 << (self.frame_samples - 1).bit_length()

    @property
    def feature_dim(self) -> int:
        return 3 * self.n_mfcc


@dataclass
class FeatureMatrix:
    data: np.ndarray  # T x dims
    speaker_id: str
    frame_shift_samples: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("feature matrix must be 2-D with at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class SpeakerStats:
    speaker_id: str
    mean: np.ndarray
    std: np.ndarray
    count: int = field(default=0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters spanning 0..Nyquist, shape (n_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II basis rows 0..n_out-1."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    m[0] /= np.sqrt(2.0)
    return m


def num_frames(n_samples: int, cfg: FeatureConfig) -> int:
    return 1 + (n_samples - cfg.frame_samples) // cfg.frame_shift_samples


def frame_signal(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    flen, shift = cfg.frame_samples, cfg.frame_shift_samples
    if x.shape[0] < flen:
        raise TooShortError(f"need at least {flen} samples for one frame, got {x.shape[0]}")
    t = num_frames(x.shape[0], cfg)
    idx = np.arange(flen)[None, :] + shift * np.arange(t)[:, None]
    return x[idx]


def compute_mfcc(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Return a (T, n_mfcc) matrix of MFCCs c0..c{n_mfcc-1}."""
    frames = frame_signal(np.asarray(w.samples, dtype=np.float64), cfg)
    frames = frames * np.hanning(cfg.frame_samples + 2)[1:-1]
    spec = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    mel = spec @ mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return logmel @ dct_matrix(cfg.n_mfcc, cfg.n_mels).T


def _delta(m: np.ndarray, window: int) -> np.ndarray:
    t = m.shape[0]
    padded = np.concatenate([np.repeat(m[:1], window, 0), m, np.repeat(m[-1:], window, 0)])
    num = np.zeros_like(m)
    for n in range(1, window + 1):
        num += n * (padded[window + n:window + n + t] - padded[window - n:window - n + t])
    return num / (2.0 * sum(n * n for n in range(1, window + 1)))


def add_deltas(m: np.ndarray, window: int = 2) -> np.ndarray:
    """Append regression deltas and double deltas: columns [c, dc, ddc]."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("expected a (T, d) matrix with T >= 1")
    d1 = _delta(m, window)
    return np.concatenate([m, d1, _delta(d1, window)], axis=1)


def extract_features(w: Waveform, speaker_id: str, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Raw (un-normalized) model features for a whole utterance.

    The signal is right-padded by ``frame - shift`` zeros so that frame t
    starts at sample t*shift and the frames tile the utterance: T*shift lies
    in (len - shift, len].
    """
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} does not match feature config {cfg.sample_rate}")
    if len(w) < cfg.frame_shift_samples:
        raise TooShortError(f"utterance shorter than one frame shift ({cfg.frame_shift_samples} samples)")
    pad = cfg.frame_samples - cfg.frame_shift_samples
    padded = Waveform(np.concatenate([w.samples, np.zeros(pad)]), w.sample_rate)
    mfcc = compute_mfcc(padded, cfg)
    return FeatureMatrix(add_deltas(mfcc, cfg.delta_window), speaker_id, cfg.frame_shift_samples)


def cmvn_fit(features) -> dict[str, SpeakerStats]:
    """Per-speaker mean/std over every frame of every utterance of that speaker.

    Accumulates sums in one pass (shifted by the first frame for stability).
    """
    acc: dict[str, list] = {}
    for fm in features:
        x = np.asarray(fm.data, dtype=np.float64)
        if fm.speaker_id not in acc:
            if x.shape[0] == 0:
                continue
            acc[fm.speaker_id] = [x[0].copy(), 0, np.zeros(x.shape[1]), np.zeros(x.shape[1])]
        a = acc[fm.speaker_id]
        xs = x - a[0]
        a[1] += x.shape[0]
        a[2] += xs.sum(0)
        a[3] += (xs * xs).sum(0)
    out = {}
    for spk, (shift, n, s1, s2) in acc.items():
        if n == 0:
            raise MissingDataError(f"speaker {spk!r} has no frames")
        mu = s1 / n
        var = np.maximum(s2 / n - mu * mu, 0.0)
        out[spk] = SpeakerStats(spk, shift + mu, np.maximum(np.sqrt(var), STD_FLOOR), n)
    return out


def cmvn_fit_grouped(groups: dict[str, list]) -> dict[str, SpeakerStats]:
    for spk, utts in groups.items():
        if not utts or sum(u.n_frames for u in utts) == 0:
            raise MissingDataError(f"speaker {spk!r} has no utterances")
    return cmvn_fit([u for utts in groups.values() for u in utts])


def reorder_stats(stats: SpeakerStats, n_static: int) -> SpeakerStats:
    """Stats equivalent to normalizing the static cepstra before taking deltas.

    Deltas are linear and annihilate constants, so normalizing first leaves
    delta columns scaled by the static std with no mean offset.
    """
    std_c = stats.std[:n_static]
    k = stats.mean.shape[0] // n_static
    mean = np.concatenate([stats.mean[:n_static]] + [np.zeros(n_static)] * (k - 1))
    return SpeakerStats(stats.speaker_id, mean, np.tile(std_c, k), stats.count)


def fit_speaker_stats(features, cfg: FeatureConfig) -> dict[str, SpeakerStats]:
    stats = cmvn_fit(features)
    if not cfg.cmvn_after_deltas:
        stats = {k: reorder_stats(v, cfg.n_mfcc) for k, v in stats.items()}
    return stats


def utterance_stats(fm: FeatureMatrix) -> SpeakerStats:
    return cmvn_fit([fm])[fm.speaker_id]


def cmvn_apply(m: FeatureMatrix, stats: SpeakerStats) -> FeatureMatrix:
    if m.speaker_id != stats.speaker_id:
        raise SpeakerMismatchError(f"features of {m.speaker_id!r} with stats of {stats.speaker_id!r}")
    return FeatureMatrix((m.data - stats.mean) / stats.std, m.speaker_id, m.frame_shift_samples)


def cmvn_invert(m: FeatureMatrix, stats: SpeakerStats) -> FeatureMatrix:
    if m.speaker_id != stats.speaker_id:
        raise SpeakerMismatchError(f"features of {m.speaker_id!r} with stats of {stats.speaker_id!r}")
    return FeatureMatrix(m.data * stats.std + stats.mean, m.speaker_id, m.frame_shift_samples)


# Binary layout: b"VQF1", then little-endian u32 T, u32 dims,
# u32 frame_shift_samples, u32 speaker-id byte length, the UTF-8 speaker id,
# then T*dims float32 values in row-major order.
def save_features(fm: FeatureMatrix, path) -> None:
    spk = fm.speaker_id.encode("utf-8")
    t, d = fm.data.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIII", t, d, fm.frame_shift_samples, len(spk)))
        f.write(spk)
        f.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header")
    t, d, shift, n = struct.unpack_from("<IIII", raw, 4)
    off = 20 + n
    if len(raw) != off + 4 * t * d:
        raise ValueError(f"{path}: size does not match header")
    spk = raw[20:off].decode("utf-8")
    data = np.frombuffer(raw, dtype="<f4", offset=off).reshape(t, d)
    return FeatureMatrix(data.astype(np.float64), spk, shift)


def save_stats(stats: dict[str, SpeakerStats], path) -> None:
    """Tab-separated text: speaker, frame count, then mean and std vectors."""
    lines = []
    for spk in sorted(stats):
        s = stats[spk]
        lines.append("\t".join([spk, str(s.count),
                                " ".join(repr(float(v)) for v in s.mean),
                                " ".join(repr(float(v)) for v in s.std)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_stats(path) -> dict[str, SpeakerStats]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        spk, count, mean, std = line.split("\t")
        out[spk] = SpeakerStats(spk, np.array(mean.split(), float), np.array(std.split(), float), int(count))
    return out
