"""Synthetic harmonic "speech" for smoke tests and desk-scale experiments.

A speaker is a fundamental period (integer samples, so every segment is
exactly periodic) and a spectral tilt; an utterance is a sequence of
segments, each a different harmonic amplitude pattern.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import Waveform, write_wav

# relative harmonic amplitudes for a few "vowels"
VOWELS = (
    (1.0, 0.6, 0.1, 0.3, 0.05),
    (0.4, 1.0, 0.5, 0.1, 0.2),
    (1.0, 0.1, 0.7, 0.05, 0.4),
    (0.3, 0.3, 0.2, 1.0, 0.6),
)


def harmonic_segment(period: int, weights, n: int, tilt: float = 0.0, peak: float = 0.6) -> np.ndarray:
    t = np.arange(n)
    x = np.zeros(n)
    for h, w in enumerate(weights, start=1):
        x += w * (h ** -tilt) * np.sin(2 * np.pi * h * t / period)
    return peak * x / np.max(np.abs(x))


def harmonic_utterance(period: int, vowel_ids, segment_samples: int, tilt: float = 0.0) -> np.ndarray:
    return np.concatenate([harmonic_segment(period, VOWELS[v % len(VOWELS)], segment_samples, tilt)
                           for v in vowel_ids])


def write_corpus(out_dir, sample_rate: int = 8000, seconds: float = 1.0, speakers=None,
                 utterances_per_speaker: int = 2, segments: int = 4) -> Path:
    """Write WAVs plus a ``manifest.tsv`` and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    speakers = speakers or {"spkA": (40, 0.0), "spkB": (64, 0.8)}
    seg = int(round(seconds * sample_rate / segments))
    lines = []
    for spk, (period, tilt) in speakers.items():
        for u in range(utterances_per_speaker):
            vowels = [(u + j * (1 + u)) % len(VOWELS) for j in range(segments)]
            x = harmonic_utterance(period, vowels, seg, tilt)
            name = f"{spk}_{u:02d}.wav"
            write_wav(Waveform(x, sample_rate), out_dir / name)
            lines.append(f"{name}\t{spk}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
