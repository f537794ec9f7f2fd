"""Time the cached generator against the windowed reference engine.

    python scripts/benchmark_generation.py [--length 4096] [--full]

Uses the full-size decoder (20 layers, 256 channels). Without ``--full`` the
reference engine is timed on a few steady-state steps (full receptive-field
window) and its total is bounded from below by steps_with_full_window x step
time; ``--full`` times the complete reference run instead (tens of minutes).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from vqvc.config import ModelConfig
from vqvc.decoder import Decoder, receptive_field
from vqvc.synthesizer import SamplerConfig, generate_fast, generate_naive


def benchmark(length: int = 4096, full: bool = False, probe_steps: int = 3, seed: int = 0) -> dict:
    cfg = ModelConfig(n_speakers=2)
    dec = Decoder(cfg, np.random.default_rng(seed))
    cond = np.random.default_rng(seed + 1).standard_normal((cfg.cond_channels, length)).astype(np.float32)
    sampler = SamplerConfig(seed=seed)
    generate_fast(dec, cond, 64, sampler)  # warm-up
    t = time.perf_counter()
    generate_fast(dec, cond, length, sampler)
    fast = time.perf_counter() - t
    rf = receptive_field(cfg)
    out = {"length": length, "receptive_field": rf, "fast_seconds": fast}
    if full:
        t = time.perf_counter()
        generate_naive(dec, cond, length, sampler)
        out["naive_seconds"] = time.perf_counter() - t
        out["naive_method"] = "measured"
    else:
        if length < rf:
            raise ValueError("the lower-bound method needs length >= receptive field")
        prefix = np.random.default_rng(seed + 2).integers(0, cfg.n_classes, rf)
        generate_naive(dec, cond, 1, sampler, prefix=prefix)  # warm-up at full window
        t = time.perf_counter()
        generate_naive(dec, cond, probe_steps, sampler, prefix=prefix)
        step = (time.perf_counter() - t) / probe_steps
        full_window_steps = length - (rf - 1)
        out["naive_step_seconds"] = step
        out["naive_seconds"] = full_window_steps * step
        out["naive_method"] = f"lower bound: {full_window_steps} full-window steps x {step:.3f} s"
    out["speedup"] = out["naive_seconds"] / fast
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=4096)
    ap.add_argument("--full", action="store_true", help="time the complete reference run")
    ap.add_argument("--probe-steps", type=int, default=3)
    a = ap.parse_args()
    r = benchmark(a.length, a.full, a.probe_steps)
    print(f"fast engine: {r['fast_seconds']:.2f} s for {r['length']} samples")
    print(f"reference engine: {r['naive_seconds']:.1f} s ({r['naive_method']})")
    print(f"speedup: {r['speedup']:.1f}x")
