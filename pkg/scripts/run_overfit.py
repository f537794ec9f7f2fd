"""Overfit a small model on a synthetic two-speaker corpus through the CLI.

    python scripts/run_overfit.py [--out runs/overfit] [--steps 400] [--seed 0]

Writes the corpus, trains with configs/overfit.cfg, then prints the per-speaker
evaluation table and a self-conversion.
"""
from __future__ import annotations

import argparse
import io
import sys
import time
from pathlib import Path

from vqvc.cli import main as cli
from vqvc.synthetic import write_corpus

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "overfit.cfg"


def run(out: Path, steps: int = 400, seed: int = 0, echo=print) -> dict:
    """Train and evaluate; returns the parsed ``ALL`` row plus paths and timings."""
    out = Path(out).resolve()
    manifest = write_corpus(out / "corpus", sample_rate=8000, seconds=1.0)
    model_dir = out / "model"
    t0 = time.time()
    buf = io.StringIO()
    code = cli(["train", "--config", str(CONFIG), "--seed", str(seed), "--out-dir", str(model_dir), "--quiet",
                "--set", f"train.stages={manifest}:{steps}"], out=buf)
    if code:
        raise RuntimeError(f"training failed with exit code {code}")
    train_time = time.time() - t0
    train_out = buf.getvalue()
    echo(train_out.strip())
    buf = io.StringIO()
    code = cli(["eval", "--checkpoint", str(model_dir / "last.ckpt"), "--manifest", str(manifest)], out=buf)
    if code:
        raise RuntimeError(f"evaluation failed with exit code {code}")
    table = buf.getvalue()
    echo(table.strip())
    header, *rows = [ln.split("\t") for ln in table.strip().splitlines()]
    metrics = {r[0]: dict(zip(header[1:], map(float, r[1:]))) for r in rows}
    return {"all": metrics["ALL"], "rows": metrics, "train_seconds": train_time, "manifest": manifest,
            "checkpoint": model_dir / "last.ckpt", "train_output": train_out}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "runs" / "overfit"))
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    res = run(Path(a.out), a.steps, a.seed)
    print(f"trained in {res['train_seconds']:.0f} s")
    wav = res["manifest"].parent / "spkA_00.wav"
    sys.exit(cli(["convert", "--checkpoint", str(res["checkpoint"]), "--in", str(wav), "--speaker", "spkB",
                  "--out", str(Path(a.out) / "spkA_00_to_spkB.wav"), "--seed", str(a.seed)]))
