"""Training loop: data preparation, loss/step, LR halving, staged schedules,
validation, metrics logging and checkpointing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import mulaw_encode, read_wav
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .decoder import receptive_field as decoder_rf
from .features import FeatureConfig, cmvn_apply, extract_features, fit_speaker_stats
from .model import VQVC, Utterance
from .nn.optim import AdamState, adam_step, clip_grad_norm, global_grad_norm
from .nn.tensor import no_grad
from .quantizer import codebook_perplexity, quantize

log = logging.getLogger(__name__)


class TrainingConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    manifest: str
    steps: int


@dataclass
class TrainConfig:
    stages: list = field(default_factory=list)
    batch_size: int = 8
    crop_samples: int | None = None  # None: 1.5 x decoder receptive field
    lr_start: float = 2.5e-4
    lr_floor: float = 1e-5
    halve_patience: int = 3
    jitter_p: float = 0.12
    beta: float = 0.25
    max_steps: int = 100000
    eval_every: int = 500
    checkpoint_every: int | None = None
    grad_clip: float = 0.0
    seed: int = 0
    val_max_per_speaker: int = 5
    val_fraction: float = 0.1
    out_dir: str = "runs/default"

    def validate(self, model_cfg: ModelConfig):
        if not self.stages:
            raise TrainingConfigError("no training stages configured")
        if not 0 < self.lr_floor <= self.lr_start:
            raise TrainingConfigError("need 0 < lr_floor <= lr_start")
        if not 0.0 <= self.jitter_p <= 1.0:
            raise TrainingConfigError("jitter_p must be in [0, 1]")
        if self.batch_size < 1 or self.eval_every < 1 or self.halve_patience < 1:
            raise TrainingConfigError("batch_size, eval_every and halve_patience must be >= 1")
        if self.crop_length(model_cfg) <= decoder_rf(model_cfg):
            raise TrainingConfigError("crop_samples must exceed the decoder receptive field")

    def crop_length(self, model_cfg: ModelConfig) -> int:
        if self.crop_samples is not None:
            return int(self.crop_samples)
        return int(math.ceil(1.5 * decoder_rf(model_cfg)))


# -- manifests ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    wav_path: str
    speaker: str


def read_manifest(path) -> list[ManifestEntry]:
    """One ``wav_path<TAB>speaker_id`` record per line; relative paths resolve
    against the manifest's directory. Blank lines and ``#`` comments are skipped."""
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TrainingConfigError(f"{path}:{n}: expected 'wav_path<TAB>speaker_id'")
        wav = Path(parts[0])
        if not wav.is_absolute():
            wav = path.parent / wav
        out.append(ManifestEntry(str(wav), parts[1].strip()))
    if not out:
        raise TrainingConfigError(f"{path}: manifest is empty")
    return out


def speaker_table(entries) -> list[str]:
    return sorted({e.speaker for e in entries})


def validation_split(entries, max_per_speaker: int = 5, fraction: float = 0.1):
    """Hold out the last min(max_per_speaker, floor(fraction * n)) utterances of each speaker."""
    by_spk: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        by_spk.setdefault(e.speaker, []).append(i)
    val = set()
    for idx in by_spk.values():
        k = min(max_per_speaker, int(math.floor(fraction * len(idx))))
        val.update(idx[len(idx) - k:] if k else [])
    train = [e for i, e in enumerate(entries) if i not in val]
    return train, [e for i, e in enumerate(entries) if i in val]


def _round_stats(stats):
    # checkpoints store float32; rounding up front keeps resumed runs identical
    for s in stats.values():
        s.mean = s.mean.astype(np.float32).astype(np.float64)
        s.std = s.std.astype(np.float32).astype(np.float64)
    return stats


def load_utterances(entries, speakers: list[str], fcfg: FeatureConfig, mu: int, cmvn=None):
    """Read, featurize and quantize manifest entries. Fits CMVN when `cmvn` is None."""
    raw = []
    for e in entries:
        if e.speaker not in speakers:
            raise TrainingConfigError(f"speaker {e.speaker!r} is not in the speaker table {speakers}")
        w = read_wav(e.wav_path)
        if w.sample_rate != fcfg.sample_rate:
            raise TrainingConfigError(f"{e.wav_path}: sample rate {w.sample_rate} != configured {fcfg.sample_rate}")
        raw.append((e, w, extract_features(w, e.speaker, fcfg)))
    if cmvn is None:
        cmvn = _round_stats(fit_speaker_stats([fm for _, _, fm in raw], fcfg))
    utts = []
    for e, w, fm in raw:
        norm = cmvn_apply(fm, cmvn[e.speaker])
        utts.append(Utterance(Path(e.wav_path).name, e.speaker, speakers.index(e.speaker),
                              norm.data.astype(np.float32), mulaw_encode(w.samples, mu)))
    return utts, cmvn


# -- learning rate ------------------------------------------------------------

@dataclass
class LRSchedule:
    """Halve after `patience` evaluations without improvement, never below `floor`."""
    lr: float
    floor: float
    patience: int = 3
    best: float = math.inf
    bad_evals: int = 0

    def observe(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals >= self.patience:
                self.lr = max(self.lr / 2.0, self.floor)
                self.bad_evals = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": None if math.isinf(self.best) else self.best, "bad_evals": self.bad_evals}

    def load(self, st: dict):
        self.lr = st["lr"]
        self.best = math.inf if st["best"] is None else st["best"]
        self.bad_evals = st["bad_evals"]


# -- steps --------------------------------------------------------------------

def sample_crops(model: VQVC, utts, batch_size: int, crop: int, frame_shift: int, rng):
    picks = rng.integers(0, len(utts), size=batch_size)
    length = min(crop, min(model.covered_samples(utts[i], frame_shift) for i in picks))
    crops = []
    for i in picks:
        cov = model.covered_samples(utts[i], frame_shift)
        start = int(rng.integers(0, cov - length + 1))
        crops.append(model.make_crop(utts[i], start, length, frame_shift))
    return crops


def train_step(crops, model: VQVC, opt: AdamState, cfg: TrainConfig, lr: float, frame_shift: int,
               rng, step: int = 0) -> dict:
    """Forward, backward and one Adam update. Returns the loss terms as floats."""
    model.zero_grad()
    lb = model.crop_losses(crops, frame_shift, beta=cfg.beta, jitter_p=cfg.jitter_p, rng=rng)
    out = {"reconstruction": lb.reconstruction.item(), "codebook": lb.codebook.item(),
           "commitment": lb.commitment.item(), "total": lb.total.item()}
    if not all(math.isfinite(v) for v in out.values()):
        raise TrainingDivergedError(f"non-finite loss at step {step} (lr={lr:g}): {out}")
    lb.total.backward()
    params = list(model.params.values())
    norm = clip_grad_norm(params, cfg.grad_clip) if cfg.grad_clip else global_grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingDivergedError(f"non-finite gradient norm at step {step} (lr={lr:g})")
    adam_step(params, opt, lr)
    out["grad_norm"] = norm
    return out


def evaluate(model: VQVC, utts, frame_shift: int) -> dict:
    """Teacher-forced loss (nats/sample), argmax accuracy and code perplexity on full utterances."""
    nll = correct = count = 0.0
    codes = []
    with no_grad():
        for u in utts:
            length = model.covered_samples(u, frame_shift)
            lb = model.crop_losses([model.make_crop(u, 0, length, frame_shift)], frame_shift)
            nll += lb.reconstruction.item() * length
            correct += float(np.sum(np.argmax(lb.logits.data[0], axis=0) == u.levels[:length]))
            count += length
            codes.append(lb.indices)
    return {"loss": nll / count, "accuracy": correct / count,
            "perplexity": codebook_perplexity(np.concatenate(codes))}


def encode_indices(model: VQVC, utt: Utterance) -> np.ndarray:
    with no_grad():
        return quantize(model.encoder(utt.features.T), model.codebook).indices


# -- driver -------------------------------------------------------------------

class MetricsLog:
    """Line-oriented ``step<TAB>split<TAB>metric<TAB>value`` file."""

    def __init__(self, path, truncate_after: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_after is not None and self.path.exists():
            keep = [ln for ln in self.path.read_text().splitlines() if int(ln.split("\t")[0]) <= truncate_after]
            self.path.write_text("".join(ln + "\n" for ln in keep))
        elif truncate_after is None:
            self.path.write_text("")

    def write(self, step: int, split: str, metrics: dict):
        with open(self.path, "a") as f:
            for k, v in metrics.items():
                f.write(f"{step}\t{split}\t{k}\t{v!r}\n")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list  # per-step loss dicts (this process only)
    lr_trace: list
    evals: list


def _stage_at(stages, step: int):
    acc = 0
    for i, s in enumerate(stages):
        acc += s.steps
        if step < acc:
            return i
    return None


def run_training(model_cfg: ModelConfig, feat_cfg: FeatureConfig, cfg: TrainConfig,
                 resume: str | Path | None = None, echo=None, stop_after: int | None = None) -> TrainResult:
    """Run every configured stage in order.

    The speaker table and CMVN statistics come from the first stage's manifest.
    `stop_after` ends the run early at that global step (after checkpointing).
    """
    stages = [s if isinstance(s, Stage) else Stage(*s) for s in cfg.stages]
    cfg.stages = stages
    out_dir = Path(cfg.out_dir)
    first = read_manifest(stages[0].manifest)
    if resume is not None:
        ck = load_checkpoint(resume)
        speakers, cmvn = ck.speakers, ck.cmvn
        model_cfg, feat_cfg = ck.model_config, ck.feature_config
        model = ck.build_model()
        opt = ck.adam
        step = ck.step
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.train_state["rng_state"]
        sched = LRSchedule(cfg.lr_start, cfg.lr_floor, cfg.halve_patience)
        sched.load(ck.train_state["schedule"])
        metrics = MetricsLog(out_dir / "metrics.tsv", truncate_after=step)
    else:
        speakers = speaker_table(first)
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "n_speakers": len(speakers)})
        cmvn = None
        model = VQVC(model_cfg, seed=cfg.seed)
        opt = AdamState()
        step = 0
        rng = np.random.default_rng(cfg.seed)
        sched = LRSchedule(cfg.lr_start, cfg.lr_floor, cfg.halve_patience)
        metrics = MetricsLog(out_dir / "metrics.tsv")
    if model_cfg.n_speakers != len(speakers):
        raise TrainingConfigError("speaker table size does not match the model's one-hot dimension")
    cfg.validate(model_cfg)

    train0, _ = validation_split(first, cfg.val_max_per_speaker, cfg.val_fraction)
    if cmvn is None:
        _, cmvn = load_utterances(train0, speakers, feat_cfg, model_cfg.mu)
    total_steps = min(cfg.max_steps, sum(s.steps for s in stages))
    crop = cfg.crop_length(model_cfg)
    shift = feat_cfg.frame_shift_samples
    ckpt_every = cfg.checkpoint_every or cfg.eval_every

    def snapshot() -> Checkpoint:
        return Checkpoint(model_cfg, feat_cfg, speakers, cmvn,
                          {k: p.data.copy() for k, p in model.params.items()},
                          AdamState(opt.beta1, opt.beta2, opt.eps, opt.t,
                                    {k: v.copy() for k, v in opt.m.items()},
                                    {k: v.copy() for k, v in opt.v.items()}),
                          step, {"rng_state": rng.bit_generator.state, "schedule": sched.state(),
                                 "lr_start": cfg.lr_start, "lr_floor": cfg.lr_floor})

    history, lr_trace, evals = [], [], []
    loaded_stage, train_utts, val_utts = None, None, None
    while step < total_steps:
        si = _stage_at(stages, step)
        if si != loaded_stage:
            entries = first if si == 0 else read_manifest(stages[si].manifest)
            tr, va = validation_split(entries, cfg.val_max_per_speaker, cfg.val_fraction)
            if {e.wav_path for e in tr} & {e.wav_path for e in va}:
                raise TrainingConfigError("validation utterances also appear in the training set")
            train_utts, _ = load_utterances(tr, speakers, feat_cfg, model_cfg.mu, cmvn)
            val_utts = load_utterances(va, speakers, feat_cfg, model_cfg.mu, cmvn)[0] if va else train_utts
            loaded_stage = si
            log.info("stage %d: %d train / %d validation utterances", si, len(tr), len(va))
        crops = sample_crops(model, train_utts, cfg.batch_size, crop, shift, rng)
        res = train_step(crops, model, opt, cfg, sched.lr, shift, rng, step)
        res["lr"] = sched.lr
        history.append(res)
        step += 1
        if echo:
            echo(f"step {step} total {res['total']:.4f} recon {res['reconstruction']:.4f} lr {sched.lr:.3g}")
        if step % cfg.eval_every == 0 or step == total_steps:
            ev = evaluate(model, val_utts, shift)
            evals.append((step, ev))
            sched.observe(ev["loss"])
            metrics.write(step, "train", {k: res[k] for k in ("total", "reconstruction", "codebook", "commitment")})
            metrics.write(step, "val", {"loss": ev["loss"], "accuracy": ev["accuracy"],
                                        "perplexity": ev["perplexity"], "lr": sched.lr})
        lr_trace.append(sched.lr)
        if step % ckpt_every == 0 or step == total_steps or step == stop_after:
            ck = snapshot()
            save_checkpoint(ck, out_dir / "last.ckpt")
            save_checkpoint(ck, out_dir / f"step_{step:07d}.ckpt")
        if stop_after is not None and step >= stop_after:
            break
    return TrainResult(snapshot(), history, lr_trace, evals)
