"""Autoregressive sampling: a windowed reference engine, a cached fast engine,
and the voice-conversion pipeline built on them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec_mod
from .audio_io import QuantizedWaveform, Waveform, mulaw_decode
from .decoder import ConditioningPlan, Decoder
from .features import cmvn_apply, extract_features, utterance_stats
from .nn.functional import log_softmax
from .nn.tensor import Tensor, no_grad
from .quantizer import quantize


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "categorical"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("categorical", "argmax"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def draw_level(logits: np.ndarray, u: float, sampler: SamplerConfig) -> int:
    """Pick a level from one logit vector using the uniform variate `u`.

    Inverse-CDF sampling keeps randomness consumption identical across engines:
    exactly one variate per step, in both modes.
    """
    if sampler.mode == "argmax":
        return int(np.argmax(logits))
    logp = log_softmax(np.asarray(logits, dtype=np.float64)[:, None] / sampler.temperature, axis=0)[:, 0]
    cdf = np.cumsum(np.exp(logp))
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1))


def _cond_array(cond) -> np.ndarray:
    return cond.local_features if isinstance(cond, ConditioningPlan) else np.asarray(cond)


def generate_naive(decoder: Decoder, cond, length: int, sampler: SamplerConfig,
                   logits_out: list | None = None, prefix=None) -> QuantizedWaveform:
    """Reference engine: a full teacher-forced pass over the last receptive-field
    window of the generated prefix for every new sample.

    `prefix` supplies already-known levels; generation continues after them and
    the sampler's randomness starts at the first new sample.
    """
    known = np.zeros(0, dtype=np.int64) if prefix is None else np.asarray(prefix, dtype=np.int64)
    p0 = len(known)
    c = _cond_array(cond)
    if c.shape[-1] < p0 + length:
        raise ValueError(f"conditioning covers {c.shape[-1]} samples, {p0 + length} requested")
    c = c.astype(decoder.params["dec.embed"].dtype)
    rf = dec_mod.receptive_field(decoder.cfg)
    rng = np.random.default_rng(sampler.seed)
    tokens = np.empty(p0 + length + 1, dtype=np.int64)
    tokens[0] = decoder.start_token
    tokens[1:p0 + 1] = known
    with no_grad():
        for t in range(p0, p0 + length):
            lo = max(0, t - rf + 1)
            logits = decoder.forward(tokens[lo:t + 1], Tensor(c[:, lo:t + 1])).data[:, -1]
            if logits_out is not None:
                logits_out.append(logits.copy())
            tokens[t + 1] = draw_level(logits, rng.random(), sampler)
    return QuantizedWaveform(tokens[p0 + 1:], decoder.cfg.mu)


@dataclass
class _LayerWeights:
    dilation: int
    taps: np.ndarray  # (2R, K*R): filter|gate rows, tap-major columns
    bias: np.ndarray  # (2R,)
    cond: np.ndarray  # (2R, C)
    out: np.ndarray  # (R+S, R): residual|skip rows
    out_bias: np.ndarray


def _layer_weights(decoder: Decoder) -> list[_LayerWeights]:
    p = {k: v.data for k, v in decoder.params.items()}
    out = []
    for i, d in enumerate(decoder.cfg.dilations):
        pre = f"dec.layer{i}."
        fg = np.concatenate([p[pre + "filter.w"], p[pre + "gate.w"]], axis=0)  # (2R, R, K)
        taps = np.concatenate([fg[:, :, j] for j in range(fg.shape[2])], axis=1)
        out.append(_LayerWeights(
            dilation=d,
            taps=np.ascontiguousarray(taps),
            bias=np.concatenate([p[pre + "filter.b"], p[pre + "gate.b"]]),
            cond=np.concatenate([p[pre + "cond_filter.w"], p[pre + "cond_gate.w"]], axis=0),
            out=np.concatenate([p[pre + "res.w"], p[pre + "skip.w"]], axis=0),
            out_bias=np.concatenate([p[pre + "res.b"], p[pre + "skip.b"]]),
        ))
    return out


@dataclass
class GenerationState:
    """Per-layer ring buffers of past layer inputs plus the sampler's position.

    Layer k keeps the last dilation_k * (K - 1) inputs; the slot for time t is
    t mod capacity, so reading before writing yields the input from t - d*(K-1).
    """
    buffers: list
    step: int
    prev: int
    rng: np.random.Generator
    sampler: SamplerConfig
    cond: np.ndarray
    cond_proj: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    @classmethod
    def start(cls, decoder: Decoder, cond, sampler: SamplerConfig) -> "GenerationState":
        dtype = decoder.params["dec.embed"].dtype
        c = _cond_array(cond).astype(dtype)
        weights = _layer_weights(decoder)
        k = decoder.cfg.kernel_size
        r = decoder.cfg.residual_channels
        buffers = [np.zeros((lw.dilation * (k - 1), r), dtype=dtype) for lw in weights]
        # conditioning enters through 1x1 maps, so its contribution is precomputed
        cond_proj = [np.ascontiguousarray((lw.cond @ c).T) for lw in weights]
        return cls(buffers, 0, decoder.start_token, np.random.default_rng(sampler.seed), sampler, c,
                   cond_proj, weights)


def generate_fast(decoder: Decoder, cond, length: int, sampler: SamplerConfig,
                  state: GenerationState | None = None, logits_out: list | None = None,
                  debug: bool = False) -> QuantizedWaveform:
    """Cached engine: O(layers) work per sample. Pass the same `state` to continue
    a previous call; `cond` is then ignored in favour of the state's."""
    if state is None:
        state = GenerationState.start(decoder, cond, sampler)
    if state.cond.shape[-1] < state.step + length:
        raise ValueError("conditioning shorter than the requested generation")
    p = decoder.params
    embed = p["dec.embed"].data
    h1w, h1b = p["dec.head1.w"].data, p["dec.head1.b"].data
    h2w, h2b = p["dec.head2.w"].data, p["dec.head2.b"].data
    k = decoder.cfg.kernel_size
    r_ch = decoder.cfg.residual_channels
    out = np.empty(length, dtype=np.int64)
    for n in range(length):
        t = state.step
        r = embed[state.prev]
        skip = 0.0
        for lw, buf, cp in zip(state.weights, state.buffers, state.cond_proj):
            cap = buf.shape[0]
            d = lw.dilation
            # taps at t - d*(K-1), ..., t - d, t
            past = [buf[(t - d * (k - 1 - j)) % cap] for j in range(k - 1)]
            if debug and cap != d * (k - 1):
                raise AssertionError(f"ring buffer capacity {cap} != dilation {d} x (K-1)")
            ag = lw.taps @ np.concatenate(past + [r]) + lw.bias + cp[t]
            z = np.tanh(ag[:r_ch]) * (0.5 + 0.5 * np.tanh(0.5 * ag[r_ch:]))
            rs = lw.out @ z + lw.out_bias
            buf[t % cap] = r
            skip = skip + rs[r_ch:]
            r = r + rs[:r_ch]
        hid = np.maximum(h1w @ np.maximum(skip, 0) + h1b, 0)
        logits = h2w @ hid + h2b
        if logits_out is not None:
            logits_out.append(logits.copy())
        level = draw_level(logits, state.rng.random(), state.sampler)
        out[n] = level
        state.prev = level
        state.step += 1
    return QuantizedWaveform(out, decoder.cfg.mu)


@dataclass
class ConversionResult:
    waveform: Waveform
    indices: np.ndarray
    levels: np.ndarray


def source_codes(model, assets, source: Waveform, source_speaker: str | None = None):
    """Normalized features -> latents -> code indices (never jittered)."""
    fcfg = assets.feature_config
    if source.sample_rate != fcfg.sample_rate:
        raise ValueError(f"source sample rate {source.sample_rate} != model rate {fcfg.sample_rate}")
    spk = source_speaker if source_speaker in assets.cmvn else "__utterance__"
    raw = extract_features(source, spk, fcfg)
    stats = assets.cmvn[spk] if spk in assets.cmvn else utterance_stats(raw)
    feats = cmvn_apply(raw, stats)
    with no_grad():
        latents = model.encoder(feats.data.T.astype(np.float32))
    q = quantize(latents, model.codebook)
    return q, raw.n_frames


def convert(model, assets, source: Waveform, target_speaker: str, sampler: SamplerConfig = SamplerConfig(),
            source_speaker: str | None = None) -> ConversionResult:
    """Re-synthesize `source` in the voice of `target_speaker`.

    `assets` needs `feature_config`, `cmvn` (speaker -> stats) and `speakers`
    (ordered speaker table). Unseen source speakers are normalized with the
    utterance's own statistics.
    """
    if target_speaker not in assets.speakers:
        raise KeyError(f"unknown target speaker {target_speaker!r}; known: {', '.join(assets.speakers)}")
    q, _ = source_codes(model, assets, source, source_speaker)
    factor = model.upsample_factor(assets.feature_config.frame_shift_samples)
    length = min(len(source), q.indices.shape[-1] * factor)
    onehot = dec_mod.speaker_onehot(assets.speakers.index(target_speaker), len(assets.speakers))
    with no_grad():
        cond = model.decoder.condition(q.quantized, onehot, length, factor).data
    levels = generate_fast(model.decoder, cond, length, sampler).levels
    wav = Waveform(mulaw_decode(levels, model.cfg.mu), source.sample_rate)
    return ConversionResult(wav, q.indices, levels)
