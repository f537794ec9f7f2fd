from types import SimpleNamespace

import numpy as np
import pytest

from vqvc.audio_io import Waveform
from vqvc.config import ModelConfig
from vqvc.decoder import Decoder, receptive_field
from vqvc.features import FeatureConfig
from vqvc.model import VQVC
from vqvc.synthesizer import (GenerationState, SamplerConfig, convert, draw_level, generate_fast,
                              generate_naive)
from vqvc.synthetic import harmonic_utterance


def sharp_decoder(cfg, seed=0, scale=3.0):
    d = Decoder(cfg, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 7)
    d.params["dec.head2.w"].data = (r.standard_normal(d.params["dec.head2.w"].shape) * scale).astype(np.float32)
    return d


CFG = ModelConfig(code_dim=4, n_speakers=2, residual_channels=8, skip_channels=8, head_channels=16,
                  n_layers=6, dilation_cycle=3)


def cond(cfg, t, seed=0):
    return np.random.default_rng(seed).standard_normal((cfg.cond_channels, t)).astype(np.float32)


def test_sampler_validation():
    with pytest.raises(ValueError):
        SamplerConfig(temperature=0)
    with pytest.raises(ValueError):
        SamplerConfig(mode="beam")


def test_draw_level_inverse_cdf():
    logits = np.log(np.array([0.2, 0.5, 0.3]))
    s = SamplerConfig()
    assert [draw_level(logits, u, s) for u in (0.0, 0.19, 0.21, 0.69, 0.71, 0.999)] == [0, 0, 1, 1, 2, 2]
    assert draw_level(logits, 0.0, SamplerConfig(mode="argmax")) == 1
    cold = SamplerConfig(temperature=1e-3)
    assert draw_level(logits, 0.05, cold) == 1


def test_categorical_matches_distribution():
    logits = np.log(np.array([0.1, 0.6, 0.3]))
    rng = np.random.default_rng(0)
    draws = np.array([draw_level(logits, rng.random(), SamplerConfig()) for _ in range(20000)])
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / 20000, [0.1, 0.6, 0.3], atol=0.015)


@pytest.mark.parametrize("mode", ["categorical", "argmax"])
def test_engines_agree(mode):
    d = sharp_decoder(CFG)
    for seed in range(6):
        length = [1, 2, 17, 60, 150, 300][seed]
        c = cond(CFG, length, seed)
        s = SamplerConfig(mode=mode, seed=seed)
        la, lb = [], []
        a = generate_naive(d, c, length, s, logits_out=la).levels
        b = generate_fast(d, c, length, s, logits_out=lb).levels
        np.testing.assert_array_equal(a, b)
        assert np.max(np.abs(np.array(la) - np.array(lb))) < 1e-4


def test_argmax_deterministic():
    d = sharp_decoder(CFG)
    c = cond(CFG, 80)
    s = SamplerConfig(mode="argmax")
    np.testing.assert_array_equal(generate_fast(d, c, 80, s).levels, generate_fast(d, c, 80, s).levels)
    np.testing.assert_array_equal(generate_naive(d, c, 80, s).levels, generate_naive(d, c, 80, s).levels)


def test_length_one_uses_start_token():
    d = sharp_decoder(CFG)
    c = cond(CFG, 1)
    logits = []
    generate_fast(d, c, 1, SamplerConfig(), logits_out=logits)
    ref = d.forward(np.array([d.start_token]), c).data[:, 0]
    np.testing.assert_allclose(logits[0], ref, atol=1e-5)


def test_chunked_generation_equals_one_shot():
    d = sharp_decoder(CFG)
    c = cond(CFG, 200)
    s = SamplerConfig(seed=4)
    whole = generate_fast(d, c, 200, s).levels
    st = GenerationState.start(d, c, s)
    first = generate_fast(d, c, 100, s, state=st).levels
    second = generate_fast(d, c, 100, s, state=st).levels
    np.testing.assert_array_equal(np.concatenate([first, second]), whole)
    with pytest.raises(ValueError):
        generate_fast(d, c, 1, s, state=st)


def test_naive_prefix_continues_history():
    d = sharp_decoder(CFG)
    c = cond(CFG, 120)
    s = SamplerConfig(mode="argmax")
    whole = generate_naive(d, c, 120, s).levels
    tail = generate_naive(d, c, 40, s, prefix=whole[:80]).levels
    np.testing.assert_array_equal(tail, whole[80:])


@pytest.mark.parametrize("n_steps", [1, 5, 33, 130])
def test_ring_buffers_match_activation_history(n_steps):
    d = sharp_decoder(CFG)
    c = cond(CFG, n_steps)
    st = GenerationState.start(d, c, SamplerConfig(seed=1))
    levels = generate_fast(d, c, n_steps, SamplerConfig(seed=1), state=st, debug=True).levels
    acts = []
    d.teacher_forced(levels, c, capture=acts)
    k = CFG.kernel_size
    for layer, (buf, dil) in enumerate(zip(st.buffers, CFG.dilations)):
        assert buf.shape[0] == dil * (k - 1) == 2 ** (layer % CFG.dilation_cycle)
        for tau in range(max(0, n_steps - buf.shape[0]), n_steps):
            np.testing.assert_allclose(buf[tau % buf.shape[0]], acts[layer][:, tau], atol=1e-5)


def test_teacher_forcing_self_consistency():
    d = sharp_decoder(CFG)
    c = cond(CFG, 150)
    for engine in (generate_naive, generate_fast):
        logits = []
        levels = engine(d, c, 150, SamplerConfig(seed=3), logits_out=logits).levels
        tf = d.teacher_forced(levels, c).data
        np.testing.assert_allclose(np.array(logits).T, tf, atol=1e-4)


def test_conditioning_too_short():
    d = sharp_decoder(CFG)
    with pytest.raises(ValueError):
        generate_fast(d, cond(CFG, 10), 11, SamplerConfig())
    with pytest.raises(ValueError):
        generate_naive(d, cond(CFG, 10), 11, SamplerConfig())


def conversion_setup():
    cfg = ModelConfig.small(n_speakers=2, n_layers=4, dilation_cycle=4)
    model = VQVC(cfg, seed=0)
    model.params["dec.head2.w"].data = np.random.default_rng(1).standard_normal(
        model.params["dec.head2.w"].shape).astype(np.float32)
    assets = SimpleNamespace(feature_config=FeatureConfig(sample_rate=8000), cmvn={}, speakers=["a", "b"])
    return model, assets


def test_convert_shares_codes_across_targets():
    model, assets = conversion_setup()
    src = harmonic_utterance(50, [0, 1, 2], 800)
    wav = Waveform(src, 8000)
    ra = convert(model, assets, wav, "a", SamplerConfig(mode="argmax"))
    rb = convert(model, assets, wav, "b", SamplerConfig(mode="argmax"))
    np.testing.assert_array_equal(ra.indices, rb.indices)
    assert not np.array_equal(ra.levels, rb.levels)


@pytest.mark.parametrize("n", [2400, 2401, 2479, 2555])
def test_convert_duration(n):
    model, assets = conversion_setup()
    wav = Waveform(np.random.default_rng(n).uniform(-0.5, 0.5, n).astype(np.float32), 8000)
    out = convert(model, assets, wav, "b", SamplerConfig(seed=2)).waveform
    assert abs(len(out) - n) <= assets.feature_config.frame_shift_samples
    assert out.sample_rate == 8000


def test_convert_errors():
    model, assets = conversion_setup()
    wav = Waveform(np.zeros(800, np.float32), 8000)
    with pytest.raises(KeyError, match="a, b"):
        convert(model, assets, wav, "zed")
    with pytest.raises(ValueError):
        convert(model, assets, Waveform(np.zeros(800, np.float32), 16000), "a")


def test_receptive_field_of_test_config():
    assert receptive_field(CFG) == 1 + 2 * (1 + 2 + 4)
