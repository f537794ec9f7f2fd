import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqvc.audio_io import (AudioFormatError, UnsupportedChannelsError, Waveform, mulaw_decode,
                           mulaw_encode, mulaw_expand, read_wav, write_wav)


def _wav_bytes(bits, fmt, payload, channels=1, sr=8000):
    block = bits // 8 * channels
    fmt_chunk = struct.pack("<IHHIIHH", 16, fmt, channels, sr, sr * block, block, bits)
    body = b"WAVE" + b"fmt " + fmt_chunk + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_read_16bit_scaling(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(_wav_bytes(16, 1, np.array([0, 16384, -32768], "<i2").tobytes()))
    w = read_wav(p)
    assert w.sample_rate == 8000
    np.testing.assert_array_equal(w.samples, [0.0, 0.5, -1.0])


def test_read_8_24_and_float(tmp_path):
    p = tmp_path / "u8.wav"
    p.write_bytes(_wav_bytes(8, 1, bytes([128, 192, 0])))
    np.testing.assert_array_equal(read_wav(p).samples, [0.0, 0.5, -1.0])
    p = tmp_path / "i24.wav"
    p.write_bytes(_wav_bytes(24, 1, b"".join(v.to_bytes(3, "little", signed=True) for v in (0, 2 ** 22, -2 ** 23))))
    np.testing.assert_array_equal(read_wav(p).samples, [0.0, 0.5, -1.0])
    p = tmp_path / "f32.wav"
    p.write_bytes(_wav_bytes(32, 3, np.array([0.25, -1.0], "<f4").tobytes()))
    np.testing.assert_array_equal(read_wav(p).samples, [0.25, -1.0])


def test_stereo_rejected(tmp_path):
    p = tmp_path / "st.wav"
    p.write_bytes(_wav_bytes(16, 1, np.zeros(8, "<i2").tobytes(), channels=2))
    with pytest.raises(UnsupportedChannelsError):
        read_wav(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFF\x04\x00\x00\x00junkjunk")
    with pytest.raises(AudioFormatError):
        read_wav(p)


def test_write_extremes_saturate(tmp_path):
    p = tmp_path / "x.wav"
    write_wav(Waveform(np.array([1.0, -1.0, 0.0, 0.99999]), 16000), p)
    pcm = np.frombuffer(p.read_bytes()[44:], "<i2")
    np.testing.assert_array_equal(pcm, [32767, -32768, 0, 32767])


def test_write_read_round_trip(tmp_path, rng):
    p = tmp_path / "r.wav"
    write_wav(Waveform(np.array([0.25, -0.25]), 16000), p)
    np.testing.assert_allclose(read_wav(p).samples, [0.25, -0.25], atol=1 / 32767)
    # a signal already on the 16-bit grid survives exactly
    ints = rng.integers(-32768, 32768, size=1000)
    write_wav(Waveform(ints / 32768.0, 22050), p)
    back = read_wav(p)
    assert back.sample_rate == 22050
    np.testing.assert_array_equal(np.round(back.samples * 32768), ints)
    x = rng.uniform(-1, 1, 5000)
    write_wav(Waveform(x, 8000), p)
    assert np.max(np.abs(read_wav(p).samples - x)) <= 1 / 32767


def test_write_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_wav(Waveform(np.zeros(4), 8000), blocker / "sub" / "a.wav")


def test_mulaw_examples():
    assert mulaw_encode(0.0) == 64
    assert mulaw_encode(1.0) == 127
    assert mulaw_encode(-1.0) == 0
    assert 0.0 < mulaw_decode(64) < 0.01
    assert -1.0 <= mulaw_decode(0) <= -0.95
    with pytest.raises(ValueError):
        mulaw_encode(1.5)
    with pytest.raises(ValueError):
        mulaw_decode(128)


def test_mulaw_fixed_points():
    k = np.arange(128)
    np.testing.assert_array_equal(mulaw_encode(mulaw_decode(k)), k)


def test_mulaw_error_bounded_by_bin(rng):
    mu = 127
    # bin edges in the sample domain from the inverse transform
    edges = mulaw_expand(np.linspace(-1, 1, mu + 2), mu)
    centers = mulaw_decode(np.arange(mu + 1), mu)
    reach = np.maximum(centers - edges[:-1], edges[1:] - centers)
    x = rng.uniform(-1, 1, 10 ** 4)
    k = mulaw_encode(x, mu)
    err = np.abs(mulaw_decode(k, mu) - x)
    assert np.all(err <= reach[k] + 1e-12)
    assert np.all((edges[k] - 1e-12 <= x) & (x <= edges[k + 1] + 1e-12))
    # the companded-domain centre sits off-centre in the sample domain, so the
    # bound is a little over half the widest bin but always below its full width
    assert err.max() < np.max(np.diff(edges))


@settings(max_examples=200)
@given(st.floats(-1, 1), st.floats(-1, 1), st.sampled_from([127, 255, 15]))
def test_mulaw_monotone(a, b, mu):
    lo, hi = min(a, b), max(a, b)
    assert mulaw_encode(lo, mu) <= mulaw_encode(hi, mu)


@given(st.integers(0, 127))
def test_decode_strictly_inside(k):
    assert -1.0 < mulaw_decode(k) < 1.0
