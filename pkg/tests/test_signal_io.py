from __future__ import annotations

import struct

import numpy as np
import pytest
from scipy import signal
from scipy.io import wavfile

from app.autodiff import constant
from app.signal_io import (
    SAMPLE_RATE,
    Waveform,
    WavFormatError,
    gen_harmonic_complex,
    gen_moving_ripple,
    gen_pink_noise,
    istft,
    mix_at_snr,
    read_wav,
    stft,
    write_wav,
)


def test_pcm16_round_trip(tmp_path, tone):
    path = tmp_path / "tone.wav"
    write_wav(path, tone)
    loaded = read_wav(path)
    assert len(loaded) == len(tone)
    np.testing.assert_allclose(loaded.samples, tone.samples, atol=1.0 / 32768.0)


def test_float32_stereo_is_averaged(tmp_path):
    frames = np.array([[0.5, -0.5], [0.25, 0.75], [1.0, 0.0]], dtype="<f4")
    path = tmp_path / "stereo.wav"
    wavfile.write(path, SAMPLE_RATE, frames)
    np.testing.assert_allclose(read_wav(path).samples, [0.0, 0.5, 0.5])


def test_unknown_chunks_are_skipped(tmp_path):
    path = tmp_path / "chunks.wav"
    wavfile.write(path, SAMPLE_RATE, np.array([100, -100], dtype=np.int16))
    raw = path.read_bytes()
    # splice a LIST chunk with odd size (padded) before fmt
    extra = b"LIST" + struct.pack("<I", 3) + b"abc\x00"
    raw = raw[:12] + extra + raw[12:]
    raw = raw[:4] + struct.pack("<I", len(raw) - 8) + raw[8:]
    path.write_bytes(raw)
    np.testing.assert_allclose(read_wav(path).samples, [100 / 32768.0, -100 / 32768.0])


def test_malformed_files_report_errors(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(WavFormatError) as info:
        read_wav(path)
    assert info.value.offset == 0

    wavfile.write(path, SAMPLE_RATE, np.array([0, 1, 2, 3], dtype=np.uint8))
    with pytest.raises(WavFormatError, match="unsupported"):
        read_wav(path)

    wavfile.write(path, 44100, np.zeros(2, dtype=np.int16))
    with pytest.raises(ValueError, match="44100"):
        read_wav(path)


def test_pcm16_scaling_and_clamping(tmp_path):
    path = tmp_path / "full_scale.wav"
    wavfile.write(path, SAMPLE_RATE, np.array([32767, -32768, 0], dtype=np.int16))
    np.testing.assert_array_equal(read_wav(path).samples, [32767 / 32768.0, -1.0, 0.0])

    write_wav(path, Waveform(np.array([2.0, -2.0, 0.5])))
    rate, codes = wavfile.read(path)
    assert rate == SAMPLE_RATE
    assert codes.dtype == np.int16
    np.testing.assert_array_equal(codes, [32767, -32768, 16384])


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_wav(tmp_path / "x.wav", Waveform(np.array([0.0, np.inf])))


def test_pink_noise_is_seeded_and_normalized():
    a = gen_pink_noise(0.5, seed=7)
    b = gen_pink_noise(0.5, seed=7)
    c = gen_pink_noise(0.5, seed=8)
    assert len(a) == 8000
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert np.sqrt(np.mean(a.samples**2)) == pytest.approx(0.1)
    assert abs(np.mean(a.samples)) < 1e-12


def test_pink_noise_has_equal_power_per_octave():
    w = gen_pink_noise(4.0, seed=0)
    freqs, psd = signal.welch(w.samples, fs=SAMPLE_RATE, nperseg=4096)
    edges = 125.0 * 2.0 ** np.arange(6)
    bands = np.array([np.sum(psd[(freqs >= lo) & (freqs < 2 * lo)]) for lo in edges[:-1]])
    spread_db = 10.0 * np.log10(bands / bands.mean())
    assert np.max(np.abs(spread_db)) < 1.0


def test_harmonic_complex_limits():
    w = gen_harmonic_complex(200.0, 10, 0.25)
    assert len(w) == 4000
    assert np.sqrt(np.mean(w.samples**2)) == pytest.approx(0.1)
    with pytest.raises(ValueError, match="Nyquist"):
        gen_harmonic_complex(1000.0, 8, 0.25)
    with pytest.raises(ValueError):
        gen_harmonic_complex(200.0, 3, 0.25, amplitude_envelope=[1.0, 0.5])


def test_moving_ripple_grid():
    ripple = gen_moving_ripple(1.0, 4.0, 1.0)
    assert ripple.shape == (129, 200)
    assert ripple[0, 0] == pytest.approx(1.9)
    # one cycle per octave repeats every 24 channels
    np.testing.assert_allclose(ripple[24], ripple[0], atol=1e-12)
    # 4 Hz repeats every 50 frames
    np.testing.assert_allclose(ripple[:, 50], ripple[:, 0], atol=1e-12)
    with pytest.raises(ValueError):
        gen_moving_ripple(1.0, 100.0, 1.0)
    with pytest.raises(ValueError):
        gen_moving_ripple(12.0, 4.0, 1.0)


@pytest.mark.parametrize("snr_db", [-3.0, 0.0, 3.0])
def test_mix_hits_requested_snr(snr_db):
    speech = gen_harmonic_complex(150.0, 10, 0.5)
    noise = gen_pink_noise(0.5, seed=1)
    mix = mix_at_snr(speech, noise, snr_db)
    residual = mix.samples - speech.samples
    measured = 10.0 * np.log10(np.mean(speech.samples**2) / np.mean(residual**2))
    assert measured == pytest.approx(snr_db, abs=1e-9)


def test_mix_rejects_mismatch_and_silence():
    speech = gen_harmonic_complex(150.0, 10, 0.5)
    with pytest.raises(ValueError):
        mix_at_snr(speech, gen_pink_noise(0.25, seed=1), 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(speech, Waveform(np.zeros(len(speech))), 0.0)


def test_stft_geometry_and_inverse(rng):
    x = rng.standard_normal(1000)
    spec = stft(Waveform(x))
    assert spec.re.shape == (13, 129)
    assert spec.n_frames == 13
    np.testing.assert_allclose(istft(spec).value, x, atol=1e-10)
    same = stft(constant(x))
    np.testing.assert_array_equal(same.re.value, spec.re.value)


@pytest.mark.parametrize("window, hop", [(512, 128), (1024, 256), (256, 64)])
def test_stft_inverse_other_geometries(window, hop, rng):
    x = rng.standard_normal(3000)
    np.testing.assert_allclose(istft(stft(constant(x), window, hop)).value, x, atol=1e-10)


def test_stft_rejects_bad_geometry(rng):
    x = constant(rng.standard_normal(1000))
    with pytest.raises(ValueError):
        stft(x, 255, 80)
    with pytest.raises(ValueError):
        stft(x, 256, 300)
    with pytest.raises(ValueError):
        stft(constant(np.ones(100)), 256, 80)
