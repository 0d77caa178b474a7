from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from app.autodiff import (
    ComplexPair,
    DiffTensor,
    concat,
    constant,
    div,
    frame,
    getitem,
    irfft,
    mul,
    overlap_add,
    rfft,
)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME_RATE = 200
HOP = SAMPLE_RATE // FRAME_RATE
STIMULUS_RMS = 0.1
CHANNELS_PER_OCTAVE = 24

PCM16_SCALE = 32768.0


class WavFormatError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate {self.sample_rate}, expected {SAMPLE_RATE}")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    re: DiffTensor
    im: DiffTensor
    window_length: int
    hop: int
    length: int

    def __post_init__(self) -> None:
        if self.re.shape != self.im.shape:
            raise ValueError(f"real/imag shapes differ: {self.re.shape} vs {self.im.shape}")
        if self.re.shape[-1] != self.window_length // 2 + 1:
            raise ValueError(f"expected {self.window_length // 2 + 1} bins, got {self.re.shape[-1]}")

    @property
    def n_frames(self) -> int:
        return self.re.shape[0]


def to_rms(samples: np.ndarray, target: float = STIMULUS_RMS) -> np.ndarray:
    rms = float(np.sqrt(np.mean(samples**2)))
    if rms == 0.0:
        return samples
    return samples * (target / rms)


# --- WAV ----------------------------------------------------------------


class _TrackedBuffer(io.BytesIO):
    """Remembers where the last read began, the start of the field a parse error refers to."""

    last_read = 0

    def read(self, size: Optional[int] = -1) -> bytes:
        self.last_read = self.tell()
        return super().read(size)


def read_wav(path) -> Waveform:
    """PCM16 or float32 RIFF/WAVE at 16 kHz -> mono waveform in [-1, 1]."""
    buffer = _TrackedBuffer(Path(path).read_bytes())
    try:
        rate, data = wavfile.read(buffer)
    except ValueError as exc:
        raise WavFormatError(str(exc), offset=buffer.last_read) from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"unsupported encoding: {data.dtype} samples (PCM16 or float32 only)")
    if rate != SAMPLE_RATE:
        raise ValueError(f"sample rate {rate}, expected {SAMPLE_RATE}")
    if samples.size == 0:
        raise WavFormatError("data chunk holds no samples")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples)


def write_wav(path, waveform: Waveform) -> None:
    samples = waveform.samples
    if not np.all(np.isfinite(samples)):
        raise ValueError("waveform contains non-finite samples")
    codes = np.clip(np.round(PCM16_SCALE * samples), -32768, 32767).astype(np.int16)
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(file_path, SAMPLE_RATE, codes)


# --- generators -----------------------------------------------------------


def _n_samples(duration_s: float) -> int:
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    return max(int(round(duration_s * SAMPLE_RATE)), 1)


def gen_pink_noise(duration_s: float, seed: int) -> Waveform:
    n = _n_samples(duration_s)
    white = np.random.default_rng(seed).standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    spectrum[0] = 0.0
    spectrum[1:] /= np.sqrt(freqs[1:])
    return Waveform(to_rms(np.fft.irfft(spectrum, n=n)))


def gen_harmonic_complex(
    f0: float,
    n_harmonics: int,
    duration_s: float,
    amplitude_envelope: Optional[Sequence[float]] = None,
) -> Waveform:
    if n_harmonics < 1:
        raise ValueError("n_harmonics must be at least 1")
    top = f0 * n_harmonics
    if f0 <= 0 or top >= SAMPLE_RATE / 2:
        raise ValueError(f"harmonic {top:g} Hz at or above Nyquist ({SAMPLE_RATE // 2} Hz)")
    weights = np.ones(n_harmonics) if amplitude_envelope is None else np.asarray(amplitude_envelope, dtype=float)
    if weights.shape != (n_harmonics,):
        raise ValueError(f"amplitude envelope needs {n_harmonics} weights, got {weights.size}")
    t = np.arange(_n_samples(duration_s)) / SAMPLE_RATE
    k = np.arange(1, n_harmonics + 1)
    samples = (weights[:, None] * np.sin(2.0 * np.pi * f0 * k[:, None] * t[None, :])).sum(axis=0)
    return Waveform(to_rms(samples))


def gen_moving_ripple(
    scale: float,
    rate: float,
    duration_s: float,
    n_channels: int = 129,
    amplitude: float = 0.9,
) -> np.ndarray:
    """S[k, n] = 1 + amplitude * cos(2 pi (rate n / 200 + scale k / 24)), shape (channels, frames)."""
    if abs(rate) >= FRAME_RATE / 2 or not 0 <= scale < CHANNELS_PER_OCTAVE / 2:
        raise ValueError(f"ripple ({scale}, {rate}) outside |rate| < 100 Hz, 0 <= scale < 12 cyc/oct")
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    n_frames = int(np.ceil(duration_s * FRAME_RATE))
    k = np.arange(n_channels)[:, None]
    n = np.arange(n_frames)[None, :]
    return 1.0 + amplitude * np.cos(2.0 * np.pi * (rate * n / FRAME_RATE + scale * k / CHANNELS_PER_OCTAVE))


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    if len(speech) != len(noise):
        raise ValueError(f"length mismatch: speech {len(speech)} vs noise {len(noise)}")
    p_speech = float(np.mean(speech.samples**2))
    p_noise = float(np.mean(noise.samples**2))
    if p_speech == 0.0 or p_noise == 0.0:
        raise ValueError("cannot mix a zero-power signal")
    gain = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(speech.samples + gain * noise.samples)


# --- STFT -----------------------------------------------------------------


def _check_stft_geometry(window_length: int, hop: int) -> np.ndarray:
    if hop <= 0:
        raise ValueError(f"hop must be positive, got {hop}")
    if window_length <= 0 or window_length % 2:
        raise ValueError(f"window length must be even, got {window_length}")
    if hop > window_length:
        raise ValueError(f"hop {hop} exceeds window length {window_length}")
    window = signal.get_window("hann", window_length)
    if not signal.check_NOLA(window, window_length, window_length - hop):
        raise ValueError(f"Hann window {window_length} with hop {hop} cannot be inverted by overlap-add")
    return window


def n_stft_frames(length: int, hop: int) -> int:
    return -(-length // hop)


def stft(x, window_length: int = 256, hop: int = HOP) -> ComplexSpectrogram:
    """Hann-windowed STFT, reflect-padded by window/2 so frame m is centred on sample m*hop.

    Accepts a ``Waveform`` or a 1-D ``DiffTensor``; frames = ceil(len / hop).
    """
    window = _check_stft_geometry(window_length, hop)
    signal_in = x if isinstance(x, DiffTensor) else constant(x.samples)
    length = signal_in.shape[0]
    half = window_length // 2
    if length <= half:
        raise ValueError(f"signal of {length} samples is too short for reflect padding by {half}")
    left = getitem(signal_in, slice(half, 0, -1))
    right = getitem(signal_in, np.arange(length - 2, length - half - 2, -1))
    padded = concat([left, signal_in, right])
    n_frames = n_stft_frames(length, hop)
    frames = frame(padded, window_length, hop, n_frames)
    windowed = mul(frames, constant(np.broadcast_to(window, (n_frames, window_length))))
    spectrum = rfft(windowed)
    return ComplexSpectrogram(spectrum.re, spectrum.im, window_length, hop, length)


def istft(spec: ComplexSpectrogram) -> DiffTensor:
    window = _check_stft_geometry(spec.window_length, spec.hop)
    n_frames = spec.n_frames
    half = spec.window_length // 2
    padded_length = (n_frames - 1) * spec.hop + spec.window_length
    frames = irfft(ComplexPair(spec.re, spec.im), spec.window_length)
    windowed = mul(frames, constant(np.broadcast_to(window, (n_frames, spec.window_length))))
    summed = overlap_add(windowed, spec.hop, padded_length)

    envelope = np.zeros(padded_length)
    for m in range(n_frames):
        envelope[m * spec.hop : m * spec.hop + spec.window_length] += window**2
    stop = half + spec.length
    if stop > padded_length:
        raise ValueError("spectrogram has too few frames for its recorded length")
    region = envelope[half:stop]
    if np.any(region < 1e-10):
        raise ValueError(f"window {spec.window_length} / hop {spec.hop} leaves samples without overlap")
    return div(getitem(summed, slice(half, stop)), constant(region))
