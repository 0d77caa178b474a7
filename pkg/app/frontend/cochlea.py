from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from app.autodiff import (
    ComplexPair,
    DiffTensor,
    broadcast_to,
    cmul,
    concat,
    constant,
    div,
    getitem,
    irfft,
    mul,
    parameter,
    power,
    relu,
    reshape,
    rfft,
)
from app.signal_io import CHANNELS_PER_OCTAVE, HOP, SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

N_CHANNELS = 129
BASE_HZ = 180.0
ROEX_ALPHA = 0.3
ROEX_BETA = 8.0
PEAK_OFFSET_OCT = ROEX_ALPHA / ROEX_BETA
ROEX_PEAK = PEAK_OFFSET_OCT**ROEX_ALPHA * np.exp(-ROEX_ALPHA)

ALPHA_INIT = 1.0
INHIBITION_INIT = (1.0, -1.0)
TAU_INIT_MS = 8.0
MIN_FILTER_SAMPLES = 256


class InputTooShortError(ValueError):
    pass


def center_frequencies() -> np.ndarray:
    return BASE_HZ * 2.0 ** (np.arange(N_CHANNELS) / CHANNELS_PER_OCTAVE)


def roex_response(x: np.ndarray, x_h) -> np.ndarray:
    """|H(x)| = (x_h - x)^0.3 exp(-8 (x_h - x)) on [.., x_h], 0 above x_h (log2-frequency axis)."""
    d = np.asarray(x_h, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    inside = d >= 0
    d = np.where(inside, d, 0.0)
    return np.where(inside, d**ROEX_ALPHA * np.exp(-ROEX_BETA * d), 0.0)


@dataclass(frozen=True)
class RoexFilterbank:
    centers_hz: np.ndarray
    upper_edges: np.ndarray
    signal_length: int
    response: np.ndarray

    @property
    def n_channels(self) -> int:
        return int(self.centers_hz.size)


@lru_cache(maxsize=8)
def build_filterbank(signal_length: int) -> RoexFilterbank:
    if signal_length < MIN_FILTER_SAMPLES:
        raise InputTooShortError(f"filterbank needs at least {MIN_FILTER_SAMPLES} samples, got {signal_length}")
    centers = center_frequencies()
    upper = np.log2(centers) + PEAK_OFFSET_OCT
    freqs = np.fft.rfftfreq(signal_length, d=1.0 / SAMPLE_RATE)
    log_f = np.full(freqs.shape, -np.inf)
    log_f[1:] = np.log2(freqs[1:])
    with np.errstate(invalid="ignore"):
        response = roex_response(log_f[None, :], upper[:, None]) / ROEX_PEAK
    response[:, 0] = 0.0
    response.setflags(write=False)
    logger.debug("filterbank for %d samples: %d channels x %d bins", signal_length, N_CHANNELS, freqs.size)
    return RoexFilterbank(centers_hz=centers, upper_edges=upper, signal_length=signal_length, response=response)


@dataclass
class CochlearParams:
    alpha: DiffTensor
    inhibition: DiffTensor
    tau: DiffTensor

    @classmethod
    def initial(cls) -> "CochlearParams":
        return cls(
            alpha=parameter(np.full(N_CHANNELS, ALPHA_INIT), name="cochlea.alpha"),
            inhibition=parameter(np.array(INHIBITION_INIT), name="cochlea.inhibition"),
            tau=parameter(np.array(TAU_INIT_MS), name="cochlea.tau"),
        )

    def tensors(self) -> dict[str, DiffTensor]:
        return {"cochlea.alpha": self.alpha, "cochlea.inhibition": self.inhibition, "cochlea.tau": self.tau}


def integrator_response(tau_ms, freqs_hz: np.ndarray) -> ComplexPair:
    """H(nu) = 1 / (1 + i 2 pi nu tau), tau in milliseconds."""
    tau = tau_ms if isinstance(tau_ms, DiffTensor) else constant(tau_ms)
    if np.any(tau.value <= 0):
        raise ValueError(f"time constant must be positive, got {tau.value}")
    a = mul(tau, constant(2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / 1000.0))
    denom = 1.0 + mul(a, a)
    return ComplexPair(div(1.0, denom), div(mul(a, -1.0), denom))


def n_frames(n_samples: int) -> int:
    return -(-n_samples // HOP)


def filter_length(n_samples: int) -> int:
    """FFT length used for an input of ``n_samples``: short inputs are zero-padded."""
    return max(n_samples, MIN_FILTER_SAMPLES)


def filterbank_for(n_samples: int) -> RoexFilterbank:
    return build_filterbank(filter_length(n_samples))


def cochlear_forward(x, fb: RoexFilterbank, p: CochlearParams) -> DiffTensor:
    """Waveform (or 1-D tensor) -> auditory spectrogram (129, ceil(N / 80)).

    Inputs shorter than the minimum filter length are zero-padded before
    filtering and truncated back to N before decimation.
    """
    samples = x if isinstance(x, DiffTensor) else constant(x.samples)
    n_in = samples.shape[0]
    if n_in < HOP:
        raise InputTooShortError(f"input has {n_in} samples, need at least {HOP}")
    if not np.all(np.isfinite(samples.value)):
        raise ValueError("input contains NaN or infinite samples")
    n = filter_length(n_in)
    if fb.signal_length != n:
        raise ValueError(f"filterbank built for {fb.signal_length} samples, input needs {n}")
    if n != n_in:
        samples = concat([samples, constant(np.zeros(n - n_in))])
    channels = fb.n_channels
    bins = fb.response.shape[1]

    spectrum = rfft(samples)
    gain = constant(fb.response)
    bands = irfft(
        ComplexPair(
            mul(broadcast_to(spectrum.re, (channels, bins)), gain),
            mul(broadcast_to(spectrum.im, (channels, bins)), gain),
        ),
        n,
    )

    # half-wave rectification before the power law
    rectified = relu(bands)
    exponents = broadcast_to(reshape(p.alpha, (channels, 1)), (channels, n))
    compressed = power(rectified, exponents)

    w0 = getitem(p.inhibition, 0)
    w1 = getitem(p.inhibition, 1)
    below = concat([constant(np.zeros((1, n))), getitem(compressed, slice(0, channels - 1))], axis=0)
    inhibited = relu(mul(compressed, w0) + mul(below, w1))

    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    lowpass = integrator_response(p.tau, freqs)
    lowpass = ComplexPair(broadcast_to(lowpass.re, (channels, bins)), broadcast_to(lowpass.im, (channels, bins)))
    integrated = irfft(cmul(rfft(inhibited), lowpass), n)

    decimated = getitem(integrated, (slice(None), slice(0, n_in, HOP)))
    # the FFT low-pass of a non-negative signal can dip below 0 by round-off
    return relu(decimated)


def auditory_spectrogram(w: Waveform, p: CochlearParams) -> DiffTensor:
    return cochlear_forward(w, filterbank_for(len(w)), p)
