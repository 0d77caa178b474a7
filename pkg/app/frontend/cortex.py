from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.autodiff import (
    DiffTensor,
    concat,
    constant,
    conv2d,
    cos,
    div,
    exp,
    getitem,
    mul,
    parameter,
    power,
    reshape,
    sub,
    tmean,
    tsum,
)
from app.frontend.cochlea import InputTooShortError
from app.optim import RATE_RANGE, SCALE_RANGE
from app.signal_io import CHANNELS_PER_OCTAVE, FRAME_RATE

logger = logging.getLogger(__name__)

N_FILTERS = 40
LOG_SCALES = (0.5, 1.0, 2.0, 4.0)
LOG_RATES = (1.0, 2.0, 4.0, 8.0, 16.0)
RANDOM_MAX = 9.0
INIT_MODES = ("log", "random")


class CorticalRangeError(ValueError):
    pass


@dataclass
class CorticalParams:
    scale: DiffTensor
    rate: DiffTensor
    init_mode: str = "log"

    def tensors(self) -> dict[str, DiffTensor]:
        return {"cortex.scale": self.scale, "cortex.rate": self.rate}

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.scale.value.tolist(), self.rate.value.tolist()))


def init_cortical(mode: str = "log", seed: int = 0) -> CorticalParams:
    if mode == "log":
        grid = [(s, sign * r) for sign in (1.0, -1.0) for s in LOG_SCALES for r in LOG_RATES]
        scales = np.array([s for s, _ in grid])
        rates = np.array([r for _, r in grid])
    elif mode == "random":
        rng = np.random.default_rng(seed)
        # uniform on (0, 9]: 1 - U[0, 1) lies in (0, 1]
        scales = RANDOM_MAX * (1.0 - rng.random(N_FILTERS))
        magnitudes = RANDOM_MAX * (1.0 - rng.random(N_FILTERS))
        signs = np.where(rng.random(N_FILTERS) < 0.5, -1.0, 1.0)
        # keep draws inside the trainable range; both bounds stay within (0, 9]
        scales = np.clip(scales, *SCALE_RANGE)
        rates = signs * np.clip(magnitudes, *RATE_RANGE)
    else:
        raise ValueError(f"unknown cortical init '{mode}', expected one of {', '.join(INIT_MODES)}")
    return CorticalParams(
        scale=parameter(scales, name="cortex.scale"),
        rate=parameter(rates, name="cortex.rate"),
        init_mode=mode,
    )


def kernel_half_extents(scale: float, rate: float) -> tuple[int, int]:
    """Half-widths (channels, frames) of the +-2 sigma support, sigma = half a modulation period."""
    sigma_f = 1.0 / (2.0 * scale)
    sigma_t = 1.0 / (2.0 * abs(rate))
    return int(np.ceil(2.0 * sigma_f * CHANNELS_PER_OCTAVE)), int(np.ceil(2.0 * sigma_t * FRAME_RATE))


def _check_range(scale: float, rate: float) -> None:
    if not SCALE_RANGE[0] <= scale <= SCALE_RANGE[1] or not RATE_RANGE[0] <= abs(rate) <= RATE_RANGE[1]:
        raise CorticalRangeError(
            f"modulation ({scale:g} cyc/oct, {rate:g} Hz) outside scale {SCALE_RANGE}, |rate| {RATE_RANGE}"
        )


def strf_kernel(scale, rate, max_extents: Optional[tuple[int, int]] = None) -> DiffTensor:
    """Gabor STRF on the channel x frame grid, mean-subtracted and unit L2 norm.

    Support is +-2 sigma on each axis. The kernel is built and normalized on
    the full support; ``max_extents`` then crops it, which leaves a same-size
    correlation with a shorter spectrogram unchanged. The extents are step
    constants, gradients flow through the values only.
    """
    scale = scale if isinstance(scale, DiffTensor) else constant(float(scale))
    rate = rate if isinstance(rate, DiffTensor) else constant(float(rate))
    s_val, r_val = float(scale.value), float(rate.value)
    _check_range(s_val, r_val)
    half_f, half_t = kernel_half_extents(s_val, r_val)

    df = np.arange(-half_f, half_f + 1)[:, None] / CHANNELS_PER_OCTAVE
    dt = np.arange(-half_t, half_t + 1)[None, :] / FRAME_RATE
    df_grid = constant(np.broadcast_to(df, (df.size, dt.size)))
    dt_grid = constant(np.broadcast_to(dt, (df.size, dt.size)))
    df_sq = constant(np.broadcast_to(df * df, (df.size, dt.size)))
    dt_sq = constant(np.broadcast_to(dt * dt, (df.size, dt.size)))

    # exp(-df^2 / (2 sigma_f^2)) with sigma_f = 1 / (2 scale) is exp(-2 scale^2 df^2)
    envelope = exp(mul(mul(scale, scale), df_sq) * -2.0 + mul(mul(rate, rate), dt_sq) * -2.0)
    carrier = cos(mul(scale, df_grid) * (2.0 * np.pi) + mul(rate, dt_grid) * (2.0 * np.pi))
    kernel = mul(envelope, carrier)
    centered = sub(kernel, tmean(kernel))
    norm = power(tsum(mul(centered, centered)), 0.5)
    normalized = div(centered, norm)
    if max_extents is None or (half_f <= max_extents[0] and half_t <= max_extents[1]):
        return normalized
    keep_f, keep_t = min(half_f, max_extents[0]), min(half_t, max_extents[1])
    return getitem(
        normalized,
        (slice(half_f - keep_f, half_f + keep_f + 1), slice(half_t - keep_t, half_t + keep_t + 1)),
    )


def cortical_forward(s: DiffTensor, p: CorticalParams, clip_support: bool = True) -> DiffTensor:
    """Auditory spectrogram (channels, T) -> cortical tensor (40, channels, T)."""
    spec = s if isinstance(s, DiffTensor) else constant(s)
    if spec.ndim != 2:
        raise ValueError(f"expected a (channels, frames) spectrogram, got shape {spec.shape}")
    if not np.all(np.isfinite(spec.value)):
        raise ValueError("spectrogram contains non-finite values")
    n_ch, n_t = spec.shape
    pairs = p.pairs()
    for sc, rt in pairs:
        _check_range(sc, rt)
    if not clip_support:
        widest = max(2 * kernel_half_extents(sc, rt)[1] + 1 for sc, rt in pairs)
        if n_t < widest:
            raise InputTooShortError(
                f"spectrogram has {n_t} frames but the widest modulation filter spans {widest}; "
                f"use at least {widest / FRAME_RATE:.2f} s of audio"
            )
    limits = (n_ch - 1, n_t - 1) if clip_support else None

    image = reshape(spec, (1, n_ch, n_t))
    responses = []
    for i in range(len(pairs)):
        kernel = strf_kernel(getitem(p.scale, i), getitem(p.rate, i), max_extents=limits)
        weight = reshape(kernel, (1, 1) + kernel.shape)
        responses.append(conv2d(image, weight))
    return concat(responses, axis=0)
