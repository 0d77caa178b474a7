from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from app.autodiff import constant
from app.checkpoint import Checkpoint
from app.frontend.cochlea import N_CHANNELS, center_frequencies
from app.frontend.cortex import LOG_RATES, LOG_SCALES, CorticalParams, cortical_forward
from app.signal_io import gen_moving_ripple

logger = logging.getLogger(__name__)

CORTICAL_OMITTED = "cortical stage absent (cnn ablation): filter section omitted"


@dataclass(frozen=True)
class FilterRow:
    index: int
    scale: float
    rate: float
    init: str

    @property
    def sign(self) -> int:
        # positive and negative rates select opposite sweep directions
        return -1 if self.rate < 0 else 1


@dataclass(frozen=True)
class CochlearRow:
    channel: int
    center_hz: float
    alpha: float


@dataclass(frozen=True)
class ParamReport:
    filters: tuple[FilterRow, ...]
    cochlea: tuple[CochlearRow, ...]
    scalars: tuple[tuple[str, float], ...]
    notice: Optional[str] = None


def export_params(ckpt: Checkpoint) -> ParamReport:
    frontend = ckpt.group("frontend/")
    init = str(ckpt.config.get("cortical_init", "log"))

    alpha = frontend["cochlea.alpha"]
    centers = center_frequencies()
    cochlea = tuple(CochlearRow(k, float(centers[k]), float(alpha[k])) for k in range(alpha.size))
    w = frontend["cochlea.inhibition"]
    scalars = (("w0", float(w[0])), ("w1", float(w[1])), ("tau_ms", float(frontend["cochlea.tau"])))

    notice = None
    filters: tuple[FilterRow, ...] = ()
    if "cortex.scale" in frontend and "cortex.rate" in frontend:
        scales, rates = frontend["cortex.scale"], frontend["cortex.rate"]
        filters = tuple(FilterRow(i, float(scales[i]), float(rates[i]), init) for i in range(scales.size))
    else:
        notice = CORTICAL_OMITTED
        logger.warning(notice)

    values = [r.alpha for r in cochlea] + [v for _, v in scalars] + [v for r in filters for v in (r.scale, r.rate)]
    if not np.all(np.isfinite(values)):
        raise ValueError("checkpoint holds non-finite frontend parameters")
    return ParamReport(filters=filters, cochlea=cochlea, scalars=scalars, notice=notice)


def log_ripple_grid() -> list[tuple[float, float]]:
    """Every (scale, signed rate) of the log-spaced initialization grid."""
    return [(s, sign * r) for sign in (1.0, -1.0) for s in LOG_SCALES for r in LOG_RATES]


def _cortical_from(source: Union[Checkpoint, CorticalParams]) -> CorticalParams:
    if isinstance(source, CorticalParams):
        return source
    frontend = source.group("frontend/")
    if "cortex.scale" not in frontend:
        raise ValueError(CORTICAL_OMITTED)
    return CorticalParams(
        scale=constant(frontend["cortex.scale"]),
        rate=constant(frontend["cortex.rate"]),
        init_mode=str(source.config.get("cortical_init", "log")),
    )


def modulation_profile(
    source: Union[Checkpoint, CorticalParams],
    ripple_grid: Sequence[tuple[float, float]],
    duration_s: float = 2.0,
    amplitude: float = 1.0,
) -> np.ndarray:
    """Mean squared response of every filter to zero-mean moving ripples, shape (filters, ripples).

    Each ripple is ``amplitude * cos(2 pi (rate t + scale x))`` on the
    channel x frame grid, so energies scale with the square of the amplitude.
    """
    cortex = _cortical_from(source)
    energies = np.zeros((cortex.scale.size, len(ripple_grid)))
    for j, (scale, rate) in enumerate(ripple_grid):
        ripple = gen_moving_ripple(scale, rate, duration_s, n_channels=N_CHANNELS, amplitude=1.0) - 1.0
        response = cortical_forward(constant(amplitude * ripple), cortex).value
        energies[:, j] = np.mean(response**2, axis=(1, 2))
    logger.debug("modulation profile: %d filters x %d ripples", energies.shape[0], energies.shape[1])
    return energies
