from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from app.autodiff import DiffTensor, Tape

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 0.01
TAU_FLOOR_MS = 0.1
SCALE_RANGE = (0.05, 12.0)
RATE_RANGE = (0.1, 100.0)


class NonFiniteGradientError(ValueError):
    def __init__(self, names: list[str]) -> None:
        self.names = names
        super().__init__(f"non-finite gradient in: {', '.join(names)}")


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Mapping[str, DiffTensor],
    grads: Mapping[str, np.ndarray],
) -> tuple[Mapping[str, DiffTensor], AdamState]:
    """Bias-corrected Adam update, applied in place to ``param.value``."""
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    bad = [name for name in params if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise NonFiniteGradientError(bad)
    for name, param in params.items():
        if grads[name].shape != param.shape:
            raise ValueError(f"gradient for '{name}' has shape {grads[name].shape}, expected {param.shape}")

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param.value)
            state.v[name] = np.zeros_like(param.value)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        param.value = param.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def clamp_parameters(params: Mapping[str, DiffTensor]) -> list[str]:
    changed: list[str] = []
    for name, param in params.items():
        value = param.value
        if name.endswith("cochlea.alpha"):
            clamped = np.maximum(value, ALPHA_FLOOR)
        elif name.endswith("cochlea.tau"):
            clamped = np.maximum(value, TAU_FLOOR_MS)
        elif name.endswith("cortex.scale"):
            clamped = np.clip(value, *SCALE_RANGE)
        elif name.endswith("cortex.rate"):
            sign = np.where(value < 0, -1.0, 1.0)
            clamped = sign * np.clip(np.abs(value), *RATE_RANGE)
        else:
            continue
        if not np.array_equal(clamped, value):
            changed.append(name)
            param.value = clamped
    if changed:
        logger.debug("clamped %s", ", ".join(changed))
    return changed


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    status: str

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass(frozen=True)
class GradCheckReport:
    rows: tuple[GradCheckRow, ...]
    tol: float

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def failures(self) -> tuple[GradCheckRow, ...]:
        return tuple(row for row in self.rows if not row.passed)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def _evaluate(f: Callable[[], DiffTensor], param: DiffTensor, value: np.ndarray) -> Optional[float]:
    """f at ``value``, or None when the perturbed point is outside f's domain."""
    param.value = value
    try:
        return float(f().value)
    except ValueError as exc:
        logger.debug("finite difference point rejected: %s", exc)
        return None


def _difference(
    f: Callable[[], DiffTensor], param: DiffTensor, base: np.ndarray, index: tuple[int, ...], step: float
) -> float:
    """Central difference; second-order one-sided when one side leaves the domain, NaN when both do."""

    def shifted(k: int) -> Optional[float]:
        moved = base.copy()
        moved[index] += k * step
        return _evaluate(f, param, moved)

    try:
        f_plus, f_minus = shifted(1), shifted(-1)
        if f_plus is not None and f_minus is not None:
            return (f_plus - f_minus) / (2.0 * step)
        f_zero = _evaluate(f, param, base)
        if f_plus is not None:
            f_far = shifted(2)
            if f_zero is not None and f_far is not None:
                return (-3.0 * f_zero + 4.0 * f_plus - f_far) / (2.0 * step)
        elif f_minus is not None:
            f_far = shifted(-2)
            if f_zero is not None and f_far is not None:
                return (3.0 * f_zero - 4.0 * f_minus + f_far) / (2.0 * step)
        return float("nan")
    finally:
        param.value = base


def grad_check(
    f: Callable[[], DiffTensor],
    params: Mapping[str, DiffTensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 0.0,
    components: Optional[Mapping[str, Sequence[tuple[int, ...]]]] = None,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``f`` takes no arguments and reads the current ``params`` values; it must be
    deterministic. A component passes when its relative error is below ``tol``
    or, if ``atol`` > 0, its absolute error is below ``atol``. ``components``
    restricts the finite differences of a tensor to the listed indices.
    A perturbed point where ``f`` raises ValueError (a parameter range or shape
    check) is outside its domain: the difference turns one-sided there, and a
    component with no evaluable side is reported as "non-evaluable".
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")

    with Tape() as tape:
        tape.watch(*params.values())
        loss = f()
    tape.backward(loss)
    analytic = {name: np.array(p.grad) for name, p in params.items()}

    rows: list[GradCheckRow] = []
    for name, param in params.items():
        indices = components.get(name) if components is not None else None
        if indices is None:
            indices = list(np.ndindex(*param.shape))
        logger.debug("finite differences for %s (%d components)", name, len(indices))
        base = param.value.copy()
        for index in indices:
            index = tuple(int(i) for i in index)
            numeric = _difference(f, param, base, index, step)
            a = float(analytic[name][index])
            if not np.isfinite(numeric):
                rows.append(GradCheckRow(name, index, a, float("nan"), float("nan"), "non-evaluable"))
                continue
            err = relative_error(a, numeric)
            ok = err < tol or (atol > 0 and abs(a - numeric) < atol)
            rows.append(GradCheckRow(name, index, a, numeric, err, "pass" if ok else "fail"))
    report = GradCheckReport(rows=tuple(rows), tol=tol)
    logger.info("grad_check: %d components, %d failures", len(rows), len(report.failures))
    return report
