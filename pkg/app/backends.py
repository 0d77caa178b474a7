from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from app.autodiff import (
    ComplexPair,
    DiffTensor,
    ShapeError,
    affine,
    concat,
    constant,
    conv2d,
    exp,
    gelu,
    getitem,
    l1_distance,
    log,
    mul,
    parameter,
    reshape,
    sigmoid,
    sub,
    tmean,
    transpose,
    tsum,
)
from app.frontend.cochlea import N_CHANNELS
from app.frontend.params import FrontendParams, frontend_forward
from app.signal_io import HOP, ComplexSpectrogram, Waveform, istft, stft

logger = logging.getLogger(__name__)

CLASSIFIER_CHANNELS = (10, 20, 40)
ENHANCER_CHANNELS = (20, 40, 10, 1)
FEATURE_CHANNELS = 40
STEM_CHANNELS = 40
KERNEL = 3
STFT_WINDOW = 256
STFT_BINS = STFT_WINDOW // 2 + 1
LOSS_WINDOWS = (256, 512, 1024)
SI_SDR_CAP_DB = 100.0
UNLABELED = -1


@dataclass
class ConvLayer:
    weight: DiffTensor
    bias: DiffTensor

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return conv2d(x, self.weight, self.bias)


def _conv_layer(rng: np.random.Generator, name: str, in_ch: int, out_ch: int) -> ConvLayer:
    fan_in = in_ch * KERNEL * KERNEL
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, KERNEL, KERNEL))
    return ConvLayer(
        weight=parameter(weight, name=f"{name}.weight"),
        bias=parameter(np.zeros(out_ch), name=f"{name}.bias"),
    )


def _dense(rng: np.random.Generator, name: str, n_in: int, n_out: int) -> tuple[DiffTensor, DiffTensor]:
    weight = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))
    return parameter(weight, name=f"{name}.weight"), parameter(np.zeros(n_out), name=f"{name}.bias")


def _stem(rng: np.random.Generator, prefix: str, use_stem: bool) -> Optional[ConvLayer]:
    # stands in for the cortical stage: linear 3x3 map 1 -> 40 channels
    return _conv_layer(rng, f"{prefix}.stem", 1, STEM_CHANNELS) if use_stem else None


@dataclass
class ClassifierNet:
    convs: list[ConvLayer]
    head_weight: DiffTensor
    head_bias: DiffTensor
    stem: Optional[ConvLayer] = None

    @classmethod
    def initial(cls, n_classes: int, seed: int = 0, use_stem: bool = False) -> "ClassifierNet":
        if n_classes < 2:
            raise ValueError(f"classifier needs at least 2 classes, got {n_classes}")
        rng = np.random.default_rng([seed, 1])
        stem = _stem(rng, "classifier", use_stem)
        convs = []
        in_ch = FEATURE_CHANNELS
        for i, out_ch in enumerate(CLASSIFIER_CHANNELS):
            convs.append(_conv_layer(rng, f"classifier.conv{i}", in_ch, out_ch))
            in_ch = out_ch
        head_weight, head_bias = _dense(rng, "classifier.head", in_ch, n_classes)
        return cls(convs=convs, head_weight=head_weight, head_bias=head_bias, stem=stem)

    @property
    def n_classes(self) -> int:
        return self.head_weight.shape[1]

    def tensors(self) -> dict[str, DiffTensor]:
        return _collect(self.stem, self.convs, self.head_weight, self.head_bias)


@dataclass
class EnhancerNet:
    convs: list[ConvLayer]
    head_weight: DiffTensor
    head_bias: DiffTensor
    stem: Optional[ConvLayer] = None

    @classmethod
    def initial(cls, seed: int = 0, use_stem: bool = False) -> "EnhancerNet":
        rng = np.random.default_rng([seed, 2])
        stem = _stem(rng, "enhancer", use_stem)
        convs = []
        in_ch = FEATURE_CHANNELS
        for i, out_ch in enumerate(ENHANCER_CHANNELS):
            convs.append(_conv_layer(rng, f"enhancer.conv{i}", in_ch, out_ch))
            in_ch = out_ch
        head_weight, head_bias = _dense(rng, "enhancer.head", N_CHANNELS, STFT_BINS)
        return cls(convs=convs, head_weight=head_weight, head_bias=head_bias, stem=stem)

    def tensors(self) -> dict[str, DiffTensor]:
        return _collect(self.stem, self.convs, self.head_weight, self.head_bias)


Backend = Union[ClassifierNet, EnhancerNet]


def _collect(stem, convs, head_weight, head_bias) -> dict[str, DiffTensor]:
    named: dict[str, DiffTensor] = {}
    layers = ([stem] if stem is not None else []) + list(convs)
    for layer in layers:
        named[layer.weight.name] = layer.weight
        named[layer.bias.name] = layer.bias
    named[head_weight.name] = head_weight
    named[head_bias.name] = head_bias
    return named


def parameter_count(net: Backend) -> int:
    return sum(t.size for t in net.tensors().values())


def _trunk(c: DiffTensor, net: Backend) -> DiffTensor:
    expected = 1 if net.stem is not None else FEATURE_CHANNELS
    if c.ndim != 3 or c.shape[0] != expected:
        raise ShapeError("backend input", c.shape, (expected, N_CHANNELS, "T"))
    h = net.stem(c) if net.stem is not None else c
    for layer in net.convs:
        h = gelu(layer(h))
    return h


def classify(c: DiffTensor, net: ClassifierNet) -> DiffTensor:
    """Cortical tensor (40, F, T) -> per-frame logits (T, n_classes)."""
    h = _trunk(c, net)
    pooled = tmean(h, axis=1)
    return affine(transpose(pooled), net.head_weight, net.head_bias)


def predict_mask(c: DiffTensor, net: EnhancerNet) -> DiffTensor:
    """Cortical tensor (40, 129, T) -> mask (T, 129) in (0, 1)."""
    if c.ndim == 3 and c.shape[1] != N_CHANNELS:
        raise ShapeError("enhancer input", c.shape, (FEATURE_CHANNELS, N_CHANNELS, "T"))
    h = _trunk(c, net)
    n_t = h.shape[2]
    return sigmoid(affine(transpose(reshape(h, (N_CHANNELS, n_t))), net.head_weight, net.head_bias))


def _label_mask(logits: DiffTensor, labels) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("labels", logits.shape, labels.shape)
    n_classes = logits.shape[1]
    if np.any((labels < UNLABELED) | (labels >= n_classes)):
        raise ValueError(f"labels must lie in [0, {n_classes}) or be {UNLABELED} for unlabeled frames")
    return labels, labels != UNLABELED


def cross_entropy(logits: DiffTensor, labels) -> DiffTensor:
    """Mean -log softmax(logits)[label] over labeled frames; frames labeled -1 are skipped."""
    labels, labeled = _label_mask(logits, labels)
    count = int(labeled.sum())
    if count == 0:
        raise ValueError("all frames are unlabeled")
    n_t, n_classes = logits.shape
    # the shift is a constant: log-sum-exp is invariant to it
    peak = constant(np.broadcast_to(logits.value.max(axis=1, keepdims=True), (n_t, n_classes)))
    shifted = sub(logits, peak)
    log_norm = log(tsum(exp(shifted), axis=1))
    one_hot = np.zeros((n_t, n_classes))
    one_hot[np.flatnonzero(labeled), labels[labeled]] = 1.0
    picked = tsum(mul(shifted, constant(one_hot)), axis=1)
    per_frame = mul(sub(log_norm, picked), constant(labeled.astype(np.float64)))
    return mul(tsum(per_frame), 1.0 / count)


def accuracy(logits, labels) -> float:
    """Fraction of labeled frames whose argmax (lowest index on ties) equals the label; nan if none labeled."""
    values = logits.value if isinstance(logits, DiffTensor) else np.asarray(logits, dtype=np.float64)
    labels, labeled = _label_mask(constant(values), labels)
    if not labeled.any():
        return float("nan")
    predicted = np.argmax(values, axis=1)
    return float(np.mean(predicted[labeled] == labels[labeled]))


def _samples(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    if isinstance(x, Waveform):
        return constant(x.samples)
    return constant(np.asarray(x, dtype=np.float64))


def enhance(
    mix,
    frontend: FrontendParams,
    net: Optional[EnhancerNet],
    forced_mask: Optional[float] = None,
    features: Optional[DiffTensor] = None,
) -> tuple[DiffTensor, DiffTensor]:
    """Mask the complex STFT of ``mix`` and resynthesize.

    Returns ``(estimate, mask)``: the estimate has the length of ``mix``
    (inputs are zero-padded to a multiple of the hop and truncated back);
    the mask is (frames, 129). ``forced_mask`` bypasses frontend and network
    with a constant mask; ``features`` supplies precomputed frontend output
    for the padded mix.
    """
    samples = _samples(mix)
    if samples.ndim != 1:
        raise ShapeError("enhance", samples.shape, ("N",))
    n = samples.shape[0]
    padded_len = -(-n // HOP) * HOP
    if padded_len != n:
        samples = concat([samples, constant(np.zeros(padded_len - n))])

    spectrum = stft(samples, STFT_WINDOW, HOP)
    if forced_mask is not None:
        mask = constant(np.full((spectrum.n_frames, STFT_BINS), float(forced_mask)))
    else:
        if net is None:
            raise ValueError("enhance needs an EnhancerNet unless forced_mask is given")
        if features is None:
            features = frontend_forward(samples, frontend)
        mask = predict_mask(features, net)
        if mask.shape[0] != spectrum.n_frames:
            raise ShapeError("enhance", mask.shape, (spectrum.n_frames, STFT_BINS))

    masked = ComplexSpectrogram(
        re=mul(spectrum.re, mask),
        im=mul(spectrum.im, mask),
        window_length=STFT_WINDOW,
        hop=HOP,
        length=padded_len,
    )
    estimate = istft(masked)
    if padded_len != n:
        estimate = getitem(estimate, slice(0, n))
    return estimate, mask


def _stft_distance(a: DiffTensor, b: DiffTensor, window: int) -> DiffTensor:
    sa = stft(a, window, window // 4)
    sb = stft(b, window, window // 4)
    # equal-sized parts: the mean over both is the average of the two means
    return mul(l1_distance(sa.re, sb.re) + l1_distance(sa.im, sb.im), 0.5)


def enhancement_loss(estimate, target, windows: Sequence[int] = LOSS_WINDOWS) -> DiffTensor:
    """L1 waveform distance plus multi-resolution complex-STFT L1 (hop = window / 4)."""
    est, tgt = _samples(estimate), _samples(target)
    if est.shape != tgt.shape:
        raise ShapeError("enhancement_loss", est.shape, tgt.shape)
    loss = l1_distance(est, tgt)
    for window in windows:
        loss = loss + _stft_distance(est, tgt, window)
    return loss


def si_sdr(estimate, target) -> float:
    e = estimate.samples if isinstance(estimate, Waveform) else np.asarray(getattr(estimate, "value", estimate))
    t = target.samples if isinstance(target, Waveform) else np.asarray(getattr(target, "value", target))
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if e.shape != t.shape:
        raise ValueError(f"length mismatch: estimate {e.shape} vs target {t.shape}")
    energy = float(np.dot(t, t))
    if energy == 0.0:
        raise ValueError("target is silent")
    projection = (float(np.dot(e, t)) / energy) * t
    residual = projection - e
    noise = float(np.dot(residual, residual))
    if noise == 0.0:
        return SI_SDR_CAP_DB
    signal_power = float(np.dot(projection, projection))
    if signal_power == 0.0:
        return -SI_SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(signal_power / noise), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def ci95(values: Sequence[float]) -> float:
    """1.96 standard errors (sample standard deviation); 0 for fewer than two values."""
    data = np.asarray(values, dtype=np.float64)
    if data.size < 2:
        return 0.0
    return float(1.96 * data.std(ddof=1) / np.sqrt(data.size))
