from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from app.autodiff import DiffTensor, Tape, constant
from app.backends import (
    Backend,
    ClassifierNet,
    EnhancerNet,
    accuracy,
    ci95,
    classify,
    cross_entropy,
    enhance,
    enhancement_loss,
    parameter_count,
    si_sdr,
)
from app.checkpoint import Checkpoint, CheckpointError
from app.frontend.cochlea import n_frames
from app.frontend.cortex import INIT_MODES
from app.frontend.params import ABLATIONS, FrontendParams, frontend_forward, init_frontend
from app.optim import AdamState, NonFiniteGradientError, adam_step, clamp_parameters
from app.signal_io import FRAME_RATE, HOP, SAMPLE_RATE, Waveform, gen_pink_noise, mix_at_snr, read_wav

logger = logging.getLogger(__name__)

TASKS = ("classify", "enhance")
ROLES = ("speech", "noise", "music")
PROTOCOLS = ("clean", "pink", "enhance0db")
UNLABELED = -1


class TrainingAborted(ValueError):
    def __init__(self, step: int, batch_seed: str, last_good: Checkpoint, reason: str) -> None:
        self.step = step
        self.batch_seed = batch_seed
        self.last_good = last_good
        super().__init__(
            f"training aborted at step {step}: {reason} (batch seed {batch_seed}); "
            f"last good checkpoint is at step {last_good.step}"
        )


# --- manifests ------------------------------------------------------------


@dataclass(frozen=True)
class ManifestItem:
    audio: Path
    waveform: Waveform
    labels: Optional[np.ndarray] = None
    role: Optional[str] = None


@dataclass(frozen=True)
class Manifest:
    items: tuple[ManifestItem, ...]
    classes: tuple[str, ...] = ()
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.items)


def read_labels(path) -> np.ndarray:
    """One integer per 5 ms frame: CSV (by extension) or little-endian int32 binary."""
    file_path = Path(path)
    if file_path.suffix.lower() == ".csv":
        values: list[int] = []
        with file_path.open("r", newline="", encoding="utf-8") as csv_file:
            for row in csv.reader(csv_file):
                for cell in row:
                    text = cell.strip()
                    if text:
                        values.append(int(text))
        return np.array(values, dtype=np.int64)
    raw = file_path.read_bytes()
    if len(raw) % 4:
        raise ValueError(f"label file {file_path} is not a whole number of int32 values")
    return np.frombuffer(raw, dtype="<i4").astype(np.int64)


def write_labels(path, labels: Sequence[int]) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(labels, dtype=np.int64)
    if file_path.suffix.lower() == ".csv":
        with file_path.open("w", newline="", encoding="utf-8") as csv_file:
            writer = csv.writer(csv_file)
            for value in values:
                writer.writerow([int(value)])
    else:
        file_path.write_bytes(values.astype("<i4").tobytes())
    return file_path


def load_manifest(path) -> Manifest:
    file_path = Path(path)
    raw = json.loads(file_path.read_text(encoding="utf-8"))
    entries = raw.get("items", []) if isinstance(raw, dict) else raw
    classes = tuple(raw.get("classes", [])) if isinstance(raw, dict) else ()
    base = file_path.parent

    items: list[ManifestItem] = []
    for index, entry in enumerate(entries):
        if isinstance(entry, str):
            entry = {"audio": entry}
        audio = base / entry["audio"]
        if not audio.exists():
            raise ValueError(f"manifest item {index}: audio file not found: {audio}")
        waveform = read_wav(audio)
        role = entry.get("role")
        if role is not None and role not in ROLES:
            raise ValueError(f"manifest item {index}: unknown role '{role}', expected one of {', '.join(ROLES)}")
        labels = None
        if entry.get("labels"):
            label_path = base / entry["labels"]
            if not label_path.exists():
                raise ValueError(f"manifest item {index}: label file not found: {label_path}")
            labels = read_labels(label_path)
            expected = n_frames(len(waveform))
            if labels.size != expected:
                raise ValueError(f"manifest item {index}: {labels.size} labels, expected {expected} frames")
            if classes and np.any((labels < UNLABELED) | (labels >= len(classes))):
                raise ValueError(f"manifest item {index}: label outside [0, {len(classes)})")
        items.append(ManifestItem(audio=audio, waveform=waveform, labels=labels, role=role))
    logger.debug("manifest %s: %d items, %d classes", file_path, len(items), len(classes))
    return Manifest(items=tuple(items), classes=classes, source=file_path)


@dataclass(frozen=True)
class TrainingData:
    main: Manifest
    noise: Optional[Manifest] = None

    def targets(self, task: str) -> tuple[ManifestItem, ...]:
        if task == "classify":
            missing = [str(item.audio) for item in self.main.items if item.labels is None]
            if missing:
                raise ValueError(f"classification needs frame labels; missing for {missing[0]}")
            return self.main.items
        return tuple(item for item in self.main.items if item.role in (None, "speech"))

    def noises(self) -> tuple[ManifestItem, ...]:
        if self.noise is not None:
            return self.noise.items
        return tuple(item for item in self.main.items if item.role in ("noise", "music"))


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    task: str = "classify"
    ablation: str = "full"
    cortical_init: str = "log"
    seed: int = 0
    lr: float = 0.001
    batch: int = 4
    steps: int = 2000
    snr_db: float = 0.0
    eval_snrs: tuple[float, ...] = (-3.0, 0.0, 3.0)
    eval_every: int = 250
    eval_items: int = 100
    crop_seconds: float = 1.0
    train_snr_db: Optional[float] = None
    n_classes: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task '{self.task}', expected one of {', '.join(TASKS)}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation '{self.ablation}', expected one of {', '.join(ABLATIONS)}")
        if self.cortical_init not in INIT_MODES:
            raise ValueError(f"unknown cortical init '{self.cortical_init}'")
        if self.lr <= 0 or self.batch < 1 or self.steps < 0 or self.eval_items < 1:
            raise ValueError("lr must be positive, batch and eval_items at least 1, steps non-negative")
        if self.task == "classify" and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2 (from the manifest class table)")
        if self.crop_samples < 256:
            raise ValueError(f"crop of {self.crop_seconds} s is too short")
        object.__setattr__(self, "eval_snrs", tuple(float(s) for s in self.eval_snrs))

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * FRAME_RATE)) * HOP

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["eval_snrs"] = list(self.eval_snrs)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(data)
        if "eval_snrs" in values:
            values["eval_snrs"] = tuple(values["eval_snrs"])
        return cls(**values)


# --- sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None


def _crop(samples: np.ndarray, length: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Hop-aligned crop inside the source; shorter sources are zero-padded at the end."""
    if samples.size >= length:
        slots = (samples.size - length) // HOP + 1
        offset = HOP * int(rng.integers(slots))
        return samples[offset : offset + length].copy(), offset
    padded = np.zeros(length)
    padded[: samples.size] = samples
    return padded, 0


def _crop_labels(labels: np.ndarray, offset: int, count: int) -> np.ndarray:
    first = offset // HOP
    window = labels[first : first + count]
    if window.size < count:
        window = np.concatenate([window, np.full(count - window.size, UNLABELED, dtype=np.int64)])
    return window.astype(np.int64)


def _noise_crop(noises: Sequence[ManifestItem], length: int, rng: np.random.Generator) -> np.ndarray:
    if noises:
        item = noises[int(rng.integers(len(noises)))]
        crop, _ = _crop(item.waveform.samples, length, rng)
        return crop
    return _pink(length, rng)


def _pink(length: int, rng: np.random.Generator) -> np.ndarray:
    return gen_pink_noise(length / SAMPLE_RATE, int(rng.integers(2**31))).samples[:length]


def sample_batch(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator) -> list[Example]:
    """``cfg.batch`` crops of ``cfg.crop_seconds``; deterministic for a given generator state."""
    pool = data.targets(cfg.task)
    if not pool:
        raise ValueError("empty manifest: no items to sample from")
    noises = data.noises()
    length = cfg.crop_samples
    batch: list[Example] = []
    for _ in range(cfg.batch):
        item = pool[int(rng.integers(len(pool)))]
        crop, offset = _crop(item.waveform.samples, length, rng)
        if cfg.task == "classify":
            inputs = crop
            if cfg.train_snr_db is not None:
                noise = _noise_crop(noises, length, rng)
                inputs = mix_at_snr(Waveform(crop), Waveform(noise), cfg.train_snr_db).samples
            batch.append(Example(inputs=inputs, labels=_crop_labels(item.labels, offset, length // HOP)))
        else:
            noise = _noise_crop(noises, length, rng)
            mix = mix_at_snr(Waveform(crop), Waveform(noise), cfg.snr_db)
            batch.append(Example(inputs=mix.samples, target=crop))
    return batch


# --- model ------------------------------------------------------------------


@dataclass
class Model:
    task: str
    frontend: FrontendParams
    backend: Backend

    def tensors(self) -> dict[str, DiffTensor]:
        named = {f"frontend/{name}": t for name, t in self.frontend.tensors().items()}
        named.update({f"backend/{name}": t for name, t in self.backend.tensors().items()})
        return named

    def learnable(self) -> dict[str, DiffTensor]:
        named = {f"frontend/{name}": t for name, t in self.frontend.learnable().items()}
        named.update({f"backend/{name}": t for name, t in self.backend.tensors().items()})
        return named

    def logits(self, samples: np.ndarray) -> DiffTensor:
        return classify(frontend_forward(constant(samples), self.frontend), self.backend)

    def enhance(self, samples: np.ndarray, forced_mask: Optional[float] = None) -> DiffTensor:
        estimate, _ = enhance(samples, self.frontend, self.backend, forced_mask=forced_mask)
        return estimate

    def loss(self, example: Example) -> DiffTensor:
        if self.task == "classify":
            return cross_entropy(self.logits(example.inputs), example.labels)
        return enhancement_loss(self.enhance(example.inputs), example.target)


def build_model(cfg: TrainConfig) -> Model:
    frontend = init_frontend(cfg.ablation, cfg.cortical_init, cfg.seed)
    use_stem = cfg.ablation == "cnn"
    if cfg.task == "classify":
        backend: Backend = ClassifierNet.initial(cfg.n_classes, seed=cfg.seed, use_stem=use_stem)
    else:
        backend = EnhancerNet.initial(seed=cfg.seed, use_stem=use_stem)
    return Model(task=cfg.task, frontend=frontend, backend=backend)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_model(cfg)
    for name, tensor in model.tensors().items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint has no tensor '{name}'")
        value = ckpt.tensors[name]
        if value.shape != tensor.shape:
            raise CheckpointError(f"tensor '{name}' has shape {value.shape}, model expects {tensor.shape}")
        tensor.value = value.copy()
    return model, cfg


def make_checkpoint(model: Model, cfg: TrainConfig, state: AdamState, step: int) -> Checkpoint:
    tensors = {name: t.value.copy() for name, t in model.tensors().items()}
    for name in model.learnable():
        if name in state.m:
            tensors[f"adam/m/{name}"] = state.m[name].copy()
            tensors[f"adam/v/{name}"] = state.v[name].copy()
    return Checkpoint(
        tensors=tensors,
        config=cfg.to_dict(),
        step=step,
        seed=cfg.seed,
        extra={
            "frontend_learnable": model.frontend.learnable_count(),
            "backend_parameters": parameter_count(model.backend),
        },
    )


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class LogRow:
    step: int
    loss: float
    metric: str = ""
    metric_value: Optional[float] = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[LogRow] = field(default_factory=list)


def _check_resume(cfg: TrainConfig, ckpt: Checkpoint) -> None:
    saved = TrainConfig.from_dict(ckpt.config)
    for key in ("task", "ablation", "cortical_init", "seed", "n_classes", "batch", "lr"):
        if getattr(saved, key) != getattr(cfg, key):
            raise ValueError(f"cannot resume: '{key}' is {getattr(saved, key)!r} in the checkpoint, {getattr(cfg, key)!r} now")
    if ckpt.step > cfg.steps:
        raise ValueError(f"checkpoint is at step {ckpt.step}, beyond the requested {cfg.steps} steps")


def train(
    cfg: TrainConfig,
    data: TrainingData,
    resume: Optional[Checkpoint] = None,
    eval_data: Optional[TrainingData] = None,
) -> TrainResult:
    """Adam over ``cfg.steps`` steps, one tape per example, gradients averaged in batch order.

    Step ``k`` draws its batch from ``default_rng([seed, k])``, so a resumed
    run replays exactly the batches an uninterrupted run would have seen.
    """
    if resume is not None:
        _check_resume(cfg, resume)
        model, _ = model_from_checkpoint(resume)
        state = AdamState(lr=cfg.lr, t=resume.step, m=resume.group("adam/m/"), v=resume.group("adam/v/"))
        start = resume.step
    else:
        model = build_model(cfg)
        state = AdamState(lr=cfg.lr)
        start = 0

    params = model.learnable()
    logger.info(
        "train: task=%s ablation=%s init=%s seed=%d steps %d..%d, frontend learnable %d, backend %d",
        cfg.task,
        cfg.ablation,
        cfg.cortical_init,
        cfg.seed,
        start,
        cfg.steps,
        model.frontend.learnable_count(),
        parameter_count(model.backend),
    )

    log: list[LogRow] = []
    last_good = make_checkpoint(model, cfg, state, start)
    for step in range(start, cfg.steps):
        batch_seed = f"{cfg.seed}:{step}"
        batch = sample_batch(data, cfg, np.random.default_rng([cfg.seed, step]))
        totals = {name: np.zeros(p.shape) for name, p in params.items()}
        losses: list[float] = []
        for example in batch:
            with Tape() as tape:
                tape.watch(*params.values())
                loss = model.loss(example)
            value = float(loss.value)
            if not np.isfinite(value):
                logger.warning("non-finite loss at step %d (batch seed %s)", step, batch_seed)
                raise TrainingAborted(step, batch_seed, last_good, "non-finite loss")
            tape.backward(loss)
            for name, p in params.items():
                totals[name] += p.grad
            losses.append(value)

        grads = {name: total / len(batch) for name, total in totals.items()}
        try:
            adam_step(state, params, grads)
        except NonFiniteGradientError as exc:
            logger.warning("non-finite gradient at step %d (batch seed %s)", step, batch_seed)
            raise TrainingAborted(step, batch_seed, last_good, str(exc)) from exc
        clamp_parameters(params)

        mean_loss = float(np.mean(losses))
        logger.debug("step %d loss %.6f", step, mean_loss)
        row = LogRow(step=step, loss=mean_loss)
        if eval_data is not None and cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            metric, metric_value = monitor(model, cfg, eval_data)
            logger.info("step %d: %s = %.4f", step + 1, metric, metric_value)
            row = LogRow(step=step, loss=mean_loss, metric=metric, metric_value=metric_value)
        log.append(row)
        last_good = make_checkpoint(model, cfg, state, step + 1)

    return TrainResult(checkpoint=make_checkpoint(model, cfg, state, cfg.steps), log=log)


# --- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    value: float
    n_items: int
    ci95: float
    condition: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class MetricReport:
    task: str
    protocol: str
    condition: str
    records: tuple[MetricRecord, ...]

    def record(self, metric: str, condition: Optional[str] = None) -> MetricRecord:
        for item in self.records:
            if item.metric == metric and (condition is None or item.condition == condition):
                return item
        raise KeyError(f"no record for {metric} ({condition})")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "protocol": self.protocol,
            "condition": self.condition,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _summary(metric: str, values: Sequence[float], condition: str) -> MetricRecord:
    data = [v for v in values if np.isfinite(v)]
    mean = float(np.mean(data)) if data else float("nan")
    return MetricRecord(metric=metric, value=mean, n_items=len(data), ci95=ci95(data), condition=condition)


def snr_label(snr_db: float) -> str:
    return f"{snr_db:g}dB"


def _accuracies(
    model: Model,
    items: Sequence[ManifestItem],
    snr_db: Optional[float],
    noises: Sequence[ManifestItem],
    seed: int,
) -> list[float]:
    scores = []
    for index, item in enumerate(items):
        samples = item.waveform.samples
        if snr_db is not None:
            rng = np.random.default_rng([seed, index])
            noise = _noise_crop(noises, samples.size, rng)
            samples = mix_at_snr(item.waveform, Waveform(noise), snr_db).samples
        scores.append(accuracy(model.logits(samples), item.labels))
    return scores


def _sdr_scores(
    model: Model,
    targets: Sequence[ManifestItem],
    noises: Sequence[ManifestItem],
    cfg: TrainConfig,
    n_items: int,
    seed: int,
    snr_db: float,
    forced_mask: Optional[float],
) -> tuple[list[float], list[float]]:
    processed, unprocessed = [], []
    length = cfg.crop_samples
    for index in range(n_items):
        rng = np.random.default_rng([seed, index])
        item = targets[index % len(targets)]
        target, _ = _crop(item.waveform.samples, length, rng)
        noise = _noise_crop(noises, length, rng)
        mix = mix_at_snr(Waveform(target), Waveform(noise), snr_db).samples
        estimate = model.enhance(mix, forced_mask=forced_mask).value
        processed.append(si_sdr(estimate, target))
        unprocessed.append(si_sdr(mix, target))
    return processed, unprocessed


def evaluate_model(
    model: Model,
    cfg: TrainConfig,
    data: TrainingData,
    protocol: str,
    seed: int = 0,
    n_items: Optional[int] = None,
    condition: Optional[str] = None,
    snrs: Optional[Sequence[float]] = None,
    forced_mask: Optional[float] = None,
) -> MetricReport:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol '{protocol}', expected one of {', '.join(PROTOCOLS)}")
    wanted = "enhance" if protocol == "enhance0db" else "classify"
    if cfg.task != wanted:
        raise ValueError(f"protocol '{protocol}' evaluates task '{wanted}', checkpoint task is '{cfg.task}'")
    count = n_items or cfg.eval_items
    noises = data.noises()
    label = condition or "held-out"

    records: list[MetricRecord] = []
    if wanted == "classify":
        items = data.targets("classify")[:count]
        if not items:
            raise ValueError("empty manifest: nothing to evaluate")
        records.append(_summary("accuracy", _accuracies(model, items, None, noises, seed), "clean"))
        if protocol == "pink":
            for snr_db in snrs if snrs is not None else cfg.eval_snrs:
                scores = _accuracies(model, items, float(snr_db), noises, seed)
                records.append(_summary("accuracy", scores, snr_label(float(snr_db))))
    else:
        targets = data.targets("enhance")
        if not targets:
            raise ValueError("empty manifest: no target items to evaluate")
        processed, unprocessed = _sdr_scores(model, targets, noises, cfg, count, seed, 0.0, forced_mask)
        improvement = [p - u for p, u in zip(processed, unprocessed)]
        records.append(_summary("si_sdr", processed, label))
        records.append(_summary("si_sdr_mix", unprocessed, label))
        records.append(_summary("si_sdr_improvement", improvement, label))

    for record in records:
        logger.info("%s [%s]: %.4f +- %.4f (n=%d)", record.metric, record.condition, record.value, record.ci95, record.n_items)
    return MetricReport(task=cfg.task, protocol=protocol, condition=label, records=tuple(records))


def evaluate(
    ckpt: Checkpoint,
    manifest: Manifest,
    protocol: str,
    seed: int = 0,
    n_items: Optional[int] = None,
    condition: Optional[str] = None,
    noise_manifest: Optional[Manifest] = None,
    snrs: Optional[Sequence[float]] = None,
    forced_mask: Optional[float] = None,
) -> MetricReport:
    """Run a protocol on a checkpoint: ``clean`` / ``pink`` accuracies or ``enhance0db`` SI-SDR.

    Without a noise manifest the noisy conditions use seeded pink noise.
    """
    model, cfg = model_from_checkpoint(ckpt)
    data = TrainingData(main=manifest, noise=noise_manifest)
    return evaluate_model(model, cfg, data, protocol, seed, n_items, condition, snrs, forced_mask)


def monitor(model: Model, cfg: TrainConfig, data: TrainingData) -> tuple[str, float]:
    if cfg.task == "classify":
        report = evaluate_model(model, cfg, data, "clean", seed=cfg.seed)
        return "accuracy", report.record("accuracy").value
    report = evaluate_model(model, cfg, data, "enhance0db", seed=cfg.seed)
    return "si_sdr", report.record("si_sdr").value
