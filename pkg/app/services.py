from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.analysis import ParamReport
from app.autodiff import DiffTensor, constant
from app.backends import (
    ClassifierNet,
    EnhancerNet,
    classify,
    cross_entropy,
    enhance,
    enhancement_loss,
)
from app.checkpoint import load_checkpoint
from app.frontend.cochlea import N_CHANNELS, n_frames
from app.frontend.cortex import CorticalParams
from app.frontend.params import FrontendParams, frontend_forward, init_frontend
from app.optim import GradCheckReport, GradCheckRow, grad_check
from app.signal_io import (
    SAMPLE_RATE,
    Waveform,
    gen_harmonic_complex,
    gen_moving_ripple,
    gen_pink_noise,
    mix_at_snr,
    to_rms,
    write_wav,
)
from app.training import LogRow, MetricReport, model_from_checkpoint, write_labels

logger = logging.getLogger(__name__)

GRADCHECK_SCOPES = ("frontend", "backend", "all")
GRADCHECK_CLASSES = 5
TOY_KINDS = ("toy-classify", "toy-enhance")
TOY_CLASSES = ("harmonic_150hz", "harmonic_300hz", "pink_noise")
PGM_DYNAMIC_RANGE_DB = 80.0


def _prepare_output(output_path) -> Path:
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(value: float) -> str:
    return "%.9g" % value


# --- frontend outputs -------------------------------------------------------


def load_frontend(params_path: str = "", cortical_init: str = "log", seed: int = 0) -> FrontendParams:
    """Frontend from a checkpoint, or a fresh full-model initialization."""
    if params_path:
        model, _ = model_from_checkpoint(load_checkpoint(params_path))
        return model.frontend
    return init_frontend("full", cortical_init, seed)


def export_spectrogram_csv(spec: np.ndarray, output_path: str) -> int:
    """One row per frame, columns ch0..ch128."""
    path = _prepare_output(output_path)
    with path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file, delimiter=",", quotechar='"', quoting=csv.QUOTE_MINIMAL)
        writer.writerow([f"ch{k}" for k in range(spec.shape[0])])
        for frame in spec.T:
            writer.writerow([_fmt(v) for v in frame])
    return spec.shape[1]


def export_spectrogram_pgm(spec: np.ndarray, output_path: str) -> Path:
    """8-bit binary PGM, time left to right, lowest channel at the bottom.

    Pixels are dB below the file maximum: 0 dB is white (255) and
    PGM_DYNAMIC_RANGE_DB below it or less is black.
    """
    path = _prepare_output(output_path)
    peak = float(spec.max()) if spec.size else 0.0
    if peak <= 0:
        scaled = np.zeros(spec.shape)
    else:
        floor = peak * 10.0 ** (-PGM_DYNAMIC_RANGE_DB / 20.0)
        db = 20.0 * np.log10(np.maximum(spec, floor) / peak)
        scaled = 1.0 + db / PGM_DYNAMIC_RANGE_DB
    pixels = np.round(255.0 * scaled[::-1]).astype(np.uint8)
    header = f"P5\n{spec.shape[1]} {spec.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    return path


def export_cortical_energy_csv(cortical: np.ndarray, cortex: CorticalParams, output_path: str) -> int:
    path = _prepare_output(output_path)
    energies = np.mean(cortical**2, axis=(1, 2))
    with path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["index", "omega_hz", "capital_omega_cpo", "sign", "energy"])
        for i, (scale, rate) in enumerate(cortex.pairs()):
            writer.writerow([i, repr(rate), repr(scale), -1 if rate < 0 else 1, repr(float(energies[i]))])
    return len(energies)


def export_cortical_dump_csv(cortical: np.ndarray, output_path: str) -> int:
    path = _prepare_output(output_path)
    n_filters, n_ch, n_t = cortical.shape
    with path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["filter", "channel", "frame", "value"])
        for f in range(n_filters):
            for k in range(n_ch):
                for n in range(n_t):
                    writer.writerow([f, k, n, _fmt(cortical[f, k, n])])
    return cortical.size


# --- analysis outputs -------------------------------------------------------


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}_{suffix}{path.suffix or '.csv'}")


def export_param_report(report: ParamReport, output_path: str) -> list[Path]:
    """Filter table at ``output_path``; cochlear and scalar tables next to it."""
    path = _prepare_output(output_path)
    written = []
    if report.filters:
        with path.open("w", newline="", encoding="utf-8") as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(["index", "omega_hz", "capital_omega_cpo", "sign", "init"])
            for row in report.filters:
                writer.writerow([row.index, repr(row.rate), repr(row.scale), row.sign, row.init])
        written.append(path)

    cochlea_path = _sibling(path, "cochlea")
    with cochlea_path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["channel", "center_hz", "alpha"])
        for row in report.cochlea:
            writer.writerow([row.channel, repr(row.center_hz), repr(row.alpha)])
    written.append(cochlea_path)

    scalars_path = _sibling(path, "scalars")
    with scalars_path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["name", "value"])
        for name, value in report.scalars:
            writer.writerow([name, repr(value)])
    written.append(scalars_path)
    return written


def export_profile_csv(energies: np.ndarray, ripples: Sequence[tuple[float, float]], output_path: str) -> int:
    path = _prepare_output(output_path)
    with path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["filter", "ripple_capital_omega_cpo", "ripple_omega_hz", "energy"])
        for i in range(energies.shape[0]):
            for j, (scale, rate) in enumerate(ripples):
                writer.writerow([i, repr(float(scale)), repr(float(rate)), repr(float(energies[i, j]))])
    return energies.size


# --- training outputs -------------------------------------------------------


def export_training_log(rows: Sequence[LogRow], output_path: str) -> int:
    path = _prepare_output(output_path)
    with path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["step", "loss", "metric", "metric_value"])
        for row in rows:
            value = "" if row.metric_value is None else repr(row.metric_value)
            writer.writerow([row.step, repr(row.loss), row.metric, value])
    return len(rows)


def export_report_json(report: MetricReport, output_path: str) -> Path:
    path = _prepare_output(output_path)
    path.write_text(report.to_json(), encoding="utf-8")
    return path


# --- synthetic stimuli and corpora ----------------------------------------------


def _toy_classify_item(cls: int, duration_s: float, rng: np.random.Generator) -> Waveform:
    if cls == 2:
        return gen_pink_noise(duration_s, int(rng.integers(2**31)))
    f0 = (150.0, 300.0)[cls] * (1.0 + 0.03 * (rng.random() - 0.5))
    return gen_harmonic_complex(f0, 10, duration_s)


def _toy_target(duration_s: float, rng: np.random.Generator) -> Waveform:
    f0 = 120.0 + 200.0 * rng.random()
    n_harmonics = min(10, int((SAMPLE_RATE / 2 - 1) // f0))
    weights = 1.0 / np.arange(1, n_harmonics + 1)
    return gen_harmonic_complex(f0, n_harmonics, duration_s, weights)


def build_toy_corpus(kind: str, out_dir: str, items: int, seed: int = 0, duration_s: float = 1.5) -> Path:
    """WAVs, frame labels and a manifest.json for the synthetic tasks; returns the manifest path."""
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown corpus kind '{kind}', expected one of {', '.join(TOY_KINDS)}")
    if items < 1:
        raise ValueError("items must be at least 1")
    root = Path(out_dir)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []

    if kind == "toy-classify":
        for i in range(items):
            cls = i % len(TOY_CLASSES)
            waveform = _toy_classify_item(cls, duration_s, rng)
            audio = f"audio/item_{i:04d}.wav"
            labels = f"labels/item_{i:04d}.csv"
            write_wav(root / audio, waveform)
            write_labels(root / labels, np.full(n_frames(len(waveform)), cls))
            entries.append({"audio": audio, "labels": labels})
        manifest = {"classes": list(TOY_CLASSES), "items": entries}
    else:
        for i in range(items):
            audio = f"audio/target_{i:04d}.wav"
            write_wav(root / audio, _toy_target(duration_s, rng))
            entries.append({"audio": audio, "role": "speech"})
        for i in range(items):
            audio = f"audio/noise_{i:04d}.wav"
            write_wav(root / audio, gen_pink_noise(duration_s, int(rng.integers(2**31))))
            entries.append({"audio": audio, "role": "noise"})
        manifest = {"classes": [], "items": entries}

    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("toy corpus %s: %d items in %s", kind, len(entries), root)
    return manifest_path


# --- gradient check ---------------------------------------------------------


def _random_input(seed: int, duration_s: float) -> np.ndarray:
    n = int(round(duration_s * SAMPLE_RATE))
    return to_rms(np.random.default_rng([seed, 3]).standard_normal(n))


def _sample_components(
    params: dict[str, DiffTensor], max_per_tensor: int, rng: np.random.Generator
) -> Optional[dict[str, list[tuple[int, ...]]]]:
    if max_per_tensor <= 0:
        return None
    chosen: dict[str, list[tuple[int, ...]]] = {}
    for name, tensor in params.items():
        if tensor.size <= max_per_tensor:
            continue
        flat = np.sort(rng.choice(tensor.size, size=max_per_tensor, replace=False))
        chosen[name] = [tuple(int(i) for i in np.unravel_index(k, tensor.shape)) for k in flat]
    return chosen


def _prefixed(prefix: str, named: dict[str, DiffTensor]) -> dict[str, DiffTensor]:
    return {f"{prefix}/{name}": tensor for name, tensor in named.items()}


def run_gradcheck(
    scope: str = "all",
    seed: int = 0,
    tol: float = 1e-4,
    atol: float = 1e-8,
    cortical_init: str = "random",
    duration_s: float = 0.25,
    max_per_tensor: int = 0,
) -> GradCheckReport:
    """Finite-difference check of both task losses on a short random input.

    ``frontend`` covers the 212 frontend scalars, ``backend`` every backend
    weight (frontend features cached), ``all`` both. ``max_per_tensor`` > 0
    samples that many components from each larger backend tensor.
    """
    if scope not in GRADCHECK_SCOPES:
        raise ValueError(f"unknown scope '{scope}', expected one of {', '.join(GRADCHECK_SCOPES)}")
    samples = constant(_random_input(seed, duration_s))
    target = constant(gen_harmonic_complex(200.0, 10, duration_s).samples[: samples.shape[0]])
    mix = constant(mix_at_snr(Waveform(target.value), Waveform(samples.value), 0.0).samples)
    frontend = init_frontend("full", cortical_init, seed)
    classifier = ClassifierNet.initial(GRADCHECK_CLASSES, seed=seed)
    enhancer = EnhancerNet.initial(seed=seed)
    # zero head biases give uniform logits; a random draw keeps the check away from symmetric points
    rng = np.random.default_rng([seed, 4])
    classifier.head_bias.value = rng.normal(0.0, 0.1, classifier.head_bias.shape)
    labels = rng.integers(0, GRADCHECK_CLASSES, size=n_frames(samples.shape[0]))

    cached_clean = constant(frontend_forward(samples, frontend).value)
    cached_mix = constant(frontend_forward(mix, frontend).value)

    rows: list[GradCheckRow] = []
    heads = (
        (
            "classify",
            classifier,
            lambda: cross_entropy(classify(frontend_forward(samples, frontend), classifier), labels),
            lambda: cross_entropy(classify(cached_clean, classifier), labels),
        ),
        (
            "enhance",
            enhancer,
            lambda: enhancement_loss(enhance(mix, frontend, enhancer)[0], target),
            lambda: enhancement_loss(enhance(mix, frontend, enhancer, features=cached_mix)[0], target),
        ),
    )
    for head, net, full_loss, backend_loss in heads:
        if scope in ("frontend", "all"):
            params = _prefixed(f"{head}:frontend", frontend.tensors())
            logger.info("gradcheck %s head, frontend: %d scalars", head, sum(p.size for p in params.values()))
            rows.extend(grad_check(full_loss, params, tol=tol, atol=atol).rows)
        if scope in ("backend", "all"):
            params = _prefixed(f"{head}:backend", net.tensors())
            components = _sample_components(params, max_per_tensor, rng)
            logger.info("gradcheck %s head, backend: %d tensors", head, len(params))
            rows.extend(grad_check(backend_loss, params, tol=tol, atol=atol, components=components).rows)
        if scope == "frontend":
            # the frontend scalars are identical for both heads; one head covers them
            break
    return GradCheckReport(rows=tuple(rows), tol=tol)


def synth_stimulus(
    kind: str,
    output_path: str,
    duration_s: float = 1.0,
    seed: int = 0,
    f0: float = 200.0,
    n_harmonics: int = 10,
    scale: float = 1.0,
    rate: float = 4.0,
) -> Path:
    path = Path(output_path)
    if kind == "pink":
        write_wav(path, gen_pink_noise(duration_s, seed))
    elif kind == "harmonic":
        write_wav(path, gen_harmonic_complex(f0, n_harmonics, duration_s))
    elif kind == "ripple":
        export_spectrogram_csv(gen_moving_ripple(scale, rate, duration_s, n_channels=N_CHANNELS), str(path))
    else:
        raise ValueError(f"unknown stimulus kind '{kind}'")
    return path
