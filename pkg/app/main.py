from __future__ import annotations

import argparse
import logging
import re
import sys
from typing import Optional, Sequence

from app import __version__
from app.analysis import export_params, log_ripple_grid, modulation_profile
from app.checkpoint import load_checkpoint, save_checkpoint
from app.config import LOG_LEVELS, Settings, load_settings
from app.frontend.cochlea import auditory_spectrogram
from app.frontend.cortex import INIT_MODES, cortical_forward, init_cortical
from app.frontend.params import ABLATIONS
from app.services import (
    GRADCHECK_SCOPES,
    build_toy_corpus,
    export_cortical_dump_csv,
    export_cortical_energy_csv,
    export_param_report,
    export_profile_csv,
    export_report_json,
    export_spectrogram_csv,
    export_spectrogram_pgm,
    export_training_log,
    load_frontend,
    run_gradcheck,
    synth_stimulus,
)
from app.signal_io import read_wav
from app.training import TASKS, TrainConfig, TrainingAborted, TrainingData, evaluate, load_manifest, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)-7s | %(name)s | %(message)s"
SYNTH_KINDS = ("pink", "harmonic", "ripple", "toy-classify", "toy-enhance")
PROTOCOL_PATTERN = re.compile(r"^(clean|pink|enhance0db)(?:\[([^\]]*)\])?$")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: erro: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(
        prog="audfront",
        description="Frontend auditivo diferenciavel: espectrograma, filtros corticais, treino e avaliacao.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default="", help="JSON de parametros padrao (senao AUDFRONT_CONFIG no .env).")
    parser.add_argument("--log-level", default="", choices=("",) + LOG_LEVELS, help="Nivel de log (stderr).")

    subparsers = parser.add_subparsers(dest="command", required=True)
    common = {"formatter_class": argparse.ArgumentDefaultsHelpFormatter}

    spec = subparsers.add_parser("spectrogram", help="Exporta o espectrograma auditivo (129 canais, 200 Hz).", **common)
    spec.add_argument("--in", dest="input", required=True, help="WAV de entrada (16 kHz).")
    spec.add_argument("--out", required=True, help="CSV de saida (uma linha por quadro).")
    spec.add_argument("--pgm", default="", help="Imagem PGM opcional.")
    spec.add_argument("--params", default="", help="Checkpoint com parametros aprendidos.")
    spec.add_argument("--seed", type=int, default=0, help="Semente.")

    cort = subparsers.add_parser("cortical", help="Energia por filtro cortical (e dump completo opcional).", **common)
    cort.add_argument("--in", dest="input", required=True, help="WAV de entrada (16 kHz).")
    cort.add_argument("--out", required=True, help="CSV de energia por filtro.")
    cort.add_argument("--init", default="log", choices=INIT_MODES, help="Inicializacao dos filtros.")
    cort.add_argument("--seed", type=int, default=0, help="Semente da inicializacao aleatoria.")
    cort.add_argument("--params", default="", help="Checkpoint com parametros aprendidos.")
    cort.add_argument("--dump", default="", help="CSV com o tensor completo (filter,channel,frame,value).")
    cort.add_argument("--strict-support", action="store_true", help="Erro se a entrada for menor que o maior filtro.")

    tr = subparsers.add_parser("train", help="Treina frontend + backend com Adam.", **common)
    tr.add_argument("--task", required=True, choices=TASKS, help="Tarefa.")
    tr.add_argument("--ablation", default="full", choices=ABLATIONS, help="Modo de ablacao.")
    tr.add_argument("--init", default="log", choices=INIT_MODES, help="Inicializacao cortical.")
    tr.add_argument("--manifest", required=True, help="Manifesto JSON de treino.")
    tr.add_argument("--noise-manifest", default="", help="Manifesto de ruido (senao ruido rosa).")
    tr.add_argument("--eval-manifest", default="", help="Manifesto para avaliacao periodica.")
    tr.add_argument("--steps", type=int, default=None, help="Passos (padrao da configuracao).")
    tr.add_argument("--seed", type=int, default=0, help="Semente.")
    tr.add_argument("--lr", type=float, default=None, help="Taxa de aprendizado (padrao da configuracao).")
    tr.add_argument("--batch", type=int, default=None, help="Exemplos por passo (padrao da configuracao).")
    tr.add_argument("--snr-db", type=float, default=None, help="SNR da mistura de realce.")
    tr.add_argument("--train-snr-db", type=float, default=None, help="Treino ruidoso de classificacao.")
    tr.add_argument("--resume", default="", help="Checkpoint para continuar o treino.")
    tr.add_argument("--out", required=True, help="Checkpoint de saida.")
    tr.add_argument("--log", default="", help="CSV com perda por passo.")

    ev = subparsers.add_parser("eval", help="Avalia um checkpoint num protocolo.", **common)
    ev.add_argument("--ckpt", required=True, help="Checkpoint.")
    ev.add_argument("--manifest", required=True, help="Manifesto de teste.")
    ev.add_argument("--protocol", required=True, help="clean | pink[-3,0,3] | enhance0db")
    ev.add_argument("--noise-manifest", default="", help="Manifesto de ruido (senao ruido rosa).")
    ev.add_argument("--condition", default="", help="Rotulo da condicao (ex.: new-noise).")
    ev.add_argument("--items", type=int, default=None, help="Amostras avaliadas (padrao da configuracao).")
    ev.add_argument("--forced-mask", type=float, default=None, help="Mascara constante (linha de base).")
    ev.add_argument("--seed", type=int, default=0, help="Semente.")
    ev.add_argument("--out", required=True, help="Relatorio JSON.")

    gc = subparsers.add_parser("gradcheck", help="Confere gradientes por diferencas finitas.", **common)
    gc.add_argument("--scope", default="all", choices=GRADCHECK_SCOPES, help="Parametros conferidos.")
    gc.add_argument("--seed", type=int, default=0, help="Semente.")
    gc.add_argument("--tol", type=float, default=1e-4, help="Erro relativo maximo.")
    gc.add_argument("--atol", type=float, default=1e-8, help="Piso absoluto para gradientes quase nulos.")
    gc.add_argument("--init", default="random", choices=INIT_MODES, help="Inicializacao cortical.")
    gc.add_argument("--max-per-tensor", type=int, default=0, help="Amostra por tensor do backend (0 = todos).")

    ex = subparsers.add_parser("export-params", help="Exporta parametros aprendidos em CSV.", **common)
    ex.add_argument("--ckpt", required=True, help="Checkpoint.")
    ex.add_argument("--out", required=True, help="CSV dos filtros corticais.")

    sy = subparsers.add_parser("synth", help="Gera estimulos de teste ou corpora sinteticos.", **common)
    sy.add_argument("--kind", required=True, choices=SYNTH_KINDS, help="Tipo de estimulo.")
    sy.add_argument("--out", default="", help="WAV (pink, harmonic) ou CSV (ripple).")
    sy.add_argument("--out-dir", default="", help="Pasta do corpus (toy-*).")
    sy.add_argument("--items", type=int, default=60, help="Itens do corpus (toy-*).")
    sy.add_argument("--duration", type=float, default=1.0, help="Duracao em segundos.")
    sy.add_argument("--seed", type=int, default=0, help="Semente.")
    sy.add_argument("--f0", type=float, default=200.0, help="Fundamental (harmonic).")
    sy.add_argument("--harmonics", type=int, default=10, help="Numero de harmonicos (harmonic).")
    sy.add_argument("--scale", type=float, default=1.0, help="Modulacao espectral em ciclos/oitava (ripple).")
    sy.add_argument("--rate", type=float, default=4.0, help="Modulacao temporal em Hz, com sinal (ripple).")

    pr = subparsers.add_parser("profile", help="Energia de cada filtro para sondas de ripple.", **common)
    pr.add_argument("--out", required=True, help="CSV filtros x sondas.")
    pr.add_argument("--ckpt", default="", help="Checkpoint (senao inicializacao nova).")
    pr.add_argument("--init", default="log", choices=INIT_MODES, help="Inicializacao cortical.")
    pr.add_argument("--seed", type=int, default=0, help="Semente.")
    pr.add_argument("--duration", type=float, default=2.0, help="Duracao das sondas em segundos.")
    pr.add_argument("--amplitude", type=float, default=1.0, help="Amplitude das sondas.")

    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(level)


def _parse_protocol(text: str) -> tuple[str, Optional[list[float]]]:
    match = PROTOCOL_PATTERN.match(text.replace(" ", ""))
    if match is None:
        raise ValueError(f"Protocolo invalido '{text}'. Use clean, pink, pink[-3,0,3] ou enhance0db.")
    name, snrs = match.groups()
    if snrs is None:
        return name, None
    if name != "pink":
        raise ValueError(f"Protocolo '{name}' nao aceita lista de SNR.")
    return name, [float(v) for v in snrs.split(",") if v]


def _cmd_spectrogram(args, settings: Settings) -> int:
    waveform = read_wav(args.input)
    frontend = load_frontend(args.params, seed=args.seed)
    spec = auditory_spectrogram(waveform, frontend.cochlea).value
    rows = export_spectrogram_csv(spec, args.out)
    print(f"Arquivo gerado: {args.out} ({rows} linhas)")
    if args.pgm:
        export_spectrogram_pgm(spec, args.pgm)
        print(f"Arquivo gerado: {args.pgm}")
    return EXIT_OK


def _cmd_cortical(args, settings: Settings) -> int:
    waveform = read_wav(args.input)
    frontend = load_frontend(args.params, args.init, args.seed)
    if frontend.cortex is None:
        raise ValueError("Checkpoint sem estagio cortical (ablacao cnn).")
    spec = auditory_spectrogram(waveform, frontend.cochlea)
    cortical = cortical_forward(spec, frontend.cortex, clip_support=not args.strict_support).value
    rows = export_cortical_energy_csv(cortical, frontend.cortex, args.out)
    print(f"Arquivo gerado: {args.out} ({rows} linhas)")
    if args.dump:
        count = export_cortical_dump_csv(cortical, args.dump)
        print(f"Arquivo gerado: {args.dump} ({count} linhas)")
    return EXIT_OK


def _cmd_train(args, settings: Settings) -> int:
    manifest = load_manifest(args.manifest)
    noise = load_manifest(args.noise_manifest) if args.noise_manifest else None
    cfg = TrainConfig(
        task=args.task,
        ablation=args.ablation,
        cortical_init=args.init,
        seed=args.seed,
        lr=settings.lr if args.lr is None else args.lr,
        batch=settings.batch if args.batch is None else args.batch,
        steps=settings.steps if args.steps is None else args.steps,
        snr_db=settings.snr_db if args.snr_db is None else args.snr_db,
        eval_snrs=settings.eval_snrs,
        eval_every=settings.eval_every,
        eval_items=settings.eval_items,
        crop_seconds=settings.crop_seconds,
        train_snr_db=args.train_snr_db,
        n_classes=len(manifest.classes) if args.task == "classify" else 0,
    )
    resume = load_checkpoint(args.resume) if args.resume else None
    eval_data = TrainingData(load_manifest(args.eval_manifest), noise) if args.eval_manifest else None
    try:
        result = train(cfg, TrainingData(manifest, noise), resume=resume, eval_data=eval_data)
    except TrainingAborted as exc:
        save_checkpoint(args.out, exc.last_good)
        print(f"Checkpoint do ultimo passo valido salvo em: {args.out}", file=sys.stderr)
        raise
    save_checkpoint(args.out, result.checkpoint)
    print(f"Checkpoint gerado: {args.out} (passo {result.checkpoint.step})")
    if args.log:
        rows = export_training_log(result.log, args.log)
        print(f"Arquivo gerado: {args.log} ({rows} linhas)")
    return EXIT_OK


def _cmd_eval(args, settings: Settings) -> int:
    protocol, snrs = _parse_protocol(args.protocol)
    report = evaluate(
        load_checkpoint(args.ckpt),
        load_manifest(args.manifest),
        protocol,
        seed=args.seed,
        n_items=args.items,
        condition=args.condition or None,
        noise_manifest=load_manifest(args.noise_manifest) if args.noise_manifest else None,
        snrs=snrs,
        forced_mask=args.forced_mask,
    )
    export_report_json(report, args.out)
    for record in report.records:
        print(f"{record.metric} [{record.condition}]: {record.value:.4f} +- {record.ci95:.4f} (n={record.n_items})")
    print(f"Arquivo gerado: {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args, settings: Settings) -> int:
    report = run_gradcheck(
        scope=args.scope,
        seed=args.seed,
        tol=args.tol,
        atol=args.atol,
        cortical_init=args.init,
        max_per_tensor=args.max_per_tensor,
    )
    print(f"{'parametro':<48} {'indice':<14} {'analitico':>14} {'numerico':>14} {'erro_rel':>10}  status")
    for row in report.rows:
        index = ",".join(str(i) for i in row.index) or "-"
        print(
            f"{row.name:<48} {index:<14} {row.analytic:>14.6e} {row.numeric:>14.6e} "
            f"{row.rel_error:>10.2e}  {row.status}"
        )
    failures = len(report.failures)
    print(f"{len(report.rows)} componentes, {failures} falhas (tol {args.tol:g})")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_export_params(args, settings: Settings) -> int:
    report = export_params(load_checkpoint(args.ckpt))
    if report.notice:
        print(f"Aviso: {report.notice}", file=sys.stderr)
    for path in export_param_report(report, args.out):
        print(f"Arquivo gerado: {path}")
    return EXIT_OK


def _cmd_synth(args, settings: Settings) -> int:
    if args.kind.startswith("toy-"):
        if not args.out_dir:
            raise ValueError("Informe --out-dir para gerar um corpus.")
        manifest = build_toy_corpus(args.kind, args.out_dir, args.items, seed=args.seed)
        print(f"Manifesto gerado: {manifest}")
        return EXIT_OK
    if not args.out:
        raise ValueError("Informe --out para gerar o estimulo.")
    path = synth_stimulus(
        args.kind,
        args.out,
        duration_s=args.duration,
        seed=args.seed,
        f0=args.f0,
        n_harmonics=args.harmonics,
        scale=args.scale,
        rate=args.rate,
    )
    print(f"Arquivo gerado: {path}")
    return EXIT_OK


def _cmd_profile(args, settings: Settings) -> int:
    source = load_checkpoint(args.ckpt) if args.ckpt else init_cortical(args.init, args.seed)
    ripples = log_ripple_grid()
    energies = modulation_profile(source, ripples, duration_s=args.duration, amplitude=args.amplitude)
    rows = export_profile_csv(energies, ripples, args.out)
    print(f"Arquivo gerado: {args.out} ({rows} linhas)")
    return EXIT_OK


COMMANDS = {
    "spectrogram": _cmd_spectrogram,
    "cortical": _cmd_cortical,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "export-params": _cmd_export_params,
    "synth": _cmd_synth,
    "profile": _cmd_profile,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (None, 0) else EXIT_USAGE

    try:
        settings = load_settings(args.config)
        _configure_logging(args.log_level or settings.log_level)
        logger.debug("command %s", args.command)
        return COMMANDS[args.command](args, settings)
    except Exception as exc:  # noqa: BLE001
        print(f"Erro: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(run())
