"""Command-line entry point: ``calclust {gen,init,train,eval,report}``.

Settings resolve as command-line flag > ``CDC_SEED`` (seed only) > config
file > built-in default. The config file is flat ``key = value`` text with
``#`` comments; a RunManifest JSON is accepted too, in which case its
``config`` block is used. Every command that writes files also writes
``<primary output>.manifest.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    MixtureSpec, check_companion, gen_mixture, load_checkpoint, read_csv, read_features,
    read_labels, save_checkpoint, write_features, write_labels,
)
from .errors import InvalidInputError
from .metrics import CalibrationReport, calibration_report, read_report_csv, write_report_csv
from .heads import encoder_forward
from .numerics import Rng
from .protoinit import alignment_rate, init_report
from .trainer import TrainConfig, head_probs, initialize, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

GEN_DEFAULTS = {"n": 10_000, "d": 64, "c": 10, "separation": 8.0, "seed": 0}
TRAIN_DEFAULTS = TrainConfig().to_dict()
KNOWN_KEYS = set(GEN_DEFAULTS) | set(TRAIN_DEFAULTS)


class UsageError(Exception):
    """Bad flags, config keys or values; maps to exit code 2."""


# --- config ------------------------------------------------------------------


def _coerce(key: str, value, default):
    """Convert a config-file value to the type of ``default``."""
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if default is None:  # optional real
            return None if text.lower() in ("", "none", "null") else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise UsageError(f"config key {key!r}: invalid value {text!r}") from None


def read_config(path) -> dict:
    """Raw key/value pairs from a flat config file or a RunManifest JSON."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        values = data.get("config", data)
        if not isinstance(values, dict):
            raise UsageError(f"{path}: 'config' must be an object")
    else:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return values


def resolve(defaults: dict, file_values: dict, flag_values: dict, env=None) -> dict:
    """Merge settings: flag > CDC_SEED (seed only) > config file > default."""
    env = os.environ if env is None else env
    out = dict(defaults)
    for key, value in file_values.items():
        if key in defaults:
            out[key] = _coerce(key, value, defaults[key])
    if "seed" in defaults and env.get("CDC_SEED") not in (None, ""):
        out["seed"] = _coerce("CDC_SEED", env["CDC_SEED"], defaults["seed"])
    for key, value in flag_values.items():
        if key in defaults:
            out[key] = value
    return out


# --- argument parsing --------------------------------------------------------


_FLAG_HELP = {
    "single_head": "ablation: select pseudo-labels with the clustering head and skip the calibration head",
    "no_init": "ablation: random head initialisation",
    "fixed_threshold": "ablation: select samples whose confidence >= TAU instead of dynamic budgets",
    "stop_gradient": "let the calibration loss reach the encoder (--no-stop-gradient)",
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training settings (override the config file)")
    for f in dataclasses.fields(TrainConfig):
        default = TRAIN_DEFAULTS[f.name]
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f.name, "default": argparse.SUPPRESS, "help": _FLAG_HELP.get(f.name)}
        if f.name == "stop_gradient":
            g.add_argument("--no-stop-gradient", action="store_false", **kw)
        elif f.name in ("no_init", "single_head"):
            g.add_argument(flag, action="store_true", **kw)
        elif isinstance(default, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "fixed_threshold":
            g.add_argument(flag, type=float, metavar="TAU", **kw)
        else:
            g.add_argument(flag, type=type(default), metavar=f.name.upper(), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calclust",
        description="Dual-head calibrated clustering over feature embeddings.",
        epilog="Precedence: flag > CDC_SEED (seed) > --config file > default. "
               "Exit codes: 0 ok, 1 runtime failure, 2 usage error.",
    )
    parser.add_argument("--version", action="version", version=f"calclust {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'key = value' file or a run manifest")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("gen", parents=[common], help="synthesise a Gaussian-mixture feature set")
    g = p.add_argument_group("mixture settings")
    g.add_argument("--n", type=int, default=argparse.SUPPRESS, help=f"samples (default {GEN_DEFAULTS['n']})")
    g.add_argument("--d", type=int, default=argparse.SUPPRESS, help=f"dimension (default {GEN_DEFAULTS['d']})")
    g.add_argument("--c", type=int, default=argparse.SUPPRESS, help=f"components (default {GEN_DEFAULTS['c']})")
    g.add_argument("--separation", type=float, default=argparse.SUPPRESS,
                   help=f"distance between centers (default {GEN_DEFAULTS['separation']})")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--features-out", required=True, metavar="PATH", help="CDCF output")
    p.add_argument("--labels-out", required=True, metavar="PATH", help="CDCL output")

    p = sub.add_parser("init", parents=[common], help="initialise both heads and write a checkpoint")
    p.add_argument("--features", required=True, metavar="PATH", help="CDCF or CSV features")
    p.add_argument("--labels", metavar="PATH", help="CDCL labels (enables the accuracy fields of the report)")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint output")
    p.add_argument("--report-out", metavar="PATH", help="init report JSON (default: <out>.init.json)")
    _add_train_flags(p)

    p = sub.add_parser("train", parents=[common], help="train (from scratch or from a checkpoint)")
    p.add_argument("--features", required=True, metavar="PATH")
    p.add_argument("--labels", metavar="PATH", help="CDCL labels for per-epoch metrics")
    p.add_argument("--checkpoint", metavar="PATH", help="start from this checkpoint instead of initialising")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint output")
    p.add_argument("--log-out", metavar="PATH", help="per-epoch CSV log (default: <out>.log.csv)")
    _add_train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="write a calibration report CSV")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--features", required=True, metavar="PATH")
    p.add_argument("--labels", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="report CSV output")
    p.add_argument("--head", choices=("cal", "clu"), help="head to evaluate (default: the prediction head)")
    p.add_argument("--ece-bins", dest="ece_bins", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("report", parents=[common], help="render SVG charts from a report CSV")
    p.add_argument("--report", required=True, metavar="PATH", help="report CSV from 'eval'")
    p.add_argument("--out-prefix", required=True, metavar="PREFIX",
                   help="writes PREFIX_reliability.svg and PREFIX_risk_coverage.svg")
    return parser


def _flag_values(args: argparse.Namespace, keys) -> dict:
    return {k: getattr(args, k) for k in keys if hasattr(args, k)}


# --- inputs ------------------------------------------------------------------


def load_features(path, labels_path=None):
    """Features (CDCF or ``.csv``) and, if available, labels checked against them."""
    labels = None
    if str(path).lower().endswith(".csv"):
        features, labels = read_csv(path)
    else:
        features = read_features(path)
    if labels_path is not None:
        labels = read_labels(labels_path)
    if labels is not None:
        check_companion(features, labels)
    return features, labels


def _train_config(args) -> TrainConfig:
    file_values = read_config(args.config) if args.config else {}
    values = resolve(TRAIN_DEFAULTS, file_values, _flag_values(args, TRAIN_DEFAULTS))
    try:
        config = TrainConfig.from_dict(values)
        config.validate()
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    return config


# --- SVG ---------------------------------------------------------------------


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>", ""])


def _axes(x0, y0, w, h, y_max, x_label, y_label) -> list[str]:
    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="black"/>']
    for i in range(6):
        t = i / 5
        px = x0 + t * w
        py = y0 + h - t * h
        out.append(f'<line x1="{px:.2f}" y1="{y0 + h}" x2="{px:.2f}" y2="{y0 + h + 4}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{y0 + h + 17}" text-anchor="middle">{t:.1f}</text>')
        out.append(f'<line x1="{x0 - 4}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 7}" y="{py + 4:.2f}" text-anchor="end">{t * y_max:.{_decimals(y_max)}f}</text>')
    out.append(f'<text x="{x0 + w / 2:.2f}" y="{y0 + h + 36}" text-anchor="middle">{x_label}</text>')
    out.append(f'<text x="{x0 - 44}" y="{y0 + h / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 {x0 - 44} {y0 + h / 2:.2f})">{y_label}</text>')
    return out


def _decimals(y_max: float) -> int:
    return 1 if y_max >= 0.5 else max(2, 1 - int(math.floor(math.log10(y_max / 5))))


def reliability_svg(report: CalibrationReport) -> str:
    """Per-bin accuracy bars, confidence-gap overlay, diagonal and ECE annotation."""
    x0, y0, w, h = 70, 40, 320, 320
    body = [f'<text x="{x0 + w / 2}" y="24" text-anchor="middle" font-size="14">Reliability diagram</text>']
    body += _axes(x0, y0, w, h, 1.0, "confidence", "accuracy")
    for b in report.bins:
        if b.count == 0:
            continue
        bx = x0 + b.lower * w
        bw = (b.upper - b.lower) * w
        top_acc = y0 + h - b.accuracy * h
        body.append(f'<rect x="{bx:.2f}" y="{top_acc:.2f}" width="{bw:.2f}" height="{b.accuracy * h:.2f}" '
                    f'fill="#3b6fb6" stroke="#1d3a63"/>')
        lo, hi = sorted((b.accuracy, b.confidence))
        body.append(f'<rect x="{bx:.2f}" y="{y0 + h - hi * h:.2f}" width="{bw:.2f}" height="{(hi - lo) * h:.2f}" '
                    f'fill="#d9534f" fill-opacity="0.35" stroke="#d9534f"/>')
    body.append(f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0}" stroke="gray" stroke-dasharray="4 3"/>')
    body.append(f'<text x="{x0 + 8}" y="{y0 + 18}">ECE = {100 * report.ece:.2f}%</text>')
    body.append(f'<text x="{x0 + 8}" y="{y0 + 34}">ACC = {100 * report.acc:.2f}%</text>')
    return _svg(420, 420, body)


def risk_coverage_svg(report: CalibrationReport) -> str:
    """Selective risk at each coverage point as bars, with the AURC annotation."""
    x0, y0, w, h = 70, 40, 320, 320
    risks = [r for _, r in report.coverage]
    y_max = max(max(risks, default=0.0), 1e-3)
    y_max = float(np.ceil(y_max * 1000) / 1000)
    body = [f'<text x="{x0 + w / 2}" y="24" text-anchor="middle" font-size="14">Risk-coverage curve</text>']
    body += _axes(x0, y0, w, h, y_max, "coverage", "risk")
    prev = 0.0
    for cov, risk in report.coverage:
        bx = x0 + prev * w
        bw = (cov - prev) * w
        bh = risk / y_max * h
        body.append(f'<rect x="{bx:.2f}" y="{y0 + h - bh:.2f}" width="{bw:.2f}" height="{bh:.2f}" '
                    f'fill="#3b6fb6" stroke="#1d3a63"/>')
        prev = cov
    body.append(f'<text x="{x0 + 8}" y="{y0 + 18}">AURC = {report.aurc:.4g}</text>')
    return _svg(420, 420, body)


# --- commands ----------------------------------------------------------------


def cmd_gen(args, manifest: dict) -> None:
    file_values = read_config(args.config) if args.config else {}
    values = resolve(GEN_DEFAULTS, file_values, _flag_values(args, GEN_DEFAULTS))
    spec = MixtureSpec(**values)
    try:
        spec.validate()
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    manifest.update(config=values, seed=spec.seed, outputs={"features": args.features_out, "labels": args.labels_out})
    x, y = gen_mixture(spec)
    write_features(args.features_out, x)
    write_labels(args.labels_out, y)
    log.info("wrote %d x %d features to %s", x.shape[0], x.shape[1], args.features_out)


def cmd_init(args, manifest: dict) -> None:
    config = _train_config(args)
    report_out = args.report_out or f"{args.out}.init.json"
    manifest.update(config=config.to_dict(), seed=config.seed,
                    inputs={"features": args.features, "labels": args.labels},
                    outputs={"checkpoint": args.out, "init_report": report_out})
    x, labels = load_features(args.features, args.labels)
    state, inits = initialize(x, config, return_inits=True)
    z = encoder_forward(state.encoder, x)
    report = {"epoch": 0, "heads": {}}
    for name, init in zip(("clu", "cal"), inits):
        if init is None:
            entry = {"alignment_rate": None}
        elif labels is None:
            entry = {"alignment_rate": alignment_rate(init.w1_prototypes, z)}
        else:
            entry = init_report(init, z, labels, config.n_classes, Rng(config.seed),
                                restarts=config.init_restarts).as_dict()
        if labels is not None:
            probs = head_probs(state, x, name)
            entry["head_summary"] = calibration_report(probs, labels, config.ece_bins).summary()
        report["heads"][name] = entry
    save_checkpoint(args.out, state)
    Path(report_out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _write_log(path, rows: list[dict]) -> None:
    keys = list(rows[0]) if rows else ["epoch", "selected"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])


def cmd_train(args, manifest: dict) -> None:
    config = _train_config(args)
    log_out = args.log_out or f"{args.out}.log.csv"
    manifest.update(config=config.to_dict(), seed=config.seed,
                    inputs={"features": args.features, "labels": args.labels, "checkpoint": args.checkpoint},
                    outputs={"checkpoint": args.out, "log": log_out})
    x, labels = load_features(args.features, args.labels)
    state = None
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        d, hdim, c = state.clu.dims
        if (d, hdim, c) != (x.shape[1], config.hidden, config.n_classes):
            raise InvalidInputError(
                f"checkpoint {args.checkpoint} has D={d}, H={hdim}, C={c}; "
                f"features/config give D={x.shape[1]}, H={config.hidden}, C={config.n_classes}"
            )
        state.config_digest = config.digest()
    state, history = train(x, config, labels=labels, state=state)
    save_checkpoint(args.out, state)
    _write_log(log_out, history)


def cmd_eval(args, manifest: dict) -> None:
    file_values = read_config(args.config) if args.config else {}
    values = resolve({"ece_bins": TRAIN_DEFAULTS["ece_bins"]}, file_values, _flag_values(args, ["ece_bins"]))
    if values["ece_bins"] < 1:
        raise UsageError("ece_bins must be >= 1")
    manifest.update(config=dict(values, head=args.head),
                    inputs={"checkpoint": args.checkpoint, "features": args.features, "labels": args.labels},
                    outputs={"report": args.out})
    state = load_checkpoint(args.checkpoint)
    x, labels = load_features(args.features, args.labels)
    head = args.head or state.predict_head
    d = state.clu.dims[0]
    if x.shape[1] != d:
        raise InvalidInputError(f"features have {x.shape[1]} columns, checkpoint expects {d}")
    report = calibration_report(head_probs(state, x, head), labels, values["ece_bins"])
    write_report_csv(args.out, report)
    log.info("acc=%.4f ece=%.4f", report.acc, report.ece)


def cmd_report(args, manifest: dict) -> None:
    rel = f"{args.out_prefix}_reliability.svg"
    risk = f"{args.out_prefix}_risk_coverage.svg"
    manifest.update(config={}, inputs={"report": args.report}, outputs={"reliability": rel, "risk_coverage": risk})
    report = read_report_csv(args.report)
    Path(rel).write_text(reliability_svg(report))
    Path(risk).write_text(risk_coverage_svg(report))


COMMANDS = {"gen": cmd_gen, "init": cmd_init, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}
_PRIMARY_OUTPUT = {"gen": "features_out", "init": "out", "train": "out", "eval": "out", "report": "out_prefix"}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version, usage errors
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                "version": __version__, "config": {}, "seed": None, "inputs": {}, "outputs": {},
                "started": _now()}
    status = EXIT_OK
    try:
        COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"calclust {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"calclust {args.command}: error: {exc}", file=sys.stderr)
        status = EXIT_RUNTIME
    manifest["finished"] = _now()
    manifest["exit_status"] = status
    path = f"{getattr(args, _PRIMARY_OUTPUT[args.command])}.manifest.json"
    try:
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"calclust {args.command}: error: cannot write manifest {path}: {exc}", file=sys.stderr)
        status = EXIT_RUNTIME
    return status


def main() -> None:
    sys.exit(run())
