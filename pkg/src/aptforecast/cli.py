"""Command-line entry point.

    aptforecast train --config etth1.cfg --apt on --wo-deapt
    aptforecast report missing --data ETTh1.csv --freq hourly
    aptforecast synth --days 140 --freq hourly --channels 2 --seed 1 --out synth.csv
    aptforecast transfer --from run/checkpoint.txt --config target.cfg --finetune-epochs 1

Exit codes: 0 success, 2 I/O, 64 usage, 70 internal error or divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import LoadError, js_divergence_report, load_csv, missing_rate_report, synthesize, write_csv
from .tensor import ContractError
from .trainer import Batcher, DivergenceError, MetricsReport, Pipeline, joint_train, pretrain_apt

logger = logging.getLogger("aptforecast")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 64, 70
RESULTS_COLUMNS = ["dataset", "backbone", "norm", "apt", "H", "seed", "MAE", "MSE", "runtime_s"]

# CLI flag -> config key, one per ablation
ABLATION_FLAGS = {
    "wo_topk": "wo_topk",
    "wo_prototype": "wo_prototype",
    "wo_deapt": "wo_deapt",
    "wo_gamma": "wo_gamma",
    "wo_beta": "wo_beta",
    "wo_orth": "wo_orth",
    "wo_balance": "wo_balance",
    "wo_reg": "wo_reg",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--apt", type=_on_off)
    p.add_argument("--norm", choices=["none", "revin"])
    p.add_argument("--revin-affine", type=_on_off)
    p.add_argument("--backbone", choices=["linear", "sparsetsf"])
    p.add_argument("--period", type=int)
    p.add_argument("--data")
    p.add_argument("--l", dest="L", type=int)
    p.add_argument("--h", dest="H", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-backbone", type=float)
    p.add_argument("--lr-apt", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--channel-identity", action="store_true", default=None)
    for flag in ABLATION_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true", default=None)
    p.add_argument("--wo-lambda", action="store_true", help="APT shares the backbone learning rate")
    p.add_argument("--wo-loss-apt", action="store_true", help="skip APT pretraining")
    p.add_argument("--out", help="results root (default $APT_RESULTS_DIR or ./results)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aptforecast", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="pretrain APT (if on) and train the forecasting stack")
    p.add_argument("--config", required=True)
    _add_overrides(p)

    p = sub.add_parser("report", help="dataset diagnostics as CSV")
    p.add_argument("kind", choices=["missing", "js"])
    p.add_argument("--data", required=True)
    p.add_argument("--freq", default="hourly")
    p.add_argument("--label", default="diw")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--zero-values", default="0", help="comma separated fill values counted as zero-fill")
    p.add_argument("--exclude-zero", default="", help="comma separated channels whose zeros are genuine")
    p.add_argument("--out")

    p = sub.add_parser("synth", help="write a weekday-shifted synthetic dataset")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--freq", default="hourly")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("transfer", help="reuse APT parameters in another setting and fine-tune")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--finetune-epochs", type=int, default=1)
    p.add_argument("--base", help="checkpoint of an already trained target pipeline")
    _add_overrides(p)
    return parser


# helpers -------------------------------------------------------------------

def results_root(args) -> Path:
    return Path(args.out or os.environ.get("APT_RESULTS_DIR") or "results")


def config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for key in ("apt", "norm", "revin_affine", "backbone", "period", "data", "L", "H", "seed", "epochs",
                "pretrain_epochs", "batch_size", "lr_backbone", "lr_apt", "lam", "channel_identity",
                *ABLATION_FLAGS.values()):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "wo_lambda", False):
        overrides["lam"] = 1.0
    if getattr(args, "wo_loss_apt", False):
        overrides["pretrain_epochs"] = 0
    cfg = load_config(args.config, overrides)
    if not cfg.data:
        raise ConfigError("config does not name a dataset ('data = <path>')")
    if not Path(cfg.data).is_file():
        raise FileNotFoundError(f"dataset not found: {cfg.data}")
    return cfg


def run_name(cfg: ExperimentConfig, tag: str = "") -> str:
    flags = [k for k in ABLATION_FLAGS.values() if getattr(cfg, k)]
    if cfg.pretrain_epochs == 0 and cfg.apt:
        flags.append("wo_loss_apt")
    parts = [cfg.dataset_name, cfg.backbone, cfg.norm, "apt" if cfg.apt else "noapt", f"H{cfg.H}", f"seed{cfg.seed}"]
    return "_".join(parts + flags + ([tag] if tag else []))


def results_row(cfg: ExperimentConfig, report: MetricsReport, runtime: float) -> list[str]:
    return [cfg.dataset_name, cfg.backbone, cfg.norm, "on" if cfg.apt else "off", str(cfg.H), str(cfg.seed),
            repr(report.mae["test"]), repr(report.mse["test"]), f"{runtime:.3f}"]


def append_results(root: Path, row: list[str]) -> Path:
    path = root / "results.csv"
    new = not path.exists()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if new:
        w.writerow(RESULTS_COLUMNS)
    w.writerow(row)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    return path


def write_run(root: Path, name: str, cfg: ExperimentConfig, report: MetricsReport, pipe: Pipeline,
              runtime: float, pretrained: dict | None = None, extra: dict | None = None) -> Path:
    run_dir = root / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    checkpoint.save(run_dir / "checkpoint.txt", pipe.state_arrays())
    outputs = ["config.txt", "checkpoint.txt", "metrics.json", "manifest.json"]
    if pretrained is not None:
        checkpoint.save(run_dir / "apt_pretrained.txt", pretrained)
        outputs.append("apt_pretrained.txt")
    metrics = report.to_dict()
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = {
        "config": cfg.to_text(),
        "seed": cfg.seed,
        "version": __version__,
        "runtime_s": runtime,
        "outputs": [str(run_dir / o) for o in outputs],
        **(extra or {}),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    append_results(root, results_row(cfg, report, runtime))
    print(json.dumps({"run": name, "seed": cfg.seed, "mae": report.mae, "mse": report.mse}, sort_keys=True))
    return run_dir


# commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = config_from_args(args)
    root = results_root(args)
    started = time.perf_counter()
    ds = load_csv(cfg.data, cfg.frequency, cfg.split)
    pipe = Pipeline(cfg, ds.n_channels)
    batcher = Batcher(ds, cfg.L, cfg.H)
    trace = pretrain_apt(pipe, batcher)
    pretrained = pipe.apt.state_arrays() if pipe.apt is not None else None
    report = joint_train(pipe, batcher)
    report.pretrain_trace = trace
    write_run(root, run_name(cfg), cfg, report, pipe, time.perf_counter() - started, pretrained)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = config_from_args(args).replace(apt=True)
    root = results_root(args)
    source = checkpoint.load(args.source)
    started = time.perf_counter()
    ds = load_csv(cfg.data, cfg.frequency, cfg.split)
    pipe = Pipeline(cfg, ds.n_channels)
    skipped = []
    if args.base:
        skipped = pipe.load_arrays(checkpoint.load(args.base), strict=False)
    pipe.apt.load_arrays({k: v for k, v in source.items() if k.startswith("apt.")})
    if not args.base:
        # reuse source backbone/normalisation blocks where they fit this setting
        skipped = pipe.load_arrays(source, strict=False)
    batcher = Batcher(ds, cfg.L, cfg.H)
    report = joint_train(pipe, batcher, epochs=args.finetune_epochs)
    extra = {"source": str(args.source), "base": args.base, "fresh_blocks": skipped,
             "finetune_epochs": args.finetune_epochs}
    write_run(root, run_name(cfg, "transfer"), cfg, report, pipe, time.perf_counter() - started, extra=extra)
    return EXIT_OK


def cmd_report(args) -> int:
    ds = load_csv(args.data, args.freq, (1, 0, 0))
    if args.kind == "missing":
        zero_values = [float(v) for v in args.zero_values.split(",") if v.strip()]
        exclude = [c.strip() for c in args.exclude_zero.split(",") if c.strip()]
        text = missing_rate_report(ds, zero_values, exclude).to_csv()
    else:
        text = js_divergence_report(ds, args.label, args.bins).to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synthesize(args.days, args.freq, args.channels, args.seed)
    write_csv(ds, args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "report": cmd_report, "synth": cmd_synth, "transfer": cmd_transfer}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ContractError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
