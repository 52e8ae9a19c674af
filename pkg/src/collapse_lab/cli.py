"""Command line entry point: ``collapse-lab <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as datamod
from . import harness
from .config import ConfigError, RunConfig, load_config
from .network import CheckpointError, load_checkpoint
from .numerics import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DEFAULT_OUT = "collapse-lab-out"

log = logging.getLogger("collapse_lab")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collapse-lab", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, help="override run.seed and data.seed")
    p.add_argument("--out-dir", help="override run.output_dir")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)

    for name, text in (("train", "train one model and write run files"),
                       ("imbalanced", "long-tailed run with Many/Median/Few accuracies"),
                       ("ablation", "AM-mixup component grid over several seeds")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True)
        if name == "ablation":
            sp.add_argument("--seeds", default="0,1,2,3,4", help="comma separated seed list")

    sp = sub.add_parser("transfer", help="coarse pretraining, frozen-encoder fine classifier")
    sp.add_argument("--pretrain", required=True)
    sp.add_argument("--finetune", required=True)

    sp = sub.add_parser("dump-features", help="per-sample features and confidence as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset file (.bin or .csv)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid-resolution", type=int, default=0)
    return p


def _load(path: str, args) -> RunConfig:
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_overrides(run={"seed": args.seed}, data={"seed": args.seed})
    if args.out_dir:
        cfg = cfg.with_overrides(run={"output_dir": args.out_dir})
    return cfg.validate()


def _out_dir(cfg: RunConfig, command: str) -> Path:
    return Path(cfg.run.output_dir or Path(DEFAULT_OUT) / command)


def _maybe_dump(cfg: RunConfig, result: harness.RunResult, ds: datamod.LabeledDataset, out: Path) -> None:
    if cfg.run.dump_features:
        harness.dump_features(result.model, ds, out / "features.csv", cfg.run.grid_resolution, out / "grid.csv")


def _summary(report) -> str:
    parts = []
    for k, v in report.to_dict().items():
        parts.append(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def cmd_train(args) -> None:
    cfg = _load(args.config, args)
    splits = harness.load_data(cfg)
    result = harness.run_imbalanced(cfg, splits)
    out = harness.save_run(_out_dir(cfg, args.command), result, cfg)
    _maybe_dump(cfg, result, harness.metric_split(cfg, splits), out)
    log.info("wrote %s", out)
    log.info("%s", _summary(result.report))


def cmd_transfer(args) -> None:
    pre, fin = _load(args.pretrain, args), _load(args.finetune, args)
    splits = harness.load_data(pre)
    result = harness.run_coarse_to_fine(pre, fin, splits)
    out = harness.save_run(_out_dir(pre, "transfer"), result, pre)
    harness.write_history(result.extra["pretrain_history"], out / "pretrain_history.csv")
    harness.write_history(result.extra["finetune_history"], out / "finetune_history.csv")
    (out / "finetune_config.txt").write_text(fin.to_text())
    _maybe_dump(pre, result, splits.test, out)
    log.info("wrote %s", out)
    log.info("%s", _summary(result.report))


def cmd_ablation(args) -> None:
    cfg = _load(args.config, args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds", f"expected integers, got {args.seeds!r}") from None
    rows = harness.run_ablation(cfg, seeds, splits=None)
    out = _out_dir(cfg, "ablation")
    out.mkdir(parents=True, exist_ok=True)
    harness.write_rows(rows, out / "ablation.csv")
    (out / "config.txt").write_text(cfg.to_text())
    log.info("wrote %s", out / "ablation.csv")
    for r in rows:
        log.info("%s OL=%s LL=%s seed=%d all=%.4f few=%s", r["rate"], r["one_sided"], r["last_layer_only"],
                 r["seed"], r["acc_all"], r["acc_few"])


def cmd_dump_features(args) -> None:
    model = load_checkpoint(args.checkpoint)
    ds = datamod.load_csv(args.data) if args.data.endswith(".csv") else datamod.load(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.dump_features(model, ds, out, args.grid_resolution)
    log.info("wrote %d rows to %s", len(ds), out)


COMMANDS = {
    "train": cmd_train,
    "imbalanced": cmd_train,
    "transfer": cmd_transfer,
    "ablation": cmd_ablation,
    "dump-features": cmd_dump_features,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (OSError, datamod.DataFormatError, CheckpointError) as e:
        log.error("io error: %s", e)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
