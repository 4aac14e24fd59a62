"""``mmlatch`` command line: generate | train | eval | masks.

Every command writes under ``--out``. Failures print a single
``ErrorClass: message`` line on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import MODALITIES, SPLITS, DatasetSplits, generate_gated_dataset, load_dataset, save_dataset
from .model import export_mask_heatmap
from .training import SeedRun, TrainConfig, TrainingDiverged, build_model, evaluate, history_csv, summarize, train

logger = logging.getLogger("mmlatch")

# train-command settings beyond TrainConfig; all of them may also come from --config
DATA_DEFAULTS = {"data": None, "generate": None, "data_seed": 0, "length": 8, "dims": None, "cue": "onset",
                 "seeds": 1, "eval_split": "test"}


def parse_dims(text: str) -> dict[str, int]:
    """``"A:8,T:12,V:6"`` -> ``{"A": 8, "T": 12, "V": 6}``."""
    try:
        dims = {k.strip(): int(v) for k, v in (part.split(":") for part in text.split(","))}
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like A:8,T:12,V:6, got {text!r}") from None
    if set(dims) != set(MODALITIES):
        raise argparse.ArgumentTypeError(f"dims must name exactly {','.join(MODALITIES)}, got {text!r}")
    return dims


def _write_report(out: Path, report) -> None:
    (out / "metrics.txt").write_text(report.to_text())
    (out / "metrics.jsonl").write_text(report.to_json_lines())


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--length", type=int, help="timesteps per sample (default 8)")
    p.add_argument("--dims", type=parse_dims, help="feature dims, e.g. A:8,T:12,V:6")
    p.add_argument("--cue", choices=("onset", "constant"), help="where the gate cue appears (default onset)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmlatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic gated dataset")
    g.add_argument("--n", type=int, required=True, help="number of samples (>= 10)")
    g.add_argument("--seed", type=int, default=0)
    _add_data_flags(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model per seed and report test metrics")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset directory written by 'generate'")
    src.add_argument("--generate", type=int, metavar="N", help="generate N samples in memory instead")
    t.add_argument("--data-seed", type=int, help="generator seed used with --generate")
    _add_data_flags(t)
    t.add_argument("--config", help="JSON config file; explicit flags take precedence")
    t.add_argument("--feedback", choices=("none", "feedforward", "lstm"))
    t.add_argument("--feedback-init", choices=("zero", "xavier"))
    t.add_argument("--seeds", type=int, help="number of seeds, starting at --seed")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", dest="initial_lr", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--epochs", dest="max_epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--halve-patience", dest="lr_halve_patience", type=int)
    t.add_argument("--stop-patience", dest="early_stop_patience", type=int)
    t.add_argument("--eval-split", choices=SPLITS)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", required=True)

    m = sub.add_parser("masks", help="export averaged feedback-mask heatmaps")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", choices=SPLITS, default="test")
    m.add_argument("--out", required=True)
    return parser


def effective_train_config(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the --config file, overridden by explicit flags."""
    merged = {**TrainConfig().to_dict(), **DATA_DEFAULTS}
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        unknown = sorted(set(loaded) - set(merged))
        if unknown:
            raise ValueError(f"unknown keys in {args.config}: {unknown}")
        merged.update(loaded)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if merged["data"] is not None and args.generate is not None:
        merged["data"] = None
    if merged["generate"] is not None and args.data is not None:
        merged["generate"] = None
    if merged["data"] is None and merged["generate"] is None:
        raise ValueError("no dataset: pass --data DIR or --generate N")
    if merged["seeds"] < 1:
        raise ValueError(f"--seeds must be >= 1, got {merged['seeds']}")
    return merged


def _load_splits(cfg: dict) -> DatasetSplits:
    if cfg["data"] is not None:
        return load_dataset(cfg["data"])
    return generate_gated_dataset(cfg["generate"], length=cfg["length"], dims=cfg["dims"],
                                  seed=cfg["data_seed"], cue=cfg["cue"])


def _train_one(config: TrainConfig, splits: DatasetSplits, eval_split: str, out: Path) -> SeedRun:
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, splits.dims)
    try:
        model, history = train(model, splits.train, splits.val, config)
    except TrainingDiverged as exc:
        (out / "history.csv").write_text(history_csv(exc.history))
        raise
    (out / "history.csv").write_text(history_csv(history))
    save_checkpoint(model, out / "checkpoint.txt", extra={"train_config": config.to_dict()})
    report = evaluate(model, splits.split(eval_split), config.batch_size)
    _write_report(out, report)
    return SeedRun(config.seed, report, history)


def cmd_generate(args: argparse.Namespace) -> int:
    splits = generate_gated_dataset(args.n, length=args.length or 8, dims=args.dims, seed=args.seed,
                                    cue=args.cue or "onset")
    save_dataset(splits, args.out)
    print(f"wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} samples to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = effective_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    splits = _load_splits(cfg)
    base = TrainConfig.from_dict(cfg)
    if cfg["seeds"] == 1:
        run = _train_one(base, splits, cfg["eval_split"], out)
        print(run.report.to_text(), end="")
        return 0
    runs = []
    for seed in range(base.seed, base.seed + cfg["seeds"]):
        config = TrainConfig.from_dict({**base.to_dict(), "seed": seed})
        try:
            runs.append(_train_one(config, splits, cfg["eval_split"], out / f"seed_{seed}"))
        except TrainingDiverged as exc:
            logger.warning("seed %d diverged: %s", seed, exc)
            runs.append(SeedRun(seed, None, exc.history, error=str(exc)))
    summary = summarize(runs)
    if summary.best_seed is None:
        raise TrainingDiverged("every seed diverged", [])
    table = summary.table()
    (out / "summary.md").write_text(table)
    print(table, end="")
    return 0


def _checkpoint_and_data(args: argparse.Namespace, model=None):
    model = model or load_checkpoint(args.checkpoint)
    splits = load_dataset(args.data)
    if splits.dims != model.config.dims:
        raise CheckpointError(f"checkpoint expects dims {model.config.dims} but dataset has {splits.dims}")
    return model, splits.split(args.split)


def cmd_eval(args: argparse.Namespace) -> int:
    model, samples = _checkpoint_and_data(args)
    report = evaluate(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, report)
    print(report.to_text(), end="")
    return 0


def cmd_masks(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.config.feedback == "none":
        raise CheckpointError("checkpoint was trained with feedback=none and has no masks to export")
    model, samples = _checkpoint_and_data(args, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, heatmap in export_mask_heatmap(model, samples).items():
        heatmap.to_csv(out / f"masks_{k}.csv")
        print(f"masks_{k}.csv {heatmap.values.shape[0]}x{heatmap.values.shape[1]}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "masks": cmd_masks}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        message = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"{type(exc).__name__}: {' '.join(message.split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
