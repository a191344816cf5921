"""``oat`` command-line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, atomic_write_text
from .config import RunConfig, load_run_config, parse_value
from .training import ConfigError

log = logging.getLogger("oat")

SUBCOMMANDS = ("pe", "data", "train", "generate", "baseline", "eval", "heatmap", "probe")


class UsageError(Exception):
    """Bad or missing arguments; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def default_seed() -> int:
    raw = os.environ.get("OAT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"OAT_SEED must be an integer, got {raw!r}") from None


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $OAT_SEED or 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-trial work (default 1)")
    if config:
        p.add_argument("--config", help="dotted-key config file")
        p.add_argument("--preset", default="paper", help="base settings: paper (default) or desk")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oat", description="Object-level scanpath modelling toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    pe = sub.add_parser("pe", help="positional-encoding tables")
    pe_sub = pe.add_subparsers(dest="action", parser_class=_Parser)
    pt = pe_sub.add_parser("train", help="fit a distance-based encoding table")
    pt.add_argument("--L", type=int)
    pt.add_argument("--d-axis", type=int)
    pt.add_argument("--sigma", type=float)
    pt.add_argument("--lambda", dest="lam", type=float)
    pt.add_argument("--iters", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--out", required=True)
    _common(pt)

    data = sub.add_parser("data", help="build datasets")
    data_sub = data.add_subparsers(dest="action", parser_class=_Parser)
    ds = data_sub.add_parser("synth", help="render a synthetic shelf dataset with oracle scanpaths")
    ds.add_argument("--rows", type=int, default=6)
    ds.add_argument("--cols", type=int, default=6)
    ds.add_argument("--items", type=int, default=20)
    ds.add_argument("--trials", type=int, default=100)
    ds.add_argument("--paths-per-trial", type=int, default=8)
    ds.add_argument("--out", required=True)
    _common(ds, config=False)
    di = data_sub.add_parser("ingest", help="convert pixel fixations to object-level trials")
    di.add_argument("--fixations", required=True)
    di.add_argument("--layout", required=True)
    di.add_argument("--out", required=True)
    _common(di, config=False)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    _common(tr)

    gen = sub.add_parser("generate", help="generate scanpaths from a trained model")
    gen.add_argument("--model", required=True)
    gen.add_argument("--data", required=True)
    gen.add_argument("--mode", choices=("greedy", "sample"))
    gen.add_argument("--n", type=int)
    gen.add_argument("--max-len", type=int)
    gen.add_argument("--split", help="split.json written by 'oat train'; restricts to --part")
    gen.add_argument("--part", choices=("train", "val", "test"), default="test")
    gen.add_argument("--out", required=True)
    _common(gen)

    bl = sub.add_parser("baseline", help="generate baseline scanpaths")
    bl.add_argument("--kind", choices=("random", "center", "wta"), required=True)
    bl.add_argument("--data", required=True)
    bl.add_argument("--n", type=int, default=100)
    bl.add_argument("--mean-length", type=float, help="default: mean scanpath length of the data")
    bl.add_argument("--split")
    bl.add_argument("--part", choices=("train", "val", "test"), default="test")
    bl.add_argument("--out", required=True)
    _common(bl)

    ev = sub.add_parser("eval", help="compare predicted scanpaths with reference scanpaths")
    ev.add_argument("--pred", required=True, action="append", help="scanpath file; repeat for several rows")
    ev.add_argument("--ref", help="reference scanpath file (default: the dataset's own scanpaths)")
    ev.add_argument("--layout", "--data", dest="layout", required=True, help="dataset directory")
    ev.add_argument("--out", required=True, help="CSV report; a .txt table is written beside it")
    _common(ev, config=False)

    hm = sub.add_parser("heatmap", help="per-object viewing fractions")
    hm.add_argument("--pred", required=True)
    hm.add_argument("--data", required=True)
    hm.add_argument("--trial", help="trial id (default: all trials, which must share a layout)")
    hm.add_argument("--out", required=True, help="output stem; .csv and .pgm are written")
    _common(hm, config=False)

    pr = sub.add_parser("probe", help="history-swap probe")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--trial", help="trial id (default: first trial)")
    pr.add_argument("--history", help="comma-separated object ids (default: the trial's first scanpath)")
    pr.add_argument("--swap-step", type=int, default=0)
    pr.add_argument("--replacement", type=int, help="replacement object (default: random, one per seed)")
    pr.add_argument("--repeats", type=int, default=1, help="random replacements to average over")
    pr.add_argument("--steps", help="comma-separated probe steps (default: all after the swap)")
    pr.add_argument("--out", required=True)
    _common(pr, config=False)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _overrides(pairs) -> dict[str, object]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _run_config(args, extra: dict[str, object] | None = None) -> RunConfig:
    overrides = dict(extra or {})
    overrides.update(_overrides(getattr(args, "set", [])))
    return load_run_config(getattr(args, "config", None), overrides, getattr(args, "preset", "paper"))


def _write_manifest(path: Path, args, seed: int, cfg: RunConfig | None = None, **extra) -> None:
    doc = {
        "command": args.command,
        "action": getattr(args, "action", None),
        "argv": args.argv,
        "seed": seed,
        "config": cfg.to_dict() if cfg is not None else None,
        "versions": {"oat": __version__, "numpy": np.__version__, "python": platform.python_version()},
        **extra,
    }
    atomic_write_text(path, json.dumps(doc, indent=2, default=str) + "\n")


def _manifest_beside(out: Path) -> Path:
    """Manifest path for a single-file output."""
    return out.with_name(out.name + ".manifest.json")


def _require(path: str, key: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{key}: {path} does not exist")
    return p


def _select(trials, split_path, part):
    if not split_path:
        return trials
    doc = json.loads(_require(split_path, "--split").read_text())
    wanted = set(doc[part])
    return [t for t in trials if t.trial_id in wanted]


def _by_trial(records) -> dict[str, list[list[int]]]:
    out: dict[str, list[list[int]]] = {}
    for r in records:
        out.setdefault(r.trial_id, []).append(list(r.object_ids))
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pe(args, seed: int) -> None:
    from .positional import fit_rmse, save_pe, train_pe

    if args.action != "train":
        raise UsageError("usage: oat pe train --out <path> [options]")
    flags = {"pe.L": args.L, "pe.d_axis": args.d_axis, "pe.sigma": args.sigma, "pe.lam": args.lam,
             "pe.iters": args.iters, "pe.lr": args.lr}
    cfg = _run_config(args, {k: v for k, v in flags.items() if v is not None})
    table = train_pe(cfg.pe, seed)
    # the z axis only separates the target token from the objects
    z = train_pe(dataclasses.replace(cfg.pe, L=2), seed + 2)
    out = Path(args.out)
    meta = {"pe": dataclasses.asdict(cfg.pe), "seed": seed, "rmse": fit_rmse(table, cfg.pe.sigma, cfg.pe.mean)}
    save_pe(out, {"x": table, "y": table, "z": z}, meta)
    _write_manifest(_manifest_beside(out), args, seed, cfg, rmse=meta["rmse"])
    print(f"rmse {meta['rmse']:.4f}  half-width {table.half_width()}  wrote {out}")


def cmd_data(args, seed: int) -> None:
    from .datasets import ingest, save_dataset, synth_dataset

    out = Path(args.out)
    if args.action == "synth":
        for key in ("rows", "cols", "items", "trials", "paths_per_trial"):
            if getattr(args, key) < 1:
                raise ConfigError(f"--{key.replace('_', '-')} must be >= 1")
        trials = synth_dataset(args.rows, args.cols, args.items, args.trials, seed, args.paths_per_trial)
        save_dataset(out, trials, meta={"source": "synth", "seed": seed, "items": args.items})
    elif args.action == "ingest":
        trials = ingest(_require(args.fixations, "--fixations"), _require(args.layout, "--layout"), out)
    else:
        raise UsageError("usage: oat data {synth,ingest} ...")
    _write_manifest(out / "manifest.json", args, seed)
    print(f"wrote {len(trials)} trials to {out}")


def cmd_train(args, seed: int) -> None:
    from .datasets import load_dataset
    from .training import train

    cfg = _run_config(args, {"train.seed": seed})
    trials = load_dataset(_require(args.data, "--data"))
    layout = trials[0].layout
    model_cfg = cfg.model
    if (model_cfg.rows, model_cfg.cols) != (layout.rows, layout.cols):
        model_cfg = type(model_cfg).from_dict({**model_cfg.to_dict(), "rows": layout.rows, "cols": layout.cols})
    out = Path(args.out)
    result = train(trials, cfg.train, model_cfg, cfg.pe, out_dir=out)
    split = {name: [trials[i].trial_id for i in idx] for name, idx in zip(("train", "val", "test"), result.split)}
    atomic_write_text(out / "split.json", json.dumps(split, indent=1) + "\n")
    _write_manifest(out / "manifest.json", args, seed, cfg, best_epoch=result.best_epoch, best_val=result.best_val)
    print(f"best epoch {result.best_epoch} val loss {result.best_val:.4f}; wrote {out / 'model.ckpt'}")


def cmd_generate(args, seed: int) -> None:
    from .datasets import load_dataset
    from .generation import generate_dataset, write_records
    from .model import OATModel

    flags = {"generate.mode": args.mode, "generate.n": args.n, "generate.max_len": args.max_len}
    cfg = _run_config(args, {k: v for k, v in flags.items() if v is not None})
    model = OATModel.load(_require(args.model, "--model"))
    trials = _select(load_dataset(_require(args.data, "--data")), args.split, args.part)
    g = cfg.generate
    records = generate_dataset(model, trials, g.n, g.mode, seed, g.max_len, threads=args.threads)
    out = Path(args.out)
    write_records(out, records)
    _write_manifest(_manifest_beside(out), args, seed, cfg)
    print(f"wrote {len(records)} scanpaths to {out}")


def cmd_baseline(args, seed: int) -> None:
    from .baselines import baseline_scanpaths, mean_training_length
    from .datasets import load_dataset
    from .generation import write_records

    all_trials = load_dataset(_require(args.data, "--data"))
    trials = _select(all_trials, args.split, args.part)
    if args.mean_length is not None:
        mean_length = args.mean_length
    else:
        mean_length = mean_training_length(_select(all_trials, args.split, "train") if args.split else all_trials)
    cfg = _run_config(args, {"baseline.kind": args.kind, "baseline.seed": seed, "baseline.mean_length": mean_length})
    records = baseline_scanpaths(trials, cfg.baseline, args.n)
    out = Path(args.out)
    write_records(out, records)
    _write_manifest(_manifest_beside(out), args, seed, cfg)
    print(f"wrote {len(records)} {args.kind} scanpaths to {out}")


def cmd_eval(args, seed: int) -> None:
    from .datasets import load_dataset
    from .generation import read_records
    from .metrics import aggregate, format_table, reports_csv

    trials = load_dataset(_require(args.layout, "--layout"))
    refs = _by_trial(read_records(_require(args.ref, "--ref"))) if args.ref else None
    reports = []
    for path in args.pred:
        preds = _by_trial(read_records(_require(path, "--pred")))
        subset = [t for t in trials if t.trial_id in preds]
        if not subset:
            raise ConfigError(f"--pred: {path} holds no trial of the dataset")
        reports.append(aggregate(subset, preds, refs, name=Path(path).stem))
    out = Path(args.out)
    atomic_write_text(out, reports_csv(reports, reports[0].reference))
    table = format_table(reports, reports[0].reference)
    atomic_write_text(out.with_suffix(".txt"), table + "\n")
    _write_manifest(_manifest_beside(out), args, seed)
    print(table)


def cmd_heatmap(args, seed: int) -> None:
    from .datasets import load_dataset
    from .generation import heatmap, read_records, write_heatmap

    trials = {t.trial_id: t for t in load_dataset(_require(args.data, "--data"))}
    records = read_records(_require(args.pred, "--pred"))
    if args.trial:
        if args.trial not in trials:
            raise ConfigError(f"--trial: unknown trial id {args.trial!r}")
        records = [r for r in records if r.trial_id == args.trial]
        layout = trials[args.trial].layout
    else:
        layouts = {json.dumps(trials[r.trial_id].layout.to_dict(), sort_keys=True) for r in records if r.trial_id in trials}
        if len(layouts) > 1:
            raise ConfigError("--trial is required when trials use different layouts")
        layout = next(iter(trials.values())).layout
    grid = heatmap(records, layout)
    write_heatmap(Path(args.out), grid)
    _write_manifest(_manifest_beside(Path(args.out)), args, seed)
    print(f"{len(records)} scanpaths; peak object {int(np.argmax(grid)) + 1} ({grid.max():.3f})")


def cmd_probe(args, seed: int) -> None:
    from .datasets import load_dataset
    from .generation import history_swap_probe
    from .model import OATModel, prepare_trials

    model = OATModel.load(_require(args.model, "--model"))
    trials = {t.trial_id: t for t in load_dataset(_require(args.data, "--data"))}
    if args.trial and args.trial not in trials:
        raise ConfigError(f"--trial: unknown trial id {args.trial!r}")
    trial = trials[args.trial] if args.trial else next(iter(trials.values()))
    if args.history:
        history = [int(x) for x in args.history.split(",") if x]
    elif trial.scanpaths:
        history = trial.scanpaths[0]
    else:
        raise ConfigError("--history: trial has no scanpath to probe")
    if not 0 <= args.swap_step < len(history):
        raise ConfigError(f"--swap-step must lie in [0, {len(history)})")
    steps = [int(x) for x in args.steps.split(",")] if args.steps else list(range(args.swap_step + 1, len(history) + 1))
    prepared = prepare_trials([trial], model.cfg.patch_size)
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(max(1, args.repeats)):
        repl = args.replacement
        if repl is None:
            choices = [o for o in range(1, trial.layout.m + 1) if o != history[args.swap_step]]
            repl = int(rng.choice(choices))
        runs.append((repl, history_swap_probe(model, trial, history, args.swap_step, repl, steps, prepared)))
    mean = {s: float(np.mean([d[s] for _, d in runs])) for s in steps}
    doc = {"trial": trial.trial_id, "history": history, "swap_step": args.swap_step,
           "runs": [{"replacement": r, "deltas": d} for r, d in runs], "mean_delta": mean}
    atomic_write_text(Path(args.out), json.dumps(doc, indent=1) + "\n")
    for s in steps:
        print(f"step {s}: {100 * mean[s]:+.2f}%")


HANDLERS = {
    "pe": cmd_pe,
    "data": cmd_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "probe": cmd_probe,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        seed = args.seed if args.seed is not None else default_seed()
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        HANDLERS[args.command](args, seed)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"oat: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError, ValueError, KeyError, IndexError, FloatingPointError, RuntimeError) as exc:
        print(f"oat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
