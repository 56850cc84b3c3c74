"""Command-line entry point: ``cscon <command> ...``.

Failures print one line ``error: <category>: <detail>`` to stderr. Exit
codes: 2 usage/config, 3 I/O, 4 diverged training.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import evaluation as ev
from .numerics import ArchiveError
from .synthdata import FormatError, build_dataset, generate_split, load_dataset, stack
from .training import (
    DEFAULT_GRIDS,
    KNOBS,
    CheckpointError,
    ResultRow,
    SweepSpec,
    TrainingDiverged,
    load_checkpoint,
    pretrain,
    run_ablation,
    write_results,
)

log = logging.getLogger("cscon")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cscon", description="Center-surrounding contrastive point-cloud pretraining.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write ShapesMini splits and a manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory; generated in memory when omitted")
    t.add_argument("--profile", choices=sorted(cfgmod.PROFILES))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--mask-ratio", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--augment")
    t.add_argument("--loss", choices=("inner", "inter", "alignment"))
    t.add_argument("--sharing", choices=("shared", "non_shared"))
    t.add_argument("--positive-pair", choices=("cs", "ss"))

    r = sub.add_parser("probe", help="evaluate a checkpoint with a transfer protocol")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--protocol", choices=("full", "linear", "mlp3"), default="linear")
    r.add_argument("--seeds", type=_seeds, default=(0, 1, 2))
    r.add_argument("--epochs", type=int, help="head (or fine-tuning) epochs")
    r.add_argument("--out", help="results directory; defaults to the checkpoint's directory")

    f = sub.add_parser("fewshot", help="w-way s-shot linear probing")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--way", type=int, required=True)
    f.add_argument("--shot", type=int, required=True)
    f.add_argument("--trials", type=int, default=10)
    f.add_argument("--queries", type=int, default=20)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")

    a = sub.add_parser("ablate", help="pretrain + linear-probe sweep over one knob")
    a.add_argument("--sweep", required=True, choices=sorted(KNOBS))
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--data")
    a.add_argument("--profile", choices=sorted(cfgmod.PROFILES))
    a.add_argument("--values", help="comma-separated grid; defaults to the built-in grid")
    a.add_argument("--seeds", type=_seeds, default=(0, 1, 2))
    a.add_argument("--epochs", type=int)

    e = sub.add_parser("export-embeddings", help="write label + global feature rows")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    return p


# -- helpers ------------------------------------------------------------------------


def _overrides(args, mapping: dict[str, tuple[str, str]]) -> dict:
    out: dict[str, dict] = {}
    for attr, (section, name) in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.setdefault(section, {})[name] = v
    return out


def _check_exists(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, f"{what} not found", str(path))
    return path


def _arrays(run: cfgmod.RunConfig, data_dir, split: str):
    if data_dir is not None:
        clouds = load_dataset(_check_exists(data_dir, "dataset"), split)
    else:
        clouds = generate_split(run.dataset, split)
    if not clouds:
        raise FormatError(f"{data_dir}: split {split!r} is empty")
    return stack(clouds)


def _load_model(path):
    return load_checkpoint(_check_exists(path, "checkpoint"))


def _report(name: str, value: str, result: ev.ProbeResult, out_dir: Path) -> None:
    print(f"accuracy: {result.mean:.4f} ± {result.std:.4f}")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results(out_dir / "results.tsv", [ResultRow(name, value, result.accuracies)], append=True)


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    run = cfgmod.load(args.config)
    out = Path(args.out)
    run.echo(out)
    m = build_dataset(run.dataset, out)
    counts = {s: len(m.split(s)) for s in ("train", "test")}
    print(f"wrote {counts['train']} train / {counts['test']} test clouds to {out}")


PRETRAIN_FLAGS = {
    "profile": ("run", "profile"),
    "data": ("run", "data"),
    "seed": ("train", "seed"),
    "epochs": ("train", "epochs"),
    "mask_ratio": ("model", "mask_ratio"),
    "tau": ("model", "tau"),
    "augment": ("train", "augment"),
    "loss": ("train", "loss"),
    "sharing": ("train", "sharing"),
    "positive_pair": ("train", "positive_pair"),
}


def cmd_pretrain(args) -> None:
    run = cfgmod.load(args.config, _overrides(args, PRETRAIN_FLAGS))
    run.out = args.out
    out = Path(args.out)
    run.echo(out)
    pts, _ = _arrays(run, run.data, "train")
    res = pretrain(run.model, run.train, pts, out)
    means = res.trace.epoch_means()
    print(f"pretrained {len(means)} epochs: loss {means[0]:.4f} -> {means[-1]:.4f}; checkpoint {res.checkpoint}")


def cmd_probe(args) -> None:
    model = _load_model(args.checkpoint)
    xtr, ytr = _arrays(cfgmod.RunConfig(), args.data, "train")
    xte, yte = _arrays(cfgmod.RunConfig(), args.data, "test")
    if args.protocol == "full":
        fc = ev.FinetuneConfig() if args.epochs is None else ev.FinetuneConfig(epochs=args.epochs)
        result = ev.finetune_full(model, xtr, ytr, xte, yte, fc, seeds=args.seeds)
    else:
        ftr, fte = ev.extract_features(model, xtr), ev.extract_features(model, xte)
        base = ev.LINEAR_HEAD if args.protocol == "linear" else ev.MLP3_HEAD
        hc = base if args.epochs is None else dataclasses.replace(base, epochs=args.epochs)
        probe = ev.probe_linear if args.protocol == "linear" else ev.probe_mlp3
        result = probe(ftr, ytr, fte, yte, seeds=args.seeds, config=hc)
    _report("probe", args.protocol, result, Path(args.out) if args.out else Path(args.checkpoint).parent)


def cmd_fewshot(args) -> None:
    model = _load_model(args.checkpoint)
    xtr, ytr = _arrays(cfgmod.RunConfig(), args.data, "train")
    xte, yte = _arrays(cfgmod.RunConfig(), args.data, "test")
    ftr, fte = ev.extract_features(model, xtr), ev.extract_features(model, xte)
    result = ev.fewshot(ftr, ytr, fte, yte, args.way, args.shot, args.trials, args.seed, args.queries)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    _report("fewshot", f"{args.way}way{args.shot}shot", result, out)


def cmd_ablate(args) -> None:
    run = cfgmod.load(args.config, _overrides(args, {k: PRETRAIN_FLAGS[k] for k in ("profile", "data", "epochs")}))
    run.out = args.out
    out = Path(args.out)
    run.echo(out)
    values = DEFAULT_GRIDS[args.sweep]
    if args.values:
        values = tuple(v.strip() for v in args.values.split(",") if v.strip())
    spec = SweepSpec(args.sweep, values, args.seeds, run.model, run.train)
    try:
        for v in spec.values:
            spec.configs(v, spec.seeds[0])
    except ValueError as e:
        raise cfgmod.ConfigError(f"{KNOBS[args.sweep][0]}.{KNOBS[args.sweep][1]}", str(e)) from None
    xtr, ytr = _arrays(run, run.data, "train")
    xte, yte = _arrays(run, run.data, "test")
    rows = run_ablation(spec, xtr, ytr, xte, yte, out)
    for row in rows:
        print(f"{row.name}={row.value}\taccuracy: {row.mean:.4f} ± {row.std:.4f}")


def cmd_export(args) -> None:
    model = _load_model(args.checkpoint)
    x, y = _arrays(cfgmod.RunConfig(), args.data, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.export_embeddings(ev.extract_features(model, x), y, out)
    print(f"wrote {len(y)} embeddings to {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export,
}


def _fail(category: str, detail: str, code: int) -> int:
    detail = " ".join(str(detail).split())
    print(f"error: {category}: {detail}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, EXIT_CONFIG)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except cfgmod.ConfigError as e:
        return _fail("config", e, EXIT_CONFIG)
    except (ValueError, TypeError) as e:
        if isinstance(e, (FormatError, ArchiveError)):
            return _fail("io", e, EXIT_IO)
        return _fail("config", e, EXIT_CONFIG)
    except TrainingDiverged as e:
        return _fail("diverged", e, EXIT_DIVERGED)
    except (OSError, CheckpointError) as e:
        path = getattr(e, "filename", None)
        detail = f"{path}: {e.strerror}" if path and e.strerror else str(e)
        return _fail("io", detail, EXIT_IO)
    return 0


if __name__ == "__main__":
    sys.exit(main())
