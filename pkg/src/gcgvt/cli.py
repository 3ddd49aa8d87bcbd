"""``gcgvt`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import tensorgrad as tg
from .data import (GeneratorConfig, IngestError, generate_synthetic, load_dataset, split as make_split,
                   SplitSpec)
from .explain import UnsupportedVariantError, explain_samples
from .geoembed import ConfigurationError, GeoFormatError, PatchGrid, aggregate, load_geo_layers
from .model import PRESETS, VARIANTS, CheckpointError, InputError, ModelConfig, load_checkpoint
from .train import TrainConfig, TrainingError, ablation_suite, default_settings, evaluate, train

logger = logging.getLogger("gcgvt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage is 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise IngestError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    unknown = set(doc) - {"model", "train", "generator"}
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def _model_config(args, dataset, file_cfg: dict) -> ModelConfig:
    overrides = dict(file_cfg.get("model", {}))
    overrides.update(categories=dataset.category_spec, n_outcomes=len(dataset.outcome_names),
                     image_size=dataset.image_size, patch_size=dataset.patch_size)
    if args.variant:
        overrides["variant"] = args.variant
    if args.disable_head_weights:
        overrides["head_weights_enabled"] = False
    if args.categories:
        overrides["active_categories"] = _category_list(args.categories)
    overrides["seed"] = args.seed
    base = PRESETS[args.preset]()
    known = {k: v for k, v in overrides.items() if k in ModelConfig.__dataclass_fields__}
    if len(known) != len(overrides):
        raise UsageError(f"unknown model config keys {sorted(set(overrides) - set(known))}")
    return replace(base, **known)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    kw = dict(file_cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            kw[key] = getattr(args, flag)
    kw["seed"] = args.seed
    try:
        return TrainConfig(**kw)
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from exc


def _category_list(text: str) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()]


def _split_for(dataset, args, extra: dict | None = None) -> SplitSpec:
    if extra and "split" in extra:
        s = extra["split"]
        return SplitSpec(s["seed"], dict(s["assignment"]), tuple(s["ratios"]))
    return make_split(dataset.ids, args.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    file_cfg = _read_config(args.config).get("generator", {})
    gen = GeneratorConfig(**{k: v for k, v in file_cfg.items() if k in GeneratorConfig.__dataclass_fields__})
    for flag in ("noise_sigma", "image_weight", "geo_weight", "image_size", "patch_size"):
        if getattr(args, flag) is not None:
            gen = replace(gen, **{flag: getattr(args, flag)})
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    generate_synthetic(args.n, gen, seed=args.seed, out_dir=out)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    layers = load_geo_layers(args.geo_json)
    if all(not c.polygons for c in layers.categories):
        logger.warning("%s contains no polygons; all patches get zero values and coverage", args.geo_json)
    grid = PatchGrid.for_extent(layers.image_extent, args.patch_size)
    text = aggregate(layers, grid).to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _read_config(args.config)
    dataset = load_dataset(args.manifest)
    mc = _model_config(args, dataset, file_cfg)
    tc = _train_config(args, file_cfg)
    sp = make_split(dataset.ids, args.seed)
    out = Path(args.out)
    if args.single_outcome:
        for j, name in enumerate(dataset.outcome_names):
            res = train(dataset, sp, mc, tc, outcome=j, out_dir=out / name)
            print(f"[{name}]")
            print(res.metrics["test"].format() if "test" in res.metrics else "no test split")
    else:
        res = train(dataset, sp, mc, tc, out_dir=out)
        print(res.metrics["test"].format() if "test" in res.metrics else "no test split")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, params, extra = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    if config.category_names != [n for n, _ in dataset.categories]:
        raise CheckpointError(f"{args.checkpoint}: categories {config.category_names} do not match the "
                              f"manifest {[n for n, _ in dataset.categories]}")
    if args.split == "all":
        samples = dataset.samples
    else:
        samples = dataset.subset(_split_for(dataset, args, extra).ids(args.split))
    batch_size = extra.get("train_config", {}).get("eval_batch_size", 100)
    report = evaluate(samples, config, params, dataset.outcome_names, extra.get("outcome_index"),
                      args.split, batch_size)
    print(report.format())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1))
    return EXIT_OK


def cmd_explain(args) -> int:
    config, params, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    ids = args.ids or dataset.ids[:1]
    missing = [i for i in ids if i not in set(dataset.ids)]
    if missing:
        raise IngestError(f"sample ids not in manifest: {missing}")
    gates = None if args.force_gates is None else [float(g) for g in args.force_gates.split(",")]
    reports = explain_samples(dataset.subset(ids), config, params, args.out, top_m=args.top_m,
                              force_gates=gates)
    for r in reports:
        print(r.summary())
    return EXIT_OK


def cmd_ablation(args) -> int:
    file_cfg = _read_config(args.config)
    dataset = load_dataset(args.manifest)
    args.variant = args.variant or "A"
    mc = _model_config(args, dataset, file_cfg)
    mc = replace(mc, active_categories=None)
    tc = _train_config(args, file_cfg)
    restricted = _category_list(args.categories) if args.categories else None
    settings = default_settings(mc.category_names, restricted)
    table = ablation_suite(dataset, make_split(dataset.ids, args.seed), mc, tc, seeds=args.seeds,
                           settings=settings, single_outcome=args.single_outcome, out_dir=args.out)
    sys.stdout.write(table.to_markdown())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcgvt", description="Geospatially guided vision transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest.json")
        p.add_argument("--config", help="JSON file with model/train/generator sections")
        p.add_argument("--seed", type=int, default=0)

    def model_flags(p):
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--disable-head-weights", action="store_true")
        p.add_argument("--categories", help="comma-separated category names to keep")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--single-outcome", action="store_true",
                       help="fit one model per outcome instead of a joint model")

    p = sub.add_parser("synth", help="write a synthetic planted-signal dataset")
    common(p, manifest=False)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--out", required=True)
    for flag in ("noise-sigma", "image-weight", "geo-weight"):
        p.add_argument(f"--{flag}", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="area-weighted patch averages of a geo layer file")
    p.add_argument("geo_json")
    p.add_argument("--patch-size", type=float, default=8)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and metrics")
    common(p)
    model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="R^2 of a checkpoint on a manifest split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", help="write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="head rankings, token rankings and attention overlays")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", nargs="*", help="sample ids (default: first sample)")
    p.add_argument("--out", required=True)
    p.add_argument("--top-m", type=int, default=2)
    p.add_argument("--force-gates", help="comma-separated gate values overriding the score networks")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablation", help="six-row ablation table over seeds")
    common(p)
    model_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnsupportedVariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, tg.NumericalError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, GeoFormatError, CheckpointError, ConfigurationError, InputError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
