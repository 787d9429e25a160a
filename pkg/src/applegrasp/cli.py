"""Command-line entry point: gen, train, fit, bench, report."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from applegrasp import bench, preprocess
from applegrasp.errors import GraspError
from applegrasp.estimators import HoughConfig, RansacConfig
from applegrasp.synthgen import (
    CONDITIONS,
    DEFAULT_SPLITS,
    AugmentConfig,
    GenConfig,
    generate_split,
    read_dataset,
    write_dataset,
)


@dataclass(frozen=True)
class Settings:
    gen: GenConfig = GenConfig()
    augment: AugmentConfig = AugmentConfig()
    ransac: RansacConfig = RansacConfig()
    hough: HoughConfig = HoughConfig()
    thresholds: bench.EvalThresholds = bench.EvalThresholds()
    preprocess: preprocess.PreprocessConfig = preprocess.PreprocessConfig()
    train: bench.TrainRecipe = bench.TrainRecipe()

    def suite(self) -> bench.SuiteConfig:
        return bench.SuiteConfig(self.gen, self.ransac, self.hough, self.preprocess, self.thresholds)


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"config section {section!r}: unknown keys {unknown}")
    # JSON has no tuples; range-valued fields arrive as lists
    converted = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**converted)


def load_settings(path) -> Settings:
    """Read a JSON config whose sections mirror the configuration dataclasses.

    Missing sections and keys keep their defaults.
    """
    if path is None:
        return Settings()
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("config file must hold an object")
    base = Settings()
    updates = {}
    for f in fields(Settings):
        if f.name in doc:
            updates[f.name] = _build(type(getattr(base, f.name)), doc.pop(f.name), f.name)
    if doc:
        raise ValueError(f"unknown config sections {sorted(doc)}")
    return replace(base, **updates)


def dump_settings(settings: Settings) -> str:
    return json.dumps(asdict(settings), indent=2, sort_keys=True) + "\n"


# -- subcommands -------------------------------------------------------------


def cmd_gen(args, settings: Settings) -> int:
    samples = generate_split(settings.gen, args.split, args.seed, args.count)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} {args.split} samples to {args.out}")
    return 0


def cmd_train(args, settings: Settings) -> int:
    train_samples = read_dataset(args.data)
    val_samples = read_dataset(args.val) if args.val else []
    recipe = settings.train if args.epochs is None else replace(settings.train, epochs=args.epochs)
    model, history, norm = bench.train_regressor(
        train_samples, val_samples, recipe, args.seed,
        prep=settings.preprocess, gen=settings.gen, aug=settings.augment, log_every=args.log_every,
    )
    bench.save_regressor(model, norm, args.checkpoint_out, recipe)
    final = history.train_loss[-1] if history.train_loss else float("nan")
    print(f"trained {recipe.epochs} epochs, final train loss {final:.6f}; saved {args.checkpoint_out}")
    return 0


def _load_points(path) -> np.ndarray:
    """A dataset file (first record) or a plain whitespace-separated x y z table."""
    p = Path(path)
    text = p.read_text(encoding="utf-8").lstrip()
    if text.startswith("{"):
        samples = read_dataset(p)
        if not samples:
            raise ValueError(f"{path}: no records")
        return samples[0].points
    return np.loadtxt(p, ndmin=2)


def cmd_fit(args, settings: Settings) -> int:
    points = _load_points(args.input)
    est = bench.make_estimators([args.method], args.checkpoint, settings.suite())[args.method]
    sphere, pose = est(points, np.random.default_rng(args.seed))
    out = {
        "method": args.method,
        "center": [float(v) for v in sphere.center],
        "radius": sphere.radius,
        "theta": pose.theta,
        "phi": pose.phi,
        "direction": [float(v) for v in pose.direction()],
    }
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_bench(args, settings: Settings) -> int:
    conditions = args.conditions.split(",") if args.conditions else list(CONDITIONS)
    methods = args.methods.split(",")
    report = bench.run_suite(methods, args.data, conditions, seed=args.seed,
                             checkpoint=args.checkpoint, cfg=settings.suite())
    doc = bench.report_render(report, "structured")
    if args.report_out:
        Path(args.report_out).write_text(doc, encoding="utf-8")
    else:
        sys.stdout.write(doc)
    return 0


def cmd_report(args, settings: Settings) -> int:
    if args.reference:
        report = bench.reference_report()
    else:
        report = bench.ConditionReport.from_dict(json.loads(Path(args.input).read_text(encoding="utf-8")))
    sys.stdout.write(bench.report_render(report, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="applegrasp", description="Fruit shape and grasp pose estimation toolkit.")
    parser.add_argument("--config", help="JSON file with gen/augment/ransac/hough/thresholds/preprocess/train sections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset split")
    p.add_argument("--split", choices=sorted(DEFAULT_SPLITS), default="train")
    p.add_argument("--count", type=int, help="number of samples (default: split size)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the point-cloud regressor")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--val", help="validation dataset file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="estimate sphere and grasp pose for one cloud")
    p.add_argument("--method", choices=bench.METHODS, required=True)
    p.add_argument("--input", required=True, help="dataset file (first record) or x y z text table")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bench", help="run the method x condition benchmark")
    p.add_argument("--data", required=True, help="clean test dataset file")
    p.add_argument("--checkpoint")
    p.add_argument("--methods", default="pointnet,ransac,hough")
    p.add_argument("--conditions", help=f"comma-separated subset of {','.join(CONDITIONS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render a benchmark report")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input")
    src.add_argument("--reference", action="store_true", help="render the reference values from physical experiments")
    p.add_argument("--format", choices=("text", "structured"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings(args.config)
        return args.func(args, settings)
    except (GraspError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"applegrasp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
