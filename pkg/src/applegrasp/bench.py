"""Metrics, the method x condition benchmark harness, report rendering and timing."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from applegrasp import preprocess
from applegrasp.errors import EmptyDataset, GraspError, InsufficientPoints
from applegrasp.estimators import (
    HoughConfig,
    RansacConfig,
    grasp_from_sphere,
    hough_fit,
    pointnet_estimate,
    ransac_fit,
)
from applegrasp.geometry import (
    GraspPose,
    NormalizationConfig,
    SphereModel,
    normalize_label,
    orientation_error,
    sphere_iou,
)
from applegrasp.synthgen import (
    CONDITIONS,
    AugmentConfig,
    GenConfig,
    LabeledSample,
    augment,
    corrupt,
    read_dataset,
)
from applegrasp.tinynn import (
    AdamState,
    History,
    ModelConfig,
    RegressorModel,
    init_output_bias,
    load_checkpoint,
    save_checkpoint,
    train,
)

METHODS = ("pointnet", "ransac", "hough")
REPORT_FORMAT = "applegrasp.report/1"


@dataclass(frozen=True)
class EvalThresholds:
    iou: float = 0.75
    orientation_deg: float = 8.0

    def __post_init__(self):
        if not (self.iou > 0 and self.orientation_deg > 0):
            raise ValueError("thresholds must be positive")


@dataclass
class Prediction:
    """One estimator output, or the error that replaced it."""

    sphere: SphereModel | None = None
    pose: GraspPose | None = None
    failure: str | None = None

    @classmethod
    def failed(cls, exc: BaseException) -> "Prediction":
        return cls(failure=type(exc).__name__)


@dataclass
class ReportRow:
    method: str
    condition: str
    accuracy: float
    mean_iou: float | None
    mean_orientation_error: float | None
    success_rate: float
    n: int
    failures: dict[str, int] = field(default_factory=dict)


@dataclass
class ConditionReport:
    rows: list[ReportRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, method: str, condition: str) -> ReportRow:
        for r in self.rows:
            if r.method == method and r.condition == condition:
                return r
        raise KeyError((method, condition))

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "meta": self.meta, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ConditionReport":
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError(f"unknown report format {doc.get('format')!r}")
        return cls([ReportRow(**r) for r in doc["rows"]], doc.get("meta", {}))


def evaluate(
    predictions: Sequence[Prediction],
    ground_truths: Sequence[LabeledSample],
    thresholds: EvalThresholds = EvalThresholds(),
    *,
    method: str = "",
    condition: str = "",
) -> ReportRow:
    """Score aligned predictions; failures count as misses but not in the means."""
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} predictions for {len(ground_truths)} ground truths")
    n = len(predictions)
    ious, errors, hits, successes = [], [], 0, 0
    failures: dict[str, int] = {}
    for pred, gt in zip(predictions, ground_truths):
        if pred.failure is not None:
            failures[pred.failure] = failures.get(pred.failure, 0) + 1
            continue
        iou = sphere_iou(pred.sphere, gt.sphere)
        err = orientation_error(pred.pose, gt.pose)
        ious.append(iou)
        errors.append(err)
        hits += iou >= thresholds.iou
        successes += iou >= thresholds.iou and err <= thresholds.orientation_deg
    return ReportRow(
        method=method,
        condition=condition,
        accuracy=hits / n if n else 0.0,
        mean_iou=math.fsum(ious) / len(ious) if ious else None,
        mean_orientation_error=math.fsum(errors) / len(errors) if errors else None,
        success_rate=successes / n if n else 0.0,
        n=n,
        failures=dict(sorted(failures.items())),
    )


# -- training recipe --------------------------------------------------------


@dataclass(frozen=True)
class TrainRecipe:
    """Desk-scale training schedule for the regressor.

    Every epoch redraws the 200-point input of each training cloud, and with
    probability ``augment_prob`` applies a random similarity transform first,
    so the network rarely sees the same input twice.
    """

    epochs: int = 250
    batch_size: int = 32
    lr: float = 1e-3
    decay: float = 0.6
    decay_every: int = 60
    scale: float = 0.04
    dropout: float = 0.0
    augment_prob: float = 0.5
    corrupt_prob: float = 0.0
    resample: bool = True


def build_arrays(samples: Sequence[LabeledSample], norm: NormalizationConfig, rng: np.random.Generator,
                 prep: preprocess.PreprocessConfig = preprocess.PreprocessConfig()):
    """Network inputs and united-parameter targets; undersized clouds are skipped.

    Returns ``(x, y, centroids, kept)`` where ``kept`` indexes ``samples``.
    """
    xs, ys, cs, kept = [], [], [], []
    for i, s in enumerate(samples):
        try:
            centered, centroid = preprocess.network_input(s.points, rng, prep)
        except InsufficientPoints:
            continue
        xs.append(centered)
        ys.append(normalize_label(centroid, s.sphere, s.theta, s.phi, norm).as_array())
        cs.append(centroid)
        kept.append(i)
    n = prep.n_points
    return (np.array(xs).reshape(-1, n, 3), np.array(ys).reshape(-1, 6),
            np.array(cs).reshape(-1, 3), kept)


def _epoch_sampler(samples, recipe, norm, prep, gen, aug):
    noisy = ("noise", "outlier", "dense_clutter", "combined")

    def draw(rng):
        xs, ys = [], []
        for s in samples:
            for _ in range(100):
                t = s
                if recipe.augment_prob and rng.random() < recipe.augment_prob:
                    t = augment(t, aug, rng)
                if recipe.corrupt_prob and rng.random() < recipe.corrupt_prob:
                    t = corrupt(t, gen, noisy[int(rng.integers(len(noisy)))], rng)
                try:
                    centered, centroid = preprocess.network_input(t.points, rng, prep)
                except InsufficientPoints:
                    continue
                xs.append(centered)
                ys.append(normalize_label(centroid, t.sphere, t.theta, t.phi, norm).as_array())
                break
            else:
                raise InsufficientPoints("could not draw a usable training input")
        return np.array(xs), np.array(ys)

    return draw


def train_regressor(
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample] = (),
    recipe: TrainRecipe = TrainRecipe(),
    seed: int = 0,
    *,
    model_cfg: ModelConfig | None = None,
    prep: preprocess.PreprocessConfig = preprocess.PreprocessConfig(),
    gen: GenConfig = GenConfig(),
    aug: AugmentConfig = AugmentConfig(),
    log_every: int = 0,
) -> tuple[RegressorModel, History, NormalizationConfig]:
    norm = NormalizationConfig(recipe.scale)
    model_cfg = ModelConfig(dropout=recipe.dropout) if model_cfg is None else model_cfg
    data_rng, init_rng, train_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    x, y, _, kept = build_arrays(train_samples, norm, data_rng, prep)
    if not kept:
        raise EmptyDataset("no training sample survived preprocessing")
    vx, vy, _, _ = build_arrays(val_samples, norm, data_rng, prep)
    model = RegressorModel(model_cfg, init_rng)
    init_output_bias(model, y)
    sampler = None
    if recipe.resample:
        sampler = _epoch_sampler([train_samples[i] for i in kept], recipe, norm, prep, gen, aug)
    state = AdamState(lr=recipe.lr, decay=recipe.decay, decay_every=recipe.decay_every)
    _, history = train(model, x, y, vx, vy, epochs=recipe.epochs, batch_size=recipe.batch_size,
                       rng=train_rng, state=state, epoch_data=sampler, log_every=log_every)
    return model, history, norm


def save_regressor(model: RegressorModel, norm: NormalizationConfig, path, recipe: TrainRecipe | None = None) -> None:
    extra = {"scale": norm.scale}
    if recipe is not None:
        extra["recipe"] = asdict(recipe)
    save_checkpoint(model, path, extra)


# -- estimator pipelines ----------------------------------------------------

Estimator = Callable[[np.ndarray, np.random.Generator], tuple[SphereModel, GraspPose]]


@dataclass(frozen=True)
class SuiteConfig:
    gen: GenConfig = GenConfig()
    ransac: RansacConfig = RansacConfig()
    hough: HoughConfig = HoughConfig()
    prep: preprocess.PreprocessConfig = preprocess.PreprocessConfig()
    thresholds: EvalThresholds = EvalThresholds()
    radius_floor: float = 0.01


def classical_estimator(name: str, cfg: SuiteConfig = SuiteConfig()) -> Estimator:
    """Reject outliers, voxelize (no size cap), fit a sphere, apply the grasp rule."""
    if name not in ("ransac", "hough"):
        raise ValueError(f"unknown classical method {name!r}")

    def run(points, rng):
        pts = preprocess.condition_cloud(points, cfg.prep)
        if name == "ransac":
            sphere = ransac_fit(pts, replace(cfg.ransac, seed=int(rng.integers(2**32))))
        else:
            sphere = hough_fit(pts, cfg.hough)
        return sphere, grasp_from_sphere(sphere, pts)

    return run


def pointnet_estimator(checkpoint, cfg: SuiteConfig = SuiteConfig()) -> Estimator:
    model, extra = load_checkpoint(checkpoint)
    norm = NormalizationConfig(extra.get("scale", NormalizationConfig().scale))

    def run(points, rng):
        return pointnet_estimate(model, points, norm, rng, prep=cfg.prep, radius_floor=cfg.radius_floor)

    return run


def make_estimators(methods: Sequence[str], checkpoint=None, cfg: SuiteConfig = SuiteConfig()) -> dict[str, Estimator]:
    out = {}
    for m in methods:
        if m == "pointnet":
            if checkpoint is None:
                raise ValueError("the pointnet method needs a checkpoint")
            if not Path(checkpoint).exists():
                raise FileNotFoundError(f"checkpoint {checkpoint} not found")
            out[m] = pointnet_estimator(checkpoint, cfg)
        elif m in ("ransac", "hough"):
            out[m] = classical_estimator(m, cfg)
        else:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    return out


def predict_one(estimator: Estimator, points, rng) -> Prediction:
    try:
        sphere, pose = estimator(points, rng)
    except GraspError as exc:
        return Prediction.failed(exc)
    return Prediction(sphere, pose)


def _streams(seed: int, condition: str, count: int) -> list[np.random.SeedSequence]:
    # one independent stream per cloud keeps results identical under any
    # execution order
    return np.random.SeedSequence([seed, CONDITIONS.index(condition)]).spawn(count)


def run_suite(
    methods: Sequence[str],
    dataset,
    conditions: Sequence[str] = CONDITIONS,
    thresholds: EvalThresholds | None = None,
    seed: int = 0,
    *,
    checkpoint=None,
    cfg: SuiteConfig = SuiteConfig(),
    estimators: dict[str, Estimator] | None = None,
) -> ConditionReport:
    """Corrupt the test set per condition, run every method, score each pair.

    ``dataset`` is a path to a dataset file or a list of clean samples.
    """
    samples = read_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    thresholds = cfg.thresholds if thresholds is None else thresholds
    for c in conditions:
        if c not in CONDITIONS:
            raise ValueError(f"unknown condition {c!r}")
    estimators = make_estimators(methods, checkpoint, cfg) if estimators is None else estimators
    report = ConditionReport(meta={
        "seed": seed,
        "samples": len(samples),
        "conditions": list(conditions),
        "methods": list(methods),
        "thresholds": asdict(thresholds),
        "ransac": asdict(cfg.ransac),
        "hough": asdict(cfg.hough),
        "success_rate_note": "orientation within threshold and IoU gate; a proxy, not physical grasps",
    })
    for condition in conditions:
        streams = _streams(seed, condition, len(samples))
        corrupted, method_seeds = [], []
        for sample, ss in zip(samples, streams):
            corrupt_ss, method_ss = ss.spawn(2)
            corrupted.append(corrupt(sample, cfg.gen, condition, np.random.default_rng(corrupt_ss)))
            method_seeds.append(method_ss)
        for m in methods:
            preds = [
                predict_one(estimators[m], s.points, np.random.default_rng(ms))
                for s, ms in zip(corrupted, method_seeds)
            ]
            report.rows.append(evaluate(preds, samples, thresholds, method=m, condition=condition))
    return report


# -- rendering --------------------------------------------------------------


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.3f}"


def _table(title: str, rows, methods, conditions, key) -> list[str]:
    width = max([len(c) for c in conditions] + [6])
    head = f"{'method':<10}" + "".join(f"  {c:>{width}}" for c in conditions)
    lines = [title, head, "-" * len(head)]
    for m in methods:
        cells = []
        for c in conditions:
            r = rows.get((m, c))
            cells.append(f"  {_fmt(None if r is None else key(r)):>{width}}")
        lines.append(f"{m:<10}" + "".join(cells))
    return lines


def report_render(report: ConditionReport, fmt: str = "text") -> str:
    """Aligned text tables (3 decimals) or a full-precision structured document."""
    if fmt == "structured":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}; use text or structured")
    methods = list(dict.fromkeys(r.method for r in report.rows))
    conditions = list(dict.fromkeys(r.condition for r in report.rows)) or list(CONDITIONS)
    rows = {(r.method, r.condition): r for r in report.rows}
    lines: list[str] = []
    for title, key in (
        ("Shape accuracy (IoU3D >= threshold)", lambda r: r.accuracy),
        ("Mean IoU3D", lambda r: r.mean_iou),
        ("Mean orientation error (deg)", lambda r: r.mean_orientation_error),
        ("Grasp success proxy (orientation and IoU within thresholds)", lambda r: r.success_rate),
    ):
        lines += _table(title, rows, methods, conditions, key) + [""]
    failed = [r for r in report.rows if r.failures]
    if failed:
        lines.append("Failures (counted as misses, excluded from means)")
        for r in failed:
            detail = ", ".join(f"{k}={v}" for k, v in r.failures.items())
            lines.append(f"  {r.method}/{r.condition}: {detail} of {r.n}")
    for note in report.meta.get("notes", []):
        lines.append(f"NOTE: {note}")
    return "\n".join(lines).rstrip() + "\n"


# -- reference numbers -------------------------------------------------------

# Shape accuracy, orientation error and grasp success from the original
# orchard/lab experiments. Context only; they are not reproducible here.
REFERENCE_ACCURACY = {
    "pointnet": (0.94, 0.92, 0.93, 0.91, 0.89),
    "ransac": (0.82, 0.71, 0.81, 0.74, 0.61),
    "hough": (0.81, 0.67, 0.79, 0.73, 0.63),
}
REFERENCE_ORIENTATION_DEG = {"pointnet": (3.2, 5.4, 4.6, 4.8, 5.5)}
REFERENCE_LAB_ACCURACY = {"pointnet": 0.88, "ransac": 0.76, "hough": 0.78}
REFERENCE_LAB_ORIENTATION_DEG = {"pointnet": 5.2}
REFERENCE_GRASP_SUCCESS = {"pointnet": (0.91, 0.87, 0.90, 0.84, 0.837)}


def reference_report() -> ConditionReport:
    """The reference condition table as a report, for rendering side by side."""
    rows = []
    for m, accs in REFERENCE_ACCURACY.items():
        for i, c in enumerate(CONDITIONS):
            orient = REFERENCE_ORIENTATION_DEG.get(m)
            success = REFERENCE_GRASP_SUCCESS.get(m)
            rows.append(ReportRow(
                method=m,
                condition=c,
                accuracy=accs[i],
                mean_iou=None,
                mean_orientation_error=orient[i] if orient else None,
                success_rate=success[i] if success else 0.0,
                n=0,
            ))
    return ConditionReport(rows, {"source": "reference values from physical experiments"})


# -- qualitative ordering ----------------------------------------------------


@dataclass
class OrderingCheck:
    drops: dict[str, list[float]]  # method -> accuracy drop per seed
    holds: bool
    message: str


def noise_ordering(reports: Sequence[ConditionReport], learned: str = "pointnet",
                   classical: Sequence[str] = ("ransac", "hough")) -> OrderingCheck:
    """Does the learned method lose less accuracy from normal to noise than each
    classical method, in every report? Violations are reported, not raised."""
    drops = {m: [] for m in (learned, *classical)}
    for rep in reports:
        for m in drops:
            drops[m].append(rep.row(m, "normal").accuracy - rep.row(m, "noise").accuracy)
    bad = [
        (i, c) for i in range(len(reports)) for c in classical
        if not drops[learned][i] < drops[c][i]
    ]
    if bad:
        detail = ", ".join(f"seed #{i}: {learned} drop {drops[learned][i]:.3f} vs {c} {drops[c][i]:.3f}" for i, c in bad)
        msg = (f"DIVERGES from the reference ordering (learned estimator should degrade least under noise): {detail}")
    else:
        msg = f"{learned} degrades least under noise in all {len(reports)} runs, matching the reference ordering"
    return OrderingCheck(drops, not bad, msg)


# -- timing ------------------------------------------------------------------


@dataclass
class TimingStats:
    count: int
    mean: float | None
    median: float | None
    p95: float | None


def _stats(samples: list[float]) -> TimingStats:
    if not samples:
        return TimingStats(0, None, None, None)
    return TimingStats(
        len(samples),
        statistics.fmean(samples),
        statistics.median(samples),
        float(np.percentile(samples, 95)),
    )


def timing_probe(estimator: Estimator, clouds: Sequence[np.ndarray], repetitions: int = 1,
                 *, prep: preprocess.PreprocessConfig = preprocess.PreprocessConfig(),
                 seed: int = 0) -> dict[str, TimingStats]:
    """Wall-clock seconds per cloud for preprocessing alone and the full pipeline.

    One untimed warm-up call precedes the measurements. Failed estimates are
    timed like successful ones.
    """
    if repetitions < 0:
        raise ValueError("repetitions must be >= 0")
    pre, full = [], []
    if repetitions and len(clouds):
        predict_one(estimator, clouds[0], np.random.default_rng(seed))
    for rep in range(repetitions):
        for i, cloud in enumerate(clouds):
            t0 = time.perf_counter()
            try:
                preprocess.condition_cloud(cloud, prep)
            except GraspError:
                pass
            t1 = time.perf_counter()
            predict_one(estimator, cloud, np.random.default_rng([seed, rep, i]))
            t2 = time.perf_counter()
            pre.append(t1 - t0)
            full.append(t2 - t1)
    return {"preprocess": _stats(pre), "full": _stats(full)}
