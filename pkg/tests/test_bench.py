import json

import numpy as np
import pytest

from applegrasp.bench import (
    REFERENCE_ACCURACY,
    ConditionReport,
    EvalThresholds,
    Prediction,
    ReportRow,
    SuiteConfig,
    evaluate,
    make_estimators,
    noise_ordering,
    reference_report,
    report_render,
    run_suite,
    timing_probe,
)
from applegrasp.errors import InsufficientPoints
from applegrasp.geometry import SphereModel
from applegrasp.synthgen import CONDITIONS, GenConfig, generate_split, write_dataset


@pytest.fixture(scope="module")
def samples():
    return generate_split(GenConfig(), "test", 0, count=6)


def exact(s):
    return Prediction(s.sphere, s.pose)


def shifted(s, iou_target):
    # shifting a cube of side 2r by d along x gives IoU (2r - d) / (2r + d)
    r = s.sphere.radius
    d = 2 * r * (1 - iou_target) / (1 + iou_target)
    return Prediction(s.sphere.translated([d, 0, 0]), s.pose)


class TestEvaluate:
    def test_perfect(self, samples):
        row = evaluate([exact(s) for s in samples], samples)
        assert row.accuracy == 1.0 and row.success_rate == 1.0
        assert row.mean_orientation_error == 0.0 and row.mean_iou == pytest.approx(1.0)

    def test_all_rejected(self, samples):
        preds = [Prediction.failed(InsufficientPoints("x")) for _ in samples]
        row = evaluate(preds, samples)
        assert row.accuracy == 0.0 and row.mean_orientation_error is None and row.mean_iou is None
        assert row.failures == {"InsufficientPoints": len(samples)}

    def test_half(self, samples):
        row = evaluate([shifted(samples[0], 0.8), shifted(samples[1], 0.5)], samples[:2])
        assert row.accuracy == 0.5

    def test_length_mismatch(self, samples):
        with pytest.raises(ValueError):
            evaluate([exact(samples[0])], samples[:2])

    def test_monotone_in_thresholds(self, samples):
        rng = np.random.default_rng(0)
        preds = [shifted(s, rng.uniform(0.5, 1.0)) for s in samples]
        accs = [evaluate(preds, samples, EvalThresholds(iou=t)).accuracy for t in np.linspace(0.4, 0.99, 12)]
        assert accs == sorted(accs, reverse=True)

    def test_thresholds_positive(self):
        with pytest.raises(ValueError):
            EvalThresholds(iou=0.0)


class TestSuite:
    def test_rows_and_determinism(self, samples, tmp_path):
        path = tmp_path / "test.jsonl"
        write_dataset(samples[:3], path)
        cfg = SuiteConfig()
        a = run_suite(["ransac", "hough"], path, CONDITIONS, seed=3, cfg=cfg)
        b = run_suite(["ransac", "hough"], path, CONDITIONS, seed=3, cfg=cfg)
        assert len(a.rows) == 10
        assert report_render(a, "structured") == report_render(b, "structured")
        for r in a.rows:
            assert 0 <= r.accuracy <= 1 and 0 <= r.success_rate <= 1 and r.n == 3

    def test_pointnet_needs_checkpoint(self):
        with pytest.raises(ValueError):
            make_estimators(["pointnet"])
        with pytest.raises(FileNotFoundError):
            make_estimators(["pointnet"], "/nonexistent/ckpt.json")

    def test_unknown_method_and_condition(self, samples):
        with pytest.raises(ValueError):
            make_estimators(["svm"])
        with pytest.raises(ValueError):
            run_suite(["ransac"], samples, ["fog"])


class TestRender:
    def test_reference_grid(self):
        text = report_render(reference_report())
        block = text.split("\n\n")[0].splitlines()
        assert block[3].split() == ["pointnet", "0.940", "0.920", "0.930", "0.910", "0.890"]
        assert block[4].split()[1:] == [f"{v:.3f}" for v in REFERENCE_ACCURACY["ransac"]]
        assert block[5].split()[1:] == [f"{v:.3f}" for v in REFERENCE_ACCURACY["hough"]]

    def test_empty_report_header_only(self):
        block = report_render(ConditionReport()).split("\n\n")[0].splitlines()
        assert len(block) == 3 and block[1].split() == ["method", *CONDITIONS]

    def test_text_matches_structured(self):
        rep = ConditionReport([ReportRow("ransac", "normal", 0.123456, 0.8, 3.14159, 0.1, 10, {})])
        doc = json.loads(report_render(rep, "structured"))
        assert doc["rows"][0]["accuracy"] == 0.123456
        assert "0.123" in report_render(rep) and "3.142" in report_render(rep)
        assert ConditionReport.from_dict(doc).rows == rep.rows

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            report_render(ConditionReport(), "html")


class TestOrdering:
    def _rep(self, drops):
        rows = []
        for m, d in drops.items():
            rows += [ReportRow(m, "normal", 0.9, None, None, 0, 1), ReportRow(m, "noise", 0.9 - d, None, None, 0, 1)]
        return ConditionReport(rows)

    def test_holds(self):
        check = noise_ordering([self._rep({"pointnet": 0.02, "ransac": 0.1, "hough": 0.15})] * 3)
        assert check.holds and "matching" in check.message

    def test_divergence_flagged(self):
        check = noise_ordering([self._rep({"pointnet": 0.3, "ransac": 0.1, "hough": 0.15})])
        assert not check.holds and "DIVERGES" in check.message


class TestTiming:
    def test_counts_and_subset(self, samples):
        est = make_estimators(["ransac"])["ransac"]
        clouds = [s.points for s in samples[:3]]
        stats = timing_probe(est, clouds, repetitions=2)
        assert stats["full"].count == stats["preprocess"].count == 6
        assert stats["preprocess"].mean <= stats["full"].mean

    def test_zero_repetitions(self, samples):
        stats = timing_probe(make_estimators(["ransac"])["ransac"], [samples[0].points], repetitions=0)
        assert stats["full"].count == 0 and stats["full"].mean is None
