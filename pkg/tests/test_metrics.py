import numpy as np
import pytest

from tetreg.mesh import PointCloud
from tetreg.metrics import (
    EvalReport,
    chamfer_one_sided,
    jacobian_report,
    save_histogram_csv,
    tre,
    tre_by_geodesic,
)


def test_tre_zero():
    pts = np.random.default_rng(0).normal(size=(12, 3))
    assert tre(pts, pts) == (0.0, 0.0)


def test_tre_hand_case():
    true = np.zeros((2, 3))
    est = np.array([[3.0, 0, 0], [0, 4.0, 0]])
    mean, std = tre(true, est)
    assert mean == pytest.approx(3.5)
    assert std == pytest.approx(0.5)  # population std


def test_tre_rigid_invariance():
    rng = np.random.default_rng(1)
    true = rng.normal(size=(20, 3))
    est = true + rng.normal(0, 0.5, (20, 3))
    t = np.deg2rad(30)
    r = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])
    shift = np.array([4.0, -2.0, 1.0])
    assert tre(true, est) == pytest.approx(tre(true @ r.T + shift, est @ r.T + shift))


def test_tre_validation():
    with pytest.raises(ValueError):
        tre(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        tre(np.zeros((2, 3)), np.zeros((3, 3)))


def test_chamfer_subset_zero():
    x = PointCloud(np.random.default_rng(2).normal(size=(30, 3)))
    y = PointCloud(x.points[:10].copy())
    assert chamfer_one_sided(y, x) == 0.0


def test_chamfer_hand_case():
    y = PointCloud(np.array([[1.0, 0, 0]]))
    x = PointCloud(np.array([[0.0, 0, 0], [3.0, 0, 0]]))
    assert chamfer_one_sided(y, x) == pytest.approx(1.0)  # min(1, 4) mm^2


def test_chamfer_monotone_in_model_points():
    rng = np.random.default_rng(3)
    y = PointCloud(rng.normal(size=(15, 3)))
    x_small = PointCloud(rng.normal(size=(10, 3)))
    x_big = PointCloud(np.vstack([x_small.points, rng.normal(size=(10, 3))]))
    assert chamfer_one_sided(y, x_big) <= chamfer_one_sided(y, x_small)


def test_chamfer_asymmetric():
    y = PointCloud(np.array([[0.0, 0, 0]]))
    x = PointCloud(np.array([[0.0, 0, 0], [10.0, 0, 0]]))
    assert chamfer_one_sided(y, x) != chamfer_one_sided(x, y)


def test_bins_single():
    bins = tre_by_geodesic(np.array([1.0, 2.0, 3.0]), np.zeros(3), bin_width=0.1)
    assert bins.counts[0] == 3
    assert bins.means[0] == pytest.approx(2.0)


def test_bins_uniform_errors():
    geo = np.linspace(0, 1, 50)
    bins = tre_by_geodesic(np.full(50, 1.5), geo, bin_width=0.25)
    filled = bins.counts > 0
    assert np.allclose(bins.means[filled], 1.5)


def test_bins_empty_flagged():
    geo = np.array([0.05, 0.95])
    bins = tre_by_geodesic(np.array([1.0, 2.0]), geo, bin_width=0.1)
    assert bins.empty.sum() == len(bins.counts) - 2
    assert np.isnan(bins.means[bins.empty]).all()


def test_jacobian_report_uniform():
    rep = jacobian_report(np.ones(40))
    assert rep.fraction_in_band == 1.0
    assert rep.minimum == rep.maximum == 1.0


def test_jacobian_report_hand_case():
    rep = jacobian_report(np.array([0.9, 1.1, 1.5]))
    assert rep.fraction_in_band == pytest.approx(2 / 3)


def test_jacobian_histogram_accounts_everything(tmp_path):
    rng = np.random.default_rng(4)
    dets = rng.normal(1.0, 0.3, 500)
    rep = jacobian_report(dets)
    assert rep.histogram.sum() + rep.underflow + rep.overflow == pytest.approx(500, abs=1)
    save_histogram_csv(rep, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().strip().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert len(lines) == 1 + 60 + 2


def test_report_json_round_trip(tmp_path):
    report = EvalReport(mode="demo", tre_mean=1.25, tre_std=0.5, chamfer=0.8,
                        timings={"total_s": 2.0}, raw_errors=[1.0, 1.5])
    path = tmp_path / "r.json"
    report.to_json(path)
    back = EvalReport.from_json(path)
    assert back == report
