"""Registration quality metrics and report serialization.

TRE is the mean Euclidean distance between paired true and estimated
target positions (population std). The one-sided Chamfer distance is the
mean over observed points of the squared distance to the nearest deformed
model point; it is deliberately asymmetric, measuring how well the model
explains the observation and ignoring unobserved model regions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import PointCloud

JACOBIAN_BAND = (0.8, 1.2)
HIST_RANGE = (0.5, 1.5)
HIST_BINS = 60


def tre(true_positions: np.ndarray, est_positions: np.ndarray) -> tuple[float, float]:
    """(mean, population std) of per-target position error in mm."""
    t = np.asarray(true_positions, dtype=np.float64)
    e = np.asarray(est_positions, dtype=np.float64)
    if t.shape != e.shape or t.ndim != 2 or len(t) == 0:
        raise ValueError("need matching nonempty (n, 3) arrays")
    d = np.linalg.norm(t - e, axis=1)
    return float(d.mean()), float(d.std())


def chamfer_one_sided(y: PointCloud, x_deformed: PointCloud) -> float:
    """Mean squared distance (mm^2) from each observed point to the deformed model."""
    tree = cKDTree(x_deformed.points)
    dist, _ = tree.query(y.points, k=1)
    return float(np.mean(dist**2))


@dataclass
class GeodesicBins:
    edges: np.ndarray  # (n_bins + 1,) normalized geodesic distance
    means: np.ndarray  # (n_bins,) mean error, nan where empty
    counts: np.ndarray  # (n_bins,)

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0


def tre_by_geodesic(errors: np.ndarray, geodesic: np.ndarray, bin_width: float = 0.1) -> GeodesicBins:
    """Bucket per-vertex errors by normalized geodesic distance from observed regions."""
    errors = np.asarray(errors, dtype=np.float64)
    geodesic = np.asarray(geodesic, dtype=np.float64)
    if errors.shape != geodesic.shape:
        raise ValueError("errors and geodesic fields must have equal length")
    top = float(geodesic[np.isfinite(geodesic)].max(initial=0.0))
    n_bins = max(1, int(np.ceil(max(top, bin_width) / bin_width)))
    edges = np.arange(n_bins + 1) * bin_width
    idx = np.clip(np.searchsorted(edges, geodesic, side="right") - 1, 0, n_bins - 1)
    means = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        mask = (idx == b) & np.isfinite(geodesic)
        counts[b] = mask.sum()
        if counts[b]:
            means[b] = errors[mask].mean()
    return GeodesicBins(edges=edges, means=means, counts=counts)


@dataclass
class JacobianReport:
    minimum: float
    maximum: float
    quantiles: dict[str, float]
    fraction_in_band: float
    histogram: np.ndarray  # HIST_BINS counts over HIST_RANGE
    underflow: int
    overflow: int
    count: int

    @property
    def iqr(self) -> float:
        return self.quantiles["q75"] - self.quantiles["q25"]


def jacobian_report(dets: np.ndarray) -> JacobianReport:
    dets = np.asarray(dets, dtype=np.float64)
    if dets.size == 0:
        raise ValueError("no determinants given")
    qs = np.quantile(dets, [0.05, 0.25, 0.5, 0.75, 0.95])
    hist, _ = np.histogram(dets, bins=HIST_BINS, range=HIST_RANGE)
    in_band = (dets >= JACOBIAN_BAND[0]) & (dets <= JACOBIAN_BAND[1])
    return JacobianReport(
        minimum=float(dets.min()),
        maximum=float(dets.max()),
        quantiles={k: float(v) for k, v in zip(["q05", "q25", "q50", "q75", "q95"], qs)},
        fraction_in_band=float(in_band.mean()),
        histogram=hist,
        underflow=int((dets < HIST_RANGE[0]).sum()),
        overflow=int((dets > HIST_RANGE[1]).sum()),
        count=dets.size,
    )


@dataclass
class EvalReport:
    mode: str
    tre_mean: float | None = None
    tre_std: float | None = None
    chamfer: float | None = None
    geodesic_bin_edges: list = field(default_factory=list)
    geodesic_bin_means: list = field(default_factory=list)
    geodesic_bin_counts: list = field(default_factory=list)
    jacobian: dict | None = None
    sigma2: float | None = None
    timings: dict = field(default_factory=dict)
    raw_errors: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        blob = json.dumps(asdict(self), indent=1, allow_nan=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(blob)
        return blob

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path) as fh:
            data = json.load(fh)
        return cls(**data)


def jacobian_to_dict(report: JacobianReport) -> dict:
    d = asdict(report)
    d["histogram"] = report.histogram.tolist()
    return d


def save_error_csv(errors: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(errors), fmt="%.17g", header="error_mm", comments="")


def save_histogram_csv(report: JacobianReport, path) -> None:
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        fh.write(f"-inf,{HIST_RANGE[0]},{report.underflow}\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], report.histogram):
            fh.write(f"{lo},{hi},{c}\n")
        fh.write(f"{HIST_RANGE[1]},inf,{report.overflow}\n")
