"""Homography-based matching benchmark.

Mean matching accuracy (MMA) is the fraction of matches whose target point
lies within ``t`` pixels of the ground-truth projection of the source point,
for integer thresholds 1..10.  The area summary used throughout is the
trapezoid area under the MMA curve divided by the threshold span, so a perfect
matcher scores 1.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imgio import Image, ResizeSpec, load_image
from .matcher import MatchSet, PipelineConfig, match_pair

DEFAULT_THRESHOLDS = tuple(range(1, 11))
CATEGORIES = ("illumination", "viewpoint", "overall")
SWEEP_COLUMNS = ("resolution", "auc_illum", "auc_view", "auc_all", "wall_s", "peak_mem_mb")

_IMAGE_RE = re.compile(r"^([1-6])\.(ppm|pgm|png)$", re.IGNORECASE)


class DatasetError(ValueError):
    pass


class PointAtInfinityError(ValueError):
    pass


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(h)) <= 1e-12:
            raise ValueError("homography is singular")
        if h[2, 2] == 0:
            raise ValueError("homography has h22 == 0 and cannot be normalised")
        h = h / h[2, 2]
        h.setflags(write=False)
        object.__setattr__(self, "matrix", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "Homography":
        values = np.loadtxt(path, dtype=np.float64).ravel()
        if values.size != 9:
            raise DatasetError(f"{path}: expected 9 values, got {values.size}")
        return cls(values.reshape(3, 3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Project (n, 2) points."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        h = self.matrix
        w = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
        if np.any(np.abs(w) <= 1e-12):
            raise PointAtInfinityError("point maps to infinity")
        x = (h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]) / w
        y = (h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]) / w
        return np.stack([x, y], axis=1)


def apply_homography(h: Homography, p: tuple[float, float]) -> tuple[float, float]:
    x, y = h.apply(np.array([p]))[0]
    return float(x), float(y)


@dataclass(frozen=True)
class EvalReport:
    thresholds: tuple[int, ...]
    mma: np.ndarray
    auc: float
    n_matches: int
    category: str = "overall"
    valid: bool = True

    def mma_at(self, t: float) -> float:
        return float(self.mma[self.thresholds.index(t)])


def curve_area(mma: np.ndarray, thresholds: Sequence[float]) -> float:
    """Trapezoid area under the curve divided by the threshold span."""
    t = np.asarray(thresholds, dtype=np.float64)
    y = np.asarray(mma, dtype=np.float64)
    if t.size == 1:
        return float(y[0])
    area = np.sum((y[1:] + y[:-1]) * np.diff(t)) / 2.0
    return float(area / (t[-1] - t[0]))


def category_of(name: str) -> str:
    if name.startswith("i_"):
        return "illumination"
    if name.startswith("v_"):
        return "viewpoint"
    return "overall"


def mma(
    matches: MatchSet | np.ndarray,
    h: Homography,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    category: str = "overall",
) -> EvalReport:
    """Fraction of matches within each threshold of the homography projection.

    ``matches`` is a MatchSet or an (n, >=4) array of src_x src_y tgt_x tgt_y.
    An empty set gives a report with ``valid=False`` and NaN accuracies.
    """
    thresholds = tuple(thresholds)
    if isinstance(matches, MatchSet):
        src, tgt = matches.src_points, matches.tgt_points
    else:
        arr = np.asarray(matches, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 4)
        src, tgt = arr[:, 0:2], arr[:, 2:4]
    n = src.shape[0]
    if n == 0:
        nan = np.full(len(thresholds), np.nan)
        return EvalReport(thresholds, nan, math.nan, 0, category, valid=False)
    err = np.linalg.norm(h.apply(src) - tgt, axis=1)
    acc = np.array([np.mean(err <= t) for t in thresholds], dtype=np.float64)
    return EvalReport(thresholds, acc, curve_area(acc, thresholds), n, category)


def aggregate(reports: Iterable[EvalReport], category: str = "overall") -> EvalReport:
    """Pointwise mean of the MMA curves of all valid reports."""
    reports = list(reports)
    valid = [r for r in reports if r.valid]
    if not reports:
        raise ValueError("nothing to aggregate")
    thresholds = reports[0].thresholds
    n_matches = sum(r.n_matches for r in reports)
    if not valid:
        nan = np.full(len(thresholds), np.nan)
        return EvalReport(thresholds, nan, math.nan, n_matches, category, valid=False)
    curve = np.mean(np.stack([r.mma for r in valid]), axis=0)
    return EvalReport(thresholds, curve, curve_area(curve, thresholds), n_matches, category)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalPair:
    src: Image
    tgt: Image
    homography: Homography
    category: str = "overall"
    name: str = ""


def _sequence_images(seq_dir: Path) -> dict[int, Path]:
    found: dict[int, Path] = {}
    for p in sorted(seq_dir.iterdir()):
        m = _IMAGE_RE.match(p.name)
        if m and p.is_file():
            found.setdefault(int(m.group(1)), p)
    return found


def load_sequence(seq_dir: str | os.PathLike) -> list[EvalPair]:
    """The five (1, j) pairs of an HPatches-style sequence directory."""
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise DatasetError(f"{seq_dir} is not a directory")
    images = _sequence_images(seq_dir)
    if sorted(images) != [1, 2, 3, 4, 5, 6]:
        raise DatasetError(f"{seq_dir}: expected 6 images, found {len(images)}")
    category = category_of(seq_dir.name)
    ref = load_image(images[1])
    pairs = []
    for j in range(2, 7):
        h_path = seq_dir / f"H_1_{j}"
        if not h_path.is_file():
            raise DatasetError(f"{seq_dir}: missing {h_path.name}")
        pairs.append(
            EvalPair(ref, load_image(images[j]), Homography.from_file(h_path), category, f"{seq_dir.name}/1-{j}")
        )
    return pairs


def find_sequences(dataset_dir: str | os.PathLike) -> list[Path]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    seqs = [p for p in sorted(root.iterdir()) if p.is_dir()]
    if not seqs:
        raise DatasetError("no sequences found")
    return seqs


def load_pairs(dataset_dir: str | os.PathLike) -> list[EvalPair]:
    pairs: list[EvalPair] = []
    for seq in find_sequences(dataset_dir):
        pairs.extend(load_sequence(seq))
    return pairs


def evaluate_pairs(
    pairs: Sequence[EvalPair],
    cfg: PipelineConfig,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    workers: int = 1,
) -> list[EvalReport]:
    """One report per pair, returned in input order."""

    def run(pair: EvalPair) -> EvalReport:
        return mma(match_pair(pair.src, pair.tgt, cfg), pair.homography, thresholds, pair.category)

    if workers <= 1:
        return [run(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run, pairs))


def run_sequence(
    seq_dir: str | os.PathLike, cfg: PipelineConfig, thresholds: Sequence[int] = DEFAULT_THRESHOLDS
) -> list[EvalReport]:
    return evaluate_pairs(load_sequence(seq_dir), cfg, thresholds)


def summarize(reports: Sequence[EvalReport]) -> dict[str, EvalReport | None]:
    """Aggregate per category; ``overall`` covers every report."""
    out: dict[str, EvalReport | None] = {}
    for cat in ("illumination", "viewpoint"):
        sub = [r for r in reports if r.category == cat]
        out[cat] = aggregate(sub, cat) if sub else None
    out["overall"] = aggregate(reports, "overall") if reports else None
    return out


def _fmt(v: float | None) -> str:
    return "nan" if v is None or not math.isfinite(v) else f"{v:.4f}"


def mma_csv(summary: dict[str, EvalReport | None]) -> str:
    """One row per threshold: threshold,mma_illum,mma_view,mma_all."""
    overall = summary["overall"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "mma_illum", "mma_view", "mma_all"])
    for i, t in enumerate(overall.thresholds):
        row = [t]
        for cat in CATEGORIES:
            rep = summary[cat]
            row.append(_fmt(None if rep is None else float(rep.mma[i])))
        w.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------
# resolution sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    resolution: int
    auc_illum: float
    auc_view: float
    auc_all: float
    wall_s: float
    peak_mem_mb: float

    def csv_fields(self) -> list[str]:
        return [
            str(self.resolution),
            _fmt(self.auc_illum),
            _fmt(self.auc_view),
            _fmt(self.auc_all),
            f"{self.wall_s:.3f}",
            f"{self.peak_mem_mb:.1f}",
        ]


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()


def _auc(rep: EvalReport | None) -> float:
    return math.nan if rep is None else rep.auc


def resolution_sweep(
    pairs: Sequence[EvalPair],
    resolutions: Sequence[int],
    cfg: PipelineConfig = PipelineConfig(),
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
) -> SweepTable:
    """Evaluate every pair at each resolution.

    ``peak_mem_mb`` is the tracemalloc peak of Python and numpy allocations
    while the row was computed.
    """
    resolutions = [int(r) for r in resolutions]
    if not resolutions:
        raise ValueError("empty resolution list")
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError("resolutions must be strictly ascending")
    if not pairs:
        raise ValueError("no pairs to evaluate")

    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    table = SweepTable()
    try:
        for res in resolutions:
            run_cfg = replace(cfg, resolution=ResizeSpec(res))
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            t0 = time.perf_counter()
            reports = evaluate_pairs(pairs, run_cfg, thresholds)
            wall = time.perf_counter() - t0
            peak = tracemalloc.get_traced_memory()[1] - base
            summary = summarize(reports)
            table.rows.append(
                SweepRow(
                    res,
                    _auc(summary["illumination"]),
                    _auc(summary["viewpoint"]),
                    _auc(summary["overall"]),
                    wall,
                    peak / 2**20,
                )
            )
    finally:
        if started:
            tracemalloc.stop()
    return table


# --------------------------------------------------------------------------
# cherry-picking bias histogram
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasHistogram:
    tau_pos: float
    tau_neg: np.ndarray
    counts: np.ndarray

    def to_text(self) -> str:
        lines = [f"# tau_pos={self.tau_pos:g}", "tau_neg\tcount"]
        lines += [f"{t:.4f}\t{int(c)}" for t, c in zip(self.tau_neg, self.counts)]
        return "\n".join(lines) + "\n"


def _check_ratios(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    for name, r in (("a", a), ("b", b)):
        if np.any(~np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
            raise ValueError(f"ratios_{name} must lie in [0, 1]")
    return a, b


def bias_count(ratios_a, ratios_b, tau_pos: float, tau_neg: float) -> int:
    """Pairs where method a beats ``tau_pos`` while method b stays below ``tau_neg``."""
    a, b = _check_ratios(ratios_a, ratios_b)
    return int(np.sum((a > tau_pos) & (b < tau_neg)))


def bias_histogram(ratios_a, ratios_b, tau_pos: float, steps: int = 10) -> BiasHistogram:
    """Counts over tau_neg in {0, tau_pos/steps, ..., tau_pos}."""
    a, b = _check_ratios(ratios_a, ratios_b)
    grid = np.linspace(0.0, tau_pos, steps + 1)
    strong = a > tau_pos
    counts = np.array([int(np.sum(strong & (b < t))) for t in grid], dtype=np.int64)
    return BiasHistogram(float(tau_pos), grid, counts)


def read_ratios(path: str | os.PathLike) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=1).ravel()
