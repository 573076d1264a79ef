"""Detection matching, rotated IoU, 11-point AP and binned uncertainty statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .geometry import clip_convex, point_in_convex_polygon, polygon_area
from .uncert import PARAM_NAMES, OrientedBox, UncertainBox, median_phi, phi_bounds

CLASSES = ("Car", "Pedestrian", "Cyclist")
DONTCARE = "DontCare"
IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
RECALL_POINTS = np.linspace(0.0, 1.0, 11)

# KITTI difficulty gates: min image bbox height (px), max occlusion level, max truncation
DIFFICULTIES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}

BIN_DEFAULTS = {
    "iou": (0.1, 0.0, 1.0),
    "distance": (2.5, 0.0, 60.0),
    "angle": (5.0, 0.0, 45.0),
}


@dataclass(frozen=True)
class LabeledObject:
    """Ground truth or detection in the BEV sensor frame.

    ``box`` is None for DontCare labels without a usable footprint. The
    camera-only fields are kept so labels can be written back unchanged.
    """

    label: str
    box: OrientedBox | None
    score: float | None = None
    truncation: float = 0.0
    occlusion: int = 0
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    height: float = 1.5
    elevation: float = 0.0
    alpha: float = 0.0

    @property
    def is_detection(self) -> bool:
        return self.score is not None

    @property
    def distance(self) -> float:
        return self.box.distance if self.box is not None else math.nan

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]


# ---------------------------------------------------------------------------
# IoU


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two rotated rectangles."""
    area_a = a.length * a.width
    area_b = b.length * b.width
    if not (area_a > 0 and area_b > 0):
        raise DomainError("IoU of a zero-area box")
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.x - b.x, a.y - b.y) > reach:
        return 0.0
    inter_poly = clip_convex(a.corners(), b.corners())
    inter = max(polygon_area(inter_poly), 0.0) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Matching


@dataclass
class MatchResult:
    """Outcome of matching one frame for one class.

    ``pairs`` holds ``(det_index, gt_index, iou)`` in descending detection
    score. ``ignored`` detections fell on DontCare regions or on ground
    truth excluded by the difficulty gate and count as neither TP nor FP.
    """

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)
    false_negatives: list[int] = field(default_factory=list)
    ignored: list[int] = field(default_factory=list)
    scores: dict[int, float] = field(default_factory=dict)
    n_gt: int = 0

    def scored_outcomes(self) -> list[tuple[float, bool]]:
        out = [(self.scores[d], True) for d, _, _ in self.pairs]
        out += [(self.scores[d], False) for d in self.false_positives]
        return out


def passes_difficulty(obj: LabeledObject, difficulty: str | None) -> bool:
    if difficulty is None:
        return True
    try:
        min_h, max_occ, max_trunc = DIFFICULTIES[difficulty]
    except KeyError:
        raise ConfigError(f"unknown difficulty {difficulty!r}") from None
    return obj.bbox_height >= min_h and obj.occlusion <= max_occ and obj.truncation <= max_trunc


def match(
    dets: Sequence[LabeledObject],
    gts: Sequence[LabeledObject],
    iou_threshold: float | None = None,
    cls: str = "Car",
    difficulty: str | None = None,
) -> MatchResult:
    """Greedy matching by descending score.

    Each detection of ``cls`` claims the unclaimed valid ground truth with
    the highest IoU at or above the threshold. Failing that, a detection
    overlapping a gated-out ground truth of the class, or whose centre lies
    inside a DontCare footprint, is ignored; anything else is a false
    positive.
    """
    thr = IOU_THRESHOLDS.get(cls, 0.5) if iou_threshold is None else iou_threshold
    det_idx = [k for k, d in enumerate(dets) if d.label == cls]
    det_idx.sort(key=lambda k: (-dets[k].score, k))
    valid = [k for k, g in enumerate(gts) if g.label == cls and g.box is not None and passes_difficulty(g, difficulty)]
    gated = [k for k, g in enumerate(gts) if g.label == cls and g.box is not None and k not in valid]
    dontcare = [g for g in gts if g.label == DONTCARE and g.box is not None]

    result = MatchResult(n_gt=len(valid), scores={k: float(dets[k].score) for k in det_idx})
    claimed: set[int] = set()
    gated_claimed: set[int] = set()
    for k in det_idx:
        box = dets[k].box
        best, best_iou = None, thr
        for g in valid:
            if g in claimed:
                continue
            iou = rotated_iou(box, gts[g].box)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = g, iou
        if best is not None:
            claimed.add(best)
            result.pairs.append((k, best, best_iou))
            continue
        hit_gated = None
        for g in gated:
            if g not in gated_claimed and rotated_iou(box, gts[g].box) >= thr:
                hit_gated = g
                break
        if hit_gated is not None:
            gated_claimed.add(hit_gated)
            result.ignored.append(k)
        elif any(point_in_convex_polygon(box.center, dc.box.corners()) for dc in dontcare):
            result.ignored.append(k)
        else:
            result.false_positives.append(k)
    result.false_negatives = [g for g in valid if g not in claimed]
    return result


def average_precision(matches: Iterable[MatchResult]) -> float | None:
    """11-point interpolated AP over all frames; None when there is no ground truth."""
    outcomes: list[tuple[float, bool]] = []
    n_gt = 0
    for m in matches:
        outcomes.extend(m.scored_outcomes())
        n_gt += m.n_gt
    if n_gt == 0:
        return None
    if not outcomes:
        return 0.0
    # stable sort keeps TP-before-FP within equal scores deterministic by input order
    outcomes.sort(key=lambda o: -o[0])
    tp = np.cumsum([o[1] for o in outcomes], dtype=np.float64)
    fp = np.cumsum([not o[1] for o in outcomes], dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / len(RECALL_POINTS))


# ---------------------------------------------------------------------------
# Uncertainty metrics


def total_variance(u: UncertainBox) -> float:
    return float(sum(u.var))


def normalized_variances(u: UncertainBox, extent_x: float, extent_y: float) -> tuple[float, ...]:
    """Variances with positions expressed in grid-map units (extent = 1)."""
    v = u.var
    return (v[0] / extent_x**2, v[1] / extent_y**2, *v[2:])


def format_tv(tv: float) -> str:
    """Total variance in the ``<n>e-4`` style used for per-object tables."""
    return f"TV: {round(tv * 1e4):d}e-4"


def multiplicative_std(sigma_log) -> float | np.ndarray:
    s = np.asarray(sigma_log, dtype=np.float64)
    if np.any(s < 0):
        raise DomainError("sigma_log must be >= 0")
    out = np.exp(s)
    return float(out) if out.ndim == 0 else out


def diff_to_base_angle(phi: float) -> float:
    """Degrees between ``phi`` (radians) and the nearest multiple of 90 deg."""
    deg = math.degrees(phi) % 90.0
    return min(deg, 90.0 - deg)


def max_differential_angle(u: UncertainBox, percentile: float = 0.95) -> float:
    lo, hi = phi_bounds(u, percentile)
    med = median_phi(u.mean)
    return math.degrees(max(abs(hi - med), abs(med - lo)))


# ---------------------------------------------------------------------------
# Binning


METRIC_NAMES = (
    "total_variance",
    *(f"std_{p}" for p in PARAM_NAMES),
    "mult_std_bl",
    "mult_std_bw",
    "entropy",
)


@dataclass
class UncertaintyBins:
    axis: str
    edges: np.ndarray
    counts: np.ndarray
    means: dict[str, np.ndarray]
    residual_std: dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for b in range(len(self.counts)):
            row = {"bin_lo": float(self.edges[b]), "bin_hi": float(self.edges[b + 1]), "count": int(self.counts[b])}
            for name, vals in self.means.items():
                row[name] = None if self.counts[b] == 0 else float(vals[b])
            for name, vals in self.residual_std.items():
                row[f"residual_std_{name}"] = None if self.counts[b] < 2 else float(vals[b])
            out.append(row)
        return out


def object_metrics(u: UncertainBox) -> dict[str, float]:
    std = u.std
    m = {"total_variance": total_variance(u)}
    for name, s in zip(PARAM_NAMES, std):
        m[f"std_{name}"] = float(s)
    m["mult_std_bl"] = multiplicative_std(float(std[2]))
    m["mult_std_bw"] = multiplicative_std(float(std[3]))
    m["entropy"] = float(u.class_entropy)
    return m


def bin_edges(values: np.ndarray, width: float, lo: float, hi: float) -> np.ndarray:
    if not width > 0:
        raise ConfigError(f"bin width must be positive, got {width}")
    top = max(hi, float(values.max())) if len(values) else hi
    n = max(1, math.ceil((top - lo) / width - 1e-9))
    return lo + width * np.arange(n + 1)


def bin_uncertainties(
    values: Sequence[float],
    boxes: Sequence[UncertainBox],
    axis: str = "distance",
    bin_width: float | None = None,
    lo: float | None = None,
    hi: float | None = None,
    residuals: np.ndarray | None = None,
) -> UncertaintyBins:
    """Per-bin means of the uncertainty metrics over an axis value per object.

    Bins are half-open except the last, which is closed. The range grows past
    ``hi`` when needed so every object lands in some bin. ``residuals``
    (N, 6), when given, adds the per-bin RMS of detection-minus-truth
    parameter errors.
    """
    d_width, d_lo, d_hi = BIN_DEFAULTS.get(axis, (1.0, 0.0, 1.0))
    width = d_width if bin_width is None else bin_width
    lo = d_lo if lo is None else lo
    hi = d_hi if hi is None else hi
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) != len(boxes):
        raise ValueError("one axis value per box required")
    if len(vals) and vals.min() < lo:
        raise ConfigError(f"axis value {vals.min()} below bin range start {lo}")
    edges = bin_edges(vals, width, lo, hi)
    n_bins = len(edges) - 1
    idx = np.clip(np.floor((vals - lo) / width + 1e-12).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)

    metrics = [object_metrics(u) for u in boxes]
    means: dict[str, np.ndarray] = {}
    for name in METRIC_NAMES:
        col = np.array([m[name] for m in metrics], dtype=np.float64)
        sums = np.bincount(idx, weights=col, minlength=n_bins) if len(col) else np.zeros(n_bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            means[name] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    res_std: dict[str, np.ndarray] = {}
    if residuals is not None:
        res = np.asarray(residuals, dtype=np.float64).reshape(len(vals), 6)
        for c, name in enumerate(PARAM_NAMES):
            sq = np.bincount(idx, weights=res[:, c] ** 2, minlength=n_bins)
            with np.errstate(invalid="ignore", divide="ignore"):
                res_std[name] = np.where(counts > 0, np.sqrt(sq / np.maximum(counts, 1)), np.nan)
    return UncertaintyBins(axis, edges, counts, means, res_std)


__all__ = [
    "CLASSES",
    "DONTCARE",
    "IOU_THRESHOLDS",
    "DIFFICULTIES",
    "LabeledObject",
    "MatchResult",
    "UncertaintyBins",
    "rotated_iou",
    "match",
    "average_precision",
    "passes_difficulty",
    "total_variance",
    "normalized_variances",
    "format_tv",
    "multiplicative_std",
    "diff_to_base_angle",
    "max_differential_angle",
    "bin_uncertainties",
    "object_metrics",
]
