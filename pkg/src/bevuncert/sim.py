"""Synthetic scenes with known noise, used as an oracle for the pipeline.

Ground-truth boxes are placed in a region in front of the sensor. Detections
are produced by perturbing every encoded box parameter with a Gaussian whose
standard deviation grows linearly with distance, and they carry the true
variances so that hulls and binned metrics can be checked against the truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import stream
from .bnn import shannon_entropy
from .errors import ConfigError
from .evaluation import CLASSES, LabeledObject
from .gridmap import GridConfig, PointCloud
from .uncert import PARAM_NAMES, BoxParams, OrientedBox, UncertainBox, decode_median, encode_box

# mean length, width, height (m) and their std-devs per class
CLASS_SHAPES = {
    "Car": ((3.9, 1.6, 1.5), (0.25, 0.1, 0.1)),
    "Pedestrian": ((0.8, 0.6, 1.75), (0.1, 0.08, 0.1)),
    "Cyclist": ((1.8, 0.6, 1.7), (0.15, 0.08, 0.1)),
}
FOCAL_PX = 721.0  # used only to fake an image bbox height for difficulty gating
SENSOR_Z = 0.0
TP_SCORES = (0.5, 1.0)
FP_SCORES = (0.0, 0.3)


@dataclass(frozen=True)
class NoiseModel:
    """Per-parameter std-dev ``base + slope * distance`` plus FP/miss rates.

    ``fp_rate`` is the per-frame probability of one false positive. The miss
    probability is ``miss_base + miss_slope * distance``, clipped to [0, 1].
    """

    base: tuple[float, ...] = (0.1, 0.1, 0.03, 0.03, 0.03, 0.03)
    slope: tuple[float, ...] = (0.01, 0.005, 0.002, 0.002, 0.003, 0.003)
    fp_rate: float = 0.0
    miss_base: float = 0.0
    miss_slope: float = 0.0

    def __post_init__(self):
        for name in ("base", "slope"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 6:
                raise ConfigError(f"{name} needs 6 values, got {len(vals)}")
            if any(not (v >= 0) or not math.isfinite(v) for v in vals):
                raise ConfigError(f"{name} values must be finite and >= 0")
            object.__setattr__(self, name, vals)
        if not 0.0 <= self.fp_rate <= 1.0:
            raise ConfigError("fp_rate must be in [0, 1]")
        if not (0.0 <= self.miss_base <= 1.0 and self.miss_slope >= 0.0):
            raise ConfigError("miss_base must be in [0, 1] and miss_slope >= 0")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls((0.0,) * 6, (0.0,) * 6)

    @classmethod
    def constant(cls, sigma: Sequence[float]) -> "NoiseModel":
        return cls(tuple(sigma), (0.0,) * 6)

    def sigma(self, d: float) -> np.ndarray:
        return np.asarray(self.base) + np.asarray(self.slope) * d

    def miss_rate(self, d: float) -> float:
        return min(max(self.miss_base + self.miss_slope * d, 0.0), 1.0)


@dataclass(frozen=True)
class SceneSpec:
    """Scene layout: Poisson object counts per class in a BEV rectangle.

    Headings mix a uniform component (weight ``p_uniform``) with Gaussians of
    width ``spread_deg`` around the base angles 0 and 90 degrees.
    """

    n_frames: int = 10
    counts: dict = field(default_factory=lambda: {"Car": 6.0, "Pedestrian": 2.0, "Cyclist": 1.0})
    region: tuple[float, float, float, float] = (5.0, 55.0, -20.0, 20.0)  # x_min, x_max, y_min, y_max
    p_uniform: float = 0.2
    spread_deg: float = 5.0
    seed: int = 0
    points_per_metre: float = 4000.0  # surface points at 1 m; falls off as 1/d
    ground_points: int = 2000

    def __post_init__(self):
        if self.n_frames < 0:
            raise ConfigError("n_frames must be >= 0")
        for cls, lam in self.counts.items():
            if cls not in CLASS_SHAPES:
                raise ConfigError(f"unknown class {cls!r}")
            if not lam >= 0:
                raise ConfigError(f"count for {cls} must be >= 0")
        x0, x1, y0, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"empty placement region {self.region}")
        if not 0.0 <= self.p_uniform <= 1.0:
            raise ConfigError("p_uniform must be in [0, 1]")
        if self.spread_deg < 0 or self.points_per_metre < 0 or self.ground_points < 0:
            raise ConfigError("spread, point density and ground points must be >= 0")

    def check_grid(self, grid: GridConfig) -> None:
        x0, x1, y0, y1 = self.region
        if x0 < grid.x_min or x1 > grid.x_max or y0 < grid.y_min or y1 > grid.y_max:
            raise ConfigError(f"placement region {self.region} exceeds the grid extent")


@dataclass(frozen=True)
class Frame:
    name: str
    ground_truth: list[LabeledObject]
    cloud: PointCloud | None


@dataclass(frozen=True)
class SimDetection:
    """Noisy detection; ``gt_index`` is None for false positives."""

    label: str
    score: float
    box: UncertainBox
    gt_index: int | None

    def labeled(self) -> LabeledObject:
        return LabeledObject(self.label, decode_median(self.box), self.score)


def _wrap_half_pi(a: float) -> float:
    return a - math.pi * math.ceil((a - math.pi / 2) / math.pi)


def _heading(rng: np.random.Generator, spec: SceneSpec) -> float:
    if rng.random() < spec.p_uniform:
        phi = rng.uniform(-math.pi / 2, math.pi / 2)
    else:
        base = 0.0 if rng.random() < 0.5 else math.pi / 2
        phi = base + math.radians(spec.spread_deg) * rng.standard_normal()
    return _wrap_half_pi(phi)


def _footprint_fits(box: OrientedBox, region) -> bool:
    x0, x1, y0, y1 = region
    return all(x0 <= x <= x1 and y0 <= y <= y1 for x, y in box.corners())


def _overlaps(box: OrientedBox, placed: Sequence[OrientedBox], gap: float = 0.3) -> bool:
    r = 0.5 * math.hypot(box.length, box.width)
    return any(math.hypot(box.x - b.x, box.y - b.y) < r + 0.5 * math.hypot(b.length, b.width) + gap for b in placed)


def sample_ground_truth(spec: SceneSpec, frame: int, max_tries: int = 200) -> list[LabeledObject]:
    """Non-overlapping boxes for one frame; crowded draws are dropped."""
    rng = stream(spec.seed, 0, frame)
    objects: list[LabeledObject] = []
    placed: list[OrientedBox] = []
    x0, x1, y0, y1 = spec.region
    for cls in sorted(spec.counts):
        (ml, mw, mh), (sl, sw, sh) = CLASS_SHAPES[cls]
        for _ in range(int(rng.poisson(spec.counts[cls]))):
            length = max(ml + sl * rng.standard_normal(), 0.3)
            width = max(mw + sw * rng.standard_normal(), 0.3)
            height = max(mh + sh * rng.standard_normal(), 0.5)
            for _try in range(max_tries):
                box = OrientedBox(rng.uniform(x0, x1), rng.uniform(y0, y1), length, width, _heading(rng, spec))
                if _footprint_fits(box, spec.region) and not _overlaps(box, placed):
                    break
            else:
                continue
            placed.append(box)
            d = box.distance
            px_h = FOCAL_PX * height / d
            objects.append(
                LabeledObject(
                    cls,
                    box,
                    bbox=(600.0, 180.0 - px_h / 2, 640.0, 180.0 + px_h / 2),
                    height=height,
                    elevation=GridConfig.ground_z,
                    alpha=_wrap_half_pi(box.phi),
                )
            )
    return objects


def surface_points(obj: LabeledObject, n: int, rng: np.random.Generator, ground_z: float) -> np.ndarray:
    """``n`` points on the vertical faces of a box, intensities uniform."""
    b = obj.box
    corners = np.array(b.corners())
    edges = np.roll(corners, -1, axis=0) - corners
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    u = rng.random(n) * lengths.sum()
    k = np.minimum(np.searchsorted(np.cumsum(lengths), u, side="right"), 3)
    frac = (u - np.concatenate(([0.0], np.cumsum(lengths)[:-1]))[k]) / lengths[k]
    xy = corners[k] + frac[:, None] * edges[k]
    z = ground_z + obj.height * rng.random(n)
    return np.column_stack([xy, z, rng.random(n)])


def scene_cloud(spec: SceneSpec, frame: int, objects: Sequence[LabeledObject], ground_z: float = GridConfig.ground_z) -> PointCloud:
    """Surface samples with density falling as 1/d, plus flat ground returns."""
    rng = stream(spec.seed, 1, frame)
    if not objects:
        return PointCloud(np.zeros((0, 4)), (0.0, 0.0, SENSOR_Z))
    parts = [surface_points(o, max(1, round(spec.points_per_metre / o.distance)), rng, ground_z) for o in objects]
    x0, x1, y0, y1 = spec.region
    g = spec.ground_points
    ground = np.column_stack(
        [rng.uniform(x0, x1, g), rng.uniform(y0, y1, g), ground_z + 0.02 * rng.standard_normal(g), 0.1 * rng.random(g)]
    )
    return PointCloud(np.vstack(parts + [ground]), (0.0, 0.0, SENSOR_Z))


def generate_scene(spec: SceneSpec, frame: int = 0, grid: GridConfig = GridConfig(), with_cloud: bool = True) -> Frame:
    spec.check_grid(grid)
    gts = sample_ground_truth(spec, frame)
    cloud = scene_cloud(spec, frame, gts, grid.ground_z) if with_cloud else None
    return Frame(f"{frame:06d}", gts, cloud)


def class_distribution(label: str, score: float) -> tuple[tuple[float, ...], float]:
    """Class scores with ``score`` on ``label`` and the rest split evenly."""
    if label not in CLASSES:
        return (), 0.0
    rest = (1.0 - score) / (len(CLASSES) - 1)
    probs = tuple(score if c == label else rest for c in CLASSES)
    return probs, float(shannon_entropy(np.array(probs)))


def _detection(rng, label: str, truth: BoxParams, sigma: np.ndarray, score: float, gt_index) -> SimDetection:
    vals = truth.as_array() + sigma * rng.standard_normal(6)
    # trig channels must stay valid; clipping biases them slightly near +-1
    vals[4:] = np.clip(vals[4:], -1.0, 1.0)
    if vals[4] == 0.0 and vals[5] == 0.0:
        vals[5] = 1e-12
    probs, ent = class_distribution(label, score)
    box = UncertainBox(BoxParams.from_array(vals), tuple(sigma**2), probs, ent)
    return SimDetection(label, score, box, gt_index)


def corrupt(
    gts: Sequence[LabeledObject],
    noise: NoiseModel,
    seed: int = 0,
    region: tuple[float, float, float, float] | None = None,
) -> list[SimDetection]:
    """Noisy detections for one frame of ground truth.

    Each non-DontCare object survives with probability ``1 - miss_rate(d)``
    and yields a detection drawn from N(true params, sigma(d)^2) whose
    variances are the injected ones. With probability ``fp_rate`` one false
    positive is placed uniformly in ``region`` with a low score.
    """
    rng = stream(seed)
    dets = []
    for k, g in enumerate(gts):
        if g.box is None or g.label not in CLASS_SHAPES:
            continue
        d = g.box.distance
        if rng.random() < noise.miss_rate(d):
            continue
        score = float(rng.uniform(*TP_SCORES))
        dets.append(_detection(rng, g.label, encode_box(g.box), noise.sigma(d), score, k))
    if region is not None and rng.random() < noise.fp_rate:
        x0, x1, y0, y1 = region
        label = CLASSES[int(rng.integers(len(CLASSES)))]
        (ml, mw, _), _ = CLASS_SHAPES[label]
        box = OrientedBox(rng.uniform(x0, x1), rng.uniform(y0, y1), ml, mw, float(rng.uniform(-math.pi / 2, math.pi / 2)))
        score = float(rng.uniform(*FP_SCORES))
        dets.append(_detection(rng, label, encode_box(box), noise.sigma(box.distance), score, None))
    return dets


def simulate(spec: SceneSpec, noise: NoiseModel, grid: GridConfig = GridConfig(), with_cloud: bool = True):
    """Yield ``(frame, detections)`` for every frame of the spec, in order."""
    for f in range(spec.n_frames):
        fr = generate_scene(spec, f, grid, with_cloud)
        yield fr, corrupt(fr.ground_truth, noise, seed=_frame_seed(spec.seed, f), region=spec.region)


def _frame_seed(seed: int, frame: int) -> int:
    return int(np.random.SeedSequence([seed, 2, frame]).generate_state(1)[0])


def parameter_residuals(dets: Sequence[SimDetection], gts: Sequence[LabeledObject]) -> np.ndarray:
    """(N, 6) detection-minus-truth parameter errors for matched detections."""
    rows = [d.box.mean.as_array() - encode_box(gts[d.gt_index].box).as_array() for d in dets if d.gt_index is not None]
    return np.array(rows).reshape(-1, len(PARAM_NAMES))


__all__ = [
    "CLASS_SHAPES",
    "NoiseModel",
    "SceneSpec",
    "Frame",
    "SimDetection",
    "sample_ground_truth",
    "surface_points",
    "scene_cloud",
    "generate_scene",
    "class_distribution",
    "corrupt",
    "simulate",
    "parameter_residuals",
]
