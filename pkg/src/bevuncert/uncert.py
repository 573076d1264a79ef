"""Six-parameter uncertain boxes and percentile convex hulls.

A box is regressed as ``(x, y, log l, log w, sin 2phi, cos 2phi)`` with an
independent Gaussian on every component. Lengths are therefore log-normal
and the heading has no closed-form distribution, so footprints are built by
sweeping rotations between percentile bounds and estimating the face
extents by Monte-Carlo sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, DegenerateHullError, DomainError, OrientationUndefinedError
from .geometry import HullPolygon, Point, convex_hull, rect_corners

PARAM_NAMES = ("x", "y", "log_bl", "log_bw", "sin2phi", "cos2phi")
HIST_BINS = 256


@dataclass(frozen=True)
class BoxParams:
    x: float
    y: float
    log_bl: float
    log_bw: float
    sin2phi: float
    cos2phi: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise DomainError(f"non-finite box parameters: {vals}")
        if abs(self.sin2phi) > 1.0 + 1e-12 or abs(self.cos2phi) > 1.0 + 1e-12:
            raise DomainError("sin2phi/cos2phi must lie in [-1, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.log_bl, self.log_bw, self.sin2phi, self.cos2phi])

    @classmethod
    def from_array(cls, values) -> "BoxParams":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class OrientedBox:
    """Footprint rectangle; ``phi`` is the heading of the length axis."""

    x: float
    y: float
    length: float
    width: float
    phi: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise DomainError(f"box dimensions must be positive, got {self.length} x {self.width}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def distance(self) -> float:
        return math.hypot(self.x, self.y)

    def corners(self) -> list[Point]:
        return rect_corners(self.x, self.y, self.length, self.width, self.phi)


@dataclass(frozen=True)
class UncertainBox:
    """Per-parameter Gaussian mean and variance plus class information."""

    mean: BoxParams
    var: tuple[float, float, float, float, float, float]
    class_scores: tuple[float, ...] = ()
    class_entropy: float = 0.0

    def __post_init__(self):
        var = tuple(float(v) for v in self.var)
        object.__setattr__(self, "var", var)
        if len(var) != 6:
            raise DomainError(f"expected 6 variances, got {len(var)}")
        if any(not (v >= 0.0) or not math.isfinite(v) for v in var):
            raise DomainError(f"variances must be finite and >= 0, got {var}")
        if self.class_scores and abs(sum(self.class_scores) - 1.0) > 1e-6:
            raise DomainError("class scores must sum to 1")
        if self.class_entropy < 0:
            raise DomainError("class entropy must be >= 0")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.var))

    @classmethod
    def certain(cls, box: OrientedBox) -> "UncertainBox":
        return cls(encode_box(box), (0.0,) * 6)


@dataclass(frozen=True)
class HullConfig:
    percentile: float = 0.95
    n_rotations: int = 7
    n_mc_samples: int = 10_000
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.5 < self.percentile < 1.0:
            raise ConfigError(f"percentile must be in (0.5, 1), got {self.percentile}")
        if self.n_rotations < 1:
            raise ConfigError("n_rotations must be >= 1")
        if self.n_mc_samples < 100:
            raise ConfigError("n_mc_samples must be >= 100")


def encode_box(b: OrientedBox) -> BoxParams:
    if not (b.length > 0 and b.width > 0):
        raise DomainError("box dimensions must be positive")
    return BoxParams(
        b.x, b.y, math.log(b.length), math.log(b.width), math.sin(2 * b.phi), math.cos(2 * b.phi)
    )


def median_phi(mean: BoxParams) -> float:
    if mean.sin2phi == 0.0 and mean.cos2phi == 0.0:
        raise OrientationUndefinedError("sin2phi and cos2phi are both zero")
    return 0.5 * math.atan2(mean.sin2phi, mean.cos2phi)


def decode_median(u: UncertainBox | BoxParams) -> OrientedBox:
    """Median box: Gaussian medians for position, ``exp(mu)`` for the log-normal sizes."""
    m = u.mean if isinstance(u, UncertainBox) else u
    return OrientedBox(m.x, m.y, math.exp(m.log_bl), math.exp(m.log_bw), median_phi(m))


def _wrap_half_pi(a: float) -> float:
    """Map an angle difference into [-pi/2, pi/2)."""
    return (a + math.pi / 2) % math.pi - math.pi / 2


def phi_bounds(u: UncertainBox, percentile: float = 0.95, *, clamp: bool = True) -> tuple[float, float]:
    """Rotation interval from percentile bounds of the two heading channels.

    The lower bound pairs the lower sine quantile with the upper cosine
    quantile and vice versa. Both bounds are unwrapped around the median
    heading so an interval straddling +-90 deg stays contiguous.
    """
    if not 0.0 < percentile < 1.0:
        raise ConfigError(f"percentile must be in (0, 1), got {percentile}")
    z = NormalDist().inv_cdf(percentile)
    m = u.mean
    s_std = math.sqrt(u.var[4])
    c_std = math.sqrt(u.var[5])
    s_lo, s_hi = m.sin2phi - z * s_std, m.sin2phi + z * s_std
    c_lo, c_hi = m.cos2phi - z * c_std, m.cos2phi + z * c_std
    if clamp:
        s_lo, s_hi = max(s_lo, -1.0), min(s_hi, 1.0)
        c_lo, c_hi = max(c_lo, -1.0), min(c_hi, 1.0)
    if (s_lo == 0.0 and c_hi == 0.0) or (s_hi == 0.0 and c_lo == 0.0):
        raise OrientationUndefinedError("heading quantiles degenerate at the origin")

    phi_med = median_phi(m)
    a = phi_med + _wrap_half_pi(0.5 * math.atan2(s_lo, c_hi) - phi_med)
    b = phi_med + _wrap_half_pi(0.5 * math.atan2(s_hi, c_lo) - phi_med)
    return (min(a, b), max(a, b))


@dataclass(frozen=True)
class FaceHistogram:
    """Histogram of full box extents along one face axis."""

    counts: np.ndarray
    edges: np.ndarray
    n_samples: int = field(default=0)

    @classmethod
    def from_samples(cls, samples: np.ndarray, bins: int = HIST_BINS) -> "FaceHistogram":
        lo, hi = float(samples.min()), float(samples.max())
        if hi - lo <= 1e-12 * max(abs(hi), 1.0):
            return cls(np.array([len(samples)]), np.array([lo, hi]), len(samples))
        counts, edges = np.histogram(samples, bins=bins, range=(lo, hi))
        return cls(counts, edges, len(samples))

    def quantile(self, p: float) -> float:
        """Upper edge of the first bin whose cumulative mass reaches ``p``."""
        cdf = np.cumsum(self.counts) / self.counts.sum()
        idx = int(np.searchsorted(cdf, p - 1e-12, side="left"))
        idx = min(idx, len(self.counts) - 1)
        return float(self.edges[idx + 1])

    def mean(self) -> float:
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        return float(np.sum(centers * self.counts) / self.counts.sum())


def _standard_draws(cfg: HullConfig) -> np.ndarray:
    # Philox is counter based: the same seed always yields the same stream
    rng = np.random.Generator(np.random.Philox(key=cfg.rng_seed))
    return rng.standard_normal((4, cfg.n_mc_samples))


def box_frame_covariance(var_x: float, var_y: float, phi: float) -> np.ndarray:
    """Rotate diag(var_x, var_y) from the sensor frame into a box frame at ``phi``."""
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, s], [-s, c]])  # R(-phi)
    return rot @ np.diag([var_x, var_y]) @ rot.T


def face_samples(u: UncertainBox, phi: float, draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full-extent samples along the length and width axes.

    A face sits at ``offset + size / 2`` from the mean centre, where the
    offset is the box-frame position error and size is log-normal. Doubling
    gives the extent of a mean-centred box that reaches that face.
    """
    cov = box_frame_covariance(u.var[0], u.var[1], phi)
    # closed-form 2x2 Cholesky that tolerates zero variances
    l11 = math.sqrt(max(cov[0, 0], 0.0))
    l21 = cov[1, 0] / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(cov[1, 1] - l21 * l21, 0.0))
    off_l = l11 * draws[0]
    off_w = l21 * draws[0] + l22 * draws[1]
    size_l = np.exp(u.mean.log_bl + math.sqrt(u.var[2]) * draws[2])
    size_w = np.exp(u.mean.log_bw + math.sqrt(u.var[3]) * draws[3])
    return size_l + 2.0 * off_l, size_w + 2.0 * off_w


def face_distributions(u: UncertainBox, phi: float, cfg: HullConfig = HullConfig()) -> tuple[FaceHistogram, FaceHistogram]:
    ext_l, ext_w = face_samples(u, phi, _standard_draws(cfg))
    return FaceHistogram.from_samples(ext_l), FaceHistogram.from_samples(ext_w)


def percentile_corners(
    hist_bl: FaceHistogram,
    hist_bw: FaceHistogram,
    center: tuple[float, float],
    phi: float,
    percentile: float,
) -> list[Point]:
    length = max(hist_bl.quantile(percentile), 0.0)
    width = max(hist_bw.quantile(percentile), 0.0)
    return rect_corners(center[0], center[1], length, width, phi)


def rotation_samples(u: UncertainBox, cfg: HullConfig) -> np.ndarray:
    lo, hi = phi_bounds(u, cfg.percentile)
    if cfg.n_rotations == 1:
        return np.array([median_phi(u.mean)])
    return np.linspace(lo, hi, cfg.n_rotations)


def build_hull(u: UncertainBox, cfg: HullConfig = HullConfig()) -> HullPolygon:
    """Convex hull of percentile corners over the sampled rotation interval."""
    draws = _standard_draws(cfg)
    center = (u.mean.x, u.mean.y)
    corners: list[Point] = []
    for phi in rotation_samples(u, cfg):
        ext_l, ext_w = face_samples(u, float(phi), draws)
        corners.extend(
            percentile_corners(
                FaceHistogram.from_samples(ext_l),
                FaceHistogram.from_samples(ext_w),
                center,
                float(phi),
                cfg.percentile,
            )
        )
    try:
        return convex_hull(corners)
    except DegenerateHullError as exc:
        raise DegenerateHullError(f"percentile corners collapse: {exc}") from None


__all__ = [
    "PARAM_NAMES",
    "BoxParams",
    "OrientedBox",
    "UncertainBox",
    "HullConfig",
    "HullPolygon",
    "FaceHistogram",
    "encode_box",
    "decode_median",
    "median_phi",
    "phi_bounds",
    "face_distributions",
    "face_samples",
    "box_frame_covariance",
    "percentile_corners",
    "rotation_samples",
    "build_hull",
    "convex_hull",
]
