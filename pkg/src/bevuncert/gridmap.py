"""Multi-layer top-view grid maps rasterized from a single range sensor.

Rows run along x (forward), columns along y (left). Cell ``(i, j)`` covers
``[x_min + i*c, x_min + (i+1)*c) x [y_min + j*c, y_min + (j+1)*c)``.
Heights are stored relative to ``ground_z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, GeometryError

LAYER_NAMES = ("detections", "z_min", "z_max", "intensity_mean", "occlusion_height")
RANGE_LAYERS = ("z_min", "z_max")
GROUND_NOISE_MARGIN = 0.3  # m below ground_z treated as ground-return noise
EMPTY = 0.0  # sentinel for z/intensity layers where detections == 0


@dataclass(frozen=True)
class PointCloud:
    """(N, 4) float array of x, y, z, intensity plus the sensor origin."""

    points: np.ndarray
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if np.any(pts[:, 3] < 0):
            raise ValueError("intensities must be non-negative")
        if not all(math.isfinite(v) for v in self.sensor_origin):
            raise ValueError("sensor origin must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sensor_origin", tuple(float(v) for v in self.sensor_origin))

    def __len__(self) -> int:
        return len(self.points)

    def normalized_intensity(self) -> np.ndarray:
        inten = self.points[:, 3]
        if inten.size and inten.max() > 1.0:
            return inten / inten.max()
        return inten


@dataclass(frozen=True)
class GridConfig:
    x_min: float = 0.0
    x_max: float = 60.0
    y_min: float = -30.0
    y_max: float = 30.0
    cell_size: float = 0.1
    ground_z: float = -1.73  # KITTI velodyne mounting height

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size, self.ground_z)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("grid config values must be finite")
        if not self.x_max > self.x_min:
            raise ConfigError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if not self.y_max > self.y_min:
            raise ConfigError(f"y_max ({self.y_max}) must exceed y_min ({self.y_min})")
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def rows(self) -> int:
        return math.ceil((self.x_max - self.x_min) / self.cell_size - 1e-9)

    @property
    def cols(self) -> int:
        return math.ceil((self.y_max - self.y_min) / self.cell_size - 1e-9)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_index(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row, column and in-extent mask for world coordinates."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inside = (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)
        i = np.floor((x - self.x_min) / self.cell_size).astype(np.int64)
        j = np.floor((y - self.y_min) / self.cell_size).astype(np.int64)
        inside &= (i >= 0) & (i < self.rows) & (j >= 0) & (j < self.cols)
        return i, j, inside

    def cell_center(self, i, j) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.x_min + (np.asarray(i) + 0.5) * self.cell_size,
            self.y_min + (np.asarray(j) + 0.5) * self.cell_size,
        )


@dataclass(frozen=True)
class GridMap:
    config: GridConfig
    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.layers.items():
            if arr.shape != self.config.shape:
                raise ValueError(f"layer {name!r} has shape {arr.shape}, expected {self.config.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(self.layers)

    def select(self, names) -> "GridMap":
        """View restricted to ``names``; arrays are shared, not copied."""
        missing = [n for n in names if n not in self.layers]
        if missing:
            raise KeyError(f"unknown layers: {missing}")
        return GridMap(self.config, {n: self.layers[n] for n in names})

    def with_layer(self, name: str, values: np.ndarray) -> "GridMap":
        layers = dict(self.layers)
        layers[name] = values
        return GridMap(self.config, layers)


def _filter_ground_noise(cloud: PointCloud, cfg: GridConfig) -> np.ndarray:
    return cloud.points[:, 2] >= cfg.ground_z - GROUND_NOISE_MARGIN


def rasterize(cloud: PointCloud, cfg: GridConfig = GridConfig()) -> GridMap:
    """Accumulate per-cell count, height range, mean intensity and occlusion height.

    All reductions are done in a canonical (cell, value) order so the result
    does not depend on the order of the input points.
    """
    if len(cloud) == 0:
        raise EmptyInputError("point cloud is empty")
    keep = _filter_ground_noise(cloud, cfg)
    pts = cloud.points[keep]
    intensity = cloud.normalized_intensity()[keep]
    i, j, inside = cfg.cell_index(pts[:, 0], pts[:, 1])
    flat = (i * cfg.cols + j)[inside]
    z = pts[inside, 2] - cfg.ground_z
    inten = intensity[inside]

    n_cells = cfg.rows * cfg.cols
    count = np.bincount(flat, minlength=n_cells).astype(np.float64)
    z_min = np.full(n_cells, np.inf)
    z_max = np.full(n_cells, -np.inf)
    np.minimum.at(z_min, flat, z)
    np.maximum.at(z_max, flat, z)
    order = np.lexsort((inten, flat))
    inten_sum = np.bincount(flat[order], weights=inten[order], minlength=n_cells)

    occupied = count > 0
    z_min[~occupied] = EMPTY
    z_max[~occupied] = EMPTY
    inten_mean = np.full(n_cells, EMPTY)
    inten_mean[occupied] = inten_sum[occupied] / count[occupied]

    shape = cfg.shape
    grid = GridMap(
        cfg,
        {
            "detections": count.reshape(shape).astype(np.float32),
            "z_min": z_min.reshape(shape).astype(np.float32),
            "z_max": z_max.reshape(shape).astype(np.float32),
            "intensity_mean": inten_mean.reshape(shape).astype(np.float32),
            "occlusion_height": np.zeros(shape, dtype=np.float32),
        },
    )
    return cast_occlusions(cloud, cfg, grid)


def _clip_to_box(ox, oy, dx, dy, t0, cfg: GridConfig):
    """Slab clip of rays ``o + t*d`` (t >= t0) to the grid rectangle."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tx1 = (cfg.x_min - ox) / dx
        tx2 = (cfg.x_min + cfg.rows * cfg.cell_size - ox) / dx
        ty1 = (cfg.y_min - oy) / dy
        ty2 = (cfg.y_min + cfg.cols * cfg.cell_size - oy) / dy
    x_lo = np.where(dx == 0, np.where((ox >= cfg.x_min) & (ox < cfg.x_max), -np.inf, np.inf), np.minimum(tx1, tx2))
    x_hi = np.where(dx == 0, np.where((ox >= cfg.x_min) & (ox < cfg.x_max), np.inf, -np.inf), np.maximum(tx1, tx2))
    y_lo = np.where(dy == 0, np.where((oy >= cfg.y_min) & (oy < cfg.y_max), -np.inf, np.inf), np.minimum(ty1, ty2))
    y_hi = np.where(dy == 0, np.where((oy >= cfg.y_min) & (oy < cfg.y_max), np.inf, -np.inf), np.maximum(ty1, ty2))
    t_enter = np.maximum(np.maximum(x_lo, y_lo), t0)
    t_exit = np.minimum(x_hi, y_hi)
    return t_enter, t_exit


def traverse_rays(ox, oy, dx, dy, t_start, cfg: GridConfig):
    """2-D Amanatides-Woo traversal of many rays in lockstep.

    Rays are ``o + t*d`` with unit ``d`` and ``t >= t_start``, clipped to the
    grid. Yields ``(ray_index, row, col)`` arrays, one batch per step; every
    ray visits its cells in order of increasing ``t``.
    """
    ox, oy, dx, dy, t_start = (np.asarray(a, dtype=np.float64) for a in (ox, oy, dx, dy, t_start))
    t_enter, t_exit = _clip_to_box(ox, oy, dx, dy, t_start, cfg)
    live = np.flatnonzero(t_enter < t_exit)
    if live.size == 0:
        return
    c = cfg.cell_size
    ox, oy, dx, dy = ox[live], oy[live], dx[live], dy[live]
    t0, t1 = t_enter[live], t_exit[live]
    # position a hair inside the entry cell to pick its index robustly
    tm = np.minimum(t0 + 1e-9 * c, 0.5 * (t0 + t1))
    i = np.clip(np.floor((ox + tm * dx - cfg.x_min) / c).astype(np.int64), 0, cfg.rows - 1)
    j = np.clip(np.floor((oy + tm * dy - cfg.y_min) / c).astype(np.int64), 0, cfg.cols - 1)
    step_i = np.where(dx > 0, 1, -1)
    step_j = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        bx = cfg.x_min + (i + (dx > 0)) * c
        by = cfg.y_min + (j + (dy > 0)) * c
        t_max_x = np.where(dx != 0, (bx - ox) / dx, np.inf)
        t_max_y = np.where(dy != 0, (by - oy) / dy, np.inf)
        t_delta_x = np.where(dx != 0, c / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, c / np.abs(dy), np.inf)

    ray = live
    while ray.size:
        yield ray, i, j
        step_x = t_max_x < t_max_y
        t_next = np.where(step_x, t_max_x, t_max_y)
        i = np.where(step_x, i + step_i, i)
        j = np.where(step_x, j, j + step_j)
        t_max_x = np.where(step_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(step_x, t_max_y, t_max_y + t_delta_y)
        alive = (t_next < t1) & (i >= 0) & (i < cfg.rows) & (j >= 0) & (j < cfg.cols)
        if not alive.all():
            ray, i, j = ray[alive], i[alive], j[alive]
            ox, oy, dx, dy, t1 = ox[alive], oy[alive], dx[alive], dy[alive], t1[alive]
            step_i, step_j = step_i[alive], step_j[alive]
            t_max_x, t_max_y = t_max_x[alive], t_max_y[alive]
            t_delta_x, t_delta_y = t_delta_x[alive], t_delta_y[alive]


def shadow_height(sensor_h: float, point_h, r_point, r):
    """Height above ground of the line sensor->point, extended to range ``r``."""
    return np.maximum(sensor_h + (point_h - sensor_h) * (r / r_point), 0.0)


def cast_occlusions(cloud: PointCloud, cfg: GridConfig, grid: GridMap) -> GridMap:
    """Fill ``occlusion_height`` with the highest shadow boundary over each cell.

    Each reflection casts a ray from the sensor through the point and beyond.
    A traversed cell whose centre projects onto the ray past the point takes
    the shadow boundary height at that projected range.
    """
    sx, sy, sz = cloud.sensor_origin
    sensor_h = sz - cfg.ground_z
    if sensor_h <= 0:
        raise GeometryError(f"sensor origin z={sz} is not above ground_z={cfg.ground_z}")
    occ = np.zeros(cfg.rows * cfg.cols, dtype=np.float64)
    if len(cloud):
        pts = cloud.points[_filter_ground_noise(cloud, cfg)]
        vx = pts[:, 0] - sx
        vy = pts[:, 1] - sy
        r_p = np.hypot(vx, vy)
        ok = r_p > 1e-9
        vx, vy, r_p = vx[ok], vy[ok], r_p[ok]
        z_p = pts[ok, 2] - cfg.ground_z
        dx, dy = vx / r_p, vy / r_p
        ox = np.full_like(dx, sx)
        oy = np.full_like(dy, sy)
        for ray, i, j in traverse_rays(ox, oy, dx, dy, r_p, cfg):
            cx, cy = cfg.cell_center(i, j)
            r_c = (cx - sx) * dx[ray] + (cy - sy) * dy[ray]
            beyond = r_c > r_p[ray]
            if not beyond.any():
                continue
            rr = ray[beyond]
            h = shadow_height(sensor_h, z_p[rr], r_p[rr], r_c[beyond])
            np.maximum.at(occ, (i * cfg.cols + j)[beyond], h)
    return grid.with_layer("occlusion_height", occ.reshape(cfg.shape).astype(np.float32))


def range_layers(grid: GridMap) -> GridMap:
    """The two-layer occupied-space encoding (min and max height)."""
    return grid.select(RANGE_LAYERS)


__all__ = [
    "LAYER_NAMES",
    "RANGE_LAYERS",
    "PointCloud",
    "GridConfig",
    "GridMap",
    "rasterize",
    "cast_occlusions",
    "range_layers",
    "traverse_rays",
    "shadow_height",
]
