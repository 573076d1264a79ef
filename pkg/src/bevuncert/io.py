"""Readers and writers: KITTI labels and velodyne clouds, grid maps, CSV, SVG.

All binary formats are little-endian. The camera-to-BEV transform used by
``to_bev`` is the simplified fixed one (no calibration matrices):
BEV x = camera z, BEV y = -camera x, heading = -rotation_y - pi/2.
"""

from __future__ import annotations

import base64
import csv
import io as _stdio
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ParseError
from .evaluation import DONTCARE, LabeledObject, UncertaintyBins
from .geometry import HullPolygon, Point
from .gridmap import GridConfig, GridMap, PointCloud
from .uncert import PARAM_NAMES, BoxParams, OrientedBox, UncertainBox, decode_median

KNOWN_TYPES = frozenset(
    {"Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc", DONTCARE}
)
GRIDMAP_MAGIC = "GRIDMAP"
GRIDMAP_VERSION = "v1"
SVG_SCALE = 10.0  # px per metre
COLORS = {"gt": "green", "median": "blue", "hull": "red"}


def fmt(v: float) -> str:
    """Shortest text that round-trips the float exactly."""
    return repr(float(v))


# ---------------------------------------------------------------------------
# Point clouds


def read_point_cloud(data: bytes, sensor_origin=(0.0, 0.0, 0.0)) -> PointCloud:
    """KITTI velodyne binary: consecutive float32 (x, y, z, intensity)."""
    if len(data) % 16:
        raise ParseError(f"point cloud length {len(data)} is not a multiple of 16 bytes")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise ParseError(f"non-finite value in point {bad}")
    return PointCloud(pts, sensor_origin)


def write_point_cloud(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def read_point_cloud_text(text: str, sensor_origin=(0.0, 0.0, 0.0), source: str | None = None) -> PointCloud:
    """ASCII cloud, one ``x y z intensity`` per line; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", lineno, source)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno, source) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", lineno, source)
        rows.append(vals)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 4), sensor_origin)


def load_point_cloud(path, sensor_origin=(0.0, 0.0, 0.0)) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".bin":
        try:
            return read_point_cloud(path.read_bytes(), sensor_origin)
        except ParseError as exc:
            raise ParseError(str(exc), source=str(path)) from None
    return read_point_cloud_text(path.read_text(), sensor_origin, source=str(path))


# ---------------------------------------------------------------------------
# Grid maps


def write_gridmap(grid: GridMap) -> bytes:
    cfg = grid.config
    names = grid.layer_names
    header = " ".join(
        [GRIDMAP_MAGIC, GRIDMAP_VERSION, str(cfg.rows), str(cfg.cols), fmt(cfg.cell_size), fmt(cfg.x_min), fmt(cfg.y_min), str(len(names)), *names]
    )
    body = b"".join(np.ascontiguousarray(grid[n], dtype="<f4").tobytes() for n in names)
    return header.encode("ascii") + b"\n" + body


def read_gridmap(data: bytes, ground_z: float = GridConfig.ground_z) -> GridMap:
    """Inverse of ``write_gridmap``; the file does not carry ``ground_z``."""
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing grid map header line", 1)
    try:
        fields = data[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise ParseError("grid map header is not ASCII", 1) from None
    if len(fields) < 8 or fields[0] != GRIDMAP_MAGIC:
        raise ParseError("not a GRIDMAP file", 1)
    if fields[1] != GRIDMAP_VERSION:
        raise ParseError(f"unsupported grid map version {fields[1]}", 1)
    try:
        rows, cols = int(fields[2]), int(fields[3])
        cell, x_min, y_min = float(fields[4]), float(fields[5]), float(fields[6])
        n_layers = int(fields[7])
    except ValueError:
        raise ParseError("malformed grid map header", 1) from None
    names = fields[8:]
    if len(names) != n_layers:
        raise ParseError(f"header declares {n_layers} layers but names {len(names)}", 1)
    body = data[nl + 1 :]
    expected = rows * cols * 4 * n_layers
    if len(body) != expected:
        raise ParseError(f"grid map body has {len(body)} bytes, expected {expected}")
    cfg = GridConfig(x_min, x_min + rows * cell, y_min, y_min + cols * cell, cell, ground_z)
    arr = np.frombuffer(body, dtype="<f4").reshape(n_layers, rows, cols)
    return GridMap(cfg, {n: arr[k].astype(np.float32) for k, n in enumerate(names)})


# ---------------------------------------------------------------------------
# KITTI labels


@dataclass(frozen=True)
class KittiLabelRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom
    dimensions: tuple[float, float, float]  # height, width, length
    location: tuple[float, float, float]  # camera x, y, z
    rotation_y: float
    score: float | None = None

    @property
    def known_type(self) -> bool:
        return self.type in KNOWN_TYPES


def parse_labels(text: str, source: str | None = None) -> list[KittiLabelRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (15, 16):
            raise ParseError(f"expected 15 or 16 fields, got {len(parts)}", lineno, source)
        try:
            nums = [float(p) for p in parts[1:]]
        except ValueError:
            raise ParseError(f"non-numeric field in {line.strip()!r}", lineno, source) from None
        if not all(math.isfinite(v) for v in nums):
            raise ParseError("non-finite numeric field", lineno, source)
        occ = nums[1]
        if occ != int(occ):
            raise ParseError(f"occlusion level must be an integer, got {parts[2]}", lineno, source)
        left, top, right, bottom = nums[3:7]
        if left > right or top > bottom:
            raise ParseError("bbox must satisfy left <= right and top <= bottom", lineno, source)
        records.append(
            KittiLabelRecord(
                parts[0],
                nums[0],
                int(occ),
                nums[2],
                (left, top, right, bottom),
                tuple(nums[7:10]),
                tuple(nums[10:13]),
                nums[13],
                nums[14] if len(nums) == 15 else None,
            )
        )
    return records


def format_labels(records: Iterable[KittiLabelRecord]) -> str:
    lines = []
    for r in records:
        vals = [r.truncated, r.occluded, r.alpha, *r.bbox, *r.dimensions, *r.location, r.rotation_y]
        parts = [r.type, fmt(vals[0]), str(int(vals[1])), *(fmt(v) for v in vals[2:])]
        if r.score is not None:
            parts.append(fmt(r.score))
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def _wrap_half_pi(a: float) -> float:
    """Into (-pi/2, pi/2]."""
    return a - math.pi * math.ceil((a - math.pi / 2) / math.pi)


def _wrap_pi(a: float) -> float:
    """Into (-pi, pi]."""
    return a - 2 * math.pi * math.ceil((a - math.pi) / (2 * math.pi))


def to_bev(record: KittiLabelRecord) -> LabeledObject:
    """Camera-frame label to BEV object.

    A rectangle is symmetric under a half turn, so the heading is folded
    into (-pi/2, pi/2] without touching length and width. Records without
    positive length and width (KITTI DontCare rows) get ``box=None``.
    """
    h, w, l = record.dimensions
    cx, cy, cz = record.location
    box = None
    if l > 0 and w > 0:
        box = OrientedBox(cz, -cx, l, w, _wrap_half_pi(-record.rotation_y - math.pi / 2))
    return LabeledObject(
        label=record.type,
        box=box,
        score=record.score,
        truncation=record.truncated,
        occlusion=record.occluded,
        bbox=record.bbox,
        height=h,
        elevation=cy,
        alpha=record.alpha,
    )


def from_bev(obj: LabeledObject) -> KittiLabelRecord:
    if obj.box is None:
        dims, loc, rot = (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0
    else:
        b = obj.box
        dims = (obj.height, b.width, b.length)
        loc = (-b.y, obj.elevation, b.x)
        rot = _wrap_pi(-b.phi - math.pi / 2)
    return KittiLabelRecord(obj.label, obj.truncation, obj.occlusion, obj.alpha, tuple(obj.bbox), dims, loc, rot, obj.score)


def load_label_dir(path) -> dict[str, list[LabeledObject]]:
    """All ``*.txt`` label files in a directory keyed by file stem."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"label directory not found: {path}")
    frames = {}
    for f in sorted(path.glob("*.txt")):
        frames[f.stem] = [to_bev(r) for r in parse_labels(f.read_text(), source=str(f))]
    return frames


# ---------------------------------------------------------------------------
# Uncertain-box CSV


UNCERTAIN_COLUMNS = (
    "frame",
    "class",
    "score",
    *PARAM_NAMES,
    *(f"var_{p}" for p in PARAM_NAMES),
    "entropy",
)


@dataclass(frozen=True)
class UncertainDetection:
    frame: str
    label: str
    score: float
    box: UncertainBox

    def labeled(self) -> LabeledObject:
        return LabeledObject(self.label, decode_median(self.box), self.score)


def write_uncertain_csv(rows: Iterable[UncertainDetection]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(UNCERTAIN_COLUMNS)
    for r in rows:
        m = r.box.mean.as_array()
        w.writerow([r.frame, r.label, fmt(r.score), *(fmt(v) for v in m), *(fmt(v) for v in r.box.var), fmt(r.box.class_entropy)])
    return buf.getvalue()


def read_uncertain_csv(text: str, source: str | None = None) -> list[UncertainDetection]:
    reader = csv.reader(_stdio.StringIO(text))
    out = []
    header = None
    for lineno, row in enumerate(reader, 1):
        if not row or all(not c.strip() for c in row):
            continue
        row = [c.strip() for c in row]
        if header is None:
            header = row
            if tuple(header) != UNCERTAIN_COLUMNS:
                raise ParseError(f"unexpected header {header}", lineno, source)
            continue
        if len(row) != len(UNCERTAIN_COLUMNS):
            raise ParseError(f"expected {len(UNCERTAIN_COLUMNS)} fields, got {len(row)}", lineno, source)
        try:
            nums = [float(v) for v in row[2:]]
        except ValueError:
            raise ParseError("non-numeric field", lineno, source) from None
        try:
            box = UncertainBox(BoxParams.from_array(nums[1:7]), tuple(nums[7:13]), class_entropy=nums[13])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        out.append(UncertainDetection(row[0], row[1], nums[0], box))
    if header is None:
        raise ParseError("missing header", 1, source)
    return out


def write_hull_csv(hulls: Sequence[tuple[str, HullPolygon]]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["object_id", "vertex_index", "x", "y"])
    for oid, hull in hulls:
        for k, (x, y) in enumerate(hull.vertices):
            w.writerow([oid, k, fmt(x), fmt(y)])
    return buf.getvalue()


def read_hull_csv(text: str) -> dict[str, HullPolygon]:
    reader = csv.DictReader(_stdio.StringIO(text))
    verts: dict[str, list[Point]] = {}
    for row in reader:
        verts.setdefault(row["object_id"], []).append((float(row["x"]), float(row["y"])))
    return {k: HullPolygon(tuple(v)) for k, v in verts.items()}


# ---------------------------------------------------------------------------
# SVG


class _Frame:
    """World (BEV) metres to SVG pixels with the y axis flipped."""

    def __init__(self, x_min: float, x_max: float, y_min: float, y_max: float):
        self.x_min, self.y_max = x_min, y_max
        self.width = (x_max - x_min) * SVG_SCALE
        self.height = (y_max - y_min) * SVG_SCALE

    def xy(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.x_min) * SVG_SCALE, (self.y_max - y) * SVG_SCALE)


def _poly(frame: _Frame, pts: Sequence[Point], color: str, cls: str) -> str:
    coords = " ".join(f"{px:.2f},{py:.2f}" for px, py in (frame.xy(x, y) for x, y in pts))
    return f'<polygon class="{cls}" points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'


def _bounds(polys: Sequence[Sequence[Point]], margin: float = 2.0):
    pts = np.array([p for poly in polys for p in poly], dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return (0.0, 10.0, -5.0, 5.0)
    return (pts[:, 0].min() - margin, pts[:, 0].max() + margin, pts[:, 1].min() - margin, pts[:, 1].max() + margin)


def _layer_image(grid: GridMap, layer: str) -> str:
    from PIL import Image

    vals = np.asarray(grid[layer], dtype=np.float64)
    hi = vals.max()
    norm = vals / hi if hi > 0 else np.zeros_like(vals)
    # rows run along +x (screen up), columns along +y (screen left)
    img = (255 * (1.0 - norm[::-1, ::-1])).astype(np.uint8)
    buf = _stdio.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def write_svg_overlay(
    grid: GridMap | None = None,
    hulls: Sequence[HullPolygon] = (),
    boxes: Sequence[OrientedBox] = (),
    ground_truth: Sequence[OrientedBox] = (),
    layer: str = "detections",
) -> str:
    """Top view with ground truth in green, median boxes in blue, hulls in red.

    With ``grid`` given, the named layer is drawn underneath as a grey image
    and the view covers the grid extent.
    """
    polys = [h.vertices for h in hulls] + [b.corners() for b in boxes] + [g.corners() for g in ground_truth]
    if grid is not None:
        c = grid.config
        x_lo, x_hi = c.x_min, c.x_min + c.rows * c.cell_size
        y_lo, y_hi = c.y_min, c.y_min + c.cols * c.cell_size
    else:
        x_lo, x_hi, y_lo, y_hi = _bounds(polys)
    # screen x follows -y (left is left), screen y follows -x (forward is up)
    frame = _Frame(-y_hi, -y_lo, x_lo, x_hi)

    def to_screen(poly):
        return [(-y, x) for x, y in poly]

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width:.0f}" height="{frame.height:.0f}" '
        f'viewBox="0 0 {frame.width:.2f} {frame.height:.2f}">',
    ]
    if grid is not None:
        data = _layer_image(grid, layer)
        parts.append(
            f'<image x="0" y="0" width="{frame.width:.2f}" height="{frame.height:.2f}" '
            f'preserveAspectRatio="none" href="data:image/png;base64,{data}"/>'
        )
    parts += [_poly(frame, to_screen(g.corners()), COLORS["gt"], "ground-truth") for g in ground_truth]
    parts += [_poly(frame, to_screen(b.corners()), COLORS["median"], "median-box") for b in boxes]
    parts += [_poly(frame, to_screen(h.vertices), COLORS["hull"], "hull") for h in hulls]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg_layer(grid: GridMap, layer: str) -> str:
    return write_svg_overlay(grid, layer=layer)


def write_svg_bins(bins: UncertaintyBins, metrics: Sequence[str] = ("total_variance",), title: str = "") -> str:
    """Bar chart of per-bin means (one bar group per bin, one colour per metric)."""
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
    w, h, pad = 640.0, 320.0, 40.0
    n = len(bins.counts)
    vals = np.array([[np.nan_to_num(bins.means[m][b]) for m in metrics] for b in range(n)]).reshape(n, len(metrics))
    top = vals.max() if vals.size and vals.max() > 0 else 1.0
    slot = (w - 2 * pad) / max(n, 1)
    bar = slot / (len(metrics) + 1)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}">',
        f'<text x="{pad}" y="20" font-size="14">{escape(title or bins.axis)}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
    ]
    for b in range(n):
        x0 = pad + b * slot
        for k in range(len(metrics)):
            bh = (h - 2 * pad) * vals[b, k] / top
            parts.append(
                f'<rect x="{x0 + k * bar:.2f}" y="{h - pad - bh:.2f}" width="{bar:.2f}" height="{bh:.2f}" '
                f'fill="{palette[k % len(palette)]}"/>'
            )
        parts.append(f'<text x="{x0:.2f}" y="{h - pad + 14:.2f}" font-size="9">{bins.edges[b]:g}</text>')
    for k, m in enumerate(metrics):
        parts.append(f'<text x="{w - pad - 150}" y="{20 + 14 * k}" font-size="11" fill="{palette[k % len(palette)]}">{escape(m)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


__all__ = [
    "KittiLabelRecord",
    "UncertainDetection",
    "read_point_cloud",
    "read_point_cloud_text",
    "load_point_cloud",
    "write_point_cloud",
    "write_gridmap",
    "read_gridmap",
    "parse_labels",
    "format_labels",
    "to_bev",
    "from_bev",
    "load_label_dir",
    "write_uncertain_csv",
    "read_uncertain_csv",
    "write_hull_csv",
    "read_hull_csv",
    "write_svg_overlay",
    "write_svg_layer",
    "write_svg_bins",
]
