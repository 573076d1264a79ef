"""Uncertainty calculus for bird's-eye-view object detection.

Grid-map rasterization (``gridmap``), uncertain boxes and percentile hulls
(``uncert``), MC-dropout losses and moments (``bnn``), evaluation
(``evaluation``), a synthetic oracle (``sim``) and file formats (``io``).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BevUncertError,
    ConfigError,
    DegenerateHullError,
    DomainError,
    EmptyInputError,
    GeometryError,
    OrientationUndefinedError,
    ParseError,
    TrainingDivergenceError,
)
from .gridmap import GridConfig, GridMap, PointCloud, rasterize  # noqa: E402
from .uncert import BoxParams, HullConfig, OrientedBox, UncertainBox, build_hull, decode_median, encode_box  # noqa: E402

__all__ = [
    "__version__",
    "BevUncertError",
    "ConfigError",
    "DegenerateHullError",
    "DomainError",
    "EmptyInputError",
    "GeometryError",
    "OrientationUndefinedError",
    "ParseError",
    "TrainingDivergenceError",
    "GridConfig",
    "GridMap",
    "PointCloud",
    "rasterize",
    "BoxParams",
    "HullConfig",
    "OrientedBox",
    "UncertainBox",
    "build_hull",
    "decode_median",
    "encode_box",
]
