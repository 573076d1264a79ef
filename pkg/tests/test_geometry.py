import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevuncert.errors import DegenerateHullError
from bevuncert.geometry import (
    HullPolygon,
    clip_convex,
    convex_hull,
    point_in_convex_polygon,
    points_in_convex_polygon,
    polygon_area,
    polygon_contains_polygon,
    rect_corners,
)

coord = st.floats(-50, 50, allow_nan=False)


class TestPolygonArea:
    def test_unit_square_ccw_positive(self):
        assert polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == 1.0

    def test_clockwise_is_negative(self):
        assert polygon_area([(0, 1), (1, 1), (1, 0), (0, 0)]) == -1.0


class TestConvexHull:
    def test_interior_point_removed(self):
        hull = convex_hull([(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)])
        assert sorted(hull.vertices) == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_triangle(self):
        pts = [(0.0, 0.0), (2.0, 0.0), (0.0, 3.0)]
        assert sorted(convex_hull(pts).vertices) == sorted(pts)

    def test_counter_clockwise(self):
        hull = convex_hull([(0, 0), (0, 1), (1, 1), (1, 0)])
        assert hull.area > 0

    def test_collinear_points_pruned(self):
        hull = convex_hull([(0, 0), (1, 0), (2, 0), (2, 2), (0, 2), (1, 2)])
        assert len(hull.vertices) == 4

    @pytest.mark.parametrize("pts", [[], [(0, 0)], [(0, 0), (1, 1)], [(0, 0), (1, 1), (2, 2), (3, 3)]])
    def test_degenerate(self, pts):
        with pytest.raises(DegenerateHullError):
            convex_hull(pts)

    def test_duplicates_do_not_fool_the_count(self):
        with pytest.raises(DegenerateHullError):
            convex_hull([(0, 0), (0, 0), (1, 1)])

    def test_area_dominates_every_triangle(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(10_000, 2))
        hull = convex_hull(pts)
        sub = pts[rng.choice(len(pts), 50, replace=False)]
        best = max(
            abs(polygon_area([tuple(a), tuple(b), tuple(c)])) for a, b, c in itertools.combinations(sub, 3)
        )
        assert hull.area >= best

    def test_contains_every_input(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-5, 5, size=(500, 2))
        hull = convex_hull(pts)
        assert hull.contains_points(pts).all()

    @given(st.lists(st.tuples(coord, coord), min_size=3, max_size=40))
    def test_hull_is_strictly_convex_ccw(self, pts):
        try:
            hull = convex_hull(pts)
        except DegenerateHullError:
            return
        v = hull.as_array()
        n = len(v)
        for k in range(n):
            a, b, c = v[k], v[(k + 1) % n], v[(k + 2) % n]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            assert cross > 0
        assert hull.contains_points(np.asarray(pts, dtype=float), tol=1e-7).all()


class TestHullPolygon:
    def test_rejects_short_vertex_list(self):
        with pytest.raises(DegenerateHullError):
            HullPolygon(((0.0, 0.0), (1.0, 0.0)))

    def test_containment_of_polygon(self):
        outer = convex_hull(rect_corners(0, 0, 4, 4, 0))
        assert polygon_contains_polygon(outer, rect_corners(0, 0, 2, 2, 0.3))
        assert not polygon_contains_polygon(outer, rect_corners(3, 0, 2, 2, 0))


class TestPointInPolygon:
    square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]

    def test_inside_outside_boundary(self):
        assert point_in_convex_polygon((0.5, 0.5), self.square)
        assert not point_in_convex_polygon((1.5, 0.5), self.square)
        assert point_in_convex_polygon((1.0, 0.5), self.square)

    def test_vectorized_agrees(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-0.5, 1.5, size=(200, 2))
        vec = points_in_convex_polygon(pts, self.square)
        assert list(vec) == [point_in_convex_polygon(tuple(p), self.square) for p in pts]


class TestClipAndCorners:
    def test_overlap_area(self):
        a = rect_corners(0, 0, 2, 2, 0)
        b = rect_corners(1, 0, 2, 2, 0)
        assert polygon_area(clip_convex(a, b)) == pytest.approx(2.0)

    def test_disjoint_is_empty(self):
        assert len(clip_convex(rect_corners(0, 0, 1, 1, 0), rect_corners(5, 0, 1, 1, 0))) < 3

    def test_rect_corners_length_along_heading(self):
        corners = np.array(rect_corners(0, 0, 4, 2, math.pi / 2))
        assert np.ptp(corners[:, 1]) == pytest.approx(4.0)
        assert np.ptp(corners[:, 0]) == pytest.approx(2.0)
        assert polygon_area([tuple(c) for c in corners]) == pytest.approx(8.0)
