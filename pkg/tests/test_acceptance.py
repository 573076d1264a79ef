"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run under pytest (lines appear in the live output) or directly with
``python tests/test_acceptance.py`` for just the summary.
"""

import csv
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from bevuncert.bnn import (
    DEFAULT_T,
    DropoutSpec,
    MCRegressionSamples,
    attenuated_classification_loss,
    heteroscedastic_dataset,
    heteroscedastic_loss,
    l1_heteroscedastic_loss,
    predictive_moments,
    train_tiny_regressor,
)
from bevuncert.cli import main
from bevuncert.evaluation import CLASSES, LabeledObject, average_precision, bin_uncertainties, match, rotated_iou
from bevuncert.geometry import points_in_convex_polygon
from bevuncert.sim import NoiseModel, SceneSpec, parameter_residuals, simulate
from bevuncert.uncert import HullConfig, OrientedBox, PARAM_NAMES, build_hull

RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, title: str, limit_s: float, check) -> tuple[bool, str]:
    t0 = time.perf_counter()
    ok, detail = check()
    elapsed = time.perf_counter() - t0
    in_time = elapsed < limit_s
    passed = bool(ok and in_time)
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d} {title}: {detail}; {elapsed:.1f}s (limit {limit_s:g}s)"
    RESULTS[n] = (passed, line)
    return passed, line


def emit(capsys, n, title, limit_s, check):
    passed, line = report(n, title, limit_s, check)
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


# ---------------------------------------------------------------------------


def check_moments():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 60))
        shape = (T,) if rng.random() < 0.5 else (T, int(rng.integers(1, 8)))
        y = rng.normal(rng.normal(0, 3), rng.uniform(0.01, 5), shape)
        v = rng.uniform(0, 2, shape) ** 2
        mean, var = predictive_moments(MCRegressionSamples(y, v))
        expected = np.var(y, axis=0) + v.mean(axis=0)
        worst = max(worst, float(np.max(np.abs(np.asarray(var) - expected))), float(np.max(np.abs(np.asarray(mean) - y.mean(axis=0)))))
    const_ok = True
    for c in (0.1, -3.7, 1e6, 2.0 / 3.0):
        for T in (1, 3, 7, 50):
            _, var = predictive_moments(MCRegressionSamples(np.full(T, c), np.zeros(T)))
            const_ok &= var == 0.0
    return worst <= 1e-12 and const_ok, f"max |error| {worst:.1e}, constant passes give 0: {const_ok}"


def _central(fn, x, h):
    return (fn(x + h) - fn(x - h)) / (2 * h)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def check_gradients():
    rng = np.random.default_rng(2)
    worst = {"l2": 0.0, "l1": 0.0, "cls": 0.0}
    n_l1 = 0
    for _ in range(100):
        y, f, s = rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 1.5)
        g = heteroscedastic_loss(y, f, s)
        worst["l2"] = max(
            worst["l2"],
            _rel(g.d_f, _central(lambda t: heteroscedastic_loss(y, t, s).value, f, 1e-5)),
            _rel(g.d_s, _central(lambda t: heteroscedastic_loss(y, f, t).value, s, 1e-5)),
        )
    while n_l1 < 100:
        y, f, s = rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 1.5)
        if abs(y - f) < 1e-3:  # kink
            continue
        n_l1 += 1
        g = l1_heteroscedastic_loss(y, f, s)
        worst["l1"] = max(
            worst["l1"],
            _rel(g.d_f, _central(lambda t: l1_heteroscedastic_loss(y, t, s).value, f, 1e-5)),
            _rel(g.d_s, _central(lambda t: l1_heteroscedastic_loss(y, f, t).value, s, 1e-5)),
        )
    for k in range(100):
        C = int(rng.integers(2, 6))
        logits, sigma, target = rng.normal(0, 2, C), rng.uniform(0.05, 2, C), int(rng.integers(C))
        g = attenuated_classification_loss(logits, sigma, target, J=20, seed=k)
        for c in range(C):
            e = np.eye(C)[c]
            worst["cls"] = max(
                worst["cls"],
                _rel(g.d_f[c], _central(lambda t: attenuated_classification_loss(logits + t * e, sigma, target, 20, k).value, 0.0, 1e-5)),
                _rel(g.d_s[c], _central(lambda t: attenuated_classification_loss(logits, sigma + t * e, target, 20, k).value, 0.0, 1e-5)),
            )
    ok = all(v <= 1e-6 for v in worst.values())
    return ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def check_lognormal():
    rng = np.random.default_rng(3)
    median, sigma = 4.2, 0.3
    draws = median * np.exp(sigma * rng.standard_normal(1_000_000))
    mass = float(np.mean((draws >= median / math.exp(sigma)) & (draws <= median * math.exp(sigma))))
    return abs(mass - 0.683) <= 0.005, f"mass {mass:.4f} (target 0.683 +- 0.005)"


def check_hull():
    spec = SceneSpec(n_frames=600, seed=1)
    inside = total = objects = 0
    area_ok = True
    for fr, dets in simulate(spec, NoiseModel(), with_cloud=False):
        for d in dets:
            corners = np.array(fr.ground_truth[d.gt_index].box.corners())
            hull = build_hull(d.box, HullConfig())
            inside += int(hull.contains_points(corners).sum())
            total += 4
            objects += 1
            if objects <= 200:
                areas = [build_hull(d.box, HullConfig(percentile=p)).area for p in (0.6, 0.8, 0.9, 0.95)]
                area_ok &= all(b >= a - 1e-9 for a, b in zip(areas, areas[1:]))
    cover = inside / total
    ok = objects >= 5000 and cover >= 0.92 and area_ok
    return ok, f"{objects} objects, corner coverage {cover:.4f} (>= 0.92), area monotone in p: {area_ok}"


def _mc_iou(a: OrientedBox, b: OrientedBox, rng, n=1_000_000) -> float:
    u = rng.uniform(-0.5, 0.5, (n, 2)) * (a.length, a.width)
    c, s = math.cos(a.phi), math.sin(a.phi)
    pts = np.column_stack([a.x + c * u[:, 0] - s * u[:, 1], a.y + s * u[:, 0] + c * u[:, 1]])
    area_a, area_b = a.length * a.width, b.length * b.width
    inter = area_a * float(points_in_convex_polygon(pts, b.corners(), tol=0.0).mean())
    return inter / (area_a + area_b - inter)


def check_iou():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(500):
        a = OrientedBox(0.0, 0.0, rng.uniform(0.5, 5), rng.uniform(0.5, 3), rng.uniform(-math.pi, math.pi))
        b = OrientedBox(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 5), rng.uniform(0.5, 3), rng.uniform(-math.pi, math.pi))
        worst = max(worst, abs(rotated_iou(a, b) - _mc_iou(a, b, rng)))
    return worst <= 5e-3, f"max |analytic - MC| {worst:.2e} over 500 pairs"


def check_ap():
    def obj(x, score=None):
        return LabeledObject("Car", OrientedBox(x, 0.0, 4.0, 2.0, 0.0), score, bbox=(0, 0, 50, 50))

    gts = [obj(10.0), obj(20.0)]
    dets = [obj(10.0, 0.9), obj(40.0, 0.8), obj(20.0, 0.7)]
    ap = average_precision([match(dets, gts, cls="Car")])
    target = (6 + 5 * 2 / 3) / 11
    per_class = {c: [] for c in CLASSES}
    for fr, sim_dets in simulate(SceneSpec(n_frames=40, seed=6), NoiseModel.zero(), with_cloud=False):
        labeled = [d.labeled() for d in sim_dets]
        for c in CLASSES:
            per_class[c].append(match(labeled, fr.ground_truth, cls=c))
    sim_ap = {c: average_precision(per_class[c]) for c in CLASSES}
    ok = abs(ap - target) <= 1e-9 and all(v == 1.0 for v in sim_ap.values())
    return ok, f"hand case {ap:.12f} vs {target:.12f}, zero-noise AP " + ", ".join(f"{c} {v}" for c, v in sim_ap.items())


def check_heteroscedastic():
    x, y = heteroscedastic_dataset(2000, seed=0)
    model, _ = train_tiny_regressor(x, y, spec=DropoutSpec(0.0), seed=0)
    xs = np.linspace(-2.4, 2.4, 193)  # interior 80% of [-3, 3]
    true = 0.1 + 0.2 * np.abs(xs)
    rel = np.abs(model.predict_sigma(xs[:, None]) - true) / true
    k = int(np.argmax(rel))
    return rel.max() < 0.2, f"max relative error {rel.max():.3f} at x={xs[k]:+.2f} (< 0.2), mean {rel.mean():.3f}"


def check_convergence():
    with tempfile.TemporaryDirectory() as tmp:
        code = main(["calibrate", "--out", tmp, "--T", "50", "--repeats", "20"])
        with open(Path(tmp) / "convergence.csv") as fh:
            rows = {int(r["T"]): r for r in csv.DictReader(fh)}
    s10, s50 = float(rows[10]["std_dev"]), float(rows[50]["std_dev"])
    change = abs(s10 - s50) / s50
    ok = code == 0 and sorted(rows) == list(range(1, 51)) and change < 0.10 and DEFAULT_T == 15
    return ok, f"std-dev T=10 {s10:.4f}, T=50 {s50:.4f}, change {change:.1%} (< 10%), curve rows {len(rows)}, default T {DEFAULT_T}"


def check_binning():
    noise = NoiseModel()
    dist, boxes, res = [], [], []
    for fr, dets in simulate(SceneSpec(n_frames=6000, seed=9), noise, with_cloud=False):
        r = parameter_residuals(dets, fr.ground_truth)
        for d, rr in zip(dets, r):
            dd = fr.ground_truth[d.gt_index].box.distance
            if dd < 55.0:
                dist.append(dd)
                boxes.append(d.box)
                res.append(rr)
    bins = bin_uncertainties(dist, boxes, "distance", 10.0, 5.0, 55.0, residuals=np.array(res))
    dist = np.asarray(dist)
    idx = np.clip(((dist - 5.0) // 10.0).astype(int), 0, len(bins.counts) - 1)
    d_mean = np.array([dist[idx == k].mean() for k in range(len(bins.counts))])
    worst_rep = worst_res = 0.0
    monotone = True
    # trig channels are clipped to [-1, 1] in the simulator, which biases their spread
    for c, name in enumerate(PARAM_NAMES[:4]):
        target = noise.base[c] + noise.slope[c] * d_mean
        reported, empirical = bins.means[f"std_{name}"], bins.residual_std[name]
        worst_rep = max(worst_rep, float(np.max(np.abs(reported / target - 1))))
        worst_res = max(worst_res, float(np.max(np.abs(empirical / target - 1))))
        monotone &= bool(np.all(np.diff(reported[1:]) >= 0) and np.all(np.diff(empirical[1:]) >= 0))
    ok = bins.counts.min() >= 500 and worst_rep <= 0.05 and worst_res <= 0.05 and monotone
    return ok, (
        f"bin counts {bins.counts.tolist()}, worst reported-std error {worst_rep:.2%}, "
        f"worst residual-RMS error {worst_res:.2%} (<= 5%), non-decreasing: {monotone}"
    )


def _pipeline(root: Path) -> dict[str, bytes]:
    steps = [
        ["simulate", "--out", str(root / "sim"), "--frames", "3", "--seed", "11"],
        ["rasterize", str(root / "sim" / "velodyne"), "--out", str(root / "grid"), "--svg"],
        ["hull", str(root / "sim" / "detections.csv"), "--out", str(root / "hull"), "--svg", "--seed", "11"],
        ["eval", "--dets", str(root / "sim" / "detections.csv"), "--gts", str(root / "sim" / "label_2"), "--out", str(root / "eval")],
    ]
    for argv in steps:
        if main(argv) != 0:
            raise RuntimeError(f"pipeline step failed: {argv[0]}")
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        a = _pipeline(Path(tmp) / "a")
        b = _pipeline(Path(tmp) / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    return same, f"{len(a)} output files, byte-identical: {same}"


CRITERIA = [
    (1, "predictive-variance identity", 1, check_moments),
    (2, "loss gradients vs finite differences", 5, check_gradients),
    (3, "log-normal multiplicative-std mass", 10, check_lognormal),
    (4, "hull calibration on simulated objects", 120, check_hull),
    (5, "rotated IoU vs Monte Carlo", 60, check_iou),
    (6, "AP hand case and zero-noise simulation", 5, check_ap),
    (7, "heteroscedastic sigma recovery", 120, check_heteroscedastic),
    (8, "MC pass-count convergence", 60, check_convergence),
    (9, "distance-binned noise recovery", 120, check_binning),
    (10, "pipeline determinism", 60, check_determinism),
]


@pytest.mark.parametrize("n, title, limit_s, check", CRITERIA, ids=[f"criterion_{c[0]:02d}" for c in CRITERIA])
def test_criterion(n, title, limit_s, check, capsys):
    emit(capsys, n, title, limit_s, check)


if __name__ == "__main__":
    for spec in CRITERIA:
        print(report(*spec)[1], flush=True)
