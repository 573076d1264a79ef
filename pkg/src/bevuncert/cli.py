"""Command-line front end.

Subcommands: rasterize, hull, eval, simulate, train, calibrate. Every
subcommand writes only into ``--out`` and is byte-reproducible for a fixed
seed. ``--config FILE`` reads ``key = value`` lines whose keys are the long
flag names; explicit flags override the file.

Exit codes: 0 success, 2 usage/config error, 3 input parse error (including
missing inputs), 4 numerical or domain error.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from . import io as bio
from .bnn import DEFAULT_T, DropoutSpec, TinyRegressor, convergence_study, heteroscedastic_dataset, train_tiny_regressor
from .errors import BevUncertError, ConfigError, DomainError, EmptyInputError, ParseError
from .evaluation import (
    BIN_DEFAULTS,
    CLASSES,
    DIFFICULTIES,
    MatchResult,
    average_precision,
    bin_uncertainties,
    diff_to_base_angle,
    match,
    rotated_iou,
)
from .gridmap import LAYER_NAMES, GridConfig, rasterize
from .sim import NoiseModel, SceneSpec, simulate
from .uncert import HullConfig, build_hull, decode_median, median_phi

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_DOMAIN = 0, 2, 3, 4


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _floats(n: int) -> Callable[[str], tuple[float, ...]]:
    def parse(text: str) -> tuple[float, ...]:
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {len(vals)}")
        return vals

    return parse


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_bytes(data.encode("utf-8"))
    else:
        path.write_bytes(data)


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (bio.fmt(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def _pmap(fn, items: Sequence, jobs: int) -> list:
    """Ordered map, optionally on a thread pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _require(path: Path, kind: str = "file") -> Path:
    if kind == "dir" and not path.is_dir():
        raise FileNotFoundError(f"input directory not found: {path}")
    if kind == "file" and not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _grid_config(a) -> GridConfig:
    return GridConfig(a.x_min, a.x_max, a.y_min, a.y_max, a.cell_size, a.ground_z)


def _hull_config(a) -> HullConfig:
    return HullConfig(a.percentile, a.n_rotations, a.n_mc_samples, a.seed)


def _noise(a) -> NoiseModel:
    return NoiseModel(a.noise_base, a.noise_slope, a.fp_rate, a.miss_base, a.miss_slope)


# ---------------------------------------------------------------------------
# subcommands


def cmd_rasterize(a) -> int:
    src = Path(a.input)
    if src.is_dir():
        files = sorted(src.glob("*.bin")) + sorted(src.glob("*.txt"))
    else:
        files = [_require(src)]
    cfg = _grid_config(a)
    layers = a.layers or LAYER_NAMES
    unknown = [n for n in layers if n not in LAYER_NAMES]
    if unknown:
        raise UsageError(f"unknown layers {unknown}; choose from {','.join(LAYER_NAMES)}")
    out = Path(a.out)
    origin = (0.0, 0.0, a.sensor_z)

    def one(f: Path):
        cloud = bio.load_point_cloud(f, origin)
        if len(cloud) == 0:
            raise EmptyInputError(f"point cloud is empty: {f}")
        grid = rasterize(cloud, cfg)
        return f.stem, grid.select(layers), grid

    for stem, sel, grid in _pmap(one, files, a.jobs):
        _write(out / f"{stem}.gridmap", bio.write_gridmap(sel))
        if a.svg:
            for name in layers:
                _write(out / f"{stem}_{name}.svg", bio.write_svg_layer(grid, name))
    return EXIT_OK


def cmd_hull(a) -> int:
    src = _require(Path(a.input))
    rows = bio.read_uncertain_csv(src.read_text(), source=str(src))
    cfg = _hull_config(a)
    hulls = _pmap(lambda r: build_hull(r.box, cfg), rows, a.jobs)
    ids = [f"{r.frame}:{k}" for k, r in enumerate(rows)]
    out = Path(a.out)
    _write(out / "hulls.csv", bio.write_hull_csv(list(zip(ids, hulls))))
    areas = [(i, r.frame, r.label, h.area, len(h.vertices)) for i, r, h in zip(ids, rows, hulls)]
    _write(out / "hull_areas.csv", _csv(("object_id", "frame", "class", "area", "n_vertices"), areas))
    if a.svg:
        by_frame: dict[str, list[int]] = {}
        for k, r in enumerate(rows):
            by_frame.setdefault(r.frame, []).append(k)
        for frame, ks in sorted(by_frame.items()):
            svg = bio.write_svg_overlay(hulls=[hulls[k] for k in ks], boxes=[decode_median(rows[k].box) for k in ks])
            _write(out / f"hulls_{frame}.svg", svg)
    return EXIT_OK


def _load_detections(path: Path):
    """Detections as ``{frame: [(LabeledObject, UncertainBox | None)]}``."""
    if path.is_file():
        rows = bio.read_uncertain_csv(path.read_text(), source=str(path))
        frames: dict[str, list] = {}
        for r in rows:
            frames.setdefault(r.frame, []).append((r.labeled(), r.box))
        return frames
    # label files without a score column are treated as fully confident
    return {
        k: [(o if o.score is not None else replace(o, score=1.0), None) for o in v]
        for k, v in bio.load_label_dir(_require(path, "dir")).items()
    }


def cmd_eval(a) -> int:
    dets_by_frame = _load_detections(Path(a.dets))
    gts_by_frame = bio.load_label_dir(_require(Path(a.gts), "dir"))
    difficulty = None if a.difficulty == "none" else a.difficulty
    classes = a.classes or CLASSES
    frames = sorted(set(gts_by_frame) | set(dets_by_frame))

    def one(frame: str):
        pairs = dets_by_frame.get(frame, [])
        dets = [o for o, _ in pairs]
        gts = gts_by_frame.get(frame, [])
        res = {c: match(dets, gts, None, c, difficulty) for c in classes}
        binned = []
        for k, (det, box) in enumerate(pairs):
            if box is None or det.label not in classes or det.box is None:
                continue
            ious = [rotated_iou(det.box, g.box) for g in gts if g.label == det.label and g.box is not None]
            binned.append((max(ious, default=0.0), det.box.distance, diff_to_base_angle(median_phi(box.mean)), box))
        return res, binned

    results = _pmap(one, frames, a.jobs)
    out = Path(a.out)
    report = []
    for c in classes:
        per_frame: list[MatchResult] = [r[0][c] for r in results]
        ap = average_precision(per_frame)
        tp = sum(len(m.pairs) for m in per_frame)
        fp = sum(len(m.false_positives) for m in per_frame)
        fn = sum(len(m.false_negatives) for m in per_frame)
        n_gt = sum(m.n_gt for m in per_frame)
        report.append((c, ap, n_gt, tp + fp, tp, fp, fn))
    _write(out / "eval_report.csv", _csv(("class", "ap", "n_gt", "n_det", "tp", "fp", "fn"), report))

    binned = [b for r in results for b in r[1]]
    if binned:
        boxes = [b[3] for b in binned]
        for col, axis in enumerate(("iou", "distance", "angle")):
            width = getattr(a, f"bin_{axis}") or BIN_DEFAULTS[axis][0]
            bins = bin_uncertainties([b[col] for b in binned], boxes, axis, width)
            rows = bins.rows()
            header = list(rows[0].keys())
            _write(out / f"bins_{axis}.csv", _csv(header, ([r[h] for h in header] for r in rows)))
            _write(out / f"bins_{axis}.svg", bio.write_svg_bins(bins, ("total_variance", "std_x", "std_y"), f"uncertainty over {axis}"))
    return EXIT_OK


def cmd_simulate(a) -> int:
    spec = SceneSpec(
        n_frames=a.frames,
        counts={"Car": a.cars, "Pedestrian": a.pedestrians, "Cyclist": a.cyclists},
        region=a.region,
        p_uniform=a.p_uniform,
        spread_deg=a.spread_deg,
        seed=a.seed,
    )
    grid = _grid_config(a)
    noise = _noise(a)
    out = Path(a.out)
    rows = []
    for fr, dets in simulate(spec, noise, grid, with_cloud=not a.no_clouds):
        _write(out / "label_2" / f"{fr.name}.txt", bio.format_labels(bio.from_bev(g) for g in fr.ground_truth))
        labeled = [d.labeled() for d in dets]
        _write(out / "det_2" / f"{fr.name}.txt", bio.format_labels(bio.from_bev(o) for o in labeled))
        if fr.cloud is not None:
            _write(out / "velodyne" / f"{fr.name}.bin", bio.write_point_cloud(fr.cloud))
        rows += [bio.UncertainDetection(fr.name, d.label, d.score, d.box) for d in dets]
    _write(out / "detections.csv", bio.write_uncertain_csv(rows))
    return EXIT_OK


def _train(a):
    x, y = heteroscedastic_dataset(a.samples, seed=a.seed)
    return train_tiny_regressor(
        x,
        y,
        DropoutSpec(a.p_drop),
        a.epochs,
        a.lr,
        hidden=a.hidden,
        activation=a.activation,
        std_link=a.std_link,
        lr_final=a.lr_final,
        loss=a.loss,
        seed=a.seed,
    )


def cmd_train(a) -> int:
    model, history = _train(a)
    out = Path(a.out)
    _write(out / "model.json", model.to_json())
    _write(out / "training_log.csv", _csv(("epoch", "loss", "data_term", "decay_term"), history))
    xs = np.linspace(-3.0, 3.0, 61)
    mean, log_var = model.forward(xs[:, None])
    _write(
        out / "sigma_curve.csv",
        _csv(("x", "mean", "sigma"), ((float(x), float(m), float(math.exp(0.5 * s))) for x, m, s in zip(xs, mean, log_var))),
    )
    return EXIT_OK


def cmd_calibrate(a) -> int:
    if a.model:
        src = _require(Path(a.model))
        try:
            model = TinyRegressor.from_json(src.read_text())
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"bad checkpoint: {exc}", source=str(src)) from None
    else:
        model, _ = _train(a)
    if a.T < 1:
        raise UsageError("--T must be >= 1")
    if model.dropout.p_drop == 0:
        print("bevuncert: warning: model has p_drop = 0, passes will not disagree", file=sys.stderr)
    xs = np.linspace(a.x_range[0], a.x_range[1], a.points)[:, None]
    rows = convergence_study(model, xs, T_max=a.T, repeats=a.repeats, seed=a.seed)
    _write(Path(a.out) / "convergence.csv", _csv(("T", "std_dev", "total_variance", "epistemic_variance", "spread"), rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_grid(p):
    g = GridConfig()
    p.add_argument("--x-min", type=float, default=g.x_min)
    p.add_argument("--x-max", type=float, default=g.x_max)
    p.add_argument("--y-min", type=float, default=g.y_min)
    p.add_argument("--y-max", type=float, default=g.y_max)
    p.add_argument("--cell-size", type=float, default=g.cell_size)
    p.add_argument("--ground-z", type=float, default=g.ground_z)


def _add_training(p):
    p.add_argument("--samples", type=int, default=2000, help="synthetic training points")
    p.add_argument("--epochs", type=int, default=2000, help="full-batch Adam steps")
    p.add_argument("--lr", type=float, default=1e-2, help="initial step size")
    p.add_argument("--lr-final", type=float, default=1e-4, help="final step size of the cosine schedule")
    p.add_argument("--p-drop", type=float, default=0.0, help="dropout probability of the head layer")
    p.add_argument("--hidden", type=lambda s: tuple(int(v) for v in s.split(",")), default=(32, 32), help="hidden widths, e.g. 32,32")
    p.add_argument("--activation", choices=("tanh", "relu"), default="relu")
    p.add_argument("--std-link", choices=("exp", "softplus"), default="softplus")
    p.add_argument("--loss", choices=("l1", "l2"), default="l2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevuncert", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="key = value file of defaults")
    common.add_argument("--seed", type=int, default=0, help="root seed of all random streams")
    common.add_argument("--jobs", type=int, default=1, help="worker threads; output does not depend on it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", parents=[common], help="point cloud(s) to grid-map files")
    p.add_argument("input", help="cloud file (.bin or text) or a directory of them")
    _add_grid(p)
    p.add_argument("--sensor-z", type=float, default=0.0, help="sensor height in cloud coordinates")
    p.add_argument("--layers", type=_names, default=None, help="comma-separated subset, e.g. z_min,z_max")
    p.add_argument("--svg", action="store_true", help="also write one SVG per layer")
    p.set_defaults(func=cmd_rasterize)

    h = HullConfig()
    p = sub.add_parser("hull", parents=[common], help="uncertain-box CSV to percentile hulls")
    p.add_argument("input", help="uncertain-box CSV")
    p.add_argument("--percentile", type=float, default=h.percentile, help="face-extent percentile in (0.5, 1)")
    p.add_argument("--n-rotations", type=int, default=h.n_rotations, help="headings sampled between the angle bounds")
    p.add_argument("--n-mc-samples", type=int, default=h.n_mc_samples, help="draws per face histogram")
    p.add_argument("--svg", action="store_true", help="also write one SVG per frame")
    p.set_defaults(func=cmd_hull)

    p = sub.add_parser("eval", parents=[common], help="AP and binned uncertainty statistics")
    p.add_argument("--dets", required=True, help="KITTI label dir or uncertain-box CSV")
    p.add_argument("--gts", required=True, help="KITTI label dir")
    p.add_argument("--difficulty", choices=(*DIFFICULTIES, "none"), default="moderate", help="ground-truth gate")
    p.add_argument("--classes", type=_names, default=None, help="comma-separated, default Car,Pedestrian,Cyclist")
    for axis, (width, _, _) in BIN_DEFAULTS.items():
        p.add_argument(f"--bin-{axis}", type=float, default=None, help=f"bin width (default {width})")
    p.set_defaults(func=cmd_eval)

    n = NoiseModel()
    p = sub.add_parser("simulate", parents=[common], help="synthetic labels, detections and clouds")
    p.add_argument("--frames", type=int, default=10, help="number of scenes")
    p.add_argument("--cars", type=float, default=6.0, help="mean objects per frame (Poisson)")
    p.add_argument("--pedestrians", type=float, default=2.0, help="mean objects per frame (Poisson)")
    p.add_argument("--cyclists", type=float, default=1.0, help="mean objects per frame (Poisson)")
    p.add_argument("--region", type=_floats(4), default=SceneSpec().region, help="x_min,x_max,y_min,y_max")
    p.add_argument("--p-uniform", type=float, default=SceneSpec().p_uniform, help="share of uniformly drawn headings")
    p.add_argument("--spread-deg", type=float, default=SceneSpec().spread_deg, help="heading spread around the base angles")
    p.add_argument("--noise-base", type=_floats(6), default=n.base, help="std at distance 0 for x,y,log_l,log_w,sin2phi,cos2phi")
    p.add_argument("--noise-slope", type=_floats(6), default=n.slope, help="std increase per metre, same order")
    p.add_argument("--fp-rate", type=float, default=0.1, help="probability of one false positive per frame")
    p.add_argument("--miss-base", type=float, default=0.0, help="miss probability at distance 0")
    p.add_argument("--miss-slope", type=float, default=0.0, help="miss probability increase per metre")
    p.add_argument("--no-clouds", action="store_true", help="skip point clouds")
    _add_grid(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="fit the heteroscedastic test regressor")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="predictive std-dev versus forward passes")
    p.add_argument("--model", help="checkpoint from 'train'; trains one when omitted")
    p.add_argument("--T", type=int, default=50, help=f"largest pass count (analyses default to T={DEFAULT_T})")
    p.add_argument("--repeats", type=int, default=20, help="independent pass sequences per T")
    p.add_argument("--points", type=int, default=61, help="evaluation inputs")
    p.add_argument("--x-range", type=_floats(2), default=(-3.0, 3.0), help="lo,hi of the evaluation inputs")
    _add_training(p)
    p.set_defaults(func=cmd_calibrate, p_drop=0.2)
    return parser


def _config_values(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    vals = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", lineno, str(p))
        key, value = (s.strip() for s in line.split("=", 1))
        vals[key.lstrip("-").replace("-", "_")] = value
    return vals


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], args) -> argparse.Namespace:
    """Re-parse with the file's values as defaults so flags still win."""
    vals = _config_values(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, text in vals.items():
        act = actions.get(key)
        if act is None or key in ("config", "out", "help", "func"):
            raise UsageError(f"unknown config key {key!r} for '{args.command}'")
        if act.nargs == 0:
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                defaults[key] = act.type(text)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            defaults[key] = text
        if act.choices is not None and defaults[key] not in act.choices:
            raise UsageError(f"config key {key!r}: {text!r} not in {sorted(act.choices)}")
    subparser.set_defaults(**defaults)
    try:
        return parser.parse_args(argv)
    except SystemExit as exc:
        raise UsageError("invalid arguments after applying config") from exc


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"bevuncert: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, FileNotFoundError, EmptyInputError) as exc:
        print(f"bevuncert: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (DomainError, BevUncertError, FloatingPointError) as exc:
        print(f"bevuncert: numerical error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
