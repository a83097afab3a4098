"""Command-line entry point: ``extgaze <command> [options]``.

Every command that writes files also writes ``manifest.json`` next to them.
The manifest holds the full option set, so ``extgaze rerun manifest.json``
regenerates the outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dataio import (read_scenario, read_tracks, metrics_row, write_heatmap_pgm, write_heatmap_raw,
                     write_metrics, write_scenario)
from .errors import ExtGazeError
from .experiment import (DEFAULT_LEARNING_RATES, TRUTH, ArrayDataset, DataConfig, Sample, bench_T,
                         build_test_set, evaluate_method, render_sample, sample_scenario, test_data_seed,
                         train_model)
from .grid import GridCell, GridConfig, HeatMap
from .models import (ALL_KINDS, HEURISTIC_KINDS, LEARNED_KINDS, AdamConfig, ModelSpec, heuristic_map,
                     load_model, predict_batch, save_model, write_loss_log)
from .peaks import SHRINK_FUNCTIONS, PeakConfig, extract_peaks
from .render import frame_arrays, object_heatmap
from .simgen import GenConfig

log = logging.getLogger("extgaze")

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad option combination; reported with exit status 2."""


def _count_range(text: str) -> tuple[int, int]:
    """'3' -> (3, 3); '1-3' -> (1, 3)."""
    lo, sep, hi = str(text).partition("-")
    try:
        pair = (int(lo), int(hi) if sep else int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None
    if pair[0] > pair[1] or pair[0] < 0:
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    return pair


# ---------------------------------------------------------------- options

def _add_data_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("scene")
    g.add_argument("--grid", nargs=2, type=int, default=[32, 32], metavar=("SU", "SV"))
    g.add_argument("--bounds", nargs=4, type=float, default=[0.0, 3.0, 0.0, 3.0],
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"), help="room extent in meters")
    g.add_argument("--t", type=int, default=20, help="frames per sequence")
    g.add_argument("--n", type=_count_range, default=(2, 2), help="people per scene, N or LO-HI")
    g.add_argument("--m", type=_count_range, default=(1, 3), help="objects per scene, M or LO-HI")
    g.add_argument("--camera", nargs=2, type=int, default=None, metavar=("U", "V"),
                   help="blank-object cell (default: middle of the v=1 wall)")
    g.add_argument("--epsilon-deg", type=float, default=2.0, help="gaze cone half-aperture")
    g.add_argument("--sigma-omega", type=float, default=1.5, help="object blob width in cells")


def _add_peak_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("peaks")
    g.add_argument("--radius", type=int, default=2, help="neighborhood half-width in cells")
    g.add_argument("--shrink", choices=sorted(SHRINK_FUNCTIONS), default="ln1p")


def _add_train_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, default=200)
    g.add_argument("--batch", type=int, default=32)
    g.add_argument("--lr", type=float, default=None, help="Adam step size (default: per-model table)")
    g.add_argument("--channels", nargs=3, type=int, default=[16, 32, 64])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extgaze", description="Extended gaze following on top-view heat-maps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="JSON file of option defaults (keys as in manifest.json)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        return p

    p = command("generate", "sample synthetic scenarios to text files")
    _add_data_options(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = command("render", "draw a scenario's gaze maps, mean maps and object map")
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--format", choices=["pgm", "raw"], default="pgm")
    p.add_argument("--epsilon-deg", type=float, default=2.0)
    p.add_argument("--sigma-omega", type=float, default=1.5)
    p.add_argument("--out", type=Path, required=True)

    p = command("train", "train one model on synthetic or file-based scenarios")
    _add_data_options(p)
    _add_train_options(p)
    p.add_argument("--model", choices=LEARNED_KINDS, required=True)
    p.add_argument("--seed", type=int, default=0, help="init seed; training data seed derives from it")
    p.add_argument("--scenarios", type=Path, default=None, help="train on scenario files in this directory")
    p.add_argument("--out", type=Path, required=True)

    p = command("detect", "find objects in one scenario or track file")
    _add_peak_options(p)
    p.add_argument("--model", required=True, help="checkpoint path or heuristic name (Cone, Intersect)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", type=Path)
    src.add_argument("--tracks", type=Path)
    p.add_argument("--t", type=int, default=None, help="window length for track files")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--epsilon-deg", type=float, default=2.0)
    p.add_argument("--out", type=Path, default=None, help="write detections here instead of stdout")

    p = command("evaluate", "score methods on a test set and write metrics.csv")
    _add_data_options(p)
    _add_peak_options(p)
    p.add_argument("--methods", nargs="+", required=True,
                   help="checkpoint paths and/or Cone, Intersect, Truth")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenarios", type=Path, help="directory of scenario files")
    src.add_argument("--tracks", nargs="+", type=Path, help="track files (objects from their headers)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--test-count", type=int, default=500)
    p.add_argument("--test-seed", type=int, default=0)
    p.add_argument("--dataset", default=None, help="dataset tag for the table")
    p.add_argument("--out", type=Path, required=True)

    p = command("bench-T", "re-train and score models for several sequence lengths")
    _add_data_options(p)
    _add_peak_options(p)
    _add_train_options(p)
    p.add_argument("--models", nargs="+", choices=ALL_KINDS, required=True)
    p.add_argument("--T-values", nargs="+", type=int, required=True)
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--test-count", type=int, default=500)
    p.add_argument("--test-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None, help="output directory (default: the recorded one)")
    return parser


# ---------------------------------------------------------------- helpers

def _data_config(args) -> DataConfig:
    su, sv = args.grid
    try:
        cfg = GridConfig(su, sv, *args.bounds)
        camera = GridCell(*args.camera) if args.camera else GridCell((su + 1) // 2, 1)
        gen = GenConfig(cfg=cfg, horizon=args.t, camera_cell=camera,
                        n_people=args.n[1], n_objects=args.m[1])
        return DataConfig(gen, tuple(args.n), tuple(args.m), math.radians(args.epsilon_deg), args.sigma_omega)
    except ExtGazeError as exc:
        raise UsageError(str(exc)) from None


def _peak_config(args) -> PeakConfig:
    try:
        return PeakConfig(args.radius, args.shrink)
    except ExtGazeError as exc:
        raise UsageError(str(exc)) from None


def _optim(args, kind: str) -> AdamConfig:
    return AdamConfig(lr=args.lr if args.lr is not None else DEFAULT_LEARNING_RATES.get(kind, 1e-3))


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _options(args) -> dict:
    return {k: _jsonable(v) for k, v in sorted(vars(args).items())
            if k not in ("func", "config", "verbose")}


def write_manifest(args, out: Path, outputs: list[str], extra: dict | None = None):
    manifest = {
        "command": args.command,
        "options": _options(args),
        "outputs": sorted(outputs),
        "versions": {"extgaze": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _scenario_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("*.txt"))
    if not files:
        raise UsageError(f"no scenario files (*.txt) in {directory}")
    return files


def _load_method(name: str):
    """A heuristic or Truth name stays a string; anything else is a checkpoint path."""
    if name in HEURISTIC_KINDS or name == TRUTH:
        return name
    path = Path(name)
    if not path.exists():
        raise UsageError(f"{name!r} is neither {', '.join(HEURISTIC_KINDS + (TRUTH,))} nor an existing checkpoint")
    return load_model(path)


def _method_label(method) -> str:
    return method if isinstance(method, str) else method.spec.kind


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> list[str]:
    dc = _data_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.count):
        name = f"scenario_{i:05d}.txt"
        write_scenario(sample_scenario(dc, args.seed, i), args.out / name)
        names.append(name)
    log.info("wrote %d scenarios to %s", len(names), args.out)
    return names


def cmd_render(args) -> list[str]:
    s = read_scenario(args.scenario)
    gaze, inter = frame_arrays(s.frames, s.cfg, math.radians(args.epsilon_deg))
    maps = {f"gaze_{t:04d}": HeatMap(s.cfg, g) for t, g in enumerate(gaze)}
    maps["mean_gaze"] = HeatMap(s.cfg, gaze.mean(axis=0))
    maps["mean_intersection"] = HeatMap(s.cfg, inter.mean(axis=0))
    maps["omega"] = object_heatmap(s.objects, s.cfg, args.sigma_omega)
    args.out.mkdir(parents=True, exist_ok=True)
    names = []
    for stem, m in maps.items():
        name = f"{stem}.{args.format}"
        (write_heatmap_pgm if args.format == "pgm" else write_heatmap_raw)(m, args.out / name)
        names.append(name)
    return names


def _file_dataset(directory: Path, dc: DataConfig, seed: int) -> ArrayDataset:
    samples = [render_sample(read_scenario(f), dc.epsilon, dc.sigma_omega) for f in _scenario_files(directory)]
    shapes = {s.gaze.shape for s in samples}
    if shapes != {(dc.T,) + dc.cfg.shape}:
        raise UsageError(f"scenario files have shapes {sorted(shapes)}, expected {(dc.T,) + dc.cfg.shape}")
    return ArrayDataset(np.stack([s.gaze for s in samples]), np.stack([s.omega for s in samples]), seed)


def cmd_train(args) -> list[str]:
    dc = _data_config(args)
    if args.steps < 1 or args.batch < 1:
        raise UsageError("--steps and --batch must be positive")
    source = _file_dataset(args.scenarios, dc, args.seed) if args.scenarios else None
    try:
        ModelSpec(args.model, dc.cfg.s_u, dc.cfg.s_v, dc.T, tuple(args.channels), args.seed)
    except ExtGazeError as exc:
        raise UsageError(str(exc)) from None

    def progress(step, loss):
        if (step + 1) % 20 == 0 or step == 0:
            log.info("%s step %d/%d loss %.6f", args.model, step + 1, args.steps, loss)

    model = train_model(args.model, dc, args.seed, args.steps, args.batch, _optim(args, args.model),
                        tuple(args.channels), source=source, progress=progress)
    args.out.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out / "model.ckpt")
    write_loss_log(model, args.out / "loss.tsv")
    return ["model.ckpt", "loss.tsv"]


def _detect_one(method, gaze: np.ndarray, inter: np.ndarray, pc: PeakConfig) -> list[GridCell]:
    if isinstance(method, str):
        return extract_peaks(heuristic_map(method, gaze, inter), pc)
    if (method.spec.s_u, method.spec.s_v) != gaze.shape[1:]:
        raise UsageError(f"{method.spec.kind} was trained on a {method.spec.s_u}x{method.spec.s_v} grid, "
                         f"input is {gaze.shape[1]}x{gaze.shape[2]}")
    if method.spec.uses_sequence and gaze.shape[0] != method.spec.T:
        raise UsageError(f"{method.spec.kind} was trained on T={method.spec.T}, input has T={gaze.shape[0]}")
    return extract_peaks(predict_batch(method, gaze[None])[0], pc)


def cmd_detect(args) -> list[str]:
    method = _load_method(args.model)
    if method == TRUTH:
        raise UsageError("Truth needs ground truth; use it with evaluate")
    pc = _peak_config(args)
    eps = math.radians(args.epsilon_deg)
    lines = []
    if args.scenario:
        s = read_scenario(args.scenario)
        gaze, inter = frame_arrays(s.frames, s.cfg, eps)
        lines += [f"{c.u} {c.v}" for c in _detect_one(method, gaze, inter, pc)]
    else:
        data = read_tracks(args.tracks)
        T = args.t or (method.spec.T if not isinstance(method, str) else None)
        if not T:
            raise UsageError("--t is required for heuristics on track files")
        for first, frames in data.windows(T, args.overlap):
            gaze, inter = frame_arrays(frames, data.cfg, eps)
            lines.append(f"# window {first}")
            lines += [f"{c.u} {c.v}" for c in _detect_one(method, gaze, inter, pc)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return []


def _track_samples(paths, T: int, overlap: float, dc: DataConfig) -> list[Sample]:
    samples = []
    for path in paths:
        data = read_tracks(path)
        if data.cfg.shape != dc.cfg.shape:
            raise UsageError(f"{path} uses a {data.cfg.shape} grid, expected {dc.cfg.shape}")
        omega = object_heatmap(data.objects, data.cfg, dc.sigma_omega).values
        for _, frames in data.windows(T, overlap):
            gaze, inter = frame_arrays(frames, data.cfg, dc.epsilon)
            samples.append(Sample(gaze, inter, np.array(omega), list(data.objects)))
    return samples


def cmd_evaluate(args) -> list[str]:
    dc = _data_config(args)
    pc = _peak_config(args)
    methods = [_load_method(m) for m in args.methods]
    if args.scenarios:
        test = [render_sample(read_scenario(f), dc.epsilon, dc.sigma_omega) for f in _scenario_files(args.scenarios)]
        tag = args.dataset or args.scenarios.name
    elif args.tracks:
        test = _track_samples(args.tracks, dc.T, args.overlap, dc)
        tag = args.dataset or "tracks"
    else:
        test = build_test_set(dc, test_data_seed(args.test_seed), args.test_count)
        tag = args.dataset or "synthetic"
    if not test:
        raise UsageError("the test set is empty")
    rows = []
    for method in methods:
        if not isinstance(method, str):
            spec = method.spec
            if spec.uses_sequence and spec.T != test[0].gaze.shape[0]:
                raise UsageError(f"{spec.kind} was trained on T={spec.T}, test sequences have T={test[0].gaze.shape[0]}")
            if (spec.s_u, spec.s_v) != test[0].omega.shape:
                raise UsageError(f"{spec.kind} was trained on a {spec.s_u}x{spec.s_v} grid")
        report = evaluate_method(method, test, dc.cfg, pc)
        seed = "" if isinstance(method, str) else method.spec.seed
        rows.append(metrics_row(_method_label(method), tag, report, seed))
        log.info("%s: P %.1f R %.1f f1 %.1f", _method_label(method), 100 * report.precision,
                 100 * report.recall, 100 * report.f1)
    args.out.mkdir(parents=True, exist_ok=True)
    write_metrics(rows, args.out / "metrics.csv")
    return ["metrics.csv"]


BENCH_COLUMNS = ("model", "T", "seed", "mse_x100", "precision", "recall", "f1", "seconds")


def cmd_bench_t(args) -> list[str]:
    dc = _data_config(args)
    pc = _peak_config(args)
    if min(args.T_values) < 1:
        raise UsageError("--T-values must be positive")
    optim = {k: _optim(args, k) for k in args.models}
    results = bench_T(args.models, args.T_values, args.seeds, dc, args.steps, args.batch,
                      args.test_count, args.test_seed, pc, optim, tuple(args.channels))
    args.out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(BENCH_COLUMNS)]
    for r in results:
        mse = "" if r.report.mse is None else f"{r.report.mse_x100:.4f}"
        lines.append(f"{r.kind},{r.T},{r.seed},{mse},{100 * r.report.precision:.2f},"
                     f"{100 * r.report.recall:.2f},{100 * r.report.f1:.2f},{r.seconds:.1f}")
    (args.out / "bench_T.csv").write_text("\n".join(lines) + "\n")
    return ["bench_T.csv"]


COMMANDS = {"generate": cmd_generate, "render": cmd_render, "train": cmd_train, "detect": cmd_detect,
            "evaluate": cmd_evaluate, "bench-T": cmd_bench_t}


# ---------------------------------------------------------------- driver

def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; a --config file supplies defaults that explicit flags override."""
    path = _config_path(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if path is not None and command is not None:
        try:
            conf = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {path}: {exc}")
        if isinstance(conf, dict) and "options" in conf and "command" in conf:
            conf = conf["options"]  # a manifest
        if not isinstance(conf, dict):
            parser.error("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(conf) - known - {"command"})
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        defaults = {k: v for k, v in conf.items() if k != "command"}
        for action in sub._actions:
            if action.dest in defaults and defaults[action.dest] is not None:
                action.required = False
        for group in sub._mutually_exclusive_groups:
            if any(defaults.get(a.dest) is not None for a in group._group_actions):
                group.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    # JSON gives lists where flags give tuples or paths
    for key in ("n", "m"):
        v = getattr(args, key, None)
        if isinstance(v, list):
            setattr(args, key, _count_range("-".join(map(str, v))))
    for key in ("out", "scenario", "scenarios", "tracks", "manifest"):
        v = getattr(args, key, None)
        if isinstance(v, str):
            setattr(args, key, Path(v))
        elif isinstance(v, list):
            setattr(args, key, [Path(x) for x in v])
    return args


def _rerun_argv(manifest: Path, out: Path | None) -> list[str]:
    conf = json.loads(manifest.read_text())
    command = conf["command"]
    return [command, "--config", str(manifest)] + (["--out", str(out)] if out else [])


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = _parse(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "rerun":
        try:
            argv = _rerun_argv(args.manifest, args.out)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            parser.error(f"cannot read manifest {args.manifest}: {exc}")
        parser = build_parser()
        args = _parse(parser, argv)
    try:
        outputs = COMMANDS[args.command](args)
        out = getattr(args, "out", None)
        if out is not None and args.command != "detect":
            write_manifest(args, out, outputs)
    except UsageError as exc:
        parser.error(str(exc))
    except (ExtGazeError, OSError) as exc:
        print(f"extgaze: error: {exc}", file=sys.stderr)
        return 1
    return 0
