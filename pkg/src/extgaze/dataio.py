"""File formats: scenarios, track files, heat-maps (PGM and raw), metrics tables.

Scenario and track files are line-oriented text. Floats are written with
``repr`` so they read back bit-identically.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .errors import InvalidInputError, ParseError
from .grid import GridCell, GridConfig, HeatMap, WorldPoint, world_to_cell
from .render import Frame, PersonState, wrap_angle
from .simgen import Scenario, Target

SCENARIO_MAGIC = "extgaze-scenario"
TRACKS_MAGIC = "extgaze-tracks"
FORMAT_VERSION = 1


def _grid_line(cfg: GridConfig) -> str:
    return f"grid {cfg.s_u} {cfg.s_v} {cfg.x_min!r} {cfg.x_max!r} {cfg.y_min!r} {cfg.y_max!r}"


class _Lines:
    """Cursor over non-blank lines that remembers line numbers for errors."""

    def __init__(self, path):
        self.path = str(path)
        text = Path(path).read_text()
        self.items = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
        self.pos = 0

    def error(self, msg, lineno=None):
        """ParseError at ``lineno``, by default the most recently consumed line."""
        if lineno is None:
            lineno = self.items[min(max(self.pos - 1, 0), len(self.items) - 1)][0] if self.items else 1
        return ParseError(msg, line=lineno, path=self.path)

    def next(self, keyword=None):
        if self.pos >= len(self.items):
            raise self.error(f"unexpected end of file (expected {keyword or 'more data'})")
        lineno, line = self.items[self.pos]
        self.pos += 1
        fields = line.split()
        if keyword is not None and fields[0] != keyword:
            raise self.error(f"expected '{keyword}' line, got {line!r}", lineno)
        return lineno, fields

    def peek_keyword(self):
        return self.items[self.pos][1].split()[0] if self.pos < len(self.items) else None

    def done(self):
        return self.pos >= len(self.items)


def _parse_grid(lines: _Lines) -> GridConfig:
    lineno, f = lines.next("grid")
    try:
        return GridConfig(int(f[1]), int(f[2]), float(f[3]), float(f[4]), float(f[5]), float(f[6]))
    except (IndexError, ValueError) as exc:
        raise lines.error(f"bad grid line: {exc}", lineno) from None


def _expect_header(lines: _Lines, magic: str):
    lineno, f = lines.next()
    if f != [magic]:
        raise lines.error(f"not a {magic} file", lineno)
    lineno, f = lines.next("version")
    if len(f) != 2 or f[1] != str(FORMAT_VERSION):
        raise lines.error(f"unsupported version {' '.join(f[1:])!r}", lineno)


def write_scenario(s: Scenario, path):
    out = [SCENARIO_MAGIC, f"version {FORMAT_VERSION}", _grid_line(s.cfg), f"seed {s.seed}",
           f"camera {s.camera_cell.u} {s.camera_cell.v}", f"objects {len(s.objects)}"]
    out += [f"{c.u} {c.v}" for c in s.objects]
    out += [f"people {s.n_people}", f"frames {s.horizon}"]
    for t, frame in enumerate(s.frames):
        for n, p in enumerate(frame.persons):
            out.append(f"{t} {n} {p.position.x!r} {p.position.y!r} {p.pan!r} {s.latent_targets[n][t].label()}")
    Path(path).write_text("\n".join(out) + "\n")


def read_scenario(path) -> Scenario:
    lines = _Lines(path)
    _expect_header(lines, SCENARIO_MAGIC)
    cfg = _parse_grid(lines)
    try:
        _, f = lines.next("seed")
        seed = int(f[1])
        cam_line, f = lines.next("camera")
        camera = GridCell(int(f[1]), int(f[2]))
        _, f = lines.next("objects")
        objects, object_lines = [], []
        for _ in range(int(f[1])):
            lineno, f = lines.next()
            objects.append(GridCell(int(f[0]), int(f[1])))
            object_lines.append(lineno)
        _, f = lines.next("people")
        n_people = int(f[1])
        _, f = lines.next("frames")
        horizon = int(f[1])
    except ParseError:
        raise
    except (IndexError, ValueError) as exc:
        raise lines.error(f"malformed header: {exc}") from None
    for c, lineno in zip([camera, *objects], [cam_line, *object_lines]):
        if not (1 <= c.u <= cfg.s_u and 1 <= c.v <= cfg.s_v):
            raise lines.error(f"cell {tuple(c)} outside the grid", lineno)
    persons = [[None] * n_people for _ in range(horizon)]
    targets = [[None] * horizon for _ in range(n_people)]
    for t in range(horizon):
        for n in range(n_people):
            lineno, f = lines.next()
            try:
                if (int(f[0]), int(f[1])) != (t, n) or len(f) != 6:
                    raise ValueError(f"expected record for frame {t} person {n}")
                persons[t][n] = PersonState(WorldPoint(float(f[2]), float(f[3])), float(f[4]))
                targets[n][t] = Target.parse(f[5])
            except (ValueError, InvalidInputError) as exc:
                raise lines.error(f"bad person record: {exc}", lineno) from None
    if not lines.done():
        raise lines.error("trailing content after the last frame", lines.items[lines.pos][0])
    frames = tuple(Frame(tuple(row)) for row in persons)
    return Scenario(cfg, tuple(objects), camera, frames, tuple(tuple(s) for s in targets), seed)


@dataclass
class TrackData:
    """Pre-extracted head positions and pans for one recording."""

    cfg: GridConfig
    fps: float
    camera_cell: GridCell
    first_frame: int
    frames: list[Frame]
    objects_m: list[WorldPoint] = field(default_factory=list)

    @property
    def objects(self) -> list[GridCell]:
        return [world_to_cell(p, self.cfg) for p in self.objects_m]

    def windows(self, T: int, overlap: float = 0.5) -> list[tuple[int, list[Frame]]]:
        """Length-T windows with the given overlap; a short tail is dropped.

        Returns ``(first frame number, frames)`` pairs.
        """
        if T < 1 or not 0 <= overlap < 1:
            raise InvalidInputError("need T >= 1 and 0 <= overlap < 1")
        stride = max(1, int(round(T * (1 - overlap))))
        return [(self.first_frame + s, self.frames[s:s + T])
                for s in range(0, len(self.frames) - T + 1, stride)]


def write_tracks(path, cfg: GridConfig, rows: Iterable[tuple[int, int, float, float, float]],
                 fps: float = 5.0, camera_cell: GridCell = GridCell(16, 1),
                 objects_m: Sequence[WorldPoint] = ()):
    out = [TRACKS_MAGIC, f"version {FORMAT_VERSION}", _grid_line(cfg), f"fps {fps!r}",
           f"camera {camera_cell[0]} {camera_cell[1]}"]
    out += [f"object {p[0]!r} {p[1]!r}" for p in objects_m]
    out += ["data", "t,person,x,y,pan"]
    out += [f"{t},{n},{x!r},{y!r},{pan!r}" for t, n, x, y, pan in rows]
    Path(path).write_text("\n".join(out) + "\n")


def read_tracks(path) -> TrackData:
    """Parse a track file; frames missing from the file become empty frames."""
    lines = _Lines(path)
    _expect_header(lines, TRACKS_MAGIC)
    cfg = _parse_grid(lines)
    try:
        _, f = lines.next("fps")
        fps = float(f[1])
        lineno, f = lines.next("camera")
        camera = GridCell(int(f[1]), int(f[2]))
    except ParseError:
        raise
    except (IndexError, ValueError) as exc:
        raise lines.error(f"malformed header: {exc}") from None
    if not (1 <= camera.u <= cfg.s_u and 1 <= camera.v <= cfg.s_v):
        raise lines.error("camera cell outside the grid", lineno)
    objects = []
    while lines.peek_keyword() == "object":
        lineno, f = lines.next("object")
        try:
            p = WorldPoint(float(f[1]), float(f[2]))
        except (IndexError, ValueError):
            raise lines.error("bad object line", lineno) from None
        if not (math.isfinite(p.x) and math.isfinite(p.y)):
            raise lines.error("non-finite object position", lineno)
        objects.append(p)
    lines.next("data")
    lineno, f = lines.next()
    if f != ["t,person,x,y,pan"]:
        raise lines.error("expected column header 't,person,x,y,pan'", lineno)
    records = []
    last_key = None
    last_seen: dict[int, int] = {}
    while not lines.done():
        lineno, f = lines.next()
        parts = " ".join(f).split(",")
        try:
            if len(parts) != 5:
                raise ValueError("expected 5 comma-separated fields")
            t, n = int(parts[0]), int(parts[1])
            x, y, pan = float(parts[2]), float(parts[3]), float(parts[4])
        except ValueError as exc:
            raise lines.error(f"bad row: {exc}", lineno) from None
        if not all(math.isfinite(v) for v in (x, y, pan)):
            raise lines.error("non-finite value in row", lineno)
        if last_key is not None and (t, n) <= last_key:
            raise lines.error(f"rows must be sorted by (t, person); ({t}, {n}) follows {last_key}", lineno)
        if n in last_seen and t != last_seen[n] + 1:
            raise lines.error(f"person {n} skips from frame {last_seen[n]} to {t}", lineno)
        last_key = (t, n)
        last_seen[n] = t
        records.append((t, PersonState(WorldPoint(x, y), wrap_angle(pan))))
    if not records:
        return TrackData(cfg, fps, camera, 0, [], objects)
    first = records[0][0]
    last = max(t for t, _ in records)
    buckets: list[list[PersonState]] = [[] for _ in range(last - first + 1)]
    for t, p in records:
        buckets[t - first].append(p)
    return TrackData(cfg, fps, camera, first, [Frame(tuple(b)) for b in buckets], objects)


def heatmap_to_pgm_pixels(m: HeatMap) -> np.ndarray:
    """16-bit pixels, one row per v (top row is v = s_v), one column per u."""
    q = np.round(65535.0 * np.clip(m.values, 0.0, 1.0)).astype(np.uint16)
    return q.T[::-1]


def write_heatmap_pgm(m: HeatMap, path):
    pix = heatmap_to_pgm_pixels(m)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pix.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 16-bit PGM as written by :func:`write_heatmap_pgm` (raw pixel rows)."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=path)
        tokens.append(raw[start:pos].decode("ascii", errors="replace"))
    if tokens[0] != "P5" or tokens[3] != "65535":
        raise ParseError("only 16-bit binary PGM is supported", path=path)
    try:
        w, h = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise ParseError(f"bad PGM size {tokens[1]!r} x {tokens[2]!r}", path=path) from None
    data = raw[pos + 1:]
    if len(data) != 2 * w * h:
        raise ParseError(f"expected {2 * w * h} pixel bytes, found {len(data)}", path=path)
    return np.frombuffer(data, dtype=">u2").reshape(h, w)


def write_heatmap_raw(m: HeatMap, path):
    cfg = m.config
    meta = {"grid": [cfg.s_u, cfg.s_v, cfg.x_min, cfg.x_max, cfg.y_min, cfg.y_max],
            "normalized": m.normalized}
    tt.save_checkpoint(path, "heatmap", {"values": m.values}, meta)


def read_heatmap_raw(path) -> HeatMap:
    kind, arrays, meta = tt.load_checkpoint(path)
    if kind != "heatmap" or set(arrays) != {"values"}:
        raise ParseError("not a raw heat-map file", path=path)
    try:
        g = meta["grid"]
        cfg = GridConfig(int(g[0]), int(g[1]), float(g[2]), float(g[3]), float(g[4]), float(g[5]))
        normalized = bool(meta["normalized"])
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ParseError(f"bad heat-map metadata: {exc}", path=path) from None
    if arrays["values"].shape != cfg.shape:
        raise ParseError(f"values shape {arrays['values'].shape} disagrees with grid {cfg.shape}", path=path)
    return HeatMap(cfg, arrays["values"], normalized)


METRICS_COLUMNS = ("method", "dataset", "mse_x100", "precision", "recall", "f1",
                   "tp", "fp", "fn", "n_sequences", "seed")


def metrics_row(method: str, dataset: str, report, seed) -> dict:
    """One table row; precision, recall and f1 in percent, MSE times 100."""
    return {
        "method": method,
        "dataset": dataset,
        "mse_x100": "" if report.mse is None else f"{report.mse_x100:.4f}",
        "precision": f"{100 * report.precision:.2f}",
        "recall": f"{100 * report.recall:.2f}",
        "f1": f"{100 * report.f1:.2f}",
        "tp": report.tp,
        "fp": report.fp,
        "fn": report.fn,
        "n_sequences": report.n_sequences,
        "seed": seed,
    }


def write_metrics(rows: Sequence[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRICS_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
