"""Event stream I/O, synthetic data generation, and dataset manifests.

On-disk event format: plain text, header line ``# <width> <height> <duration_us>``
followed by one event per line ``t_us,x,y,p`` with p in {-1, +1}. A 0/1
polarity encoding is accepted on input and remapped 0 -> -1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np


class ParseError(ValueError):
    """Malformed event text; carries the offending 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class BoundsError(ValueError):
    """Event coordinate or timestamp outside the sensor/duration bounds."""


class SplitError(ValueError):
    """Dataset cannot be split as requested."""


SYNTHETIC_CLASSES = ("moving_bar", "moving_disk", "moving_corner")


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(eq=False)
class EventStream:
    """A time-sorted event recording stored as parallel int64 arrays."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_width: int
    sensor_height: int
    duration: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")
        if self.sensor_width <= 0 or self.sensor_height <= 0:
            raise ValueError("sensor dimensions must be positive")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        if n == 0:
            return
        if not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarity must be -1 or +1")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("events must be sorted non-decreasing by t")
        if np.any(self.t < 0) or np.any(self.t > self.duration):
            raise BoundsError("event timestamp outside [0, duration]")
        if np.any(self.x < 0) or np.any(self.x >= self.sensor_width):
            raise BoundsError("event x outside sensor")
        if np.any(self.y < 0) or np.any(self.y >= self.sensor_height):
            raise BoundsError("event y outside sensor")

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.sensor_width == other.sensor_width
            and self.sensor_height == other.sensor_height
            and self.duration == other.duration
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def event(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.event(i)


def _empty_stream(width: int, height: int, duration: int = 0) -> EventStream:
    z = np.zeros(0, dtype=np.int64)
    return EventStream(z, z, z, z, width, height, duration)


_HEADER_PREFIX = "#"


def parse_events(
    text: str | bytes, sensor_width: int, sensor_height: int
) -> EventStream:
    """Parse ``t_us,x,y,p`` lines into a stream.

    An optional leading ``# width height duration_us`` header fixes the
    duration (its dimensions must agree with the arguments); without it the
    duration is the last timestamp. Unsorted input is stably sorted by t.
    """
    if isinstance(text, bytes):
        text = text.decode("ascii")
    duration = None
    rows: list[tuple[int, int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(_HEADER_PREFIX):
            if duration is not None or rows:
                raise ParseError("unexpected comment line", lineno)
            parts = line[1:].split()
            if len(parts) != 3:
                raise ParseError("header must be '# width height duration_us'", lineno)
            try:
                w, h, dur = (int(v) for v in parts)
            except ValueError:
                raise ParseError("non-integer header field", lineno) from None
            if (w, h) != (sensor_width, sensor_height):
                raise ParseError(
                    f"header sensor size {w}x{h} does not match "
                    f"{sensor_width}x{sensor_height}",
                    lineno,
                )
            duration = dur
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ParseError(f"expected 4 comma-separated fields, got {len(fields)}", lineno)
        try:
            t, x, y, p = (int(v) for v in fields)
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", lineno) from None
        if p == 0:
            p = -1
        if p not in (-1, 1):
            raise ParseError(f"polarity must be -1, 0, or +1, got {p}", lineno)
        if t < 0:
            raise ParseError("negative timestamp", lineno)
        if not (0 <= x < sensor_width and 0 <= y < sensor_height):
            raise BoundsError(
                f"line {lineno}: event at ({x}, {y}) outside "
                f"{sensor_width}x{sensor_height} sensor"
            )
        rows.append((t, x, y, p))

    if not rows:
        return _empty_stream(sensor_width, sensor_height, duration or 0)

    arr = np.array(rows, dtype=np.int64)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    if duration is None:
        duration = int(arr[-1, 0])
    return EventStream(
        arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3],
        sensor_width, sensor_height, duration,
    )


def serialize_events(stream: EventStream) -> str:
    """Inverse of :func:`parse_events`, header included."""
    lines = [f"# {stream.sensor_width} {stream.sensor_height} {stream.duration}"]
    for i in range(len(stream)):
        lines.append(f"{stream.t[i]},{stream.x[i]},{stream.y[i]},{stream.p[i]}")
    return "\n".join(lines) + "\n"


def load_stream(path: str | Path) -> EventStream:
    path = Path(path)
    text = path.read_text()
    header = None
    for raw in text.splitlines():
        line = raw.strip()
        if line:
            header = line
            break
    if header is None or not header.startswith(_HEADER_PREFIX):
        raise ParseError(f"{path}: missing '# width height duration_us' header", 1)
    parts = header[1:].split()
    if len(parts) != 3:
        raise ParseError(f"{path}: bad header {header!r}", 1)
    w, h = int(parts[0]), int(parts[1])
    return parse_events(text, w, h)


def save_stream(path: str | Path, stream: EventStream) -> None:
    Path(path).write_text(serialize_events(stream))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """A moving geometric primitive rendered as an ideal event stream.

    The primitive translates rigidly at ``velocity`` (px/ms). Wherever its
    leading edge crosses a pixel center an ON (+1) event fires; the trailing
    edge fires OFF (-1). ``events_per_edge_crossing`` identical events are
    emitted per crossing. Noise events are uniform in space-time.
    """

    class_id: str
    velocity: tuple[float, float]
    sensor_width: int = 64
    sensor_height: int = 64
    duration: int = 100_000  # microseconds
    events_per_edge_crossing: int = 1
    noise_rate: float = 0.0  # events / pixel / second

    def __post_init__(self):
        if self.class_id not in SYNTHETIC_CLASSES:
            raise ValueError(f"unknown class_id {self.class_id!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.sensor_width < 16 or self.sensor_height < 16:
            raise ValueError("sensor dimensions must be >= 16")
        if self.events_per_edge_crossing < 1:
            raise ValueError("events_per_edge_crossing must be >= 1")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "velocity": list(self.velocity),
            "sensor_width": self.sensor_width,
            "sensor_height": self.sensor_height,
            "duration": self.duration,
            "events_per_edge_crossing": self.events_per_edge_crossing,
            "noise_rate": self.noise_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["velocity"] = tuple(float(v) for v in d["velocity"])
        return cls(**d)


def bar_geometry(spec: SyntheticSpec) -> tuple[float, float]:
    """(left edge x0, width) of the vertical bar at t=0."""
    w = max(4.0, spec.sensor_width / 8.0)
    return spec.sensor_width / 4.0, w


def disk_geometry(spec: SyntheticSpec) -> tuple[float, float, float]:
    """(cx, cy, radius) of the disk at t=0."""
    r = max(4.0, min(spec.sensor_width, spec.sensor_height) / 6.0)
    return spec.sensor_width / 2.0, spec.sensor_height / 2.0, r


def corner_geometry(spec: SyntheticSpec) -> tuple[float, float]:
    """Apex (ax, ay) of the lower-left quarter-plane {x<=ax, y<=ay} at t=0."""
    return spec.sensor_width / 2.0, spec.sensor_height / 2.0


def _halfplane_interval(q: float, a: float, v: float) -> tuple[float, float]:
    """Time interval during which q - v*t <= a. Returns (lo, hi), +-inf allowed."""
    if v > 0:
        return ((q - a) / v, math.inf)
    if v < 0:
        return (-math.inf, (q - a) / v)
    return (-math.inf, math.inf) if q <= a else (math.inf, -math.inf)


def _coverage_interval(spec: SyntheticSpec, qx: float, qy: float) -> tuple[float, float]:
    """Interval of times (ms) during which pixel center (qx, qy) is covered.

    Empty coverage is returned as (inf, -inf).
    """
    vx, vy = spec.velocity
    if spec.class_id == "moving_bar":
        x0, w = bar_geometry(spec)
        # covered iff x0 <= qx - vx*t <= x0 + w
        lo1, hi1 = _halfplane_interval(qx, x0 + w, vx)          # qx - vx t <= x0+w
        lo2, hi2 = _halfplane_interval(-qx, -x0, -vx)           # qx - vx t >= x0
        return (max(lo1, lo2), min(hi1, hi2))
    if spec.class_id == "moving_disk":
        cx, cy, r = disk_geometry(spec)
        # |q - c0 - v t|^2 <= r^2, quadratic in t
        a = vx * vx + vy * vy
        dx, dy = qx - cx, qy - cy
        if a == 0.0:
            return (math.inf, -math.inf)
        b = -2.0 * (dx * vx + dy * vy)
        c = dx * dx + dy * dy - r * r
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            return (math.inf, -math.inf)
        s = math.sqrt(disc)
        return ((-b - s) / (2.0 * a), (-b + s) / (2.0 * a))
    # moving_corner
    ax, ay = corner_geometry(spec)
    lo1, hi1 = _halfplane_interval(qx, ax, vx)
    lo2, hi2 = _halfplane_interval(qy, ay, vy)
    return (max(lo1, lo2), min(hi1, hi2))


def edge_crossings(spec: SyntheticSpec, qx: int, qy: int) -> list[tuple[float, int]]:
    """(time_ms, polarity) of every edge crossing of pixel (qx, qy) in range.

    Entry into coverage is +1 (leading edge), exit is -1 (trailing edge).
    """
    dur_ms = spec.duration / 1000.0
    lo, hi = _coverage_interval(spec, float(qx), float(qy))
    if lo >= hi:
        # zero-width coverage (grazing contact) changes no brightness
        return []
    out = []
    if math.isfinite(lo) and 0.0 <= lo <= dur_ms:
        out.append((lo, +1))
    if math.isfinite(hi) and 0.0 <= hi <= dur_ms:
        out.append((hi, -1))
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int) -> EventStream:
    """Render the moving primitive plus uniform noise; deterministic in (spec, seed)."""
    rows: list[tuple[int, int, int, int]] = []
    k = spec.events_per_edge_crossing
    for qy in range(spec.sensor_height):
        for qx in range(spec.sensor_width):
            for t_ms, pol in edge_crossings(spec, qx, qy):
                t_us = int(round(t_ms * 1000.0))
                t_us = min(max(t_us, 0), spec.duration)
                rows.extend([(t_us, qx, qy, pol)] * k)

    rng = np.random.default_rng(seed)
    if spec.noise_rate > 0.0:
        expected = (
            spec.noise_rate
            * spec.sensor_width
            * spec.sensor_height
            * (spec.duration / 1e6)
        )
        n_noise = int(rng.poisson(expected))
        for _ in range(n_noise):
            rows.append(
                (
                    int(rng.integers(0, spec.duration + 1)),
                    int(rng.integers(0, spec.sensor_width)),
                    int(rng.integers(0, spec.sensor_height)),
                    int(rng.choice((-1, 1))),
                )
            )

    if not rows:
        return _empty_stream(spec.sensor_width, spec.sensor_height, spec.duration)
    arr = np.array(rows, dtype=np.int64)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    return EventStream(
        arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3],
        spec.sensor_width, spec.sensor_height, spec.duration,
    )


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    """One sample: an event file path or an inline synthetic spec."""

    label: int
    split: str = "train"
    path: str | None = None
    synthetic: SyntheticSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("entry needs exactly one of path / synthetic")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train/test, got {self.split!r}")

    def to_dict(self) -> dict:
        d: dict = {"label": self.label, "split": self.split}
        if self.path is not None:
            d["path"] = self.path
        else:
            d["synthetic"] = self.synthetic.to_dict()
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        synth = d.get("synthetic")
        return cls(
            label=int(d["label"]),
            split=d.get("split", "train"),
            path=d.get("path"),
            synthetic=SyntheticSpec.from_dict(synth) if synth else None,
            seed=int(d.get("seed", 0)),
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def validate(self) -> None:
        if not self.entries:
            return
        labels = sorted({e.label for e in self.entries})
        if labels != list(range(len(labels))):
            raise ValueError(f"labels must be contiguous from 0, got {labels}")

    @property
    def num_classes(self) -> int:
        return len({e.label for e in self.entries})

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split])

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        m = cls([ManifestEntry.from_dict(e) for e in d["entries"]])
        m.validate()
        return m


def load_manifest(path: str | Path) -> DatasetManifest:
    with open(path) as fh:
        return DatasetManifest.from_dict(json.load(fh))


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    manifest.validate()
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
        fh.write("\n")


def load_entry_stream(entry: ManifestEntry, base_dir: str | Path = ".") -> EventStream:
    if entry.path is not None:
        return load_stream(Path(base_dir) / entry.path)
    return generate_synthetic(entry.synthetic, entry.seed)


def floor_ratio(ratio: float, n: int) -> int:
    """floor(ratio * n) robust to float representation of decimal ratios."""
    x = ratio * n
    r = round(x)
    if abs(x - r) < 1e-9:
        return int(r)
    return int(math.floor(x))


def split_dataset(
    manifest: DatasetManifest, train_fraction: float, seed: int
) -> DatasetManifest:
    """Per-class stratified split; deterministic given seed."""
    if not (0.0 < train_fraction < 1.0):
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    manifest.validate()
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(i)
    rng = np.random.default_rng(seed)
    new_entries = [replace_split(e, "test") for e in manifest.entries]
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise SplitError(f"class {label} has {len(idx)} sample(s), need >= 2")
        n_train = floor_ratio(train_fraction, len(idx))
        n_train = min(max(n_train, 1), len(idx) - 1)
        perm = rng.permutation(len(idx))
        for j in perm[:n_train]:
            new_entries[idx[j]] = replace_split(new_entries[idx[j]], "train")
    return DatasetManifest(new_entries)


def replace_split(entry: ManifestEntry, split: str) -> ManifestEntry:
    return replace(entry, split=split)
