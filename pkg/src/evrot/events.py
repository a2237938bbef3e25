"""Event data model, stream I/O, downsampling, and hybrid slicing.

Event files come in two flavors:

* text: one event per line, ``t x y p`` (t in seconds, p in {1,-1} or
  {1,0}; 0 is mapped to -1);
* binary: magic ``EVT1`` followed by packed little-endian records
  (f64 t, u16 x, u16 y, i8 p).

Gyro files are text: ``t wx wy wz`` (s, rad/s).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StreamFormatError
from .geometry import CameraModel

__all__ = [
    "EventStream",
    "EventSlice",
    "GyroStream",
    "read_events",
    "write_events",
    "downsample",
    "slice_hybrid",
    "read_gyro",
    "write_gyro",
]

_BINARY_MAGIC = b"EVT1"
_BINARY_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

# A slice spanning more than this many output periods flags the camera as
# stationary and its velocity estimate is forced to zero.
STATIONARY_SPAN_PERIODS = 10.0


@dataclass
class EventStream:
    """Time-sorted event arrays (columns of the atomic (t, x, y, p) record)."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    n_rejected: int = 0

    def __len__(self) -> int:
        return len(self.t)

    @property
    def t_first(self) -> float:
        return float(self.t[0])

    @property
    def t_last(self) -> float:
        return float(self.t[-1])

    def window(self, i0: int, i1: int) -> "EventStream":
        """Contiguous sub-stream [i0, i1) sharing the underlying arrays."""
        return EventStream(self.t[i0:i1], self.x[i0:i1], self.y[i0:i1], self.p[i0:i1])

    def select_time(self, t0: float, t1: float) -> "EventStream":
        """Events with t in [t0, t1)."""
        i0, i1 = np.searchsorted(self.t, (t0, t1))
        return self.window(int(i0), int(i1))

    @classmethod
    def empty(cls) -> "EventStream":
        z = np.empty(0)
        return cls(z, z.copy(), z.copy(), np.empty(0, dtype=np.int8))

    @classmethod
    def from_arrays(cls, t, x, y, p) -> "EventStream":
        t = np.asarray(t, dtype=float)
        if np.any(np.diff(t) < 0.0):
            raise StreamFormatError("event timestamps must be non-decreasing")
        return cls(
            t,
            np.asarray(x, dtype=float),
            np.asarray(y, dtype=float),
            np.asarray(p, dtype=np.int8),
        )


@dataclass
class EventSlice:
    """A packet of events centered at a reference timestamp."""

    t_ref: float
    events: EventStream
    stationary: bool = False


@dataclass
class GyroStream:
    """Time-sorted angular-rate samples (body frame, rad/s)."""

    t: np.ndarray
    w: np.ndarray  # (n, 3)

    def __len__(self) -> int:
        return len(self.t)


def _map_polarity(p: np.ndarray, where: str) -> np.ndarray:
    p = p.astype(np.int64)
    bad = ~np.isin(p, (-1, 0, 1))
    if np.any(bad):
        raise StreamFormatError(f"{where}: polarity must be in {{1, 0, -1}}")
    return np.where(p == 0, -1, p).astype(np.int8)


def _locate_bad_line(path: Path, n_cols: int) -> str:
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != n_cols:
            return f"{path}:{lineno}: expected {n_cols} fields, got {len(parts)}"
        try:
            [float(v) for v in parts]
        except ValueError:
            return f"{path}:{lineno}: non-numeric field in {line!r}"
    return f"{path}: malformed numeric table"


def _load_table(path: Path, n_cols: int) -> np.ndarray:
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as e:
        raise StreamFormatError(_locate_bad_line(path, n_cols)) from e
    if data.size == 0:
        return np.empty((0, n_cols))
    if data.shape[1] != n_cols:
        raise StreamFormatError(_locate_bad_line(path, n_cols))
    return data


def read_events(path, cam: CameraModel, sort: bool = False) -> EventStream:
    """Load and validate an event file (text or EVT1 binary).

    Undistortion is applied once here when the camera has distortion
    coefficients, so downstream warps can assume ideal pinhole pixels.
    Out-of-bounds events are dropped; the count lands in ``n_rejected``.

    Args:
        sort: opt-in stable sort; otherwise non-monotone timestamps raise.
    """
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
    if magic == _BINARY_MAGIC:
        raw = np.fromfile(path, dtype=_BINARY_DTYPE, offset=4)
        t = raw["t"].astype(float)
        x = raw["x"].astype(float)
        y = raw["y"].astype(float)
        p = _map_polarity(raw["p"], str(path))
    else:
        data = _load_table(path, 4)
        t, x, y = data[:, 0], data[:, 1], data[:, 2]
        p = _map_polarity(data[:, 3], str(path))

    if sort:
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    elif np.any(np.diff(t) < 0.0):
        bad = int(np.argmax(np.diff(t) < 0.0)) + 2
        raise StreamFormatError(f"{path}: timestamps not sorted near line {bad} (pass sort=True)")

    if cam.has_distortion:
        x, y = cam.undistort_pixels(x, y)
    keep = (x >= 0.0) & (x < cam.width) & (y >= 0.0) & (y < cam.height)
    n_rejected = int(len(t) - keep.sum())
    stream = EventStream(t[keep], x[keep], y[keep], p[keep], n_rejected=n_rejected)
    return stream


def write_events(path, stream: EventStream, binary: bool = False):
    """Write an event stream; text keeps 9 significant digits of t."""
    path = Path(path)
    if binary:
        rec = np.empty(len(stream), dtype=_BINARY_DTYPE)
        rec["t"] = stream.t
        rec["x"] = np.rint(stream.x).astype(np.uint16)
        rec["y"] = np.rint(stream.y).astype(np.uint16)
        rec["p"] = stream.p
        with path.open("wb") as fh:
            fh.write(_BINARY_MAGIC)
            rec.tofile(fh)
        return
    with path.open("w") as fh:
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            fh.write(f"{t:.9g} {x:.9g} {y:.9g} {int(p)}\n")


def downsample(stream: EventStream, q: int) -> EventStream:
    """Systematic 1-in-q sampling (keeps indices 0, q, 2q, ...)."""
    if q < 1:
        raise ValueError("event sampling rate q must be >= 1")
    if q == 1:
        return stream
    return EventStream(stream.t[::q], stream.x[::q], stream.y[::q], stream.p[::q])


def slice_hybrid(stream: EventStream, k: int, f: float) -> list[EventSlice]:
    """Hybrid event slicing: k events around equispaced timestamps.

    Slice centers sit at t_first + (m + 1/2)/f.  Each slice takes the k
    events nearest in time to its center (distance ties prefer the earlier
    event), so neighboring slices may share events.  A slice whose time span
    exceeds 10/f is flagged stationary, as is the single slice emitted for a
    stream shorter than k events.
    """
    if k < 2:
        raise ValueError("events per slice k must be >= 2")
    if f <= 0.0:
        raise ValueError("output frequency f must be positive")
    n = len(stream)
    if n == 0:
        return []
    if n < k:
        t_ref = 0.5 * (stream.t_first + stream.t_last)
        return [EventSlice(t_ref=t_ref, events=stream.window(0, n), stationary=True)]

    t = stream.t
    max_span = STATIONARY_SPAN_PERIODS / f
    slices = []
    m = 0
    while True:
        t_ref = stream.t_first + (m + 0.5) / f
        if t_ref > stream.t_last:
            break
        j = int(np.searchsorted(t, t_ref))
        lo = max(0, j - k)
        hi = min(j, n - k)
        if hi < lo:
            hi = lo
        # The k nearest events form a contiguous window; among windows that
        # minimize the largest distance to the center, the earliest start
        # index reproduces the earlier-event tie-break.
        starts = np.arange(lo, hi + 1)
        cost = np.maximum(t_ref - t[starts], t[starts + k - 1] - t_ref)
        i0 = int(starts[np.argmin(cost)])
        span = float(t[i0 + k - 1] - t[i0])
        slices.append(
            EventSlice(t_ref=t_ref, events=stream.window(i0, i0 + k), stationary=span > max_span)
        )
        m += 1
    return slices


def read_gyro(path) -> GyroStream:
    """Load a text gyro file (t wx wy wz)."""
    data = _load_table(Path(path), 4)
    t = data[:, 0]
    if np.any(np.diff(t) < 0.0):
        raise StreamFormatError(f"{path}: gyro timestamps must be non-decreasing")
    return GyroStream(t=t, w=data[:, 1:4])


def write_gyro(path, gyro: GyroStream):
    with Path(path).open("w") as fh:
        for t, w in zip(gyro.t, gyro.w):
            fh.write(f"{t:.9g} {w[0]:.9g} {w[1]:.9g} {w[2]:.9g}\n")
