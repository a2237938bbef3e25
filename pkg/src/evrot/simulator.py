"""Synthetic event generation from a panoramic image and a known trajectory.

The generator samples the log intensity seen by every sensor pixel along the
trajectory at a fixed period and emits an event each time the accumulated
change crosses a multiple of the contrast threshold, with sub-step
timestamps interpolated linearly in log intensity.  It is deliberately
minimal: a clean oracle for closed-loop accuracy tests, not a sensor model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream
from .geometry import CameraModel, PanoramaGeometry, Rotation, back_project, exp_so3
from .iwe import _bilinear_setup
from .trajectory import ControlPoseGrid, PoseSample, fit_spline, sample_matrices

__all__ = [
    "PanoramaImage",
    "SimConfig",
    "sample_panorama",
    "generate_events",
    "make_test_trajectory",
    "make_checkerboard",
]


@dataclass
class PanoramaImage:
    """Equirectangular grayscale intensities in [0, 1] (2:1 aspect)."""

    values: np.ndarray

    def __post_init__(self):
        h, w = self.values.shape
        if w != 2 * h:
            raise ValueError(f"panorama must be 2:1, got {w}x{h}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0.0):
            raise ValueError("intensities must be finite and non-negative")

    @property
    def geometry(self) -> PanoramaGeometry:
        h, w = self.values.shape
        return PanoramaGeometry(w=w, h=h)

    @classmethod
    def from_file(cls, path) -> "PanoramaImage":
        path = Path(path)
        if path.suffix.lower() == ".pgm":
            values = _read_pgm(path)
        else:
            from PIL import Image

            img = Image.open(path)
            arr = np.asarray(img, dtype=float)
            if arr.ndim == 3:
                arr = arr.mean(axis=2)
            peak = 65535.0 if arr.max() > 255.0 else 255.0
            values = arr / peak
        return cls(values=values)

    def save(self, path):
        from .iwe import save_map_image

        save_map_image(path, self.values, gamma=1.0)


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    # header: P5, dims, maxval; comments allowed after the magic
    tokens = []
    i = 0
    while len(tokens) < 4:
        if data[i : i + 1] == b"#":
            i = data.index(b"\n", i) + 1
            continue
        j = i
        while data[j : j + 1] not in (b" ", b"\t", b"\n", b"\r"):
            j += 1
        if j > i:
            tokens.append(data[i:j])
        i = j + 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    pix = np.frombuffer(data[i:], dtype=dt, count=w * h).reshape(h, w)
    return pix.astype(float) / maxval


@dataclass(frozen=True)
class SimConfig:
    """Event-generation parameters.

    ``contrast`` is the log-intensity threshold C; ``eps_floor`` guards
    log(0) on black pixels; ``refractory`` (s) suppresses per-pixel events
    closer than that to the previous one (0 disables).
    """

    cam: CameraModel
    contrast: float = 0.2
    dt_sim: float = 1e-3
    refractory: float = 0.0
    eps_floor: float = 1e-3

    def __post_init__(self):
        if self.contrast <= 0.0 or self.dt_sim <= 0.0:
            raise ValueError("contrast and dt_sim must be positive")


def sample_panorama(pano: PanoramaImage, directions) -> np.ndarray:
    """Bilinear intensity lookup along 3D direction(s); azimuth-wrapped."""
    from .geometry import project_equirect

    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    u, v = project_equirect(dirs, pano.geometry)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    h, w = pano.values.shape
    x0, x1, y0, a, b, _, _ = _bilinear_setup(w, h, u, v, wrap_x=True)
    flat = pano.values.ravel()
    vals = (
        flat[y0 * w + x0] * (1.0 - a) * (1.0 - b)
        + flat[y0 * w + x1] * a * (1.0 - b)
        + flat[(y0 + 1) * w + x0] * (1.0 - a) * b
        + flat[(y0 + 1) * w + x1] * a * b
    )
    if np.asarray(directions).ndim == 1:
        return float(vals[0])
    return vals


def generate_events(
    pano: PanoramaImage,
    gt: ControlPoseGrid,
    cfg: SimConfig,
    t_start: float | None = None,
    t_end: float | None = None,
) -> EventStream:
    """Simulate the event stream seen along a ground-truth trajectory.

    The simulated interval defaults to the trajectory's full valid range.
    Output is merged across pixels and time-sorted; polarity is the sign of
    the log-intensity change.
    """
    lo, hi = gt.valid_range()
    t0 = lo if t_start is None else max(lo, float(t_start))
    t1 = hi if t_end is None else min(hi, float(t_end))
    if t1 <= t0:
        raise ValueError("empty simulation interval")
    n_steps = max(1, int(math.ceil((t1 - t0) / cfg.dt_sim)))
    times = np.linspace(t0, t1, n_steps + 1)

    cam = cfg.cam
    xs, ys = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    px = xs.ravel()
    py = ys.ravel()
    bearings = back_project(np.stack([px, py], axis=1), cam)

    poses = sample_matrices(gt, times)

    def log_intensity(R: np.ndarray) -> np.ndarray:
        dirs = bearings @ R.T
        return np.log(cfg.eps_floor + sample_panorama(pano, dirs))

    level = log_intensity(poses[0])  # reference level per pixel
    l_prev = level.copy()
    last_t = np.full(level.shape, -np.inf) if cfg.refractory > 0.0 else None

    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []
    c = cfg.contrast
    for step in range(1, len(times)):
        l_cur = log_intensity(poses[step])
        delta_ref = l_cur - level
        # number of threshold crossings this step; tiny slack so an exact
        # k*C change yields k events despite float division
        n_cross = np.floor(np.abs(delta_ref) / c + 1e-9).astype(np.int64)
        active = np.nonzero(n_cross > 0)[0]
        if len(active):
            sign = np.sign(delta_ref[active])
            counts = n_cross[active]
            rep = np.repeat(active, counts)
            sign_rep = np.repeat(sign, counts)
            # j-th crossing (1-based) sits at level[pix] + j*sign*C
            j = np.concatenate([np.arange(1, m + 1) for m in counts]).astype(float)
            dl = l_cur[rep] - l_prev[rep]
            lvl = level[rep] + j * sign_rep * c
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(np.abs(dl) > 0.0, (lvl - l_prev[rep]) / dl, 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            ts = times[step - 1] + frac * (times[step] - times[step - 1])
            keep = np.ones(len(rep), dtype=bool)
            if last_t is not None:
                # enforce the refractory period sequentially per pixel
                for idx in range(len(rep)):
                    if ts[idx] < last_t[rep[idx]] + cfg.refractory:
                        keep[idx] = False
                    else:
                        last_t[rep[idx]] = ts[idx]
            order = np.argsort(ts[keep], kind="stable")
            chunks_t.append(ts[keep][order])
            chunks_x.append(px[rep[keep]][order])
            chunks_y.append(py[rep[keep]][order])
            chunks_p.append(sign_rep[keep][order].astype(np.int8))
            level[active] += counts * sign * c
        l_prev = l_cur

    if not chunks_t:
        return EventStream.empty()
    return EventStream(
        t=np.concatenate(chunks_t),
        x=np.concatenate(chunks_x),
        y=np.concatenate(chunks_y),
        p=np.concatenate(chunks_p),
    )


def make_checkerboard(
    height: int = 512,
    n_az: int = 24,
    n_el: int = 12,
    lo: float = 0.3,
    hi: float = 0.7,
    jitter: float = 0.1,
    seed: int = 7,
) -> PanoramaImage:
    """High-contrast checkerboard panorama for closed-loop tests.

    Dark and bright cells are jittered around ``lo``/``hi`` with a seeded
    draw: a perfectly periodic board creates alias optima for contrast
    maximization (several rotations align events equally well), which says
    nothing about the estimator.  Jitter keeps every cell pair high-contrast
    while making the global alignment unique.  The defaults give a 2-3x
    intensity ratio between neighbors, enough for a few events per edge
    transit without the same-pixel burst stacking that an extreme contrast
    produces (stacked bursts put a spurious variance peak at zero motion).
    """
    h, w = height, 2 * height
    col = np.arange(w)[None, :] * n_az // w
    row = np.arange(h)[:, None] * n_el // h
    rng = np.random.default_rng(seed)
    dark = np.clip(lo + jitter * rng.standard_normal((n_el, n_az)), 0.02, 0.45)
    bright = np.clip(hi + jitter * rng.standard_normal((n_el, n_az)), 0.55, 0.98)
    cells = np.where(
        (np.arange(n_el)[:, None] + np.arange(n_az)[None, :]) % 2 == 0, dark, bright
    )
    return PanoramaImage(values=cells[row, col])


def _integrate_rates(times: np.ndarray, rates: np.ndarray) -> list[PoseSample]:
    poses = [PoseSample(t=float(times[0]), R=Rotation.identity())]
    for i in range(len(times) - 1):
        dt = float(times[i + 1] - times[i])
        poses.append(PoseSample(t=float(times[i + 1]), R=poses[-1].R @ exp_so3(rates[i] * dt)))
    return poses


def make_test_trajectory(
    kind: str,
    duration: float = 5.0,
    control_hz: float = 50.0,
    order: str = "cubic",
    omega: tuple[float, float, float] = (0.0, 0.0, 1.0),
    peak_rate: float | None = None,
    freqs: tuple[float, float, float] = (0.4, 0.55, 0.3),
    amplitudes: tuple[float, float, float] = (1.0, 0.8, 0.5),
    seed: int = 0,
    fine_hz: float = 2000.0,
) -> ControlPoseGrid:
    """Deterministic ground-truth spline grids for tests and simulations.

    Kinds:
      * ``constant``: R(t) = exp(t * omega); representable exactly by both
        spline orders (same-axis equal increments).
      * ``sinusoid``: per-axis sinusoidal body rates with the given
        frequencies/amplitudes, rescaled so the peak |omega| equals
        ``peak_rate`` (rad/s) when provided.
      * ``random-smooth``: seeded mixture of low-frequency sinusoids.
    """
    dt_c = 1.0 / control_hz
    if kind == "constant":
        w = np.asarray(omega, dtype=float)
        if peak_rate is not None:
            nrm = np.linalg.norm(w)
            if nrm > 0.0:
                w = w * (peak_rate / nrm)
        n = int(round(duration * control_hz)) + (3 if order == "cubic" else 1)
        t0 = -dt_c if order == "cubic" else 0.0
        poses = [exp_so3((t0 + i * dt_c) * w) for i in range(n)]
        return ControlPoseGrid(t0, dt_c, poses, order)

    rng = np.random.default_rng(seed)
    pad = 2.0 * dt_c  # margin so the valid range covers [0, duration]
    fine = np.arange(-pad, duration + pad + 1.0 / fine_hz, 1.0 / fine_hz)
    if kind == "sinusoid":
        phases = rng.uniform(0.0, 2.0 * math.pi, 3)
        rates = np.stack(
            [amplitudes[a] * np.sin(2.0 * math.pi * freqs[a] * fine + phases[a]) for a in range(3)],
            axis=1,
        )
    elif kind == "random-smooth":
        rates = np.zeros((len(fine), 3))
        for a in range(3):
            for _ in range(3):
                f = rng.uniform(0.1, 0.8)
                amp = rng.uniform(0.3, 1.0)
                ph = rng.uniform(0.0, 2.0 * math.pi)
                rates[:, a] += amp * np.sin(2.0 * math.pi * f * fine + ph)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    if peak_rate is not None:
        peak = np.linalg.norm(rates, axis=1).max()
        if peak > 0.0:
            rates *= peak_rate / peak
    samples = _integrate_rates(fine, rates)
    t0 = -2.0 * dt_c if order == "cubic" else -dt_c
    n = int(math.ceil((duration + pad - t0) / dt_c)) + (2 if order == "cubic" else 1)
    return fit_spline(samples, t0, dt_c, order, n=n)
