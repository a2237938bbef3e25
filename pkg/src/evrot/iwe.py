"""Images of warped events: bilinear voting, sharpness functionals, warping.

An IWE is a plain float accumulator.  Every warped event deposits a total
weight of 1 over its four neighboring pixels, so the image mass equals the
number of accumulated events up to float round-off; that conservation (with
the positive warp Jacobian) is what rules out event collapse.

Polarity is never used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .events import EventStream
from .geometry import CameraModel, PanoramaGeometry, back_project, project_equirect
from .trajectory import ControlPoseGrid, sample_matrices

__all__ = [
    "Iwe",
    "accumulate_bilinear",
    "variance",
    "event_area",
    "event_density",
    "alpha_weight",
    "gradient_magnitude",
    "warp_panoramic",
    "batch_midpoint_times",
    "bilinear_weight_gradient",
    "save_map_image",
]


@dataclass
class Iwe:
    """2D accumulator of warped events.

    ``wrap_x`` selects panoramic azimuth wrapping; without it, points
    outside the image are dropped.  ``pole_overshoot`` counts points whose
    row coordinate had to be clamped (they still deposit full weight on the
    nearest valid row pair).
    """

    values: np.ndarray
    frame: str = "local"  # "local" | "panoramic"
    wrap_x: bool = False
    pole_overshoot: int = 0

    @classmethod
    def zeros(cls, width: int, height: int, frame: str = "local", wrap_x: bool = False) -> "Iwe":
        if width < 1 or height < 1:
            raise ValueError("IWE dimensions must be positive")
        return cls(values=np.zeros((height, width)), frame=frame, wrap_x=wrap_x)

    @classmethod
    def zeros_like_pano(cls, pano: PanoramaGeometry) -> "Iwe":
        return cls.zeros(pano.w, pano.h, frame="panoramic", wrap_x=True)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def mass(self) -> float:
        return float(self.values.sum())


def _as_uv(points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(points, tuple):
        u, v = points
        return np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts[:, 0], pts[:, 1]


def _bilinear_setup(width: int, height: int, u: np.ndarray, v: np.ndarray, wrap_x: bool):
    """Shared corner indices and weights for deposit and gradient lookups.

    Returns (x0, x1, y0, a, b, valid, clamped_v); y1 is always y0 + 1.
    Row coordinates are clamped to the image; with wrapping disabled the
    ``valid`` mask instead drops out-of-bounds points entirely.
    """
    if wrap_x:
        u = np.mod(u, width)
        valid = np.ones(len(u), dtype=bool)
        x0 = np.floor(u).astype(np.int64)
        a = u - x0
        x1 = np.mod(x0 + 1, width)
    else:
        valid = (u >= 0.0) & (u <= width - 1.0) & (v >= 0.0) & (v <= height - 1.0)
        x0 = np.clip(np.floor(u).astype(np.int64), 0, width - 2)
        a = u - x0
        x1 = x0 + 1
    clamped_v = (v < 0.0) | (v > height - 1.0)
    vc = np.clip(v, 0.0, height - 1.0)
    y0 = np.minimum(np.floor(vc).astype(np.int64), height - 2)
    b = vc - y0
    return x0, x1, y0, a, b, valid, clamped_v


def accumulate_bilinear(points, target: Iwe) -> Iwe:
    """Deposit unit weight per point over its four neighboring pixels.

    Mutates and returns ``target``.  Panoramic targets wrap the column
    coordinate and clamp rows (counting ``pole_overshoot``); local targets
    drop out-of-bounds points so the image mass equals the in-bounds count.
    """
    u, v = _as_uv(points)
    h, w = target.values.shape
    x0, x1, y0, a, b, valid, clamped = _bilinear_setup(w, h, u, v, target.wrap_x)
    if not np.all(valid):
        x0, x1, y0, a, b = x0[valid], x1[valid], y0[valid], a[valid], b[valid]
        clamped = clamped[valid]
    target.pole_overshoot += int(np.count_nonzero(clamped))
    idx = np.concatenate(
        [y0 * w + x0, y0 * w + x1, (y0 + 1) * w + x0, (y0 + 1) * w + x1]
    )
    wts = np.concatenate(
        [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b]
    )
    target.values += np.bincount(idx, weights=wts, minlength=h * w).reshape(h, w)
    return target


def bilinear_weight_gradient(field: np.ndarray, u, v, wrap_x: bool):
    """Per-point gradient of sum_P field(P) * w_P(u, v) w.r.t. (u, v).

    ``field`` is any per-pixel weighting (for the variance objective, the
    centered IWE scaled by 2/N).  Points dropped or row-clamped by the
    deposit policy get a zero gradient in the affected coordinate, keeping
    objective and gradient consistent.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    h, w = field.shape
    x0, x1, y0, a, b, valid, clamped = _bilinear_setup(w, h, u, v, wrap_x)
    flat = field.ravel()
    f00 = flat[y0 * w + x0]
    f10 = flat[y0 * w + x1]
    f01 = flat[(y0 + 1) * w + x0]
    f11 = flat[(y0 + 1) * w + x1]
    gu = (1.0 - b) * (f10 - f00) + b * (f11 - f01)
    gv = (1.0 - a) * (f01 - f00) + a * (f11 - f10)
    gv[clamped] = 0.0
    if not wrap_x:
        gu[~valid] = 0.0
        gv[~valid] = 0.0
    return gu, gv


def variance(iwe: Iwe, region: tuple[int, int, int, int] | None = None) -> float:
    """Population variance of pixel values.

    ``region`` restricts the evaluation domain to rows [y0, y1) and columns
    [x0, x1); the full image is used otherwise.
    """
    vals = iwe.values
    if vals.size == 0:
        raise ValueError("variance of an empty image")
    if region is not None:
        y0, y1, x0, x1 = region
        vals = vals[y0:y1, x0:x1]
    return float(vals.var())


def event_area(iwe: Iwe, lam0: float = 1.0) -> float:
    """Saturating support measure: sum over pixels of 1 - exp(-H/lam0)."""
    if lam0 <= 0.0:
        raise ValueError("lam0 must be positive")
    nz = iwe.values[iwe.values > 0.0]
    return float(np.sum(-np.expm1(-nz / lam0)))


def event_density(iwe: Iwe, lam0: float = 1.0) -> float:
    """Warped-event count divided by the area it occupies; peaks when sharp."""
    area = event_area(iwe, lam0)
    if area <= 0.0:
        raise ValueError("event density undefined for an empty IWE")
    return iwe.mass / area


def alpha_weight(iwe_local: Iwe, iwe_global: Iwe, lam0: float = 1.0) -> float:
    """Adaptive local/global balance: density ratio rho(I_L) / rho(I_G).

    Returns 0 when the global map is still empty (first window), which
    reduces the objective to pure local alignment.  Computed once per window
    from the initial local IWE and reused during the optimization.
    """
    if iwe_global.mass <= 0.0:
        return 0.0
    return event_density(iwe_local, lam0) / event_density(iwe_global, lam0)


def gradient_magnitude(iwe: Iwe) -> float:
    """RMS Sobel gradient norm: sqrt(mean(Ix^2 + Iy^2)) over all pixels."""
    vals = iwe.values
    if vals.shape[0] < 3 or vals.shape[1] < 3:
        raise ValueError("image too small for a 3x3 Sobel stencil")
    gx = ndimage.sobel(vals, axis=1, mode="reflect")
    gy = ndimage.sobel(vals, axis=0, mode="reflect")
    return math.sqrt(float(np.mean(gx * gx + gy * gy)))


def batch_midpoint_times(t: np.ndarray, batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint query time per consecutive batch of events.

    Returns (t_mid, starts); batch b covers indices [starts[b], starts[b+1]).
    """
    n = len(t)
    starts = np.arange(0, n, batch)
    ends = np.minimum(starts + batch - 1, n - 1)
    return 0.5 * (t[starts] + t[ends]), starts


def warp_panoramic(
    events: EventStream,
    grid: ControlPoseGrid,
    cam: CameraModel,
    pano: PanoramaGeometry,
    batch: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp events onto the panorama along the spline trajectory.

    Poses are sampled once at the midpoint time of each consecutive batch of
    ``batch`` events and shared within the batch; ``batch=1`` recovers the
    exact per-event pose.  Raises SplineRangeError when an event falls
    outside the trajectory's valid range.

    Returns (u, v) map coordinates (azimuth wrapped, elevation clamped).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if len(events) == 0:
        return np.empty(0), np.empty(0)
    X = back_project(np.stack([events.x, events.y], axis=1), cam)
    t_mid, starts = batch_midpoint_times(events.t, batch)
    R = sample_matrices(grid, t_mid)
    rep = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(events))))
    Xp = np.einsum("nij,nj->ni", R[rep], X)
    return project_equirect(Xp, pano)


def save_map_image(path, values: np.ndarray, gamma: float = 0.75, comment: str | None = None):
    """Export an accumulator as a 16-bit grayscale PGM or PNG.

    Values are normalized by their maximum and gamma-corrected (default
    0.75, the rendering convention used throughout).
    """
    from pathlib import Path as _Path

    path = _Path(path)
    peak = float(values.max())
    norm = values / peak if peak > 0.0 else np.zeros_like(values)
    img = ((norm**gamma) * 65535.0 + 0.5).astype(np.uint16)
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n"
        if comment:
            header = f"P5\n# {comment}\n{img.shape[1]} {img.shape[0]}\n"
        with path.open("wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(b"65535\n")
            fh.write(img.astype(">u2").tobytes())
    elif path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img, mode="I;16").save(path)
    else:
        raise ValueError(f"unsupported map image format: {path.suffix}")
