"""Per-slice angular velocity estimation by local contrast maximization.

Each event slice is warped to its reference time with the exact rotation
exp((t_k - t_ref) * omega) (not a linearized flow), accumulated into a
sensor-frame IWE, and the IWE variance is maximized over omega with CG-FR
using the analytic gradient.  Slices flagged stationary return zero without
optimizing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OptimizationError, StreamFormatError
from .events import EventSlice, EventStream, GyroStream, downsample, slice_hybrid
from .geometry import CameraModel, Rotation, back_project, exp_so3, rodrigues_scaled
from .optimizer import OptimOptions, maximize_cgfr
from .trajectory import PoseSample, _right_jacobian_scaled

__all__ = [
    "AngularVelocityEstimate",
    "FrontendConfig",
    "slice_objective",
    "estimate_omega",
    "run_frontend",
    "integrate_omega",
    "imu_dead_reckoning",
    "save_omega",
    "load_omega",
]


@dataclass(frozen=True)
class AngularVelocityEstimate:
    t_ref: float
    omega: np.ndarray  # rad/s, body frame
    value: float = 0.0  # IWE variance at the estimate
    converged: bool = True
    stationary: bool = False
    iterations: int = 0


@dataclass(frozen=True)
class FrontendConfig:
    """Slicing and optimization parameters of the velocity front-end.

    ``k`` is sized so a slice spans roughly 10-30 ms at the sequence's
    median event rate; ``f`` is the output frequency.  ``warm_start``
    seeds each slice with the previous estimate (zero for the first).
    """

    k: int = 20000
    f: float = 100.0
    q: int = 1
    warm_start: bool = True
    opt: OptimOptions = field(
        default_factory=lambda: OptimOptions(
            max_iters=30, gtol=1e-6, step_tol=1e-6, initial_step=0.05
        )
    )


def slice_objective(slice_events: EventStream, cam: CameraModel, t_ref: float, margin: int = 12):
    """Build the variance objective f(omega) -> (value, gradient) for a slice.

    The accumulation domain is the sensor padded by ``margin`` pixels:
    without it, events sitting exactly on the sensor border all cross the
    drop boundary together at the unwarped point, leaving a discontinuity
    right where cold starts begin.  Events warped beyond the margin are
    dropped and contribute a zero gradient, keeping value and gradient
    consistent.
    """
    X = back_project(np.stack([slice_events.x, slice_events.y], axis=1), cam)
    dts = slice_events.t - t_ref
    fx, fy = cam.fx, cam.fy
    cx, cy = cam.cx + margin, cam.cy + margin
    w, h = cam.width + 2 * margin, cam.height + 2 * margin
    npix = float(w * h)
    from .iwe import Iwe, accumulate_bilinear, bilinear_weight_gradient

    def objective(omega: np.ndarray):
        Re = rodrigues_scaled(omega, dts)
        Xr = np.einsum("kij,kj->ki", Re, X)
        z = np.maximum(Xr[:, 2], 1e-6)
        u = fx * Xr[:, 0] / z + cx
        v = fy * Xr[:, 1] / z + cy
        behind = Xr[:, 2] <= 1e-6
        if np.any(behind):  # force off-sensor so the drop policy applies
            u = np.where(behind, -1e9, u)
        iwe = Iwe.zeros(w, h, frame="local")
        accumulate_bilinear((u, v), iwe)
        mu = iwe.values.mean()
        value = float(iwe.values.var())

        cf = (2.0 / npix) * (iwe.values - mu)
        gu, gv = bilinear_weight_gradient(cf, u, v, wrap_x=False)
        a = np.empty_like(X)
        a[:, 0] = gu * fx / z
        a[:, 1] = gv * fy / z
        a[:, 2] = -(gu * fx * Xr[:, 0] + gv * fy * Xr[:, 1]) / (z * z)
        rows = np.cross(np.einsum("ki,kij->kj", a, Re), X)
        jr = _right_jacobian_scaled(np.asarray(omega, dtype=float), dts)
        grad = -np.einsum("k,kj,kji->i", dts, rows, jr)
        return value, grad

    return objective


def estimate_omega(
    sl: EventSlice,
    cam: CameraModel,
    omega_init=(0.0, 0.0, 0.0),
    opt: OptimOptions | None = None,
) -> AngularVelocityEstimate:
    """Estimate the slice's constant angular velocity by CMax.

    Stationary slices short-circuit to zero velocity.  An optimizer
    numerical failure returns the initial guess flagged unconverged.
    """
    if sl.stationary:
        return AngularVelocityEstimate(
            t_ref=sl.t_ref, omega=np.zeros(3), stationary=True, converged=True
        )
    opt = opt or FrontendConfig().opt
    objective = slice_objective(sl.events, cam, sl.t_ref)
    x0 = np.asarray(omega_init, dtype=float)
    try:
        report = maximize_cgfr(objective, x0, opt)
    except OptimizationError:
        return AngularVelocityEstimate(
            t_ref=sl.t_ref, omega=x0.copy(), converged=False, stationary=False
        )
    return AngularVelocityEstimate(
        t_ref=sl.t_ref,
        omega=report.x,
        value=report.value,
        converged=report.reason != "max-iters",
        stationary=False,
        iterations=report.iterations,
    )


def run_frontend(
    stream: EventStream, cam: CameraModel, cfg: FrontendConfig = FrontendConfig()
) -> list[AngularVelocityEstimate]:
    """Slice the stream and estimate one angular velocity per slice.

    Estimates are produced at rate ``cfg.f`` regardless of event density;
    each slice is warm-started from the previous estimate when enabled.
    """
    if len(stream) == 0:
        return []
    sliced = slice_hybrid(downsample(stream, cfg.q), cfg.k, cfg.f)
    estimates = []
    prev = np.zeros(3)
    for sl in sliced:
        est = estimate_omega(sl, cam, omega_init=prev, opt=cfg.opt)
        estimates.append(est)
        if cfg.warm_start and not est.stationary:
            prev = est.omega
    return estimates


def integrate_omega(estimates: list[AngularVelocityEstimate]) -> list[PoseSample]:
    """Integrate velocity estimates into poses with group increments.

    The first pose is the identity; R_{m+1} = R_m exp(omega_m * dt).  For
    constant-rate input this reproduces the geodesic exp(t * omega) exactly.
    """
    if not estimates:
        return []
    poses = [PoseSample(t=estimates[0].t_ref, R=Rotation.identity())]
    for m in range(len(estimates) - 1):
        dt = estimates[m + 1].t_ref - estimates[m].t_ref
        poses.append(
            PoseSample(t=estimates[m + 1].t_ref, R=poses[-1].R @ exp_so3(estimates[m].omega * dt))
        )
    return poses


def imu_dead_reckoning(gyro: GyroStream, bias=(0.0, 0.0, 0.0)) -> list[PoseSample]:
    """Integrate bias-subtracted gyro rates at the native IMU rate."""
    if len(gyro) == 0:
        return []
    bias = np.asarray(bias, dtype=float)
    poses = [PoseSample(t=float(gyro.t[0]), R=Rotation.identity())]
    for m in range(len(gyro) - 1):
        dt = float(gyro.t[m + 1] - gyro.t[m])
        poses.append(
            PoseSample(t=float(gyro.t[m + 1]), R=poses[-1].R @ exp_so3((gyro.w[m] - bias) * dt))
        )
    return poses


def save_omega(path, estimates: list[AngularVelocityEstimate]):
    """CSV `t,wx,wy,wz` consumed by the back-end and evaluation."""
    with Path(path).open("w") as fh:
        fh.write("# t,wx,wy,wz\n")
        for e in estimates:
            fh.write(f"{e.t_ref!r},{e.omega[0]!r},{e.omega[1]!r},{e.omega[2]!r}\n")


def load_omega(path) -> list[AngularVelocityEstimate]:
    estimates = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise StreamFormatError(f"{path}:{lineno}: expected t,wx,wy,wz")
        t, wx, wy, wz = (float(p) for p in parts)
        estimates.append(AngularVelocityEstimate(t_ref=t, omega=np.array([wx, wy, wz])))
    return estimates
