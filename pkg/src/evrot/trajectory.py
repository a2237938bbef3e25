"""Continuous-time SO(3) trajectories on equispaced control poses.

Two spline orders are supported:

* ``linear``  – geodesic interpolation between consecutive control poses;
  a sample at t in [t_i, t_i+1) depends on controls (i, i+1).
* ``cubic``   – cumulative cubic B-spline; a sample at t in [t_i, t_i+1)
  depends on controls (i-1, i, i+1, i+2) through the incremental rotations
  between consecutive controls and the cumulative basis functions.

Sampling outside the valid range is a hard error: extrapolated splines
misbehave and would silently corrupt downstream optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SplineFitError, SplineRangeError
from .geometry import (
    Rotation,
    exp_so3,
    hat,
    log_so3,
    rodrigues_scaled,
    so3_left_jacobian_inv,
    so3_right_jacobian_inv,
)

__all__ = [
    "PoseSample",
    "PoseJacobian",
    "ControlPoseGrid",
    "valid_time_range",
    "cumulative_basis",
    "sample_linear",
    "sample_cubic",
    "point_jacobian",
    "fit_spline",
    "fit_spline_partial",
    "sample_matrices",
    "pose_and_point_jacobians",
    "save_trajectory",
    "load_trajectory",
    "save_control_grid",
    "load_control_grid",
]

# Cumulative basis matrix for cubic B-splines; row 0 yields the constant 1
# absorbed by the base control pose, rows 1..3 weight the three increments.
_CUM_BASIS = (1.0 / 6.0) * np.array(
    [
        [6.0, 0.0, 0.0, 0.0],
        [5.0, 3.0, -3.0, 1.0],
        [1.0, 3.0, 3.0, -2.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)

_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class PoseSample:
    """A pose at a point in time."""

    t: float
    R: Rotation


@dataclass(frozen=True)
class PoseJacobian:
    """Sparse derivative of a rotated point w.r.t. the control poses.

    ``blocks[k]`` maps a right tangent perturbation of control pose
    ``indices[k]`` to the first-order change of R(t) @ X.  Controls not
    listed have an identically zero block.
    """

    indices: tuple[int, ...]
    blocks: np.ndarray  # (len(indices), 3, 3)


class ControlPoseGrid:
    """Equispaced SO(3) control poses defining a spline trajectory.

    Immutable after construction; sampling and Jacobians are pure functions,
    safe to call concurrently.
    """

    __slots__ = ("t0", "dt", "poses", "order", "_omegas", "_mats")

    def __init__(self, t0: float, dt: float, poses: list[Rotation], order: str):
        if order not in ("linear", "cubic"):
            raise ValueError(f"order must be 'linear' or 'cubic', got {order!r}")
        if dt <= 0.0:
            raise ValueError("control-pose spacing dt must be positive")
        min_poses = 2 if order == "linear" else 4
        if len(poses) < min_poses:
            raise ValueError(f"{order} spline needs >= {min_poses} control poses")
        self.t0 = float(t0)
        self.dt = float(dt)
        self.poses = tuple(poses)
        self.order = order
        # Increments between consecutive controls; raises LogBranchError if a
        # pair is half a turn apart, which is exactly the re-grid signal.
        self._omegas = [log_so3(poses[i].inverse() @ poses[i + 1]) for i in range(len(poses) - 1)]
        self._mats = None

    @property
    def n(self) -> int:
        return len(self.poses)

    def control_times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    def matrices(self) -> np.ndarray:
        """Stacked (n, 3, 3) control-pose matrices (cached)."""
        if self._mats is None:
            self._mats = np.stack([p.matrix for p in self.poses])
        return self._mats

    def with_poses(self, poses: list[Rotation]) -> "ControlPoseGrid":
        return ControlPoseGrid(self.t0, self.dt, poses, self.order)

    def valid_range(self) -> tuple[float, float]:
        return valid_time_range(self)

    def sample(self, t: float) -> Rotation:
        if self.order == "linear":
            return sample_linear(self, t)
        return sample_cubic(self, t)

    def __repr__(self) -> str:
        return (
            f"ControlPoseGrid(order={self.order!r}, n={self.n}, "
            f"t0={self.t0:.6f}, dt={self.dt:.6f})"
        )


def valid_time_range(grid: ControlPoseGrid) -> tuple[float, float]:
    """Time interval over which the spline can be evaluated.

    Linear splines cover the full control span; cubic ones lose one spacing
    at each end because every segment needs four surrounding controls.
    """
    n = grid.n
    if grid.order == "linear":
        return grid.t0, grid.t0 + (n - 1) * grid.dt
    return grid.t0 + grid.dt, grid.t0 + (n - 2) * grid.dt


def _segment(grid: ControlPoseGrid, t: float) -> tuple[int, float]:
    """Segment index and normalized time for a query, or SplineRangeError."""
    rel = (t - grid.t0) / grid.dt
    lo, hi = (0, grid.n - 1) if grid.order == "linear" else (1, grid.n - 2)
    if rel < lo - _RANGE_TOL or rel > hi + _RANGE_TOL:
        t_min, t_max = valid_time_range(grid)
        raise SplineRangeError(f"t={t} outside valid range [{t_min}, {t_max}]")
    i = min(max(int(math.floor(rel)), lo), hi - 1)
    return i, rel - i


def cumulative_basis(u: float) -> np.ndarray:
    """Cumulative cubic B-spline basis evaluated at normalized time u.

    Returns the 4-vector (1, B1(u), B2(u), B3(u)); the leading 1 corresponds
    to the base control pose.  B1 + B2 + B3 == 1 + u, which is what makes
    constant-velocity rotations exactly representable.
    """
    return _CUM_BASIS @ np.array([1.0, u, u * u, u * u * u])


def sample_linear(grid: ControlPoseGrid, t: float) -> Rotation:
    """Geodesic interpolation between the two adjacent control poses."""
    i, u = _segment(grid, t)
    return grid.poses[i] @ exp_so3(u * grid._omegas[i])


def sample_cubic(grid: ControlPoseGrid, t: float) -> Rotation:
    """Cumulative cubic B-spline pose at time t."""
    i, u = _segment(grid, t)
    b = cumulative_basis(u)
    R = grid.poses[i - 1]
    for j in range(1, 4):
        R = R @ exp_so3(b[j] * grid._omegas[i + j - 2])
    return R


# -- vectorized sampling and derivatives --------------------------------------


def _basis_rows(u: np.ndarray) -> np.ndarray:
    """Cumulative basis for an array of normalized times; shape (len(u), 4)."""
    powers = np.stack([np.ones_like(u), u, u * u, u * u * u], axis=1)
    return powers @ _CUM_BASIS.T


def _right_jacobian_scaled(axis_vec: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """J_r(scales[k] * axis_vec) for a shared axis; shape (len(scales), 3, 3)."""
    scales = np.asarray(scales, dtype=float)
    W = hat(axis_vec)
    W2 = W @ W
    mag = math.sqrt(float(axis_vec @ axis_vec))
    out = np.empty((len(scales), 3, 3))
    out[:] = np.eye(3)
    if mag < 1e-12:
        return out
    theta = scales * mag
    theta2 = theta * theta
    small = np.abs(theta) < 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / theta2)
        c2 = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / (theta2 * theta))
    # J_r(s*a) = I - c1(theta) * s*hat(a*mag)/mag ... expressed via hat(axis_vec)
    out -= (c1 * scales)[:, None, None] * W
    out += (c2 * scales * scales)[:, None, None] * W2
    return out


def _segment_groups(grid: ControlPoseGrid, times: np.ndarray):
    """Group query times by spline segment; yields (seg, order_positions, u)."""
    times = np.asarray(times, dtype=float)
    rel = (times - grid.t0) / grid.dt
    lo, hi = (0, grid.n - 1) if grid.order == "linear" else (1, grid.n - 2)
    if rel.size and (rel.min() < lo - _RANGE_TOL or rel.max() > hi + _RANGE_TOL):
        t_min, t_max = valid_time_range(grid)
        bad = times[(rel < lo - _RANGE_TOL) | (rel > hi + _RANGE_TOL)][0]
        raise SplineRangeError(f"t={bad} outside valid range [{t_min}, {t_max}]")
    seg = np.clip(np.floor(rel).astype(int), lo, hi - 1)
    u = rel - seg
    for s in np.unique(seg):
        mask = seg == s
        yield int(s), np.nonzero(mask)[0], u[mask]


def sample_matrices(grid: ControlPoseGrid, times: np.ndarray) -> np.ndarray:
    """Stacked rotation matrices R(t) for an array of query times."""
    times = np.asarray(times, dtype=float)
    out = np.empty((len(times), 3, 3))
    for s, pos, u in _segment_groups(grid, times):
        if grid.order == "linear":
            E = rodrigues_scaled(grid._omegas[s], u)
            out[pos] = np.einsum("ij,njk->nik", grid.poses[s].matrix, E)
        else:
            B = _basis_rows(u)
            R = np.einsum(
                "nij,njk->nik",
                rodrigues_scaled(grid._omegas[s - 1], B[:, 1]),
                rodrigues_scaled(grid._omegas[s], B[:, 2]),
            )
            R = np.einsum("nij,njk->nik", R, rodrigues_scaled(grid._omegas[s + 1], B[:, 3]))
            out[pos] = np.einsum("ij,njk->nik", grid.poses[s - 1].matrix, R)
    return out


def pose_and_point_jacobians(grid: ControlPoseGrid, times: np.ndarray):
    """Poses and control-pose sensitivities for an array of query times.

    Returns ``(R, idx, G)`` where ``R`` is (N, 3, 3), ``idx`` is (N, k) of
    global control indices and ``G`` is (N, k, 3, 3) such that a right
    perturbation ``d`` of control ``idx[n, j]`` perturbs the pose as
    ``R(t_n) <- R(t_n) @ exp(hat(G[n, j] @ d))``.  k is 2 for linear and 4
    for cubic splines; all other controls have zero sensitivity.
    """
    times = np.asarray(times, dtype=float)
    nquery = len(times)
    k = 2 if grid.order == "linear" else 4
    R = np.empty((nquery, 3, 3))
    idx = np.empty((nquery, k), dtype=int)
    G = np.empty((nquery, k, 3, 3))
    eye = np.eye(3)
    for s, pos, u in _segment_groups(grid, times):
        if grid.order == "linear":
            om = grid._omegas[s]
            E = rodrigues_scaled(om, u)
            W = _right_jacobian_scaled(om, u) * u[:, None, None]
            jr_inv = so3_right_jacobian_inv(om)
            jl_inv = so3_left_jacobian_inv(om)
            R[pos] = np.einsum("ij,njk->nik", grid.poses[s].matrix, E)
            idx[pos] = (s, s + 1)
            G[pos, 0] = np.swapaxes(E, 1, 2) - W @ jl_inv
            G[pos, 1] = W @ jr_inv
        else:
            oms = [grid._omegas[s - 1], grid._omegas[s], grid._omegas[s + 1]]
            B = _basis_rows(u)
            E = [rodrigues_scaled(oms[j], B[:, j + 1]) for j in range(3)]
            W = [
                _right_jacobian_scaled(oms[j], B[:, j + 1]) * B[:, j + 1, None, None]
                for j in range(3)
            ]
            jr_inv = [so3_right_jacobian_inv(om) for om in oms]
            jl_inv = [so3_left_jacobian_inv(om) for om in oms]
            S2 = E[2]
            S1 = np.einsum("nij,njk->nik", E[1], E[2])
            P = np.einsum("nij,njk->nik", E[0], S1)
            S1T = np.swapaxes(S1, 1, 2)
            S2T = np.swapaxes(S2, 1, 2)
            R[pos] = np.einsum("ij,njk->nik", grid.poses[s - 1].matrix, P)
            idx[pos] = (s - 1, s, s + 1, s + 2)
            A1 = np.einsum("nij,njk->nik", S1T, W[0])
            A2 = np.einsum("nij,njk->nik", S2T, W[1])
            G[pos, 0] = np.swapaxes(P, 1, 2) - A1 @ jl_inv[0]
            G[pos, 1] = A1 @ jr_inv[0] - A2 @ jl_inv[1]
            G[pos, 2] = A2 @ jr_inv[1] - W[2] @ jl_inv[2]
            G[pos, 3] = W[2] @ jr_inv[2]
    return R, idx, G


def point_jacobian(grid: ControlPoseGrid, t: float, X) -> PoseJacobian:
    """Derivative of R(t) @ X w.r.t. the influencing control poses.

    Right-perturbation convention: each 3x3 block maps a tangent increment d
    applied as ``R_c <- R_c @ exp(hat(d))`` to the change of the rotated
    point.  Exactly 2 (linear) or 4 (cubic) blocks are non-zero.
    """
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("point must be finite")
    R, idx, G = pose_and_point_jacobians(grid, np.array([t]))
    lever = -R[0] @ hat(X)
    blocks = np.einsum("ij,kjl->kil", lever, G[0])
    return PoseJacobian(indices=tuple(int(i) for i in idx[0]), blocks=blocks)


# -- least-squares fitting -----------------------------------------------------


def _fit_weight_rows(grid: ControlPoseGrid, times: np.ndarray):
    """Per-sample control weights of the tangent-space linear model.

    For commuting (same-axis) rotations these weights are exact; in general
    they are the first-order model used by the lift-solve-retract scheme.
    """
    k = 2 if grid.order == "linear" else 4
    rows = np.zeros((len(times), grid.n))
    for s, pos, u in _segment_groups(grid, times):
        if grid.order == "linear":
            rows[pos, s] = 1.0 - u
            rows[pos, s + 1] = u
        else:
            B = _basis_rows(u)
            rows[pos, s - 1] = 1.0 - B[:, 1]
            rows[pos, s] = B[:, 1] - B[:, 2]
            rows[pos, s + 1] = B[:, 2] - B[:, 3]
            rows[pos, s + 2] = B[:, 3]
    return rows


def _n_controls_for_span(t0: float, dt: float, t_last: float, order: str) -> int:
    span = max(0.0, (t_last - t0) / dt)
    n = int(math.ceil(span - 1e-9)) + (1 if order == "linear" else 2)
    return max(n, 2 if order == "linear" else 4)


def fit_spline(
    samples: list[PoseSample],
    t0: float,
    dt: float,
    order: str,
    n: int | None = None,
    max_iter: int = 20,
    tol: float = 1e-13,
) -> ControlPoseGrid:
    """Fit a control-pose grid to pose samples by lift-solve-retract.

    Lift: poses are expressed as tangent increments relative to the first
    sample's pose.  Solve: a linear least-squares problem on the spline basis
    weights, per tangent axis.  Retract: the offset is re-applied to produce
    control poses.  The three steps are iterated (Gauss-Newton style, with
    the same linear model) until the update stalls, which removes the
    first-order lift error for trajectories spanning large rotations.

    Raises:
        SplineFitError: fewer samples than controls, samples outside the
            grid's valid range, or a rank-deficient system.
    """
    if not samples:
        raise SplineFitError("no samples to fit")
    times = np.array([s.t for s in samples])
    if np.any(np.diff(times) < 0.0):
        raise SplineFitError("samples must be time-sorted")
    if n is None:
        n = _n_controls_for_span(t0, dt, float(times[-1]), order)
    if len(samples) < n:
        raise SplineFitError(f"need >= {n} samples to fit {n} control poses, got {len(samples)}")
    probe = ControlPoseGrid(t0, dt, [Rotation.identity()] * n, order)
    try:
        rows = _fit_weight_rows(probe, times)
    except SplineRangeError as e:
        raise SplineFitError(f"samples outside the grid's valid range: {e}") from e
    if np.linalg.matrix_rank(rows) < n:
        raise SplineFitError("rank-deficient fit (too few or degenerate samples)")

    offset = samples[0].R
    offset_inv = offset.inverse()
    sigma = np.stack([log_so3(offset_inv @ s.R) for s in samples])
    gamma = np.zeros((n, 3))
    gram = rows.T @ rows
    for _ in range(max_iter):
        if np.any(np.abs(gamma) > 0.0):
            grid = ControlPoseGrid(
                t0, dt, [offset @ exp_so3(g) for g in gamma], order
            )
            pred = np.stack(
                [log_so3(offset_inv @ grid.sample(t)) for t in times]
            )
        else:
            pred = np.zeros_like(sigma)
        try:
            delta = np.linalg.solve(gram, rows.T @ (sigma - pred))
        except np.linalg.LinAlgError as e:
            raise SplineFitError("singular normal equations") from e
        gamma += delta
        if np.abs(delta).max() < tol:
            break
    return ControlPoseGrid(t0, dt, [offset @ exp_so3(g) for g in gamma], order)


def fit_spline_partial(
    grid: ControlPoseGrid,
    free_indices: list[int],
    samples: list[PoseSample],
    max_iter: int = 20,
    tol: float = 1e-13,
) -> ControlPoseGrid:
    """Re-fit a subset of control poses to samples, holding the rest fixed.

    Same lift-solve-retract iteration as ``fit_spline`` but the linear system
    only has columns for ``free_indices``.  Used to initialize the new tail
    of a sliding window against an already-committed trajectory head.
    """
    if not samples:
        raise SplineFitError("no samples to fit")
    free = list(free_indices)
    times = np.array([s.t for s in samples])
    try:
        rows = _fit_weight_rows(grid, times)[:, free]
    except SplineRangeError as e:
        raise SplineFitError(f"samples outside the grid's valid range: {e}") from e
    if len(samples) < len(free) or np.linalg.matrix_rank(rows) < len(free):
        raise SplineFitError("rank-deficient partial fit")

    offset = samples[0].R
    offset_inv = offset.inverse()
    sigma = np.stack([log_so3(offset_inv @ s.R) for s in samples])
    poses = list(grid.poses)
    gamma = np.stack([log_so3(offset_inv @ poses[i]) for i in free])
    gram = rows.T @ rows
    current = grid
    for _ in range(max_iter):
        pred = np.stack([log_so3(offset_inv @ current.sample(t)) for t in times])
        try:
            delta = np.linalg.solve(gram, rows.T @ (sigma - pred))
        except np.linalg.LinAlgError as e:
            raise SplineFitError("singular normal equations") from e
        gamma += delta
        for j, i in enumerate(free):
            poses[i] = offset @ exp_so3(gamma[j])
        current = grid.with_poses(poses)
        if np.abs(delta).max() < tol:
            break
    return current


# -- trajectory file I/O -------------------------------------------------------
#
# CSV lines `t,qw,qx,qy,qz` (Hamilton, scalar first), time ascending.  Control
# grids carry one extra header line naming order/t0/dt.


def _format_pose_line(t: float, R: Rotation) -> str:
    q = R.quat
    if q[0] < 0.0:  # canonical sign for reproducible files
        q = -q
    return f"{t!r},{q[0]!r},{q[1]!r},{q[2]!r},{q[3]!r}"


def save_trajectory(path, samples: list[PoseSample], header_lines: list[str] | None = None):
    lines = [f"# {h}" for h in (header_lines or [])]
    lines.append("# t,qw,qx,qy,qz")
    lines.extend(_format_pose_line(s.t, s.R) for s in samples)
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> list[PoseSample]:
    samples = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            from .errors import StreamFormatError

            raise StreamFormatError(f"{path}:{lineno}: expected t,qw,qx,qy,qz")
        t, qw, qx, qy, qz = (float(p) for p in parts)
        samples.append(PoseSample(t=t, R=Rotation.from_quat([qw, qx, qy, qz])))
    return samples


def save_control_grid(path, grid: ControlPoseGrid, header_lines: list[str] | None = None):
    header = [f"control t0={grid.t0!r} dt={grid.dt!r} order={grid.order}"]
    header.extend(header_lines or [])
    samples = [PoseSample(t=grid.t0 + i * grid.dt, R=p) for i, p in enumerate(grid.poses)]
    save_trajectory(path, samples, header_lines=header)


def load_control_grid(path) -> ControlPoseGrid:
    from .errors import StreamFormatError

    meta = None
    for raw in Path(path).read_text().splitlines():
        if raw.startswith("# control "):
            meta = dict(kv.split("=", 1) for kv in raw[len("# control ") :].split())
            break
    if meta is None or not {"t0", "dt", "order"} <= meta.keys():
        raise StreamFormatError(f"{path}: missing '# control t0=.. dt=.. order=..' header")
    samples = load_trajectory(path)
    return ControlPoseGrid(
        t0=float(meta["t0"]),
        dt=float(meta["dt"]),
        poses=[s.R for s in samples],
        order=meta["order"],
    )
