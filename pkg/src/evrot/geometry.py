"""SO(3) primitives, camera back-projection, and the equirectangular warp.

Conventions used throughout the package:

* Rotations are active, camera-to-world.  ``R @ X`` maps a bearing expressed
  in the camera frame to the (fixed) world frame.
* Quaternions are Hamilton, scalar-first ``(w, x, y, z)``.
* The panorama azimuth is ``atan2(X', Z')`` so the forward axis (0, 0, 1)
  lands at the map center and the full 360 deg range is covered; the exact
  poles take azimuth 0 (``atan2(0, 0) == 0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, DegenerateWarpError, LogBranchError

__all__ = [
    "Rotation",
    "CameraModel",
    "PanoramaGeometry",
    "hat",
    "exp_so3",
    "log_so3",
    "rotation_angle",
    "back_project",
    "project_equirect",
    "warp_jacobian_det",
    "so3_right_jacobian",
    "so3_right_jacobian_inv",
    "so3_left_jacobian_inv",
    "rodrigues_scaled",
]

# Compositions renormalize the quaternion once the accumulated chain exceeds
# this length, bounding drift without paying for a sqrt on every multiply.
_RENORM_CHAIN = 100

_POLE_EPS = 1e-12


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ u == np.cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def _quat_from_matrix(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pivot on the largest of (w, x, y, z) for stability.
    t = np.trace(m)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        return np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    if m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return q


class Rotation:
    """SO(3) element stored as a unit quaternion with a cached matrix view.

    Instances are immutable.  Composition tracks the accumulated chain length
    and renormalizes the quaternion once it exceeds ``_RENORM_CHAIN``.
    """

    __slots__ = ("_q", "_mat", "_chain")

    def __init__(self, q: np.ndarray, *, chain: int = 0, _mat: np.ndarray | None = None):
        self._q = q
        self._mat = _mat
        self._chain = chain

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        """Build from a Hamilton (w, x, y, z) quaternion; normalizes."""
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be finite and non-zero")
        return cls(q / n)

    @classmethod
    def from_matrix(cls, m, *, check: bool = True) -> "Rotation":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if check:
            err = np.abs(m.T @ m - np.eye(3)).max()
            if err > 1e-9:
                raise ValueError(f"matrix is not orthonormal (|R^T R - I|_inf = {err:.3e})")
            if np.linalg.det(m) < 0.0:
                raise ValueError("matrix has negative determinant (improper rotation)")
        return cls(_quat_from_matrix(m), _mat=m)

    # -- views --------------------------------------------------------------

    @property
    def quat(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z)."""
        return self._q

    @property
    def matrix(self) -> np.ndarray:
        if self._mat is None:
            self._mat = _quat_to_matrix(self._q)
        return self._mat

    # -- group operations ----------------------------------------------------

    def compose(self, other: "Rotation") -> "Rotation":
        q = _quat_multiply(self._q, other._q)
        chain = self._chain + other._chain + 1
        if chain > _RENORM_CHAIN:
            q = q / np.linalg.norm(q)
            chain = 0
        return Rotation(q, chain=chain)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation(np.array([w, -x, -y, -z]), chain=self._chain)

    def apply(self, X) -> np.ndarray:
        """Rotate one or many 3-vectors: ``matrix @ X`` (vectors in rows)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.matrix @ X
        return X @ self.matrix.T

    def __repr__(self) -> str:
        w, x, y, z = self._q
        return f"Rotation(q=[{w:.6f}, {x:.6f}, {y:.6f}, {z:.6f}])"


def exp_so3(v) -> Rotation:
    """Exponential map: axis-angle vector (rad) to Rotation.

    Total function; ``exp_so3((0, 0, 0))`` is the exact identity.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValueError("axis-angle vector must have shape (3,)")
    if not np.all(np.isfinite(v)):
        raise ValueError("axis-angle vector must be finite")
    theta = math.sqrt(float(v @ v))
    if theta < 1e-8:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        s = 0.5 - theta * theta / 48.0
        w = 1.0 - theta * theta / 8.0
    else:
        s = math.sin(0.5 * theta) / theta
        w = math.cos(0.5 * theta)
    return Rotation(np.array([w, s * v[0], s * v[1], s * v[2]]))


def log_so3(R: Rotation) -> np.ndarray:
    """Logarithm map on the principal branch (angle < pi).

    Raises:
        LogBranchError: rotation angle is at pi within tolerance
            (``trace(R) <= -1 + 1e-6``), where the branch is ambiguous.
    """
    q = R.quat
    w = float(q[0])
    if w < 0.0:  # canonical hemisphere so the angle lands in [0, pi]
        q = -q
        w = -w
    # trace = 4 w^2 - 1 for a unit quaternion
    if 4.0 * w * w - 1.0 <= -1.0 + 1e-6:
        raise LogBranchError("rotation angle is at pi; log branch undefined")
    vec = q[1:]
    s = float(np.linalg.norm(vec))
    if s < 1e-8:
        # 2*atan2(s, w)/s = (2/w) * (1 - (s/w)^2/3) + O((s/w)^4)
        k = (2.0 / w) * (1.0 - (s * s) / (3.0 * w * w))
    else:
        k = 2.0 * math.atan2(s, w) / s
    return k * vec


def rotation_angle(B: Rotation) -> float:
    """Angle of a rotation in [0, pi] via arccos((trace - 1) / 2)."""
    t = float(np.trace(B.matrix))
    c = max(-1.0, min(1.0, 0.5 * (t - 1.0)))
    return math.acos(c)


# -- SO(3) Jacobians ---------------------------------------------------------
#
# Right Jacobian: exp(v + d) = exp(v) exp(J_r(v) d) to first order.
# Left Jacobian satisfies J_l(v) = J_r(v)^T.  The inverses appear in the
# derivative of the log map:
#   log(exp(v) exp(d)) = v + J_r^{-1}(v) d,
#   log(exp(d) exp(v)) = v + J_l^{-1}(v) d.


def so3_right_jacobian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    theta2 = float(v @ v)
    V = hat(v)
    if theta2 < 1e-12:
        c1 = 0.5 - theta2 / 24.0
        c2 = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = math.sqrt(theta2)
        c1 = (1.0 - math.cos(theta)) / theta2
        c2 = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) - c1 * V + c2 * (V @ V)


def so3_right_jacobian_inv(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    theta2 = float(v @ v)
    V = hat(v)
    if theta2 < 1e-12:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        c = (1.0 / theta2) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * V + c * (V @ V)


def so3_left_jacobian_inv(v) -> np.ndarray:
    return so3_right_jacobian_inv(np.asarray(v, dtype=float)).T


def rodrigues_scaled(axis_angle: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Rotation matrices exp(scales[k] * hat(axis_angle)), vectorized over k.

    The axis is shared so the per-element cost is two trig calls and a few
    broadcast multiplies; the hot warp loops rely on this.

    Returns an array of shape (len(scales), 3, 3).
    """
    scales = np.asarray(scales, dtype=float)
    W = hat(axis_angle)
    W2 = W @ W
    mag = math.sqrt(float(axis_angle @ axis_angle))
    theta = scales * mag  # signed angle about the unit axis
    s = np.sin(theta)
    c = 1.0 - np.cos(theta)
    if mag < 1e-12:
        return np.broadcast_to(np.eye(3), (len(scales), 3, 3)).copy()
    out = np.empty((len(scales), 3, 3))
    out[:] = np.eye(3)
    out += (s / mag)[:, None, None] * W
    out += (c / (mag * mag))[:, None, None] * W2
    return out


# -- camera and panorama geometry ---------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with optional plumb-bob distortion.

    Distortion coefficients follow the (k1, k2, p1, p2, k3) convention and
    are applied (as undistortion) once per event at ingestion, never inside
    the optimization loops.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise CalibrationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise CalibrationError("sensor size must be at least 1x1 px")

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in (self.k1, self.k2, self.p1, self.p2, self.k3))

    def undistort_pixels(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Map distorted pixel coords to ideal pinhole pixel coords.

        Fixed-point iteration on the normalized plane; 8 rounds are ample for
        typical event-camera lenses.
        """
        xn = (np.asarray(x, dtype=float) - self.cx) / self.fx
        yn = (np.asarray(y, dtype=float) - self.cy) / self.fy
        xu, yu = xn.copy(), yn.copy()
        for _ in range(8):
            r2 = xu * xu + yu * yu
            radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
            dx = 2.0 * self.p1 * xu * yu + self.p2 * (r2 + 2.0 * xu * xu)
            dy = self.p1 * (r2 + 2.0 * yu * yu) + 2.0 * self.p2 * xu * yu
            xu = (xn - dx) / radial
            yu = (yn - dy) / radial
        return xu * self.fx + self.cx, yu * self.fy + self.cy

    @classmethod
    def from_file(cls, path) -> "CameraModel":
        """Load from a plain-text key=value calibration file."""
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CalibrationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            try:
                values[key.strip()] = float(val)
            except ValueError as e:
                raise CalibrationError(f"{path}:{lineno}: bad number {val!r}") from e
        required = ("fx", "fy", "cx", "cy", "width", "height")
        missing = [k for k in required if k not in values]
        if missing:
            raise CalibrationError(f"{path}: missing keys {missing}")
        return cls(
            fx=values["fx"],
            fy=values["fy"],
            cx=values["cx"],
            cy=values["cy"],
            width=int(values["width"]),
            height=int(values["height"]),
            k1=values.get("k1", 0.0),
            k2=values.get("k2", 0.0),
            p1=values.get("p1", 0.0),
            p2=values.get("p2", 0.0),
            k3=values.get("k3", 0.0),
        )


@dataclass(frozen=True)
class PanoramaGeometry:
    """Equirectangular map dimensions (width must be twice the height)."""

    w: int
    h: int

    def __post_init__(self):
        if self.w < 2:
            raise ValueError("panorama width must be >= 2")
        if self.w != 2 * self.h:
            raise ValueError(f"panorama must be 2:1 (got {self.w}x{self.h})")


def back_project(x, cam: CameraModel) -> np.ndarray:
    """Pixel coordinates to a bearing on the unit-depth plane (Z = 1).

    Accepts a single (x, y) pair or an (N, 2) array.  Input coordinates are
    assumed ideal (undistorted); see ``CameraModel.undistort_pixels``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[-1] != 2:
        raise ValueError("pixel coordinates must be (x, y) pairs")
    if single:
        px, py = pts[0]
        if not (0.0 <= px < cam.width and 0.0 <= py < cam.height):
            raise ValueError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} sensor")
    out = np.empty((pts.shape[0], 3))
    out[:, 0] = (pts[:, 0] - cam.cx) / cam.fx
    out[:, 1] = (pts[:, 1] - cam.cy) / cam.fy
    out[:, 2] = 1.0
    return out[0] if single else out


def project_equirect(X, pano: PanoramaGeometry):
    """Equirectangular projection of 3D direction(s) onto map coordinates.

    Azimuth is wrapped into [0, w); elevation is clamped to [0, h] so pole
    overshoot never produces NaNs.  Raises ValueError on zero-norm input.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    P = np.atleast_2d(X)
    norms = np.linalg.norm(P, axis=1)
    if np.any(norms <= 0.0):
        raise ValueError("cannot project a zero-norm direction")
    w, h = pano.w, pano.h
    px = 0.5 * w + (w / (2.0 * math.pi)) * np.arctan2(P[:, 0], P[:, 2])
    px = np.mod(px, w)
    py = 0.5 * h + (h / math.pi) * np.arcsin(np.clip(P[:, 1] / norms, -1.0, 1.0))
    py = np.clip(py, 0.0, float(h))
    if single:
        return float(px[0]), float(py[0])
    return px, py


def warp_jacobian_det(x, R: Rotation, cam: CameraModel) -> float:
    """Jacobian determinant of the sensor-to-panorama warp at pixel ``x``.

    Computed on the (azimuth, elevation) chart, i.e. with the constant map
    scale factors w/2pi and h/pi removed:

        det = 1 / (s2 * r'^3),   s2 = sqrt(1 - (Y'/r')^2),  r' = |R X|.

    Strictly positive away from the poles, which is what rules out event
    collapse under this warp.

    Raises:
        DegenerateWarpError: rotated point at a pole (s2 ~ 0).
    """
    X = back_project(x, cam)
    Xp = R.apply(X)
    r = float(np.linalg.norm(Xp))
    s2sq = 1.0 - (Xp[1] / r) ** 2
    s2 = math.sqrt(max(0.0, s2sq))
    if s2 <= _POLE_EPS:
        raise DegenerateWarpError("rotated point at a panorama pole")
    return 1.0 / (s2 * r**3)
