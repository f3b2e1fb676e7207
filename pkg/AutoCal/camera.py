# camera.py — FOV camera model: project / unproject with analytic Jacobians
"""
FOV (arctangent) distortion with one parameter w.

For a camera-frame point p with z > 0:

    (x, y)  = (p.x / p.z, p.y / p.z)              normalized coordinates
    r_u     = sqrt(x^2 + y^2)
    d(r_u)  = atan(2 r_u tan(w/2)) / (w r_u)        d -> 1 as w -> 0 or r_u -> 0
    pixel   = (f_x d x + c_x, f_y d y + c_y)

The inverse maps a distorted radius r_d back with r_u = tan(w r_d) / (2 tan(w/2)).
Both removable singularities (w -> 0, r -> 0) are evaluated through series
branches; the batch kernels below are what the solver uses, the scalar
functions wrap them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Tuple, Union

import numpy as np

from .errors import NonPositiveDepth

__all__ = [
    "CameraIntrinsics", "Pixel",
    "project", "unproject", "project_jacobians",
    "project_batch", "project_jacobians_batch", "unproject_batch", "unproject_jacobian_batch",
]

SMALL_W = 1e-6
SMALL_T = 1e-2          # series branch for w*r-type arguments; truncation < 1e-16
MAX_TAU = 0.5 * np.pi - 1e-3


# ---------------- value types ----------------
class Pixel(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    """x_c = [f_x f_y c_x c_y w]; pixels for the first four, radians for w."""
    fx: float
    fy: float
    cx: float
    cy: float
    w: float

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0.0 <= self.w < np.pi):
            raise ValueError(f"w must lie in [0, pi), got {self.w}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.w], dtype=float)

    @classmethod
    def from_array(cls, x: Union[np.ndarray, list, tuple]) -> "CameraIntrinsics":
        x = np.asarray(x, dtype=float).reshape(5)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]), float(x[4]))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, w: float) -> "CameraIntrinsics":
        """Horizontal field of view guess with the principal point at the image centre."""
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, 0.5 * width, 0.5 * height, w)

    def zoomed(self, scale: float) -> "CameraIntrinsics":
        """Focal lengths scaled by `scale`; longer focal length shows less distortion."""
        w = self.w * (1.0 - 0.3 * min(1.0, abs(scale - 1.0)))
        return CameraIntrinsics(self.fx * scale, self.fy * scale, self.cx, self.cy, w)

    def relative_error(self, truth: "CameraIntrinsics") -> np.ndarray:
        t = truth.as_array()
        return np.abs(self.as_array() - t) / np.abs(t)


def _as_params(intr, n: int) -> np.ndarray:
    x = intr.as_array() if isinstance(intr, CameraIntrinsics) else np.asarray(intr, dtype=float)
    return np.broadcast_to(x, (n, 5)) if x.ndim == 1 else x


# ---------------- distortion kernels ----------------
def _distortion(r: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d(r, w), h = (dd/dr) / r and dd/dw, elementwise."""
    small_w = w < SMALL_W
    ws = np.where(small_w, 1.0, w)
    k = 2.0 * np.tan(0.5 * ws)
    dk = 1.0 + 0.25 * k * k
    t = k * r
    t2 = t * t
    small_t = t < SMALL_T
    ts = np.where(small_t, 1.0, t)
    rs = np.where(small_t, 1.0, r)
    at = np.arctan(ts)

    d_gen = at / (ws * rs)
    h_gen = (ts / (1.0 + ts * ts) - at) / (ws * rs ** 3)
    d_ser = (k / ws) * (1.0 - t2 / 3.0 + t2 ** 2 / 5.0 - t2 ** 3 / 7.0 + t2 ** 4 / 9.0)
    h_ser = (k ** 3 / ws) * (-2.0 / 3.0 + 0.8 * t2 - 6.0 * t2 ** 2 / 7.0 + 8.0 * t2 ** 3 / 9.0)
    d = np.where(small_t, d_ser, d_gen)
    h = np.where(small_t, h_ser, h_gen)
    d_w = dk / (ws * (1.0 + t2)) - d / ws

    # w -> 0: d = 1 + w^2 (1/12 - r^2/3) + O(w^4)
    r2 = r * r
    d = np.where(small_w, 1.0 + w * w * (1.0 / 12.0 - r2 / 3.0), d)
    h = np.where(small_w, -2.0 * w * w / 3.0, h)
    d_w = np.where(small_w, 2.0 * w * (1.0 / 12.0 - r2 / 3.0), d_w)
    return d, h, d_w


def _undistortion(rd: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """s = r_u / r_d, g = (ds/dr_d) / r_d and ds/dw, elementwise."""
    small_w = w < SMALL_W
    ws = np.where(small_w, 1.0, w)
    K = 2.0 * np.tan(0.5 * ws)
    dK = 1.0 + 0.25 * K * K
    rd0 = rd
    rd = np.minimum(rd, MAX_TAU / ws)
    tau = ws * rd
    tau2 = tau * tau
    small_t = tau < SMALL_T
    taus = np.where(small_t, 1.0, tau)
    rds = np.where(small_t, 1.0, rd)
    tan_t = np.tan(taus)
    sec2 = 1.0 + tan_t * tan_t

    tan_over_tau = np.where(
        small_t,
        1.0 + tau2 / 3.0 + 2.0 * tau2 ** 2 / 15.0 + 17.0 * tau2 ** 3 / 315.0,
        tan_t / taus,
    )
    s = (ws / K) * tan_over_tau
    g_gen = (taus * sec2 - tan_t) / (K * rds ** 3)
    g_ser = (ws ** 3 / K) * (2.0 / 3.0 + 8.0 * tau2 / 15.0 + 34.0 * tau2 ** 2 / 105.0)
    g = np.where(small_t, g_ser, g_gen)
    sec2_full = np.where(small_t, 1.0 + tau2 + 2.0 * tau2 ** 2 / 3.0, sec2)
    s_w = sec2_full / K - ws * tan_over_tau * dK / (K * K)

    rd2 = rd0 * rd0
    s = np.where(small_w, 1.0 + w * w * (rd2 / 3.0 - 1.0 / 12.0), s)
    g = np.where(small_w, 2.0 * w * w / 3.0, g)
    s_w = np.where(small_w, 2.0 * w * (rd2 / 3.0 - 1.0 / 12.0), s_w)
    return s, g, s_w


# ---------------- batch API ----------------
def project_batch(intr, p_cam: np.ndarray) -> np.ndarray:
    """(N, 3) camera-frame points -> (N, 2) pixels. Rows with z <= 0 give NaN."""
    uv, _, _ = project_jacobians_batch(intr, p_cam, jacobians=False)
    return uv


def project_jacobians_batch(intr, p_cam: np.ndarray, jacobians: bool = True):
    """Returns (uv (N,2), d uv / d p (N,2,3), d uv / d x_c (N,2,5)); Jacobians None when not requested."""
    p = np.atleast_2d(np.asarray(p_cam, dtype=float))
    n = p.shape[0]
    x = _as_params(intr, n)
    fx, fy, cx, cy, w = x[:, 0], x[:, 1], x[:, 2], x[:, 3], x[:, 4]
    z = p[:, 2]
    valid = z > 0.0
    zs = np.where(valid, z, 1.0)
    a = p[:, 0] / zs
    b = p[:, 1] / zs
    r = np.sqrt(a * a + b * b)
    d, h, d_w = _distortion(r, w)

    uv = np.stack([fx * d * a + cx, fy * d * b + cy], axis=1)
    uv[~valid] = np.nan
    if not jacobians:
        return uv, None, None

    J_ab = np.empty((n, 2, 2))
    J_ab[:, 0, 0] = fx * (d + h * a * a)
    J_ab[:, 0, 1] = fx * h * a * b
    J_ab[:, 1, 0] = fy * h * a * b
    J_ab[:, 1, 1] = fy * (d + h * b * b)
    inv_z = 1.0 / zs
    J_abp = np.zeros((n, 2, 3))
    J_abp[:, 0, 0] = inv_z
    J_abp[:, 0, 2] = -a * inv_z
    J_abp[:, 1, 1] = inv_z
    J_abp[:, 1, 2] = -b * inv_z
    J_p = J_ab @ J_abp

    J_c = np.zeros((n, 2, 5))
    J_c[:, 0, 0] = d * a
    J_c[:, 0, 2] = 1.0
    J_c[:, 0, 4] = fx * a * d_w
    J_c[:, 1, 1] = d * b
    J_c[:, 1, 3] = 1.0
    J_c[:, 1, 4] = fy * b * d_w
    return uv, J_p, J_c


def unproject_jacobian_batch(intr, px: np.ndarray, jacobians: bool = True):
    """(N, 2) pixels -> unit rays (N, 3) and d ray / d x_c (N, 3, 5)."""
    px = np.atleast_2d(np.asarray(px, dtype=float))
    n = px.shape[0]
    x = _as_params(intr, n)
    fx, fy, cx, cy, w = x[:, 0], x[:, 1], x[:, 2], x[:, 3], x[:, 4]
    xd = (px[:, 0] - cx) / fx
    yd = (px[:, 1] - cy) / fy
    rd = np.sqrt(xd * xd + yd * yd)
    s, g, s_w = _undistortion(rd, w)

    q = np.stack([s * xd, s * yd, np.ones(n)], axis=1)
    qn = np.linalg.norm(q, axis=1)
    ray = q / qn[:, None]
    if not jacobians:
        return ray, None

    dq_dxd = np.stack([s + g * xd * xd, g * xd * yd, np.zeros(n)], axis=1)
    dq_dyd = np.stack([g * xd * yd, s + g * yd * yd, np.zeros(n)], axis=1)
    dq_dw = np.stack([s_w * xd, s_w * yd, np.zeros(n)], axis=1)
    dq = np.empty((n, 3, 5))
    dq[:, :, 0] = dq_dxd * (-xd / fx)[:, None]
    dq[:, :, 1] = dq_dyd * (-yd / fy)[:, None]
    dq[:, :, 2] = dq_dxd * (-1.0 / fx)[:, None]
    dq[:, :, 3] = dq_dyd * (-1.0 / fy)[:, None]
    dq[:, :, 4] = dq_dw
    P = (np.eye(3)[None] - ray[:, :, None] * ray[:, None, :]) / qn[:, None, None]
    return ray, P @ dq


def unproject_batch(intr, px: np.ndarray) -> np.ndarray:
    ray, _ = unproject_jacobian_batch(intr, px, jacobians=False)
    return ray


# ---------------- scalar API ----------------
def project(intr: CameraIntrinsics, p_cam) -> Pixel:
    p = np.asarray(p_cam, dtype=float).reshape(1, 3)
    if p[0, 2] <= 0.0:
        raise NonPositiveDepth(f"point depth {p[0, 2]:.3g} <= 0")
    uv = project_batch(intr, p)[0]
    return Pixel(float(uv[0]), float(uv[1]))


def unproject(intr: CameraIntrinsics, px) -> np.ndarray:
    return unproject_batch(intr, np.asarray(px, dtype=float).reshape(1, 2))[0]


def project_jacobians(intr: CameraIntrinsics, p_cam) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p_cam, dtype=float).reshape(1, 3)
    if p[0, 2] <= 0.0:
        raise NonPositiveDepth(f"point depth {p[0, 2]:.3g} <= 0")
    _, J_p, J_c = project_jacobians_batch(intr, p)
    return J_p[0], J_c[0]
