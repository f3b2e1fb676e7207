# factors.py — inverse-depth transfer measurement model, whitened residuals and Jacobians
"""
A landmark is anchored in its reference keyframe r by the pixel p_r of its first
observation and an inverse range rho along the unit ray of p_r.  Its prediction
in measurement keyframe m is

    X     = T_wc_r * (unproject(x_c, p_r) / rho)
    h     = project(x_c, T_wc_m^-1 * X)

Residuals are whitened: e = (z - h) / sigma.  Pose Jacobians are taken with
respect to the left local update of liegroups.se3_local_update, ordered
(d_translation, d_omega).  p_r is a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .camera import CameraIntrinsics, Pixel, project_jacobians_batch, unproject_jacobian_batch
from .errors import BehindCamera
from .liegroups import PoseSE3, hat

__all__ = ["Landmark", "Measurement", "Linearization", "linearize_batch", "predict", "residual_and_jacobians"]


# ---------------- value types ----------------
@dataclass(frozen=True)
class Landmark:
    ref_frame_id: int
    p_r: np.ndarray
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "p_r", np.asarray(self.p_r, dtype=float).reshape(2))

    def with_rho(self, rho: float) -> "Landmark":
        return replace(self, rho=float(rho))


@dataclass(frozen=True)
class Measurement:
    landmark_id: int
    frame_id: int
    z: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(2))
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


class Linearization(NamedTuple):
    """Per-measurement whitened residual and Jacobian blocks of that residual."""
    residual: np.ndarray      # (N, 2)
    valid: np.ndarray         # (N,) depth > 0 in the measurement camera and rho > 0
    J_pose_r: np.ndarray      # (N, 2, 6)
    J_pose_m: np.ndarray      # (N, 2, 6)
    J_rho: np.ndarray         # (N, 2)
    J_intr: np.ndarray        # (N, 2, 5); meaningful when reference and measurement intrinsics coincide


# ---------------- batch kernel ----------------
def linearize_batch(x_r, x_m, R_r, t_r, R_m, t_m, p_r, rho, z, sigma, jacobians: bool = True) -> Linearization:
    """
    Vectorised over N measurements.  x_r / x_m are intrinsics arrays of shape (5,)
    or (N, 5) used to unproject p_r and to project into the measurement camera.
    Without `jacobians` only residual and valid are filled (the rest are None).
    """
    rho = np.asarray(rho, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = rho.shape[0]
    ray, dray = unproject_jacobian_batch(x_r, p_r, jacobians=jacobians)
    rho_s = np.where(rho > 0.0, rho, 1.0)
    v = ray / rho_s[:, None]
    Rv = np.einsum("nij,nj->ni", R_r, v)
    d = Rv + t_r - t_m
    p_m = np.einsum("nji,nj->ni", R_m, d)
    valid = (p_m[:, 2] > 0.0) & (rho > 0.0)

    uv, Jp, Jc = project_jacobians_batch(x_m, p_m, jacobians=jacobians)
    inv_sigma = 1.0 / sigma
    res = (np.asarray(z, dtype=float) - uv) * inv_sigma[:, None]
    res[~valid] = 0.0
    if not jacobians:
        return Linearization(res, valid, None, None, None, None)

    RmT = np.transpose(R_m, (0, 2, 1))
    scale = -inv_sigma[:, None, None]
    JpRmT = Jp @ RmT                                        # (N, 2, 3)

    J_r = np.empty((n, 2, 6))
    J_r[:, :, :3] = JpRmT
    J_r[:, :, 3:] = -JpRmT @ hat(Rv)
    J_m = np.empty((n, 2, 6))
    J_m[:, :, :3] = -JpRmT
    J_m[:, :, 3:] = JpRmT @ hat(d)

    Rray = np.einsum("nij,nj->ni", R_r, ray)
    J_rho = np.einsum("nij,nj->ni", JpRmT, Rray) * (-1.0 / rho_s ** 2)[:, None]
    J_c = Jc + (JpRmT @ R_r @ dray) / rho_s[:, None, None]

    J_r *= scale
    J_m *= scale
    J_rho *= -inv_sigma[:, None]
    J_c *= scale
    for J in (J_r, J_m, J_c):
        J[~valid] = 0.0
    J_rho[~valid] = 0.0
    return Linearization(res, valid, J_r, J_m, J_rho, J_c)


def _single(intr, T_r, T_m, lm, z, sigma, intr_m, jacobians):
    x_r = intr.as_array()
    x_m = (intr_m or intr).as_array()
    return linearize_batch(
        x_r, x_m,
        T_r.rotation[None], T_r.translation[None],
        T_m.rotation[None], T_m.translation[None],
        lm.p_r[None], np.array([lm.rho]), np.asarray(z, dtype=float).reshape(1, 2), np.array([sigma]),
        jacobians=jacobians,
    )


# ---------------- scalar API ----------------
def predict(intr: CameraIntrinsics, T_wc_r: PoseSE3, T_wc_m: PoseSE3, lm: Landmark,
            intr_m: Optional[CameraIntrinsics] = None) -> Pixel:
    """h_i: pixel of landmark `lm` in the measurement camera. `intr_m` defaults to `intr`."""
    lin = _single(intr, T_wc_r, T_wc_m, lm, np.zeros(2), 1.0, intr_m, jacobians=False)
    if not lin.valid[0]:
        raise BehindCamera("landmark is behind the measurement camera")
    # residual = (0 - h) / 1
    return Pixel(float(-lin.residual[0, 0]), float(-lin.residual[0, 1]))


def residual_and_jacobians(intr: CameraIntrinsics, T_wc_r: PoseSE3, T_wc_m: PoseSE3,
                           lm: Landmark, meas: Measurement) -> Linearization:
    """Whitened residual (z - h) / sigma and its Jacobians for one measurement (leading axis of size 1 dropped)."""
    lin = _single(intr, T_wc_r, T_wc_m, lm, meas.z, meas.sigma, None, jacobians=True)
    if not lin.valid[0]:
        raise BehindCamera("landmark is behind the measurement camera")
    return Linearization(*(a[0] for a in lin))
