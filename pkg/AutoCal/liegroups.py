# liegroups.py — minimal SO3/SE3 algebra: exp/log, rigid transforms, left local update
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

ArrayLike = Union[np.ndarray, list, tuple]

SMALL_ANGLE = 1e-6

__all__ = [
    "hat", "so3_exp", "so3_log", "PoseSE3",
    "se3_apply", "se3_local_update", "se3_local_difference",
]


# ---------------- so3 ----------------
def hat(v: ArrayLike) -> np.ndarray:
    """Skew matrix [v]x with hat(a) @ b == cross(a, b). Broadcasts over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(omega: ArrayLike) -> np.ndarray:
    """Rodrigues map so3 -> SO3, with a Taylor branch below SMALL_ANGLE."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    K = hat(omega)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: ArrayLike) -> np.ndarray:
    """Inverse of so3_exp for rotation angles in [0, pi]."""
    R = np.asarray(R, dtype=float)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos_theta = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    theta = float(np.arctan2(0.5 * np.linalg.norm(vee), cos_theta))
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6
        return 0.5 * vee * (1.0 + theta * theta / 6.0)
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; the symmetric part is I + (1 - cos)(a a^T - I)
        B = (0.5 * (R + R.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ vee < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


# ---------------- SE3 ----------------
@dataclass(frozen=True)
class PoseSE3:
    """Camera-to-world transform T_wc: p_world = rotation @ p_cam + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, p: ArrayLike) -> np.ndarray:
        return se3_apply(self, p)

    def orthonormality_error(self) -> float:
        return float(np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3)))


def se3_apply(T: PoseSE3, p: ArrayLike) -> np.ndarray:
    """rotation @ p + translation; `p` may be (3,) or (N, 3)."""
    p = np.asarray(p, dtype=float)
    return p @ T.rotation.T + T.translation


def se3_local_update(T: PoseSE3, delta: ArrayLike) -> PoseSE3:
    """delta = (d_translation, d_omega): R <- exp(d_omega) R, t <- t + d_translation."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    R = so3_exp(delta[3:]) @ T.rotation
    # re-orthonormalise so long update chains do not drift
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return PoseSE3(R, T.translation + delta[:3])


def se3_local_difference(T_from: PoseSE3, T_to: PoseSE3) -> np.ndarray:
    """Inverse of se3_local_update: se3_local_update(T_from, d) == T_to."""
    dt = T_to.translation - T_from.translation
    dw = so3_log(T_to.rotation @ T_from.rotation.T)
    return np.concatenate([dt, dw])
