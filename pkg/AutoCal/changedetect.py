# changedetect.py — approximate-F Behrens-Fisher test between two intrinsics posteriors + consecutive-rejection gate
"""
Two posteriors (mu, Sigma, n) are compared with Yao's approximate solution of
the multivariate Behrens-Fisher problem:

    St_i  = Sigma_i / (n_i (n_i - 1))            St = St_pq + St_s
    T2    = mu_d^T St^-1 mu_d                    mu_d = mu_pq - mu_s
    1 / v = sum_i (1 / n_i) (mu_d^T St^-1 St_i St^-1 mu_d / T2)^2
    F     = T2 (v - p + 1) / (v p)  ~  F(p, v - p + 1)

Covariances are the un-normalized ones.  A change is declared only after
n_test consecutive candidate segments reject at level alpha.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np
import scipy.linalg

from .errors import DegenerateDof, DomainError, SingularCombinedCovariance
from .solver import PosteriorEstimate
from .specialfn import reg_inc_beta

if TYPE_CHECKING:
    from .selfcal import SelfCalibrator

logger = logging.getLogger(__name__)

__all__ = [
    "TestResult", "ChangeGate", "ChangeEvent",
    "f_cdf", "f_sf", "behrens_fisher_test", "gate_update", "on_change_event",
]

DOF_MARGIN = 1.001


@dataclass(frozen=True)
class TestResult:
    T2: float
    v: float
    f_stat: float
    p_value: float
    clamped: bool = False

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class ChangeEvent:
    n_change: int
    detected_at: int


@dataclass
class ChangeGate:
    alpha: float = 0.1
    n_test: int = 3
    counter: int = 0
    n_change: int = 0
    first_rejecting_frame: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.n_test < 1:
            raise ValueError(f"n_test must be >= 1, got {self.n_test}")

    def reset(self) -> None:
        self.counter = 0
        self.first_rejecting_frame = None


# ---------------- F distribution ----------------
def _check_f_args(x: float, d1: float, d2: float) -> None:
    if not (d1 > 0.0 and d2 > 0.0):
        raise DomainError(f"F distribution needs positive dof, got d1={d1}, d2={d2}")
    if not x >= 0.0:
        raise DomainError(f"F distribution needs x >= 0, got {x}")


def f_cdf(x: float, d1: float, d2: float) -> float:
    """P(F <= x) = I_{d1 x / (d1 x + d2)}(d1/2, d2/2)."""
    _check_f_args(x, d1, d2)
    if np.isinf(x):
        return 1.0
    return reg_inc_beta(d1 * x / (d1 * x + d2), 0.5 * d1, 0.5 * d2)


def f_sf(x: float, d1: float, d2: float) -> float:
    """P(F > x) = I_{d2 / (d1 x + d2)}(d2/2, d1/2); accurate in the far tail."""
    _check_f_args(x, d1, d2)
    if np.isinf(x):
        return 0.0
    return reg_inc_beta(d2 / (d1 * x + d2), 0.5 * d2, 0.5 * d1)


# ---------------- test ----------------
def behrens_fisher_test(pq: PosteriorEstimate, seg: PosteriorEstimate) -> TestResult:
    p = int(np.asarray(pq.mu).shape[0])
    n1, n2 = int(pq.n), int(seg.n)
    if n1 < 2 or n2 < 2:
        raise DegenerateDof(f"need at least 2 measurements per posterior, got {n1} and {n2}")

    S1 = np.asarray(pq.Sigma, dtype=float) / (n1 * (n1 - 1.0))
    S2 = np.asarray(seg.Sigma, dtype=float) / (n2 * (n2 - 1.0))
    S = 0.5 * ((S1 + S2) + (S1 + S2).T)
    mu_d = np.asarray(pq.mu, dtype=float) - np.asarray(seg.mu, dtype=float)

    try:
        cf = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as e:
        raise SingularCombinedCovariance("combined covariance is not positive definite") from e
    y = scipy.linalg.cho_solve(cf, mu_d)          # St^-1 mu_d
    T2 = max(float(mu_d @ y), 0.0)

    if T2 == 0.0:
        return TestResult(T2=0.0, v=float(n1 + n2 - 2), f_stat=0.0, p_value=1.0)

    a1 = float(y @ S1 @ y)
    a2 = float(y @ S2 @ y)
    inv_v = (a1 / T2) ** 2 / n1 + (a2 / T2) ** 2 / n2
    v = 1.0 / inv_v if inv_v > 0.0 else np.inf
    clamped = False
    if v < p + DOF_MARGIN:
        logger.debug("clamping dof v=%.4g to %.4g", v, p + DOF_MARGIN)
        v = p + DOF_MARGIN
        clamped = True
    if not np.isfinite(v):
        v = float(n1 + n2 - 2)

    d2 = v - p + 1.0
    if d2 <= 0.0:
        raise DegenerateDof(f"denominator dof {d2:.4g} <= 0")
    f_stat = T2 * d2 / (v * p)
    p_value = min(1.0, max(0.0, f_sf(f_stat, p, d2)))
    return TestResult(T2=T2, v=float(v), f_stat=float(f_stat), p_value=float(p_value), clamped=clamped)


# ---------------- gate ----------------
def gate_update(gate: ChangeGate, result: Optional[TestResult], current_frame: int,
                segment_start: Optional[int] = None,
                mode: str = "keyframe") -> Tuple[ChangeGate, Optional[ChangeEvent]]:
    """
    Count consecutive rejections (p <= alpha). A missing result (discarded
    segment, failed solve) resets the counter. At n_test rejections a
    ChangeEvent is emitted and the counter resets.
    """
    # alpha = 0 disables detection, even for p-values that underflow to 0
    if result is None or gate.alpha <= 0.0 or result.p_value > gate.alpha:
        gate.reset()
        return gate, None

    if gate.counter == 0:
        gate.first_rejecting_frame = segment_start if segment_start is not None else current_frame
    gate.counter += 1
    if gate.counter < gate.n_test:
        return gate, None

    if mode == "segment" and gate.first_rejecting_frame is not None:
        n_change = gate.first_rejecting_frame
    else:
        n_change = current_frame - gate.n_test
    n_change = max(n_change, gate.n_change + 1)
    gate.n_change = n_change
    gate.reset()
    logger.warning("calibration change detected at frame %d (n_change=%d)", current_frame, n_change)
    return gate, ChangeEvent(n_change=n_change, detected_at=current_frame)


def on_change_event(pq, calibrator: "SelfCalibrator", event: ChangeEvent) -> None:
    """Empty the priority queue and send self-calibration back into batch initialization at n_change."""
    pq.clear()
    calibrator.enter_initialization(event.n_change)
