# solver.py — sparse Levenberg-Marquardt over poses / inverse depths / intrinsics, Fisher covariance, scoring
"""
Normal equations are solved with the landmark blocks eliminated (each inverse
depth is a scalar, so its block of J^T J is diagonal):

    [H_cc  H_cl] [dc]     [g_c]
    [H_lc  D   ] [dl] = - [g_l]      S = H_cc - H_cl D^-1 H_lc

Camera columns are the active poses (6 each, ordered by frame id) followed by
the 5 intrinsics when those are active.  Damping is Marquardt style on the
diagonal: H + lambda * diag(H).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .camera import CameraIntrinsics
from .errors import DegenerateMean, NumericalFailure, SingularCovariance, SingularInformation
from .factors import Landmark, Measurement, linearize_batch
from .liegroups import PoseSE3, se3_local_update

logger = logging.getLogger(__name__)

__all__ = [
    "Problem", "SolverOptions", "SolveResult", "PosteriorEstimate",
    "solve", "fisher_covariance", "normalize_covariance", "score", "check_wellconditioned",
    "whitened_norms",
]

DIAG_FLOOR = 1e-9
RANK_TOL = 1e-12
LANDMARK_INFO_TOL = 1e-10
COST_FLOOR = 1e-30
# median of the norm of a 2-d standard normal
RAYLEIGH_MEDIAN = 1.1774100225154747
RHO_SHRINK = 0.1


# ---------------- problem ----------------
@dataclass
class Problem:
    """
    One least-squares instance. Poses not listed in `active_poses` are held
    fixed (conditioning poses are a labelled subset of those). Landmarks not
    in `active_landmarks` keep their inverse depth. When `frame_intrinsics`
    is given it supplies fixed per-frame intrinsics and `intrinsics` is unused
    for projection.
    """
    poses: Dict[int, PoseSE3]
    landmarks: Dict[int, Landmark]
    measurements: List[Measurement]
    intrinsics: CameraIntrinsics
    active_poses: Sequence[int] = ()
    active_landmarks: Sequence[int] = ()
    intrinsics_active: bool = False
    conditioning_poses: Sequence[int] = ()
    frame_intrinsics: Optional[Callable[[int], CameraIntrinsics]] = None

    def __post_init__(self):
        self.active_poses = sorted(set(self.active_poses))
        self.active_landmarks = sorted(set(self.active_landmarks))
        self.conditioning_poses = sorted(set(self.conditioning_poses))
        self.validate()

    def validate(self) -> None:
        for m in self.measurements:
            lm = self.landmarks.get(m.landmark_id)
            if lm is None:
                raise ValueError(f"measurement references unknown landmark {m.landmark_id}")
            if m.frame_id not in self.poses or lm.ref_frame_id not in self.poses:
                raise ValueError(f"measurement of landmark {m.landmark_id} references a missing pose")
        missing = [p for p in self.active_poses if p not in self.poses]
        if missing:
            raise ValueError(f"active poses without values: {missing}")
        missing = [l for l in self.active_landmarks if l not in self.landmarks]
        if missing:
            raise ValueError(f"active landmarks without values: {missing[:5]}")
        if set(self.conditioning_poses) & set(self.active_poses):
            raise ValueError("conditioning poses must not be active")
        if len(self.active_poses) >= len(self.poses) and self.active_poses:
            raise ValueError("gauge: at least one pose must be held fixed")
        if self.intrinsics_active and self.frame_intrinsics is not None:
            raise ValueError("per-frame intrinsics cannot be combined with active intrinsics")

    @property
    def fixed_poses(self) -> List[int]:
        act = set(self.active_poses)
        return sorted(p for p in self.poses if p not in act)

    def intrinsics_for(self, frame_id: int) -> CameraIntrinsics:
        if self.frame_intrinsics is not None:
            return self.frame_intrinsics(frame_id)
        return self.intrinsics


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 100
    tolerance: float = 1e-10
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e8
    reject_outliers: bool = True
    outlier_threshold: float = 5.0
    min_inlier_share: float = 0.5

    @classmethod
    def from_settings(cls, s) -> "SolverOptions":
        return cls(
            max_iters=s.max_iters, tolerance=s.tolerance,
            lambda_init=s.lambda_init, lambda_up=s.lambda_up, lambda_down=s.lambda_down,
            lambda_max=s.lambda_max, outlier_threshold=s.outlier_threshold,
            min_inlier_share=s.min_inlier_share,
        )


@dataclass
class SolveResult:
    problem: Problem            # updated values; measurements are the inliers that were used
    cost: float
    converged: bool
    iterations: int
    cost_history: List[float] = field(default_factory=list)
    n_rejected: int = 0

    @property
    def poses(self) -> Dict[int, PoseSE3]:
        return self.problem.poses

    @property
    def landmarks(self) -> Dict[int, Landmark]:
        return self.problem.landmarks

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.problem.intrinsics

    @property
    def n_measurements(self) -> int:
        return len(self.problem.measurements)


@dataclass(frozen=True)
class PosteriorEstimate:
    mu: np.ndarray              # (5,) intrinsics mean
    Sigma: np.ndarray           # (5, 5) un-normalized covariance
    SigmaPrime: np.ndarray      # (5, 5) normalized covariance
    n: int                      # measurement count

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_array(self.mu)


# ---------------- indexing / linearization ----------------
class _Layout:
    """Integer indexing of a Problem's parameters and measurements."""

    def __init__(self, problem: Problem, measurements: List[Measurement]):
        self.problem = problem
        self.pose_ids = sorted(problem.poses)
        self.pose_index = {p: i for i, p in enumerate(self.pose_ids)}
        self.pose_slot = {p: s for s, p in enumerate(problem.active_poses)}
        self.lm_ids = sorted({m.landmark_id for m in measurements} | set(problem.active_landmarks))
        self.lm_index = {l: i for i, l in enumerate(self.lm_ids)}
        self.lm_slot = {l: s for s, l in enumerate(problem.active_landmarks)}

        self.n_pose_cols = 6 * len(problem.active_poses)
        self.n_cam = self.n_pose_cols + (5 if problem.intrinsics_active else 0)
        self.n_lm = len(problem.active_landmarks)
        self.measurements = measurements

        lms = problem.landmarks
        n = len(measurements)
        self.li = np.array([self.lm_index[m.landmark_id] for m in measurements], dtype=int)
        ref = [lms[m.landmark_id].ref_frame_id for m in measurements]
        self.ri = np.array([self.pose_index[f] for f in ref], dtype=int)
        self.mi = np.array([self.pose_index[m.frame_id] for m in measurements], dtype=int)
        self.z = np.array([m.z for m in measurements], dtype=float).reshape(n, 2)
        self.sigma = np.array([m.sigma for m in measurements], dtype=float)
        self.p_r = np.array([lms[l].p_r for l in self.lm_ids], dtype=float).reshape(len(self.lm_ids), 2)[self.li]

        self.r_slot = np.array([self.pose_slot.get(f, -1) for f in ref], dtype=int)
        self.m_slot = np.array([self.pose_slot.get(m.frame_id, -1) for m in measurements], dtype=int)
        self.l_slot = np.array([self.lm_slot.get(m.landmark_id, -1) for m in measurements], dtype=int)

        if problem.frame_intrinsics is not None:
            cache: Dict[int, np.ndarray] = {}
            def x_of(f):
                if f not in cache:
                    cache[f] = problem.frame_intrinsics(f).as_array()
                return cache[f]
            self.x_r = np.array([x_of(f) for f in ref]).reshape(n, 5)
            self.x_m = np.array([x_of(m.frame_id) for m in measurements]).reshape(n, 5)
        else:
            self.x_r = self.x_m = None

    # state = (R (P,3,3), t (P,3), rho (L,), x (5,))
    def initial_state(self):
        ps = self.problem.poses
        R = np.array([ps[p].rotation for p in self.pose_ids]).reshape(len(self.pose_ids), 3, 3)
        t = np.array([ps[p].translation for p in self.pose_ids]).reshape(len(self.pose_ids), 3)
        rho = np.array([self.problem.landmarks[l].rho for l in self.lm_ids], dtype=float)
        return R, t, rho, self.problem.intrinsics.as_array()

    def linearize(self, state, jacobians: bool = True):
        R, t, rho, x = state
        x_r = x if self.x_r is None else self.x_r
        x_m = x if self.x_m is None else self.x_m
        return linearize_batch(
            x_r, x_m, R[self.ri], t[self.ri], R[self.mi], t[self.mi],
            self.p_r, rho[self.li], self.z, self.sigma, jacobians=jacobians,
        )

    def cost(self, state) -> float:
        lin = self.linearize(state, jacobians=False)
        if not np.all(lin.valid):
            return np.inf
        return 0.5 * float(np.sum(lin.residual ** 2))

    def jacobian(self, lin) -> sp.csr_matrix:
        n = len(self.measurements)
        rows, cols, data = [], [], []

        def add(sel, col0, block):
            k = np.nonzero(sel)[0]
            if k.size == 0:
                return
            b = block[k]
            width = b.shape[2]
            r = (2 * k)[:, None, None] + np.arange(2)[None, :, None]
            c = np.asarray(col0)[:, None, None] + np.arange(width)[None, None, :]
            r, c = np.broadcast_arrays(r, c)
            rows.append(r.ravel())
            cols.append(c.ravel())
            data.append(b.ravel())

        add(self.r_slot >= 0, 6 * self.r_slot[self.r_slot >= 0], lin.J_pose_r)
        add(self.m_slot >= 0, 6 * self.m_slot[self.m_slot >= 0], lin.J_pose_m)
        if self.problem.intrinsics_active:
            add(np.ones(n, dtype=bool), np.full(n, self.n_pose_cols), lin.J_intr)
        add(self.l_slot >= 0, self.n_cam + self.l_slot[self.l_slot >= 0], lin.J_rho[:, :, None])

        shape = (2 * n, self.n_cam + self.n_lm)
        if not rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=shape
        )

    def normal_equations(self, lin):
        J = self.jacobian(lin)
        r = lin.residual.ravel()
        H = (J.T @ J).tocsr()
        g = J.T @ r
        return H, g

    def apply(self, state, dc: np.ndarray, dl: np.ndarray):
        R, t, rho, x = state
        R = R.copy()
        t = t.copy()
        for p, s in self.pose_slot.items():
            i = self.pose_index[p]
            T = se3_local_update(PoseSE3(R[i], t[i]), dc[6 * s:6 * s + 6])
            R[i], t[i] = T.rotation, T.translation
        if self.problem.intrinsics_active:
            x = x + dc[self.n_pose_cols:self.n_pose_cols + 5]
        if self.n_lm:
            rho = rho.copy()
            idx = np.array([self.lm_index[l] for l in self.problem.active_landmarks], dtype=int)
            # one step may shrink an inverse depth at most tenfold, so it stays positive
            rho[idx] = np.maximum(rho[idx] + dl, RHO_SHRINK * rho[idx])
        return R, t, rho, x

    def admissible(self, state) -> bool:
        _, _, rho, x = state
        if np.any(rho <= 0.0) or not np.all(np.isfinite(x)):
            return False
        return x[0] > 0.0 and x[1] > 0.0 and 0.0 <= x[4] < np.pi

    def to_problem(self, state, measurements: List[Measurement]) -> Problem:
        R, t, rho, x = state
        poses = dict(self.problem.poses)
        for p in self.problem.active_poses:
            i = self.pose_index[p]
            poses[p] = PoseSE3(R[i], t[i])
        landmarks = dict(self.problem.landmarks)
        for l in self.problem.active_landmarks:
            landmarks[l] = landmarks[l].with_rho(rho[self.lm_index[l]])
        intr = CameraIntrinsics.from_array(x) if self.problem.intrinsics_active else self.problem.intrinsics
        return replace(self.problem, poses=poses, landmarks=landmarks, measurements=measurements, intrinsics=intr)


def _damped_step(H: sp.csr_matrix, g: np.ndarray, n_cam: int, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Schur-complement solve of (H + lam diag H) d = -g. Raises LinAlgError."""
    Hcc = H[:n_cam, :n_cam].toarray()
    Hcl = H[:n_cam, n_cam:]
    D = H.diagonal()[n_cam:]
    gc, gl = g[:n_cam], g[n_cam:]

    Dd = D + lam * np.maximum(D, DIAG_FLOOR)
    Dinv = 1.0 / Dd
    if n_cam == 0:
        return np.zeros(0), -gl * Dinv

    A = Hcc + np.diag(lam * np.maximum(np.diag(Hcc), DIAG_FLOOR))
    if Dd.size:
        W = Hcl @ sp.diags(Dinv)
        S = A - (W @ Hcl.T).toarray()
        rhs = -(gc - W @ gl)
    else:
        S, rhs = A, -gc
    c, low = scipy.linalg.cho_factor(0.5 * (S + S.T), check_finite=True)
    dc = scipy.linalg.cho_solve((c, low), rhs)
    dl = -(gl + Hcl.T @ dc) * Dinv if Dd.size else np.zeros(0)
    if not (np.all(np.isfinite(dc)) and np.all(np.isfinite(dl))):
        raise np.linalg.LinAlgError("non-finite step")
    return dc, dl


def _levenberg_marquardt(layout: _Layout, state, opts: SolverOptions):
    cost = layout.cost(state)
    history = [cost]
    lam = opts.lambda_init
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        lin = layout.linearize(state)
        H, g = layout.normal_equations(lin)
        if g.size == 0 or np.max(np.abs(g)) < opts.tolerance or cost < COST_FLOOR:
            converged = True
            it -= 1
            break

        solvable = False
        accepted = None
        while accepted is None:
            try:
                dc, dl = _damped_step(H, g, layout.n_cam, lam)
                solvable = True
                cand = layout.apply(state, dc, dl)
                if layout.admissible(cand):
                    new_cost = layout.cost(cand)
                    if new_cost < cost:
                        accepted = (cand, new_cost)
                        break
            except np.linalg.LinAlgError:
                pass
            lam *= opts.lambda_up
            if lam > opts.lambda_max:
                break

        if accepted is None:
            if not solvable:
                raise NumericalFailure("normal equations not solvable at any damping")
            # no improving step exists at any damping: treat as a stationary point
            converged = True
            break

        state, new_cost = accepted
        rel = (cost - new_cost) / max(cost, COST_FLOOR)
        cost = new_cost
        history.append(cost)
        lam = max(lam / opts.lambda_down, 1e-12)
        if rel < opts.tolerance or cost < COST_FLOOR:
            converged = True
            break
    return state, cost, converged, it, history


# ---------------- public operations ----------------
def solve(problem: Problem, max_iters: Optional[int] = None, tolerance: Optional[float] = None,
          options: Optional[SolverOptions] = None) -> SolveResult:
    """
    Levenberg-Marquardt on `problem`. Measurements whose landmark lies behind
    the measurement camera at the initial values are dropped; with outlier
    rejection on, residuals above the whitened threshold after the first
    converged solve are dropped and the problem is solved once more.
    """
    opts = options or SolverOptions()
    if max_iters is not None:
        opts = replace(opts, max_iters=max_iters)
    if tolerance is not None:
        opts = replace(opts, tolerance=tolerance)

    layout = _Layout(problem, list(problem.measurements))
    state = layout.initial_state()
    valid = layout.linearize(state, jacobians=False).valid
    n_dropped = int(np.count_nonzero(~valid))
    if n_dropped:
        logger.debug("dropping %d measurements with non-positive depth", n_dropped)
        kept = [m for m, v in zip(layout.measurements, valid) if v]
        layout = _Layout(problem, kept)
        state = layout.initial_state()

    state, cost, converged, iters, history = _levenberg_marquardt(layout, state, opts)
    n_rejected = 0
    if opts.reject_outliers and converged and layout.measurements:
        norms = np.linalg.norm(layout.linearize(state, jacobians=False).residual, axis=1)
        # a miscalibrated model inflates every residual; scale the cut with the typical one
        cut = opts.outlier_threshold * max(1.0, float(np.median(norms)) / RAYLEIGH_MEDIAN)
        inlier = norms <= cut
        share = float(np.count_nonzero(inlier)) / len(norms)
        if share < opts.min_inlier_share:
            logger.warning("outlier rejection skipped: only %.0f%% of %d measurements within %.3g",
                           100.0 * share, len(norms), cut)
        elif not np.all(inlier):
            n_rejected = int(np.count_nonzero(~inlier))
            logger.debug("outlier rejection: %d of %d measurements (cut %.3g)", n_rejected, len(norms), cut)
            kept = [m for m, ok in zip(layout.measurements, inlier) if ok]
            mid = layout.to_problem(state, kept)
            layout = _Layout(mid, kept)
            state = layout.initial_state()
            state, cost, converged, more, history_more = _levenberg_marquardt(layout, state, opts)
            iters += more
            history = history + history_more[1:]

    if not converged:
        logger.warning("LM did not converge in %d iterations (cost %.6g)", opts.max_iters, cost)
    return SolveResult(
        problem=layout.to_problem(state, layout.measurements),
        cost=cost, converged=converged, iterations=iters,
        cost_history=history, n_rejected=n_rejected + n_dropped,
    )


def whitened_norms(problem: Problem, measurements: Optional[Sequence[Measurement]] = None) -> np.ndarray:
    """Per-measurement whitened residual norm at the problem's current values (inf behind the camera)."""
    meas = list(problem.measurements if measurements is None else measurements)
    if not meas:
        return np.zeros(0)
    layout = _Layout(problem, meas)
    lin = layout.linearize(layout.initial_state(), jacobians=False)
    norms = np.linalg.norm(lin.residual, axis=1)
    norms[~lin.valid] = np.inf
    return norms


def fisher_covariance(problem: Problem) -> PosteriorEstimate:
    """Intrinsics block of (J^T J)^-1 with poses and active inverse depths marginalized."""
    if not problem.intrinsics_active:
        raise ValueError("fisher_covariance needs a problem with active intrinsics")
    if not problem.measurements:
        raise SingularInformation("no measurements")
    layout = _Layout(problem, list(problem.measurements))
    lin = layout.linearize(layout.initial_state())
    H, _ = layout.normal_equations(lin)
    nc, npc = layout.n_cam, layout.n_pose_cols

    Hcc = H[:nc, :nc].toarray()
    Hcl = H[:nc, nc:]
    D = H.diagonal()[nc:]
    if D.size:
        observed = np.bincount(layout.l_slot[layout.l_slot >= 0], minlength=layout.n_lm) > 0
        Dm = D[observed]
        med = float(np.median(Dm)) if Dm.size else 0.0
        # all inverse depths can vanish together (no translation); compare against the camera block too
        floor = LANDMARK_INFO_TOL * max(med, float(np.max(np.diag(Hcc), initial=0.0)))
        if Dm.size and (med <= floor or np.any(Dm <= LANDMARK_INFO_TOL * med)):
            raise SingularInformation("inverse depth unobservable", reason="unobservable_depth")
        Dinv = np.where(observed, 1.0 / np.where(observed, D, 1.0), 0.0)
        S = Hcc - ((Hcl @ sp.diags(Dinv)) @ Hcl.T).toarray()
    else:
        S = Hcc
    S = 0.5 * (S + S.T)

    S_ii = S[npc:, npc:]
    if npc:
        try:
            cf = scipy.linalg.cho_factor(S[:npc, :npc])
        except np.linalg.LinAlgError as e:
            raise SingularInformation("pose information rank-deficient") from e
        S_pi = S[:npc, npc:]
        info = S_ii - S_pi.T @ scipy.linalg.cho_solve(cf, S_pi)
    else:
        info = S_ii
    info = 0.5 * (info + info.T)

    evals, evecs = np.linalg.eigh(info)
    if evals[-1] <= 0.0 or evals[0] <= RANK_TOL * evals[-1]:
        raise SingularInformation("intrinsics information rank-deficient")
    Sigma = (evecs / evals) @ evecs.T
    mu = problem.intrinsics.as_array()
    return PosteriorEstimate(mu=mu, Sigma=Sigma, SigmaPrime=normalize_covariance(Sigma, mu),
                             n=len(problem.measurements))


def normalize_covariance(Sigma: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Sigma'_ij = Sigma_ij / (|mu_i| |mu_j|)."""
    mu = np.abs(np.asarray(mu, dtype=float))
    if np.any(mu < 1e-9):
        raise DegenerateMean(f"parameter mean too close to zero: {mu}")
    return np.asarray(Sigma, dtype=float) / np.outer(mu, mu)


def score(SigmaPrime: np.ndarray) -> float:
    """Gaussian differential entropy 1/2 ln det(2 pi e Sigma'); lower is more informative."""
    M = np.asarray(SigmaPrime, dtype=float)
    evals = np.linalg.eigvalsh(0.5 * (M + M.T))
    if evals[-1] <= 0.0 or evals[0] <= RANK_TOL * evals[-1]:
        raise SingularCovariance("covariance determinant is not positive")
    return 0.5 * float(np.sum(np.log(2.0 * np.pi * np.e * evals)))


def check_wellconditioned(M: np.ndarray, kappa_max: float = 1e8) -> bool:
    """Full rank and condition number below kappa_max (eigenvalues of the symmetrized matrix)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        return False
    evals = np.linalg.eigvalsh(0.5 * (M + M.T))
    top = evals[-1]
    if top <= 0.0:
        return False
    if np.count_nonzero(evals > RANK_TOL * top) < M.shape[0]:
        return False
    return bool(top / evals[0] < kappa_max)
