import numpy as np
import pytest
import scipy.stats

from AutoCal.changedetect import (
    ChangeEvent, ChangeGate, TestResult, behrens_fisher_test, f_cdf, f_sf, gate_update, on_change_event,
)
from AutoCal.errors import DegenerateDof, DomainError, SingularCombinedCovariance
from AutoCal.selfcal import PriorityQueue
from AutoCal.solver import PosteriorEstimate

MU = np.array([300.0, 300.0, 320.0, 240.0, 0.9])


def _post(mu, Sigma, n):
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    return PosteriorEstimate(mu=mu, Sigma=Sigma, SigmaPrime=Sigma / np.outer(mu, mu), n=n)


def _result(p):
    return TestResult(T2=1.0, v=10.0, f_stat=1.0, p_value=p)


# ---------------- F distribution ----------------
def test_f_cdf_basics():
    assert f_cdf(0.0, 5, 10) == 0.0
    assert f_sf(0.0, 5, 10) == 1.0
    assert f_cdf(float("inf"), 5, 10) == 1.0
    assert f_sf(float("inf"), 5, 10) == 0.0


def test_f_cdf_matches_scipy():
    for d1, d2 in [(1, 1), (5, 10), (5, 3.3), (2, 200), (5, 1.001)]:
        for x in np.linspace(0.0, 12.0, 50):
            assert f_cdf(x, d1, d2) == pytest.approx(scipy.stats.f.cdf(x, d1, d2), abs=1e-10)
            assert f_cdf(x, d1, d2) + f_sf(x, d1, d2) == pytest.approx(1.0, abs=1e-12)


def test_f_median():
    med = scipy.stats.f.median(5, 10)
    assert f_cdf(med, 5, 10) == pytest.approx(0.5, abs=1e-3)


def test_f_reduces_to_student_t():
    for t in (0.3, 1.0, 2.5):
        assert f_cdf(t * t, 1, 7) == pytest.approx(2.0 * scipy.stats.t.cdf(t, 7) - 1.0, abs=1e-10)


def test_f_sf_far_tail():
    p = f_sf(500.0, 5, 40)
    assert 0.0 < p < 1e-30
    assert p == pytest.approx(scipy.stats.f.sf(500.0, 5, 40), rel=1e-6)


def test_f_domain():
    with pytest.raises(DomainError):
        f_cdf(-1.0, 5, 10)
    with pytest.raises(DomainError):
        f_sf(1.0, 0, 10)


# ---------------- test statistic ----------------
def test_equal_means_accept():
    S = np.diag([4.0, 4.0, 9.0, 9.0, 1e-4]) * 100
    r = behrens_fisher_test(_post(MU, S, 200), _post(MU, S, 80))
    assert r.T2 == 0.0
    assert r.p_value == 1.0
    assert r.v == 278.0


def test_symmetric_in_its_arguments():
    a = _post(MU, np.diag([40.0, 50.0, 60.0, 70.0, 1e-3]), 300)
    b = _post(MU + [1.0, -0.5, 0.2, 0.1, 0.001], np.diag([90.0, 30.0, 20.0, 10.0, 3e-3]), 120)
    ab, ba = behrens_fisher_test(a, b), behrens_fisher_test(b, a)
    assert ab.T2 == pytest.approx(ba.T2, rel=1e-12)
    assert ab.v == pytest.approx(ba.v, rel=1e-12)
    assert ab.p_value == pytest.approx(ba.p_value, rel=1e-9)


def test_large_difference_rejects():
    S = np.diag([1.0, 1.0, 1.0, 1.0, 1e-4]) * 1e3
    r = behrens_fisher_test(_post(MU, S, 500), _post(MU * 2.0, S, 500))
    assert r.p_value < 1e-6
    assert r.f_stat > 0.0


def test_degenerate_inputs():
    S = np.eye(5)
    with pytest.raises(DegenerateDof):
        behrens_fisher_test(_post(MU, S, 1), _post(MU, S, 10))
    with pytest.raises(SingularCombinedCovariance):
        behrens_fisher_test(_post(MU, np.zeros((5, 5)), 10), _post(MU + 1.0, np.zeros((5, 5)), 10))


def test_small_dof_is_clamped():
    S1 = np.eye(5) * 1e-6
    S2 = np.eye(5) * 1e3
    r = behrens_fisher_test(_post(MU, S1, 1000), _post(MU + 5.0, S2, 6))
    assert r.v >= 5 + 1.001 - 1e-12
    assert 0.0 <= r.p_value <= 1.0


def test_size_under_equal_means():
    """Rejection rate at alpha = 0.1 with equal means and unequal covariances."""
    rng = np.random.default_rng(2024)
    p, n1, n2, trials = 5, 40, 60, 2000
    A = rng.normal(size=(p, p))
    cov1 = A @ A.T + p * np.eye(p)
    cov2 = np.diag([4.0, 0.5, 2.0, 1.0, 3.0])
    mu = np.full(p, 10.0)
    rejected = 0
    for _ in range(trials):
        X1 = rng.multivariate_normal(mu, cov1, size=n1)
        X2 = rng.multivariate_normal(mu, cov2, size=n2)
        D1, D2 = X1 - X1.mean(axis=0), X2 - X2.mean(axis=0)
        r = behrens_fisher_test(_post(X1.mean(axis=0), D1.T @ D1, n1), _post(X2.mean(axis=0), D2.T @ D2, n2))
        rejected += r.p_value <= 0.1
    assert 0.06 <= rejected / trials <= 0.15


# ---------------- gate ----------------
def _run(gate, ps, start=10, **kw):
    events = []
    for i, p in enumerate(ps):
        _, ev = gate_update(gate, None if p is None else _result(p), start + i, segment_start=100 + 10 * i, **kw)
        if ev is not None:
            events.append(ev)
    return events


def test_gate_fires_after_n_test_rejections():
    gate = ChangeGate(alpha=0.1, n_test=3)
    events = _run(gate, [0.01, 0.05, 0.09])
    assert events == [ChangeEvent(n_change=12 - 3, detected_at=12)]
    assert gate.counter == 0


def test_gate_resets_on_acceptance_or_missing_result():
    gate = ChangeGate(alpha=0.1, n_test=3)
    assert _run(gate, [0.01, 0.01, 0.5, 0.01, 0.01, None, 0.01, 0.01]) == []
    assert gate.counter == 2


def test_gate_boundary_is_inclusive():
    gate = ChangeGate(alpha=0.1, n_test=1)
    assert len(_run(gate, [0.1])) == 1
    assert _run(gate, [0.1000001]) == []


def test_gate_segment_mode_uses_first_rejecting_segment():
    gate = ChangeGate(alpha=0.1, n_test=2)
    events = _run(gate, [0.5, 0.01, 0.01], mode="segment")
    assert events[0].n_change == 110


def test_change_indices_increase():
    gate = ChangeGate(alpha=0.1, n_test=1, n_change=50)
    _, ev = gate_update(gate, _result(0.0), 20)
    assert ev.n_change == 51
    _, ev = gate_update(gate, _result(0.0), 21)
    assert ev.n_change == 52


def test_alpha_zero_never_fires():
    gate = ChangeGate(alpha=0.0, n_test=1)
    assert _run(gate, [0.0, 1e-300, 0.0, 0.5]) == []


def test_gate_validation():
    with pytest.raises(ValueError):
        ChangeGate(alpha=1.0)
    with pytest.raises(ValueError):
        ChangeGate(n_test=0)


def test_change_event_clears_queue_and_restarts_initialization():
    class Recorder:
        def __init__(self):
            self.calls = []

        def enter_initialization(self, n):
            self.calls.append(n)

    pq = PriorityQueue(3, lambda segs: None)
    pq.segments = ["a", "b"]
    cal = Recorder()
    on_change_event(pq, cal, ChangeEvent(n_change=40, detected_at=52))
    assert len(pq) == 0 and pq.joint is None
    assert cal.calls == [40]
