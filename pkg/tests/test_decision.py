import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verinfer.decision import NonIdentifiableError, batch_decide, em_infer, error_rate_curve, error_rates


def _oracle(p0, p1, B, tau):
    """alpha, beta via 50-digit erfc, independent of the scipy route."""
    with mp.workdps(50):
        z1 = (mp.mpf(tau) - p1) / mp.sqrt(mp.mpf(p1) * (1 - mp.mpf(p1)) / B)
        z0 = (mp.mpf(tau) - p0) / mp.sqrt(mp.mpf(p0) * (1 - mp.mpf(p0)) / B)
        phi = lambda z: mp.erfc(-z / mp.sqrt(2)) / 2  # noqa: E731
        return phi(z1), phi(-z0)


def test_reference_operating_point():
    r = error_rates(0.0081, 0.9687, 30, 0.5)
    assert r.alpha == pytest.approx(1.7e-49, rel=0.01)
    assert r.beta < 1e-100  # reported as 0.0


@pytest.mark.parametrize("args", [(0.05, 0.95, 100, 0.5), (0.0081, 0.9687, 30, 0.5), (0.1, 0.8, 30, 0.3),
                                  (0.2, 0.9, 500, 0.6)])
def test_matches_high_precision_oracle(args):
    r = error_rates(*args)
    a, b = _oracle(*args)
    assert r.alpha == pytest.approx(float(a), rel=1e-12)
    assert r.beta == pytest.approx(float(b), rel=1e-12)
    assert r.log_alpha == pytest.approx(float(mp.log(a)), rel=1e-12)
    assert r.log_beta == pytest.approx(float(mp.log(b)), rel=1e-12)


def test_symmetric_case_z_value():
    z = (0.5 - 0.95) / math.sqrt(0.95 * 0.05 / 100)
    assert z == pytest.approx(-20.647, abs=1e-3)
    r = error_rates(0.05, 0.95, 100, 0.5)
    assert r.alpha == pytest.approx(r.beta, rel=1e-12)


def test_tau_at_p1_gives_half():
    assert error_rates(0.1, 0.9, 40, 0.9).alpha == 0.5


@pytest.mark.parametrize("bad", [(0.0, 0.9), (0.1, 1.0), (-0.1, 0.5)])
def test_degenerate_probabilities_rejected(bad):
    with pytest.raises(ValueError):
        error_rates(bad[0], bad[1], 30, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.45), st.floats(0.55, 0.99), st.integers(1, 500))
def test_monotone_in_tau(p0, p1, B):
    taus = np.linspace(0.05, 0.95, 19)
    a = [error_rates(p0, p1, B, t).log_alpha for t in taus]
    b = [error_rates(p0, p1, B, t).log_beta for t in taus]
    assert all(x <= y + 1e-12 for x, y in zip(a, a[1:]))
    assert all(x >= y - 1e-12 for x, y in zip(b, b[1:]))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.4), st.floats(0.6, 0.99))
def test_monotone_in_batch_size(p0, p1):
    tau = (p0 + p1) / 2
    rs = [error_rates(p0, p1, B, tau) for B in (1, 5, 10, 30, 100, 1000)]
    assert all(x.log_alpha >= y.log_alpha for x, y in zip(rs, rs[1:]))
    assert all(x.log_beta >= y.log_beta for x, y in zip(rs, rs[1:]))


def test_curve_grid():
    rows = error_rate_curve(0.05, 0.95, [10, 30], [0.3, 0.5, 0.7])
    assert len(rows) == 6 and {r["B"] for r in rows} == {10, 30}


def test_batch_decide_basic():
    assert batch_decide([1] * 10, 0.5).decision == "honest"
    assert batch_decide([0] * 10, 0.5).decision == "dishonest"
    v = batch_decide([1, 0, 1, 0], 0.5)
    assert v.mean == 0.5 and v.honest and v.B == 4


def test_batch_decide_rejects_empty():
    with pytest.raises(ValueError):
        batch_decide([], 0.5)


def test_batch_decide_matches_error_rates_by_simulation():
    rng = np.random.default_rng(0)
    p0, p1, B, tau, n = 0.3, 0.6, 40, 0.47, 10_000
    honest = rng.random((n, B)) < p1
    cheat = rng.random((n, B)) < p0
    alpha_mc = np.mean([not batch_decide(row, tau).honest for row in honest])
    beta_mc = np.mean([batch_decide(row, tau).honest for row in cheat])
    r = error_rates(p0, p1, B, tau)
    # the comparison is against the normal approximation, so widen by its own error at B=40
    for mc, approx in ((alpha_mc, r.alpha), (beta_mc, r.beta)):
        se = math.sqrt(approx * (1 - approx) / n)
        assert abs(mc - approx) <= 3 * se + 0.03


def test_em_all_accepted_goes_to_specified():
    st_ = em_infer([1] * 200, init=(1 - 1e-6, 1e-6, 0.5))
    assert st_.pi > 0.999 and np.all(st_.responsibilities > 0.999)


def test_em_fixed_point():
    rng = np.random.default_rng(1)
    v = (rng.random(500) < 0.7).astype(int)
    first = em_infer(v, init=(0.9, 0.1, 0.5))
    again = em_infer(v, init=(first.p1, first.p0, first.pi))
    assert max(abs(again.p1 - first.p1), abs(again.p0 - first.p0), abs(again.pi - first.pi)) < 1e-6


def test_em_log_likelihood_non_decreasing():
    rng = np.random.default_rng(2)
    v = (rng.random(300) < 0.55).astype(int)
    for init in [(0.9, 0.1, 0.5), (0.6, 0.4, 0.2), (0.99, 0.01, 0.9)]:
        ll = em_infer(v, init=init).log_likelihood
        assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))


def test_em_recovers_switching_rate():
    p1, p0, pi = 0.95, 0.02, 0.7
    est = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.random(1000) < pi
        v = np.where(z, rng.random(1000) < p1, rng.random(1000) < p0).astype(int)
        # the acceptance rates come from calibration; the mixture weight is what EM estimates
        est.append(em_infer(v, init=(p1, p0, 0.5), fix_rates=True).pi)
    assert abs(np.median(est) - pi) <= 0.05


def test_em_free_rates_stay_on_likelihood_ridge():
    # with free rates only pi*p1 + (1-pi)*p0 = mean(V) is identified
    rng = np.random.default_rng(3)
    v = (rng.random(1000) < 0.6).astype(int)
    s = em_infer(v, init=(0.95, 0.02, 0.5))
    assert s.pi * s.p1 + (1 - s.pi) * s.p0 == pytest.approx(v.mean(), abs=1e-6)
    assert s.converged


def test_em_swaps_labels():
    v = np.r_[np.ones(80), np.zeros(20)].astype(int)
    s = em_infer(v, init=(0.1, 0.9, 0.3))
    assert s.p1 >= s.p0 and s.swapped


def test_em_symmetric_init_is_flagged():
    with pytest.raises(NonIdentifiableError):
        em_infer([1] * 50, init=(0.5, 0.5, 0.5))


def test_em_rejects_bad_input():
    with pytest.raises(ValueError):
        em_infer([0, 2, 1], init=(0.9, 0.1, 0.5))
    with pytest.raises(ValueError):
        em_infer([], init=(0.9, 0.1, 0.5))
    with pytest.raises(ValueError):
        em_infer([1, 0], init=(1.0, 0.1, 0.5))
