import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solar.exceptions import DegenerateInputError, InvertedSignalError
from solar.maskgen import (
    COSINE, LINEAR, GaussianStats, NoCrossingError, QDAThreshold, ScheduleState, batch_thresholds,
    crosses_between_means, evolutionary_mask, fit_gaussian, fit_gaussians, hard_mask,
    local_global_sims, qda_threshold, rho_at,
)
from solar.providers import SynthConfig, synth_generate


def _bisect_density(pos, neg, lo, hi):
    f = lambda t: pos.pdf(t) - neg.pdf(t)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sign(f(mid)) == np.sign(f(lo)):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_fit_gaussians():
    g = fit_gaussian([0.0, 1.0])
    assert (g.mu, g.sigma) == (0.5, 0.5)
    assert fit_gaussian([0.3, 0.3, 0.3]).sigma == 0.0
    x = np.random.default_rng(0).standard_normal(101)
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    g = fit_gaussian(x)
    assert abs(g.mu - mu) < 1e-12 and abs(g.sigma - math.sqrt(var)) < 1e-12
    with pytest.raises(DegenerateInputError):
        fit_gaussian([1.0])


def test_qda_equal_sigma_midpoint():
    assert qda_threshold(GaussianStats(0.8, 0.1, 10), GaussianStats(0.2, 0.1, 10)) == 0.5


def test_qda_unequal_sigma_matches_bisection():
    pos, neg = GaussianStats(0.8, 0.1, 10), GaussianStats(0.2, 0.2, 10)
    tau = qda_threshold(pos, neg)
    assert 0.2 < tau < 0.8
    assert tau == pytest.approx(_bisect_density(pos, neg, 0.2, 0.8), abs=1e-12)
    assert abs(pos.pdf(tau) - neg.pdf(tau)) < 1e-9 * pos.pdf(tau)


def test_qda_errors():
    with pytest.raises(InvertedSignalError):
        qda_threshold(GaussianStats(0.2, 0.1, 3), GaussianStats(0.8, 0.1, 3))
    with pytest.raises(DegenerateInputError):
        qda_threshold(GaussianStats(0.8, 0.0, 3), GaussianStats(0.2, 0.1, 3))


def test_qda_no_crossing():
    pos, neg = GaussianStats(0.52, 0.01, 5), GaussianStats(0.5, 0.3, 5)
    assert not crosses_between_means(pos, neg)
    with pytest.raises(NoCrossingError):
        qda_threshold(pos, neg, strict=True)
    tau = qda_threshold(pos, neg)
    assert 0.5 <= tau <= 0.52


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1, 1), st.floats(1e-3, 1), st.floats(1e-3, 1), st.floats(1e-3, 1),
)
def test_qda_property_crossing_cases(mu_n, gap, s_p, s_n):
    pos, neg = GaussianStats(mu_n + gap, s_p, 5), GaussianStats(mu_n, s_n, 5)
    tau = qda_threshold(pos, neg)
    assert neg.mu <= tau <= pos.mu
    if crosses_between_means(pos, neg):
        p, q = float(pos.pdf(tau)), float(neg.pdf(tau))
        assert abs(p - q) < 1e-9 * max(p, 1e-300)


def test_estimator():
    est = QDAThreshold().fit([0.7, 0.8, 0.9], [0.1, 0.2, 0.3])
    assert est.threshold_ == pytest.approx(0.5)
    np.testing.assert_array_equal(est.predict([0.9, 0.5, 0.1]), [1, 0, 0])
    assert est.decision_function([0.9])[0] > 0
    assert est.get_params() == {"rtol": 1e-9, "strict": False}


def test_hard_mask_rules():
    np.testing.assert_array_equal(hard_mask([0.9, 0.1], 0.5), [1, 0])
    np.testing.assert_array_equal(hard_mask([0.1, 0.2], 0.5), [0, 1])
    np.testing.assert_array_equal(hard_mask([0.5, 0.7], 0.5), [0, 1])


def test_evolutionary_mask():
    np.testing.assert_array_equal(evolutionary_mask([1, 0], 1.0), [1, 1])
    np.testing.assert_array_equal(evolutionary_mask([1, 0], 0.0), [1, 0])
    np.testing.assert_array_equal(evolutionary_mask([1, 0], 0.5), [1.0, 0.5])


@pytest.mark.parametrize("kind", [LINEAR, COSINE])
def test_rho_schedule(kind):
    assert rho_at(0, 100, kind) == 1.0
    assert rho_at(100, 100, kind) == 0.0
    assert rho_at(50, 100, kind) == pytest.approx(0.5)
    assert rho_at(500, 100, kind) == 0.0
    vals = [rho_at(s, 100, kind) for s in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_rho_errors():
    with pytest.raises(ValueError):
        rho_at(0, 0)
    with pytest.raises(ValueError):
        rho_at(1, 10, "step")


def test_schedule_state():
    s = ScheduleState(4)
    seen = []
    for _ in range(5):
        seen.append(s.rho)
        s.advance()
    assert seen == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_local_global_sims_zero_noise():
    ds = synth_generate(SynthConfig(noise_sigma=0.0, seed=21), 3)
    for s in ds:
        s_l2v, s_v2l = local_global_sims(s.image.locals, s.text.cls, s.text.locals, s.image.cls)
        assert s_l2v.shape == (64,) and s_v2l.shape == (24,)
        gv, gl = s.ground_truth
        assert s_l2v[gv == 1].min() > s_l2v[gv == 0].max()
        assert s_v2l[gl == 1].min() > s_v2l[gl == 0].max()
    v = np.array([0.3, 0.4])
    assert local_global_sims(v[None], v, v[None], v)[0][0] == pytest.approx(1.0)


def test_batch_thresholds_records_failures():
    pools = {"L2V": (np.array([0.8, 0.9]), np.array([0.1, 0.3])), "V2L": (np.array([0.1, 0.2]), np.array([0.5, 0.6]))}
    bt = batch_thresholds(pools)
    assert bt.tau_v is not None and bt.tau_l is None
    assert "InvertedSignalError" in bt.errors["V2L"]
    assert bt.stats["L2V"]["crossing"] is True
