import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elslab import convergence as cv


def _numeric_jacobian(step, point, h=1e-7):
    """Central-difference Jacobian of a map R^2 -> R^2 (independent oracle)."""
    point = np.asarray(point, dtype=float)
    cols = []
    for k in range(2):
        d = np.zeros(2)
        d[k] = h
        cols.append((np.array(step(*(point + d))) - np.array(step(*(point - d)))) / (2 * h))
    return np.stack(cols, axis=1)


def test_sim_jacobian_degenerate():
    np.testing.assert_array_equal(cv.jacobian_sim(0.3, 0.3, 0.5), np.eye(2))
    assert cv.eigenvalues_2x2(np.eye(2)) == (1, 1)


def test_sim_jacobian_example():
    eigs = cv.eigenvalues_2x2(cv.jacobian_sim(1, -1, 0.5))
    assert sorted(eigs, key=lambda z: z.imag) == [pytest.approx(1 - 0.5j), pytest.approx(1 + 0.5j)]
    assert cv.spectral_radius(eigs) == pytest.approx(math.sqrt(1.25), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 2.0), st.floats(-3, 3), st.floats(-3, 3))
def test_sim_radius_modulus_identity(eta, xs, xt):
    r = cv.spectral_radius(cv.eigenvalues_2x2(cv.jacobian_sim(xs, xt, eta)))
    assert r == pytest.approx(math.sqrt(1 + (eta * (xs - xt) / 2) ** 2), abs=1e-12)


def test_eigenvalues_examples():
    i = cv.eigenvalues_2x2([[0, -1], [1, 0]])
    assert set(i) == {1j, -1j}
    z = cv.eigenvalues_2x2([[1, -1], [1, 0]])
    assert sorted(z, key=lambda w: w.imag) == [pytest.approx(0.5 - math.sqrt(3) / 2 * 1j), pytest.approx(0.5 + math.sqrt(3) / 2 * 1j)]
    assert cv.spectral_radius([1, 1]) == 1
    assert cv.spectral_radius([0.5 + 0.866j, 0.5 - 0.866j]) == pytest.approx(1.0, abs=1e-3)
    assert cv.spectral_radius([1 + 0.5j, 1 - 0.5j]) == pytest.approx(math.sqrt(1.25))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_eigenvalues_match_numpy(vals):
    m = np.array(vals).reshape(2, 2)
    ours = np.array(cv.eigenvalues_2x2(m))
    ref = np.linalg.eigvals(m)
    # match as multisets: each of ours has a partner in ref
    for z in ours:
        assert np.min(np.abs(ref - z)) < 1e-9 * max(1.0, np.abs(ref).max())
    assert np.sum(ours) == pytest.approx(np.trace(m), abs=1e-9)


def test_alt_jacobian_examples():
    eigs = cv.eigenvalues_2x2(cv.jacobian_alt(1, -1, 1.0))
    assert cv.alpha(1, -1, 1.0) == 1.0
    assert sorted(eigs, key=lambda z: z.imag)[1] == pytest.approx(0.5 + math.sqrt(3) / 2 * 1j)
    assert cv.spectral_radius(eigs) == pytest.approx(1.0, abs=1e-12)
    eigs = cv.eigenvalues_2x2(cv.jacobian_alt(1, -1, 1.0, gamma=0.75))
    assert cv.alpha(1, -1, 1.0, gamma=0.75) == 0.5
    assert eigs[0].real == pytest.approx(0.875)
    assert cv.spectral_radius(eigs) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(cv.jacobian_alt(2.0, 2.0, 0.7), np.eye(2))


@pytest.mark.parametrize("order", cv.ORDERS)
@pytest.mark.parametrize("nd,ne,gamma", [(1, 1, 1.0), (3, 2, 0.8), (5, 1, 0.6)])
def test_alt_jacobian_linearises_the_dynamics(order, nd, ne, gamma):
    game = cv.DiracGame(0.7, -0.4)
    scheme = cv.GdScheme("alternating", 0.3, nd, ne, gamma)

    def one_round(e, d):
        t = cv.simulate_training(game, scheme, 1, (e, d), order)
        return t.theta_e[-1], t.theta_d[-1]

    np.testing.assert_allclose(
        _numeric_jacobian(one_round, (0.0, 0.0)),
        cv.jacobian_alt(0.7, -0.4, 0.3, nd, ne, gamma, order),
        atol=1e-7,
    )


def test_sim_jacobian_linearises_the_dynamics():
    game = cv.DiracGame(1.0, -0.5)
    scheme = cv.GdScheme("simultaneous", 0.4, gamma=0.9)

    def one_step(e, d):
        t = cv.simulate_training(game, scheme, 1, (e, d))
        return t.theta_e[-1], t.theta_d[-1]

    np.testing.assert_allclose(_numeric_jacobian(one_step, (0, 0)), cv.jacobian_sim(1.0, -0.5, 0.4, 0.9), atol=1e-7)


def test_orders_share_spectrum():
    a = cv.jacobian_alt(1, -1, 0.9, 2, 3, 0.8, "encoder_first")
    b = cv.jacobian_alt(1, -1, 0.9, 2, 3, 0.8, "disc_first")
    np.testing.assert_allclose(sorted(np.abs(np.linalg.eigvals(a))), sorted(np.abs(np.linalg.eigvals(b))), atol=1e-12)


def test_eta_threshold_examples():
    assert cv.eta_threshold(1, -1) == 2
    assert cv.eta_threshold(1, -1, gamma=0.75) == 4
    assert cv.eta_threshold(1, -1, 4, 1) == 1
    assert cv.eta_threshold(1, 1) == math.inf


def test_radius_is_one_iff_below_threshold():
    thr = cv.eta_threshold(1, -1, 2, 1, 0.9)
    for eta in np.linspace(0.05, 2 * thr, 41):
        r = cv.spectral_radius(cv.eigenvalues_2x2(cv.jacobian_alt(1, -1, eta, 2, 1, 0.9)))
        assert (abs(r - 1) < 1e-9) == (eta <= thr * (1 + 1e-12))


def test_eigen_report():
    rep = cv.eigen_report(cv.DiracGame(1, -1), cv.GdScheme("alternating", 0.5))
    d = rep.to_dict()
    assert d["eta_threshold"] == 2 and d["spectral_radius"] == pytest.approx(1.0)
    sim = cv.eigen_report(cv.DiracGame(1, -1), cv.GdScheme("simultaneous", 0.5))
    assert sim.eta_threshold is None and sim.spectral_radius > 1


def test_objective_derivative_matches_differences():
    game = cv.DiracGame(0.8, -1.3)
    for gamma in (1.0, 0.7):
        for a in (-2.0, 0.0, 0.4, 3.0):
            h = 1e-6
            num = (cv.objective(game, gamma, a + h, 1.0) - cv.objective(game, gamma, a - h, 1.0)) / (2 * h)
            assert cv.dobjective_da(game, gamma, a) == pytest.approx(num, abs=1e-8)


def test_equilibrium_is_fixed():
    for kind in ("simultaneous", "alternating"):
        t = cv.simulate_training(cv.DiracGame(1, -1), cv.GdScheme(kind, 0.5), 100, (0.0, 0.0))
        assert set(t.theta_e) == {0.0} and set(t.theta_d) == {0.0}


def test_simultaneous_diverges():
    t = cv.simulate_training(cv.DiracGame(1, -1), cv.GdScheme("simultaneous", 0.5), 10_000, (0.01, 0.01))
    assert t.distance[-1] > 10 * t.distance[0]


@pytest.mark.parametrize("order", cv.ORDERS)
def test_alternating_below_threshold_is_bounded(order):
    thr = cv.eta_threshold(1, -1)
    t = cv.simulate_training(cv.DiracGame(1, -1), cv.GdScheme("alternating", 0.95 * thr), 10_000, (0.01, 0.01), order)
    assert not t.diverged
    assert t.distance.max() < 100 * t.distance[0]


def test_divergence_flag_cuts_trajectory():
    # the bounded sigmoid keeps far-field steps finite, so start past the limit
    t = cv.simulate_training(cv.DiracGame(1, -1), cv.GdScheme("alternating", 0.5), 100, (2e6, 1.0))
    assert t.diverged and t.step == [0]
    t = cv.simulate_training(cv.DiracGame(1, -1), cv.GdScheme("alternating", 0.5), 100, (math.nan, 1.0))
    assert t.diverged


def test_validation():
    with pytest.raises(ValueError):
        cv.GdScheme("adam")
    with pytest.raises(ValueError):
        cv.GdScheme(gamma=0.5)
    with pytest.raises(ValueError):
        cv.jacobian_sim(1, 0, -0.1)
    with pytest.raises(ValueError):
        cv.simulate_training(cv.DiracGame(1, 0), cv.GdScheme(), 10, order="random")
