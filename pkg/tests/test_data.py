import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from elslab.data import (
    CircleConfig,
    DomainDataset,
    circle_arc,
    gen_circle,
    gen_disjoint_support,
    gen_two_gaussians,
    partial_labels,
    random_partition,
)


@pytest.fixture(scope="module")
def circle():
    return gen_circle(CircleConfig(seed=3))


def test_circle_is_deterministic(circle):
    assert gen_circle(CircleConfig(seed=3)).to_csv() == circle.to_csv()
    assert gen_circle(CircleConfig(seed=4)).to_csv() != circle.to_csv()


def test_circle_balance_and_split(circle):
    for d in range(30):
        y = circle.y[circle.env_true == d]
        assert len(y) == 100 and y.sum() == 50
    assert circle.source_domains == tuple(range(6))
    assert circle.target_domains == tuple(range(6, 30))


def test_circle_angles_inside_arcs(circle):
    ang = np.arctan2(circle.x[:, 1], circle.x[:, 0])
    for d in range(30):
        lo, hi = circle_arc(d, 30)
        a = ang[circle.env_true == d]
        assert (a >= lo - 1e-12).all() and (a <= hi + 1e-12).all()
    # domain 0 (first source) sits next to angle pi, the last one next to 0
    assert circle_arc(0, 30)[1] == pytest.approx(math.pi)
    assert circle_arc(29, 30)[0] == pytest.approx(0.0, abs=1e-15)


def test_circle_oracle_radial_classifier(circle):
    # radial noise = margin / 4, so the ||x|| < r rule errs only beyond 4 sigma
    pred = (np.linalg.norm(circle.x, axis=1) < 1.0).astype(int)
    for d in range(30):
        m = circle.env_true == d
        assert np.mean(pred[m] == circle.y[m]) >= 0.99


def test_circle_config_validation():
    with pytest.raises(ValueError):
        CircleConfig(n_domains=1)
    with pytest.raises(ValueError):
        CircleConfig(radial_noise=0)
    with pytest.raises(ValueError):
        CircleConfig(points_per_domain=7)


def test_two_gaussians_identical_means():
    ds = gen_two_gaussians([0.0, 0.0], [0.0, 0.0], 1.0, 5000, seed=1)
    # best threshold on the first coordinate, fitted on the data itself
    x, env = ds.x[:, 0], ds.env_true
    best = max(max(np.mean((x > c) == env), np.mean((x <= c) == env)) for c in np.quantile(x, np.linspace(0.01, 0.99, 99)))
    assert best < 0.5 + 4 * math.sqrt(0.25 / len(x))


def test_two_gaussians_far_apart():
    ds = gen_two_gaussians([-5.0], [5.0], 1.0, 5000, seed=2)
    acc = np.mean((ds.x[:, 0] > 0).astype(int) == ds.env_true)
    assert acc >= 0.999
    assert set(np.unique(ds.y)) == {0, 1}
    np.testing.assert_array_equal(ds.y, (ds.x[:, 0] > 0).astype(int))


def test_two_gaussians_reproducible():
    a = gen_two_gaussians([0, 1], [1, 0], 0.5, 100, seed=9)
    b = gen_two_gaussians([0, 1], [1, 0], 0.5, 100, seed=9)
    assert a.to_csv() == b.to_csv()
    with pytest.raises(ValueError):
        gen_two_gaussians([0], [1], 0.0, 10)


def test_disjoint_support():
    ds = gen_disjoint_support(1.0, 1000, seed=5)
    x0, x1 = ds.x[ds.env_true == 0, 0], ds.x[ds.env_true == 1, 0]
    assert x1.min() - x0.max() >= 1.0
    assert np.all((ds.x[:, 0] > 1.5) == (ds.env_true == 1))
    assert gen_disjoint_support(1.0, 1000, seed=5).to_csv() == ds.to_csv()
    with pytest.raises(ValueError):
        gen_disjoint_support(0.0, 10)


def test_random_partition_independent_of_truth():
    base = gen_circle(CircleConfig(n_domains=4, points_per_domain=2500, n_source=2, seed=1))
    part = random_partition(base, 4, seed=2)
    table = np.zeros((4, 4))
    np.add.at(table, (part.env_true, part.env_observed), 1)
    assert stats.chi2_contingency(table).pvalue > 0.01
    np.testing.assert_array_equal(part.env_true, base.env_true)
    assert part.num_domains == 4


def test_random_partition_groups_nonempty_and_deterministic():
    base = gen_disjoint_support(1.0, 150, seed=0)
    for m in (2, 3):
        p = random_partition(base, m, seed=7)
        assert len(np.unique(p.env_observed)) == m
        np.testing.assert_array_equal(p.env_observed, random_partition(base, m, seed=7).env_observed)
    with pytest.raises(ValueError):
        random_partition(base, 1)


def test_partial_labels_extremes(circle):
    np.testing.assert_array_equal(partial_labels(circle, 1.0).env_observed, circle.env_true)
    assert np.all(partial_labels(circle, 0.0).env_observed != circle.env_true)


def test_partial_labels_share():
    base = gen_circle(CircleConfig(n_domains=5, points_per_domain=2000, n_source=2, seed=0))
    obs = partial_labels(base, 0.3, seed=1)
    assert abs(np.mean(obs.env_observed == obs.env_true) - 0.3) <= 0.01
    assert obs.env_observed.max() < 5


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_partial_labels_commute_with_shuffling(frac, seed):
    # corrupting then permuting keeps every point's (true, observed) pair valid
    base = gen_disjoint_support(0.5, 50, seed=seed)
    obs = partial_labels(base, frac, seed)
    perm = np.random.default_rng(seed).permutation(len(base))
    shuffled = obs.subset(perm)
    assert np.sum(shuffled.env_observed == shuffled.env_true) == np.sum(obs.env_observed == obs.env_true)


def test_csv_roundtrip(circle):
    text = circle.to_csv()
    assert text.splitlines()[0] == "x0,x1,class,env_true,env_observed"
    back = DomainDataset.from_csv(text, circle.source_domains, circle.target_domains, 30)
    np.testing.assert_array_equal(back.x, circle.x)
    np.testing.assert_array_equal(back.env_observed, circle.env_observed)
    one_d = gen_disjoint_support(1.0, 3)
    assert one_d.to_csv().splitlines()[0] == "x0,class,env_true,env_observed"


def test_dataset_invariants():
    with pytest.raises(ValueError):
        DomainDataset(np.zeros((2, 1)), np.zeros(2, int), np.zeros(2, int), np.array([0, 3]), 2, (0,), (1,))
    with pytest.raises(ValueError):
        DomainDataset(np.zeros((2, 1)), np.zeros(2, int), np.zeros(2, int), np.zeros(2, int), 2, (0, 1), (1,))
