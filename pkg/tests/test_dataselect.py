import numpy as np
import pytest

from racer.dataselect import (
    ADDED, REJECTED_LOW_INFO, REJECTED_OUTLIER, REPLACED, SelectionPolicy, Selector, consider,
    loo_variances, reject_outlier,
)
from racer.gp import SE, GpDataset, KernelSpec, fit

KERN = KernelSpec(SE, 1.0, (1.0,))


def refit_loo(Z, Y, kern, noise):
    """LOO variances by refitting without each point."""
    out = np.empty((len(Z), Y.shape[1]))
    for i in range(len(Z)):
        keep = np.arange(len(Z)) != i
        if keep.sum() == 0:
            out[i] = kern.variance
            continue
        out[i] = fit((Z[keep], Y[keep]), kern, noise).predict(Z[i])[1]
    return out


def oracle_decision(Z, Y, kern, noise, z, y, capacity, k_out=3.0):
    model = fit((Z, Y), kern, noise)
    mu, var = model.predict(z)
    if np.any(np.abs(y - mu) > k_out * (np.sqrt(var) + np.sqrt(noise))):
        return (REJECTED_OUTLIER, -1)
    loo = refit_loo(Z, Y, kern, noise)
    med = np.median(loo, axis=0)
    if not any(var[d] > med[d] for d in range(len(var))):
        return (REJECTED_LOW_INFO, -1)
    if len(Z) < capacity:
        return (ADDED, len(Z))
    best = None
    for d in range(len(var)):
        i = min(range(len(Z)), key=lambda j: (loo[j, d], j))
        ratio = var[d] / loo[i, d] if loo[i, d] > 0 else np.inf
        if best is None or ratio > best[0]:
            best = (ratio, i)
    return (REPLACED, best[1])


def test_loo_far_apart_points_near_prior():
    m = fit(([[0.0], [10.0]], [0.0, 0.0]), KERN, 1e-6)
    assert np.allclose(loo_variances(m), 1.0, atol=1e-6)


def test_loo_duplicated_pair():
    noise = 0.01
    m = fit(([[0.0], [0.0]], [0.0, 0.0]), KERN, noise)
    one = fit(([[0.0]], [0.0]), KERN, noise).predict(np.array([0.0]))[1]
    assert np.allclose(loo_variances(m)[:, 0], one[0], rtol=1e-9)
    assert loo_variances(m)[0, 0] < 0.02


def test_loo_matches_refit():
    rng = np.random.default_rng(0)
    Z = rng.uniform(-2, 2, (25, 2))
    Y = rng.normal(size=(25, 2))
    kern = KernelSpec(SE, 1.3, (0.7, 1.1))
    noise = np.array([0.02, 0.05])
    assert np.allclose(loo_variances(fit((Z, Y), kern, noise)), refit_loo(Z, Y, kern, noise), atol=1e-6)


def test_far_candidate_added():
    ds = GpDataset.from_arrays([[0.0], [0.1]], [0.0, 0.0], capacity=10)
    m = fit(ds, KERN, 0.01)
    assert m.predict(np.array([5.0]))[1][0] == pytest.approx(1.0, abs=1e-4)
    out = consider(ds, m, [5.0], [0.0], SelectionPolicy(capacity=10))
    assert out.decision == ADDED and len(ds) == 3


def test_duplicate_at_capacity_rejected():
    Z = np.array([[0.0], [0.05], [0.1], [3.0]])
    ds = GpDataset.from_arrays(Z, np.zeros(4), capacity=4)
    m = fit(ds, KERN, 0.01)
    out = consider(ds, m, [0.05], [0.0], SelectionPolicy(capacity=4))
    assert out.decision == REJECTED_LOW_INFO


def test_replacement_at_capacity_matches_refit():
    Z = np.array([[0.0], [0.2], [2.0]])
    Y = np.zeros((3, 1))
    ds = GpDataset.from_arrays(Z, Y, capacity=3)
    m = fit(ds, KERN, 0.01)
    out = consider(ds, m, [6.0], [0.0], SelectionPolicy(capacity=3))
    loo = refit_loo(Z, Y, KERN, np.array([0.01]))
    assert out.decision == REPLACED and out.index == int(np.argmin(loo[:, 0]))
    assert ds.Z[out.index, 0] == 6.0


def test_outlier_rule():
    # far from the data: mu = 0 and posterior std = prior std = 0.1; noise std 0.1
    m = fit(([[0.0]], [0.0]), KernelSpec(SE, 0.01, (1.0,)), 0.01)
    pol = SelectionPolicy(k_out=3.0)
    mu, var = m.predict(np.array([50.0]))
    assert mu[0] == pytest.approx(0.0, abs=1e-12) and var[0] == pytest.approx(0.01)
    assert reject_outlier(m, [50.0], [1.0], pol)
    assert not reject_outlier(m, [50.0], [0.0], pol)
    assert not reject_outlier(m, [50.0], [0.59], pol)


def test_outlier_boundary_is_strict():
    # zero-mean prior far from data: mu = 0, std = 1 + 0.1
    m = fit(([[0.0]], [0.0]), KERN, 0.01)
    pol = SelectionPolicy(k_out=2.0)
    _, var = m.predict(np.array([50.0]))
    bound = 2.0 * (np.sqrt(var[0]) + np.sqrt(0.01))
    assert not reject_outlier(m, [50.0], [bound], pol)
    assert reject_outlier(m, [50.0], [np.nextafter(bound, 10)], pol)


@pytest.mark.parametrize("seed", range(6))
def test_consider_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    capacity = 1 + seed % 6
    noise = np.array([0.02, 0.05])
    kern = KernelSpec(SE, 1.0, (0.8, 1.2))
    ds = GpDataset.from_arrays(rng.uniform(-1, 1, (1, 2)), rng.normal(0, 0.3, (1, 2)), capacity=capacity)
    for _ in range(40):
        z = rng.uniform(-2, 2, 2)
        y = np.sin(z) + rng.normal(0, 0.2, 2)
        if rng.random() < 0.1:
            y = y + 5.0
        Z, Y = ds.Z.copy(), ds.Y.copy()
        want = oracle_decision(Z, Y, kern, noise, z, y, capacity)
        got = consider(ds, fit(ds, kern, noise), z, y, SelectionPolicy(capacity=capacity))
        assert (got.decision, got.index) == want
        assert len(ds) <= capacity


def test_permuted_storage_same_decision():
    rng = np.random.default_rng(1)
    Z = rng.uniform(-1, 1, (5, 2))
    Y = rng.normal(0, 0.1, (5, 2))
    kern, noise = KernelSpec(SE, 1.0, (1.0, 1.0)), np.array([0.01, 0.01])
    z, y = np.array([3.0, -3.0]), np.zeros(2)
    perm = rng.permutation(5)
    a = GpDataset.from_arrays(Z, Y, capacity=5)
    b = GpDataset.from_arrays(Z[perm], Y[perm], capacity=5)
    oa = consider(a, fit(a, kern, noise), z, y, SelectionPolicy(capacity=5))
    ob = consider(b, fit(b, kern, noise), z, y, SelectionPolicy(capacity=5))
    assert oa.decision == ob.decision == REPLACED
    assert np.array_equal(Z[oa.index], Z[perm][ob.index])


def test_selector_bootstraps_and_protects_fresh_slots():
    ds = GpDataset(1, 1, capacity=3)
    sel = Selector(ds, SelectionPolicy(capacity=3))
    for z in (0.0, 0.1, 0.2):
        assert sel.consider([z], [0.0]).decision == ADDED
    sel.refresh(fit(ds, KERN, 0.01))
    first = sel.consider([5.0], [0.0])
    second = sel.consider([-5.0], [0.0])
    assert first.decision == second.decision == REPLACED
    assert first.index != second.index
    assert sel.counts[REPLACED] == 2


def test_selector_equals_consider_on_fresh_model():
    rng = np.random.default_rng(3)
    Z, Y = rng.uniform(-1, 1, (4, 1)), rng.normal(0, 0.1, (4, 1))
    a = GpDataset.from_arrays(Z, Y, capacity=4)
    b = GpDataset.from_arrays(Z, Y, capacity=4)
    m = fit(a, KERN, 0.01)
    sel = Selector(b, SelectionPolicy(capacity=4), m)
    z, y = [2.5], [0.0]
    assert consider(a, m, z, y, SelectionPolicy(capacity=4)) == sel.consider(z, y)
