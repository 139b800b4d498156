import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ksflow import adapt
from ksflow import mesh as ms


@pytest.fixture(scope="module")
def graded_mesh():
    return ms.refine_near_points(ms.build_box_mesh([-2] * 3, [2] * 3, 3), np.zeros((1, 3)), 4)


@pytest.mark.parametrize("mode", adapt.MODES)
def test_affine_density_has_zero_indicator(graded_mesh, mode):
    rho = 1.0 + graded_mesh.vertices @ np.array([0.3, -1.0, 2.0])
    eta = adapt.indicator(graded_mesh, rho, mode)
    assert eta.eta.max() < 1e-20
    assert adapt.indicator(graded_mesh, np.zeros(graded_mesh.n_vertices), mode).total == 0.0


def test_recovery_exact_for_affine(graded_mesh):
    g = np.array([0.3, -1.0, 2.0])
    rec = adapt.recover_gradient(graded_mesh, graded_mesh.vertices @ g)
    assert np.allclose(rec, g, atol=1e-12)


def test_recovery_quadratic_and_smooth_convergence():
    m = ms.build_box_mesh([-1] * 3, [1] * 3, 2)
    errors = []
    for _ in range(3):
        m = ms.refine_uniform(m, 3)
        x, inner = m.vertices, m.interior_vertices
        h = ms.element_sizes(m).h.max()
        rec = adapt.recover_gradient(m, x[:, 0] ** 2)
        exact = np.zeros((len(inner), 3))
        exact[:, 0] = 2 * x[inner, 0]
        assert np.abs(rec[inner] - exact).max() <= h
        rec = adapt.recover_gradient(m, np.sin(x[:, 0] + 2 * x[:, 1]) * x[:, 2])
        c = np.cos(x[inner, 0] + 2 * x[inner, 1]) * x[inner, 2]
        exact = np.column_stack([c, 2 * c, np.sin(x[inner, 0] + 2 * x[inner, 1])])
        errors.append(np.abs(rec[inner] - exact).max())
    assert errors[0] > errors[1] > errors[2]


def test_literal_indicator_decreases_under_uniform_refinement():
    m = ms.build_box_mesh([-2] * 3, [2] * 3, 2)
    f = lambda x: np.exp(-(x ** 2).sum(1))
    totals = []
    for _ in range(4):
        m = ms.refine_uniform(m, 3)
        totals.append(adapt.indicator(m, f(m.vertices)).total)
    assert all(b <= a for a, b in zip(totals[1:], totals[2:])) and totals[-1] < totals[1]


def test_cusp_is_located(graded_mesh):
    rho = np.exp(-2 * np.linalg.norm(graded_mesh.vertices, axis=1))
    h = ms.element_sizes(graded_mesh).h
    for mode in adapt.MODES:
        eta = adapt.indicator(graded_mesh, rho, mode)
        i = eta.eta.argmax()
        assert np.linalg.norm(graded_mesh.centroids[i]) <= 2 * h[i]


def test_mark_examples():
    assert adapt.mark(adapt.IndicatorField(np.array([8.0, 1.0, 1.0])), 0.5).marked.tolist() == [0]
    for m in (1, 2, 7, 10):
        assert len(adapt.mark(adapt.IndicatorField(np.ones(m)), 0.5).marked) == int(np.ceil(m / 2))
    assert len(adapt.mark(adapt.IndicatorField(np.zeros(5)), 0.5).marked) == 0
    with pytest.raises(ValueError):
        adapt.mark(adapt.IndicatorField(np.ones(3)), 1.0)
    # ties are broken by index
    assert adapt.mark(adapt.IndicatorField(np.array([1.0, 2.0, 2.0, 2.0])), 0.4).marked.tolist() == [1, 2]


def brute_force_min_size(eta, theta):
    total = eta.sum()
    for k in range(1, len(eta) + 1):
        if any(eta[list(c)].sum() >= theta * total for c in itertools.combinations(range(len(eta)), k)):
            return k
    return len(eta)


def test_doerfler_minimality_randomized():
    rng = np.random.default_rng(11)
    for trial in range(1000):
        n = rng.integers(1, 9)
        eta = rng.random(n) ** rng.uniform(0.5, 4)
        theta = rng.uniform(0.05, 0.95)
        ms_ = adapt.mark(adapt.IndicatorField(eta), theta).marked
        s = eta[ms_].sum()
        assert s >= theta * eta.sum() * (1 - 1e-12)
        smallest = ms_[np.argmin(eta[ms_])]
        assert eta[ms_].sum() - eta[smallest] < theta * eta.sum()
        assert len(ms_) == brute_force_min_size(eta, theta)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=50), st.floats(0.01, 0.99))
@settings(max_examples=200, deadline=None)
def test_mark_invariants(values, theta):
    eta = np.array(values)
    marked = adapt.mark(adapt.IndicatorField(eta), theta).marked
    if eta.sum() == 0:
        assert len(marked) == 0
    else:
        assert eta[marked].sum() >= theta * eta.sum() * (1 - 1e-12)


def test_indicator_csv(tmp_path, graded_mesh):
    eta = adapt.indicator(graded_mesh, np.exp(-np.linalg.norm(graded_mesh.vertices, axis=1)))
    path = tmp_path / "eta.csv"
    adapt.write_indicator_csv(path, graded_mesh, eta)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (graded_mesh.n_tets, 5)
    assert np.allclose(data[:, 4], eta.eta) and abs(data[:, 4].sum() - eta.total) <= 1e-13 * eta.total
