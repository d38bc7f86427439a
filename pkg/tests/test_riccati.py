import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiscale_hinf import NodeParams, TreeTopology, bisect_gamma, gain, max_gamma, riccati_step, sweep
from multiscale_hinf.riccati import feasibility_grid, is_feasible, middle_matrix, observed_masks, step_feasible
from multiscale_hinf.tree import NodeId

from conftest import random_model, random_pd, scalar_model

UNIT = NodeParams(A=1.0, B=1.0, C=1.0, L=1.0, Q=1.0, R=1.0)


def kalman_predict_update(P, prm):
    """Textbook covariance update then propagation."""
    S = prm.R + prm.C @ P @ prm.C.T
    Pu = P - P @ prm.C.T @ np.linalg.solve(S, prm.C @ P)
    return prm.A @ Pu @ prm.A.T + prm.B @ prm.B.T


def test_middle_matrix_examples():
    one = np.eye(1)
    np.testing.assert_array_equal(middle_matrix(np.eye(2), np.eye(2), np.zeros((1, 2)), one, 0.0), np.eye(2))
    assert middle_matrix(one, one, one, one, 0.1)[0, 0] == pytest.approx(1.9, abs=1e-15)
    assert middle_matrix(one, one, one, one, 2.5)[0, 0] == pytest.approx(-0.5, abs=1e-15)


def test_riccati_step_examples():
    zero_a = NodeParams(A=np.zeros((2, 2)), B=np.eye(2), C=np.eye(2), L=np.eye(2), Q=np.eye(2), R=np.eye(2))
    for P in (np.eye(2), 5 * np.eye(2)):
        np.testing.assert_allclose(riccati_step(P, zero_a, 0.3), np.eye(2), atol=1e-15)
    no_obs = NodeParams(A=1.0, B=1.0, C=0.0, L=1.0, Q=1.0, R=1.0)
    assert riccati_step(np.eye(1), no_obs, 0.0)[0, 0] == 2.0
    assert riccati_step(np.eye(1), UNIT, 0.1)[0, 0] == pytest.approx(1 / 1.9 + 1, abs=1e-12)


def test_gain_examples():
    no_obs = NodeParams(A=1.0, B=1.0, C=0.0, L=1.0, Q=1.0, R=1.0)
    assert gain(np.eye(1), no_obs, 0.3)[0, 0] == 0.0
    assert gain(np.eye(1), UNIT, 0.0)[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert gain(np.eye(1), UNIT, 0.1)[0, 0] == pytest.approx(1 / 1.9, abs=1e-12)
    assert gain(np.eye(1), UNIT, 0.1, observed=False)[0, 0] == 0.0


def test_unobserved_step_keeps_gamma_term():
    # P (1 - gamma P)^{-1} + 1 with gamma = 0.1
    assert riccati_step(np.eye(1), UNIT, 0.1, observed=False)[0, 0] == pytest.approx(1 / 0.9 + 1, abs=1e-12)


def test_tiny_gamma_always_feasible(rng):
    for _ in range(10):
        model = random_model(rng, 3, 2, 2, 2, heterogeneous=True)
        assert is_feasible(model, 1e-6)


def test_scalar_infeasible_at_level_one():
    model = scalar_model(depth=3)
    state = sweep(model, gamma=2.1)
    assert not state.feasible
    assert state.first_failure == NodeId(1, 1)
    assert list(state.P.level_range) == [0]


def test_step_feasible_scalar_threshold():
    one = np.eye(1)
    assert step_feasible(one, one, one, one, 1.99)
    assert not step_feasible(one, one, one, one, 2.01)
    assert not step_feasible(-one, one, one, one, 0.0)


def test_level_homogeneity_identity_model():
    model = scalar_model(depth=5, gamma=0.5)
    state = sweep(model)
    for k in state.P.level_range:
        P = state.P.level(k)
        assert P.shape[0] == 2**k
        assert np.all(P == P[0])


def test_uniform_scalar_trend_matches_scalar_recursion():
    model = scalar_model(depth=6, gamma=0.3)
    P, expect = 1.0, [1.0]
    for _ in range(6):
        P = P / (1 - 0.3 * P + P) + 1
        expect.append(P)
    np.testing.assert_allclose([p.item() for p in sweep(model).levels], expect, rtol=1e-13)


def test_bisection_scalar_one_step():
    g = max_gamma(scalar_model(depth=1), 0.1, 10.0, 1e-4)
    assert abs(g - 2.0) <= 1e-4


def test_bisection_errors():
    model = scalar_model(depth=2)
    with pytest.raises(ValueError):
        max_gamma(model, 1.0, 1.0, 1e-4)
    with pytest.raises(ValueError):
        max_gamma(model, 5.0, 10.0, 1e-4)
    with pytest.raises(ValueError):
        max_gamma(model, 0.1, 10.0, 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(2, 4), st.integers(1, 3))
def test_bisection_postcondition(seed, depth, arity, n):
    rng = np.random.default_rng(seed)
    model = random_model(rng, depth, arity, n, 2)
    tol = 1e-4
    g = max_gamma(model, 1e-6, 1e6, tol)
    assert is_feasible(model, g)
    assert not is_feasible(model, g + 2 * tol)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4))
def test_zero_gamma_matrix_inversion_lemma(seed, n, p):
    rng = np.random.default_rng(seed)
    prm = NodeParams(
        A=rng.standard_normal((n, n)),
        B=rng.standard_normal((n, n)),
        C=rng.standard_normal((p, n)),
        L=np.eye(n),
        Q=np.eye(n),
        R=random_pd(rng, p),
    )
    P = random_pd(rng, n)
    info = prm.C.T @ np.linalg.solve(prm.R, prm.C)
    info_form = prm.A @ P @ np.linalg.inv(np.eye(n) + info @ P) @ prm.A.T + prm.B @ prm.B.T
    ours = riccati_step(P, prm, 0.0)
    ref = kalman_predict_update(P, prm)
    scale = np.linalg.norm(ref)
    assert np.linalg.norm(ours - ref) <= 1e-10 * scale
    assert np.linalg.norm(info_form - ref) <= 1e-10 * scale


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.9))
def test_returned_covariances_symmetric(seed, frac):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, 2, 3, 2, heterogeneous=True)
    g = frac * max_gamma(model, 1e-8, 1e6, 1e-6)
    state = sweep(model, gamma=max(g, 1e-8))
    assert state.feasible
    for P in state.levels:
        asym = np.linalg.norm(P - np.swapaxes(P, -1, -2), axis=(-2, -1))
        assert np.all(asym <= 1e-12 * np.linalg.norm(P, axis=(-2, -1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_feasibility_flips_at_most_once(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, 2, 2, 2, heterogeneous=True)
    g = max_gamma(model, 1e-8, 1e6, 1e-6)
    grid = np.linspace(0.0, 2.0 * g, 41)[1:]
    flags, flips = feasibility_grid(lambda x: is_feasible(model, x), grid)
    assert flips <= 1
    assert flags[0]


def test_scalar_middle_matrix_decreasing_in_gamma():
    one = np.eye(1)
    vals = [middle_matrix(one, one, one, one, g)[0, 0] for g in np.linspace(0, 3, 31)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_missing_level_inflates_next_level():
    model = scalar_model(depth=4, gamma=0.1)
    full = sweep(model).levels
    gap = sweep(model, observed_masks(model.topology, missing_levels=[2])).levels
    for k in (0, 1, 2):
        assert gap[k].item() == full[k].item()
    assert gap[3].item() > full[3].item()


def test_failure_attributed_to_node_missing_a_solution():
    # a single leaf-level parent with weaker measurement fails before its siblings
    from multiscale_hinf import GameWeights
    from multiscale_hinf.model import MultiscaleModel

    topo = TreeTopology(2, 2)
    params = {nd: UNIT for nd in topo.level_order()}
    params[NodeId(1, 2)] = NodeParams(A=1.0, B=1.0, C=1.0, L=1.0, Q=1.0, R=100.0)
    model = MultiscaleModel.from_node_params(topo, params, GameWeights(1.0, [0.0], [[1.0]]))
    g = max_gamma(model, 1e-6, 10.0, 1e-8)
    state = sweep(model, gamma=g + 1e-4)
    assert state.first_failure == NodeId(2, 3)
