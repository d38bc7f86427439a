import numpy as np
import pytest

from multiscale_hinf import GameWeights, NodeParams, TreeTopology, uniform_model
from multiscale_hinf.model import MultiscaleModel
from multiscale_hinf.tree import NodeId


def scalar_model(depth=1, arity=2, *, A=1.0, B=1.0, C=1.0, L=1.0, Q=1.0, R=1.0, p0=1.0, x0=0.0, gamma=1.0):
    params = NodeParams(A=A, B=B, C=C, L=L, Q=Q, R=R)
    return uniform_model(TreeTopology(depth, arity), params, GameWeights(gamma, [x0], [[p0]]))


def random_pd(rng, n, floor=0.1):
    X = rng.standard_normal((n, n))
    return X @ X.T / n + floor * np.eye(n)


def random_params(rng, n, p, q=None, r=None):
    q = n if q is None else q
    r = n if r is None else r
    return NodeParams(
        A=rng.standard_normal((n, n)) * 0.6,
        B=rng.standard_normal((n, q)) * 0.5,
        C=rng.standard_normal((p, n)),
        L=rng.standard_normal((r, n)),
        Q=random_pd(rng, r),
        R=random_pd(rng, p),
    )


def random_model(rng, depth, arity, n, p, heterogeneous=False, gamma=1.0):
    topo = TreeTopology(depth, arity)
    weights = GameWeights(gamma, rng.standard_normal(n), random_pd(rng, n))
    if not heterogeneous:
        return uniform_model(topo, random_params(rng, n, p), weights)
    params = {nd: random_params(rng, n, p) for nd in topo.level_order()}
    return MultiscaleModel.from_node_params(topo, params, weights)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ROOT = NodeId(0, 1)
