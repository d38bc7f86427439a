import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multiscale_hinf import (
    ImagePlane,
    NoiseSpec,
    TreeTopology,
    build_pyramid,
    estimates_to_image,
    experiment_model,
    level_values,
    pyramid_to_observations,
    run_kalman,
    step_signal,
)
from multiscale_hinf._levels import LevelMap
from multiscale_hinf.pyramid import build_pyramid_1d, estimates_to_signal, level_to_plane, morton_decode, morton_encode, plane_to_level
from multiscale_hinf.tree import ROOT, NodeId


def block_mean_loop(plane):
    h = plane.shape[0] // 2
    out = np.zeros((h, h))
    for i in range(h):
        for j in range(h):
            out[i, j] = (plane[2 * i, 2 * j] + plane[2 * i, 2 * j + 1] + plane[2 * i + 1, 2 * j] + plane[2 * i + 1, 2 * j + 1]) / 4
    return out


def morton_oracle(index, bits):
    """Decode by de-interleaving the binary string: odd positions are row bits."""
    s = format(index, f"0{2 * bits}b")
    return int(s[0::2] or "0", 2), int(s[1::2] or "0", 2)


def test_two_by_two_mean():
    stack = build_pyramid(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert stack[0].shape == (1, 1) and stack[0][0, 0] == 0.5


def test_constant_image():
    stack = build_pyramid(np.full((16, 16), 0.3))
    for plane in stack.planes:
        np.testing.assert_allclose(plane, 0.3, atol=1e-15)


def test_ramp_against_block_loop():
    ramp = np.arange(16, dtype=float).reshape(4, 4) / 15
    stack = build_pyramid(ramp)
    np.testing.assert_allclose(stack[1], block_mean_loop(ramp), atol=1e-15)
    assert stack.depth == 2 and len(stack) == 3 and stack.arity == 4


def test_bad_images_rejected():
    with pytest.raises(ValueError):
        ImagePlane(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        ImagePlane(np.zeros((6, 6)))
    with pytest.raises(ValueError):
        ImagePlane(np.full((4, 4), 1.5))
    with pytest.raises(ValueError):
        build_pyramid_1d(np.zeros(6))


images = st.integers(1, 6).flatmap(lambda b: arrays(np.float64, (2**b, 2**b), elements=st.floats(0, 1)))


@settings(max_examples=40, deadline=None)
@given(images)
def test_averaging_consistency(img):
    stack = build_pyramid(img)
    for k in range(stack.depth):
        np.testing.assert_allclose(stack[k], block_mean_loop(stack[k + 1]), atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(images)
def test_variance_non_increasing_towards_coarse(img):
    stack = build_pyramid(img)
    var = [float(np.var(p)) for p in stack.planes]
    assert all(a <= b + 1e-12 for a, b in zip(var, var[1:]))


@given(st.integers(0, 4**8 - 1))
def test_morton_matches_string_oracle(index):
    r, c = morton_decode(index)
    assert (int(r), int(c)) == morton_oracle(index, 8)
    assert int(morton_encode(r, c)) == index


def test_z_order_first_level():
    # plane-1 pixels (row, col) in child order of the root: TL, TR, BL, BR
    assert [tuple(map(int, morton_decode(m - 1))) for m in (1, 2, 3, 4)] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    topo = TreeTopology(1, 4)
    plane = np.array([[0.1, 0.2], [0.3, 0.4]])
    col = plane_to_level(plane)
    for child in topo.children(ROOT):
        r, c = morton_decode(child.index - 1)
        assert col[child.index - 1, 0] == plane[r, c]


def test_children_are_pixel_blocks():
    img = np.random.default_rng(0).random((8, 8))
    stack = build_pyramid(img)
    topo = TreeTopology(3, 4)
    for k in range(3):
        coarse, fine = plane_to_level(stack[k])[:, 0], plane_to_level(stack[k + 1])[:, 0]
        for nd in topo.level_nodes(k):
            kids = [c.index - 1 for c in topo.children(nd)]
            assert coarse[nd.index - 1] == pytest.approx(fine[kids].mean(), abs=1e-15)


def test_zero_noise_observations_equal_pixels():
    img = np.random.default_rng(1).random((16, 16))
    stack = build_pyramid(img)
    model, _ = experiment_model(TreeTopology(4, 4))
    sig = pyramid_to_observations(stack, model, NoiseSpec(1.0, 0.0), seed=0)
    for k in range(5):
        np.testing.assert_array_equal(level_to_plane(sig.y.level(k)[:, 0]), stack[k])


def test_measurement_noise_variance():
    img = np.random.default_rng(2).random((256, 256))
    model, noise = experiment_model(TreeTopology(8, 4), measurement_var=0.02)
    sig = pyramid_to_observations(build_pyramid(img), model, noise, seed=5)
    resid = sig.y.level(8) - sig.x.level(8)
    assert abs(np.var(resid) / 0.02 - 1) < 0.3


def test_observation_image_round_trip():
    img = np.random.default_rng(3).random((32, 32))
    stack = build_pyramid(img)
    model, _ = experiment_model(TreeTopology(5, 4))
    sig = pyramid_to_observations(stack, model, NoiseSpec(1.0, 0.0), seed=0)
    for k in range(6):
        np.testing.assert_array_equal(estimates_to_image(sig.x, k).samples, stack[k])


def test_clamping():
    topo = TreeTopology(1, 4)
    lm = LevelMap(topo, [np.array([[0.5]]), np.array([[1.3], [-0.2], [0.4], [1.0]])])
    out = estimates_to_image(lm, 1).samples
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


def test_estimates_to_image_morton_oracle():
    topo = TreeTopology(3, 4)
    vals = np.random.default_rng(4).random((64, 1))
    lm = LevelMap(topo, [np.zeros((4**k, 1)) for k in range(3)] + [vals])
    img = estimates_to_image(lm, 3).samples
    for m in range(64):
        i, j = morton_oracle(m, 3)
        assert img[i, j] == vals[m, 0]
    assert np.array_equal(level_values(lm, 3), vals[:, 0])
    with pytest.raises(ValueError):
        level_values(lm, 4)


def test_step_signal_single_step():
    stack = step_signal(3, [0.5], [0.0, 1.0])
    np.testing.assert_array_equal(stack[3], [0, 0, 0, 0, 1, 1, 1, 1])
    assert stack[0][0] == 0.5


def test_step_signal_constant_and_sizes():
    for plane in step_signal(4, [], [0.7]).planes:
        np.testing.assert_allclose(plane, 0.7)
    stack = step_signal(6, [0.3, 0.6], [0.1, 0.9, 0.4])
    assert [p.size for p in stack.planes] == [2**k for k in range(7)]


def test_step_signal_validation():
    with pytest.raises(ValueError):
        step_signal(3, [0.5], [1.0])
    with pytest.raises(ValueError):
        step_signal(3, [0.7, 0.2], [0, 1, 2])
    with pytest.raises(ValueError):
        step_signal(0, [], [1.0])


def test_dyadic_reports_and_errors():
    stack = step_signal(3, [0.5], [0.0, 1.0])
    model, noise = experiment_model(TreeTopology(3, 2))
    sig = pyramid_to_observations(stack, model, noise, seed=0)
    rep = run_kalman(model, sig)
    assert estimates_to_signal(rep, 3).shape == (8,)
    with pytest.raises(ValueError):
        estimates_to_image(rep, 3)
    quad, _ = experiment_model(TreeTopology(3, 4))
    with pytest.raises(ValueError):
        pyramid_to_observations(stack, quad, noise, seed=0)
    with pytest.raises(ValueError):
        pyramid_to_observations(stack, experiment_model(TreeTopology(2, 2))[0], noise, seed=0)


def test_missing_levels_masked():
    stack = step_signal(4, [0.5], [0.0, 1.0])
    model, noise = experiment_model(TreeTopology(4, 2))
    sig = pyramid_to_observations(stack, model, noise, seed=0, missing_levels=[2])
    assert not sig.observed(2).any() and sig.observed(3).all()
    assert sig.y.level(2).shape == (4, 1)
    assert NodeId(2, 1) not in sig.y
