import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipfree import engine
from clipfree.engine import ConvWeights
from clipfree.errors import StructuralError

import oracles


def random_conv_case(rng):
    groups = int(rng.choice([1, 1, 2, 3]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3, 5]))
    h, w = (int(v) for v in rng.integers(1, 6, size=2))
    x = rng.normal(size=(h, w, cin)).astype(np.float32)
    wt = rng.normal(size=(k, k, cin // groups, cout)).astype(np.float32)
    b = rng.normal(size=cout).astype(np.float32)
    return x, ConvWeights(wt, b, groups)


def test_conv2d_matches_loop_oracle_on_random_cases():
    rng = np.random.default_rng(0)
    for case in range(120):
        x, w = random_conv_case(rng)
        pad = "reflect" if case % 3 == 0 else "zero"
        got = engine.conv2d(x, w, padding=pad)
        ref = oracles.conv2d(x, w.weights, w.bias, w.groups, pad)
        np.testing.assert_allclose(got, ref, atol=1e-5, rtol=1e-6, err_msg=f"case {case}")


def test_conv2d_identity_kernel():
    x = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[1, 1, c, c] = 1
    np.testing.assert_array_equal(engine.conv2d(x, ConvWeights(w, np.zeros(3, np.float32))), x)


def test_conv2d_rejects_bad_shapes():
    x = np.zeros((4, 4, 3), np.float32)
    with pytest.raises(StructuralError, match="channel mismatch"):
        engine.conv2d(x, ConvWeights(np.zeros((3, 3, 2, 4)), np.zeros(4)))
    with pytest.raises(StructuralError, match="odd"):
        engine.conv2d(x, ConvWeights(np.zeros((2, 2, 3, 4)), np.zeros(4)))
    with pytest.raises(StructuralError):
        ConvWeights(np.zeros((3, 3, 3, 4)), np.zeros(3))
    with pytest.raises(StructuralError, match="rank-3"):
        engine.conv2d(np.zeros((4, 4)), ConvWeights(np.zeros((3, 3, 1, 1)), np.zeros(1)))


def test_conv2d_keeps_dtype_and_does_not_mutate():
    rng = np.random.default_rng(1)
    x, w = random_conv_case(rng)
    before = x.copy()
    assert engine.conv2d(x, w).dtype == np.float32
    assert engine.conv2d(x.astype(np.float64), w).dtype == np.float64
    np.testing.assert_array_equal(x, before)


def test_depth_to_space_documented_example():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 9)
    np.testing.assert_array_equal(engine.depth_to_space(x, 3)[..., 0],
                                  [[0, 1, 2], [3, 4, 5], [6, 7, 8]])


def test_depth_to_space_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        b = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)), b * b * co))
        np.testing.assert_array_equal(engine.depth_to_space(x, b), oracles.depth_to_space(x, b))


@given(h=st.integers(1, 4), w=st.integers(1, 4), co=st.integers(1, 3), b=st.integers(1, 3))
@settings(max_examples=50, deadline=None)
def test_space_to_depth_inverts_depth_to_space(h, w, co, b):
    x = np.random.default_rng(h * 100 + w * 10 + co).normal(size=(h, w, b * b * co))
    np.testing.assert_array_equal(engine.space_to_depth(engine.depth_to_space(x, b), b), x)


def test_depth_to_space_bad_channels():
    with pytest.raises(StructuralError, match="divisible"):
        engine.depth_to_space(np.zeros((2, 2, 8)), 3)


def test_anchor_is_nearest_upscale():
    x = np.random.default_rng(3).normal(size=(3, 4, 3)).astype(np.float32)
    up = engine.depth_to_space(engine.nearest_upsample_replicate(x, 3), 3)
    np.testing.assert_array_equal(up, np.repeat(np.repeat(x, 3, axis=0), 3, axis=1))


def test_box_blur_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.uniform(0, 255, size=(int(rng.integers(1, 7)), int(rng.integers(1, 7)), 3))
        np.testing.assert_allclose(engine.box_blur3(x), oracles.box_blur3(x), atol=1e-5)


def test_box_blur_examples():
    c = np.full((5, 5, 3), 77.0)
    np.testing.assert_array_equal(engine.box_blur3(c), c)
    spot = np.zeros((7, 7, 1))
    spot[3, 3] = 90
    out = engine.box_blur3(spot)
    np.testing.assert_allclose(out[2:5, 2:5, 0], 10.0)
    assert out.sum() == pytest.approx(90.0)


@pytest.mark.parametrize("n", [1, 2, 3, 7])
def test_reflect_index_matches_oracle(n):
    for i in range(-3 * n, 4 * n):
        assert engine.reflect_index(i, n) == oracles.reflect(i, n)
    if n > 1:
        assert engine.reflect_index(-1, n) == 1
        assert engine.reflect_index(n, n) == n - 2


def test_activations_and_add():
    x = np.array([[[-2.0, 0.5, 300.0]]])
    np.testing.assert_array_equal(engine.relu(x), [[[0, 0.5, 300]]])
    np.testing.assert_array_equal(engine.clipped_relu(x), [[[0, 0.5, 255]]])
    with pytest.raises(StructuralError):
        engine.clipped_relu(x, 5, 5)
    np.testing.assert_array_equal(engine.add(x, x), 2 * x)
    with pytest.raises(StructuralError, match="shape mismatch"):
        engine.add(x, np.zeros((1, 2, 3)))


def test_integer_input_promoted_to_float32():
    assert engine.relu(np.ones((2, 2, 3), dtype=np.uint8)).dtype == np.float32
