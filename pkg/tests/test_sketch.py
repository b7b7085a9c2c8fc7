import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hoattn import tensor as T
from hoattn.errors import CapacityError, DimensionError
from hoattn.sketch import (
    CountSketchParams,
    SketchStack,
    brute_force_sketch_outer,
    circular_convolve,
    count_sketch,
    mcb,
    mcb_two_layer,
    mct,
    signed_sqrt_l2,
    tensor_sketch,
)


def identity(d, seed=0):
    return CountSketchParams.from_maps(np.arange(d), np.ones(d), d, seed)


def test_count_sketch_examples():
    p = identity(2)
    assert np.array_equal(count_sketch(np.zeros(2), p), np.zeros(2))
    assert np.array_equal(count_sketch(np.array([3.0, 5.0]), p), [3.0, 5.0])
    q = CountSketchParams.from_maps([0, 0], [1, -1], 2)
    assert np.array_equal(count_sketch(np.array([3.0, 5.0]), q), [-2.0, 0.0])


def test_count_sketch_matches_loop_and_rejects_wrong_length():
    p = CountSketchParams.from_seed(20, 7, seed=11)
    a = np.random.default_rng(0).normal(size=20)
    assert np.max(np.abs(count_sketch(a, p) - oracles.count_sketch(a, p.h, p.s, 7))) < 1e-12
    with pytest.raises(DimensionError):
        count_sketch(np.zeros(19), p)


def test_sketch_params_regenerate_bitwise():
    a, b = CountSketchParams.from_seed(50, 16, 123), CountSketchParams.from_seed(50, 16, 123)
    assert a.h.tobytes() == b.h.tobytes() and a.s.tobytes() == b.s.tobytes()
    assert set(np.unique(a.s)) <= {-1, 1} and a.h.max() < 16


def test_sketch_stack_invariants():
    with pytest.raises(ValueError):
        SketchStack.from_seeds([3, 3], 8, [1, 1])
    with pytest.raises(ValueError):
        SketchStack([CountSketchParams.from_seed(3, 8, 1), CountSketchParams.from_seed(3, 4, 2)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_count_sketch_is_linear(seed, alpha, beta):
    p = CountSketchParams.from_seed(12, 5, seed)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 12))
    lhs = count_sketch(alpha * a + beta * b, p)
    rhs = alpha * count_sketch(a, p) + beta * count_sketch(b, p)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_circular_convolve_examples():
    assert np.allclose(circular_convolve(np.array([1.0, 0, 0]), np.array([0.0, 1, 0])), [0, 1, 0], atol=0)
    v = np.random.default_rng(0).normal(size=9)
    assert np.array_equal(circular_convolve(np.eye(9)[0], v), v)
    with pytest.raises(DimensionError):
        circular_convolve(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("n", [5, 64, 65, 128])
def test_circular_convolve_matches_direct_sum(n):
    rng = np.random.default_rng(n)
    u, v = rng.normal(size=(2, n))
    ref = oracles.circular_convolve(u, v)
    for method in ("auto", "direct", "fft"):
        assert np.max(np.abs(circular_convolve(u, v, method) - ref)) < 1e-9


def test_tensor_sketch_examples():
    stack = SketchStack([identity(2, 1), identity(2, 2)])
    assert np.array_equal(tensor_sketch([np.array([1.0, 0]), np.array([1.0, 0])], stack), [1.0, 0.0])
    rand = SketchStack.from_seeds([4, 4], 8, [5, 6])
    assert np.array_equal(tensor_sketch([np.zeros(4), np.ones(4)], rand), np.zeros(8))
    with pytest.raises(DimensionError):
        tensor_sketch([np.ones(4)], rand)


@pytest.mark.parametrize("k", [2, 3])
def test_tensor_sketch_matches_brute_force(k):
    rng = np.random.default_rng(k)
    for trial in range(20):
        d_ins = [4] * k if trial == 0 else list(rng.integers(1, 9, size=k))
        d_out = 8 if trial % 2 else 16
        stack = SketchStack.from_seeds(d_ins, d_out, list(rng.choice(10**9, size=k, replace=False)))
        vecs = [rng.normal(size=n) for n in d_ins]
        assert np.max(np.abs(tensor_sketch(vecs, stack) - brute_force_sketch_outer(vecs, stack))) < 1e-9


def test_brute_force_zero_and_capacity():
    stack = SketchStack.from_seeds([3, 3], 8, [1, 2])
    assert np.array_equal(brute_force_sketch_outer([np.zeros(3), np.ones(3)], stack), np.zeros(8))
    big = SketchStack.from_seeds([1001, 1000], 8, [1, 2])
    with pytest.raises(CapacityError):
        brute_force_sketch_outer([np.ones(1001), np.ones(1000)], big)


def test_mcb_examples():
    stack = SketchStack([identity(2, 1), identity(2, 2)])
    assert np.array_equal(mcb(np.zeros(2), np.ones(2), stack), np.zeros(2))
    assert np.array_equal(mcb(np.array([1.0, 2.0]), np.array([1.0, 0.0]), stack), [1.0, 2.0])


def test_mcb_inner_product_expectation():
    # c, e correlated with a, b so the target is far from zero relative to the sampling error
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 6))
    c, e = a + 0.5 * rng.normal(size=6), b + 0.5 * rng.normal(size=6)
    expected = (a @ c) * (b @ e)
    seeds = np.random.SeedSequence(99).generate_state(2 * 10_000, dtype=np.uint64)
    total = 0.0
    for t in range(10_000):
        stack = SketchStack.from_seeds([6, 6], 32, [int(seeds[2 * t]), int(seeds[2 * t + 1])])
        total += mcb(a, b, stack) @ mcb(c, e, stack)
    assert abs(total / 10_000 - expected) <= 0.05 * abs(expected)


def test_mct_examples():
    stack = SketchStack([identity(4, i) for i in range(3)])
    deltas = [np.eye(4)[0]] * 3
    assert np.array_equal(mct(*deltas, stack), np.eye(4)[0])
    assert np.array_equal(mct(np.ones(4), np.zeros(4), np.ones(4), stack), np.zeros(4))
    rng = np.random.default_rng(0)
    rand = SketchStack.from_seeds([4, 4, 4], 16, [1, 2, 3])
    vecs = list(rng.normal(size=(3, 4)))
    assert np.max(np.abs(mct(*vecs, rand) - brute_force_sketch_outer(vecs, rand))) < 1e-9


def test_mcb_two_layer_hand_composition():
    inner = SketchStack([identity(2, 1), identity(2, 2)])
    outer = SketchStack([identity(2, 3), identity(2, 4)])
    av, aq, aa = np.array([1.0, 2.0]), np.array([3.0, -1.0]), np.array([0.5, 4.0])
    # (1,2)*(3,-1) = (1*3 + 2*-1, 1*-1 + 2*3) = (1, 5); (1,5)*(0.5,4) = (0.5 + 20, 4 + 2.5)
    assert np.array_equal(mcb_two_layer(av, aq, aa, inner, outer), [20.5, 6.5])
    for zero in range(3):
        args = [av, aq, aa]
        args[zero] = np.zeros(2)
        assert np.array_equal(mcb_two_layer(*args, inner, outer), np.zeros(2))


def test_mcb_two_layer_gradient():
    rng = np.random.default_rng(1)
    inner = SketchStack.from_seeds([5, 5], 16, [1, 2])
    outer = SketchStack.from_seeds([16, 5], 16, [3, 4])
    g = T.Graph()
    av, aq, aa = (g.param(rng.normal(size=5), n) for n in ("v", "q", "a"))
    out = mcb_two_layer(av, aq, aa, inner, outer)
    loss = T.sum(T.mul(out, rng.normal(size=16)))
    assert T.grad_check(g, loss) < 1e-4


def test_norm_preserved_in_expectation():
    a = np.random.default_rng(3).normal(size=64)
    seeds = np.random.SeedSequence(5).generate_state(10_000, dtype=np.uint64)
    total = sum(float(np.sum(count_sketch(a, CountSketchParams.from_seed(64, 128, int(s))) ** 2)) for s in seeds)
    assert abs(total / 10_000 - a @ a) <= 0.05 * (a @ a)


def test_signed_sqrt_l2_unit_norm():
    y = signed_sqrt_l2(np.array([4.0, -9.0, 0.0]))
    assert abs(np.linalg.norm(y) - 1) < 1e-15
    assert np.allclose(y, np.array([2.0, -3.0, 0.0]) / np.sqrt(13), atol=1e-15)
