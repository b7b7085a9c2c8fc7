import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hoattn import tensor as T
from hoattn.attention import AttentionParams, attend, attention_forward, combine_potentials, init_combination_weights
from hoattn.errors import ContractError, DimensionError
from hoattn.potentials import PairwiseParams, TernaryParams, UnaryParams, unary_potential


def test_combine_zero_potentials_is_uniform():
    p = combine_potentials([np.zeros(5)] * 4, np.array([1.0, 2, 3, 4, 7.5]))
    assert np.max(np.abs(p - 0.2)) < 1e-15


def test_combine_degenerate_weights_reduce_to_unary_softmax():
    rng = np.random.default_rng(0)
    pots = list(rng.normal(size=(4, 6)))
    p = combine_potentials(pots, np.array([1.0, 0, 0, 0, 0]))
    assert p.tobytes() == T.softmax_1d(pots[0] + 0.0 * pots[1] + 0.0 * pots[2] + 0.0 * pots[3]).tobytes()
    assert np.max(np.abs(p - T.softmax_1d(pots[0]))) < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(-20, 20))
def test_combine_sums_to_one_and_ignores_shifts(seed, c):
    rng = np.random.default_rng(seed)
    pots = list(rng.normal(size=(4, 7)))
    w = rng.normal(size=5)
    p = combine_potentials(pots, w)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
    shifted = [pots[0], pots[1] + c, pots[2], pots[3]]
    assert np.max(np.abs(combine_potentials(shifted, w) - p)) < 1e-12


def test_combine_rejects_mismatched_lengths():
    with pytest.raises(DimensionError):
        combine_potentials([np.zeros(3), np.zeros(4)], init_combination_weights())


def test_attend_examples():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(5, 3))
    for j in range(5):
        assert np.array_equal(attend(feats, np.eye(5)[j]), feats[j])
    assert np.max(np.abs(attend(feats, np.full(5, 0.2)) - feats.mean(axis=0))) < 1e-15
    dist = T.softmax_1d(rng.normal(size=5))
    assert np.max(np.abs(attend(feats, dist) - oracles.attend(feats, dist))) < 1e-12
    with pytest.raises(DimensionError):
        attend(feats, np.ones(4) / 4)


def build_params(rng, d, n_v, n_q, n_a, modalities=3, order=3):
    mods = ("V", "Q", "A")[:modalities]
    params = AttentionParams(
        unary={m: UnaryParams.init(rng, d) for m in mods},
        combine={m: init_combination_weights() for m in mods},
    )
    if order >= 2:
        params.pair_qv = PairwiseParams.init(rng, d, n_q, n_v)
        if modalities == 3:
            params.pair_av = PairwiseParams.init(rng, d, n_a, n_v)
            params.pair_aq = PairwiseParams.init(rng, d, n_a, n_q)
    if order == 3:
        params.ternary = TernaryParams.init(rng, d, n_q, n_v, n_a)
    return params


def inputs(rng, d=6, n_v=5, n_q=4, n_a=3, batch=()):
    return rng.normal(size=batch + (n_v, d)), rng.normal(size=batch + (n_q, d)), rng.normal(size=batch + (n_a, d))


def test_order_one_equals_hand_wired_unary_pipeline():
    rng = np.random.default_rng(2)
    v, q, a = inputs(rng)
    params = build_params(rng, 6, 5, 4, 3, order=1)
    res = attention_forward(v, q, a, params, order=1)
    for m, x in (("V", v), ("Q", q), ("A", a)):
        u = params.unary[m]
        theta = unary_potential(x, u.w_embed, u.w_score)
        w = params.combine[m]
        p = T.softmax_1d(w[0] * theta + w[4])
        assert np.max(np.abs(res.distributions[m] - p)) < 1e-15
        assert np.max(np.abs(res.attended[m] - p @ x)) < 1e-14


def test_two_modality_mode_has_no_answer_outputs():
    rng = np.random.default_rng(3)
    v, q, _ = inputs(rng)
    res = attention_forward(v, q, None, build_params(rng, 6, 5, 4, 3, modalities=2, order=2), order=2)
    assert set(res.attended) == {"V", "Q"} and set(res.distributions) == {"V", "Q"}
    with pytest.raises(ContractError):
        attention_forward(v, q, None, build_params(rng, 6, 5, 4, 3, modalities=2, order=2), order=3)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_distributions_sum_to_one(order):
    rng = np.random.default_rng(order)
    v, q, a = inputs(rng, batch=(4,))
    res = attention_forward(v, q, a, build_params(rng, 6, 5, 4, 3, order=order), order=order)
    for p in res.distributions.values():
        assert np.max(np.abs(p.sum(axis=-1) - 1)) < 1e-12 and np.all(p > 0)


def test_zero_high_order_weights_reproduce_unary_model_bitwise():
    rng = np.random.default_rng(4)
    v, q, a = inputs(rng)
    full = build_params(rng, 6, 5, 4, 3, order=3)
    for m in full.combine:
        full.combine[m] = np.array([0.7, 0.0, 0.0, 0.0, 0.3])
    unary_only = AttentionParams(unary=full.unary, combine=full.combine)
    p3 = attention_forward(v, q, a, full, order=3).distributions["V"]
    p1 = attention_forward(v, q, a, unary_only, order=1).distributions["V"]
    assert p3.tobytes() == p1.tobytes()


def test_full_forward_gradient():
    rng = np.random.default_rng(5)
    d, n_v, n_q, n_a = 8, 4, 3, 3
    v, q, a = inputs(rng, d, n_v, n_q, n_a)
    params = build_params(rng, d, n_v, n_q, n_a, order=3)
    g = T.Graph()
    nodes = {}

    def reg(bundle, prefix):
        named = {k: g.param(x, k) for k, x in bundle.named(prefix).items()}
        nodes.update(named)
        return type(bundle).from_named(prefix, named.__getitem__)

    gp = AttentionParams(
        unary={m: reg(u, f"unary.{m}") for m, u in params.unary.items()},
        pair_qv=reg(params.pair_qv, "pair_qv"),
        pair_av=reg(params.pair_av, "pair_av"),
        pair_aq=reg(params.pair_aq, "pair_aq"),
        ternary=reg(params.ternary, "ternary"),
        combine={m: g.param(w, f"combine.{m}") for m, w in params.combine.items()},
    )
    v, q, a = g.param(v, "v"), g.param(q, "q"), g.param(a, "a")
    res = attention_forward(v, q, a, gp, order=3)
    loss = None
    for m in ("V", "Q", "A"):
        term = T.sum(T.mul(res.attended[m], rng.normal(size=d)))
        loss = term if loss is None else T.add(loss, term)
    assert T.grad_check(g, loss) < 1e-4


def test_multiple_iterations_still_normalised():
    rng = np.random.default_rng(6)
    v, q, a = inputs(rng, batch=(2,))
    res = attention_forward(v, q, a, build_params(rng, 6, 5, 4, 3), order=3, iterations=3)
    for p in res.distributions.values():
        assert np.max(np.abs(p.sum(axis=-1) - 1)) < 1e-12
    with pytest.raises(ContractError):
        attention_forward(v, q, a, build_params(rng, 6, 5, 4, 3), order=3, iterations=0)
