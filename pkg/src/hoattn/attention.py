"""Mean-field combination of potentials into attention distributions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .potentials import (
    PairwiseParams,
    TernaryParams,
    pairwise_correlation,
    pairwise_marginal,
    ternary_correlation,
    ternary_marginal,
    unary_potential,
)

MODALITIES = ("V", "Q", "A")

# Tier labels per modality, in the order the first four combination weights use.
TIERS = {
    "V": ("unary", "pair_q", "pair_a", "ternary"),
    "Q": ("unary", "pair_v", "pair_a", "ternary"),
    "A": ("unary", "pair_v", "pair_q", "ternary"),
}


def init_combination_weights() -> np.ndarray:
    return np.array([1.0, 1.0, 1.0, 1.0, 0.0])


@dataclass
class AttentionParams:
    """Everything the attention stage learns.  Entries for absent modalities are None."""

    unary: dict  # modality -> UnaryParams
    pair_qv: Optional[PairwiseParams] = None
    pair_av: Optional[PairwiseParams] = None
    pair_aq: Optional[PairwiseParams] = None
    ternary: Optional[TernaryParams] = None
    combine: dict = field(default_factory=dict)  # modality -> 5 weights (alpha, beta, gamma)


@dataclass
class AttentionResult:
    attended: dict  # modality -> [.., d]
    distributions: dict  # modality -> [.., n_m]
    potentials: dict  # modality -> {tier: [.., n_m]}


def _shape(x):
    return np.shape(T._value(x))


def combine_potentials(potentials, weights):
    """``softmax(w0*p0 + w1*p1 + w2*p2 + w3*p3 + w4)`` over the last axis.

    ``potentials`` holds up to four vectors in tier order; ``None`` entries and
    missing trailing entries count as zero vectors.
    """
    potentials = list(potentials) + [None] * (4 - len(potentials))
    if len(potentials) != 4:
        raise ContractError(f"at most four potential tiers, got {len(potentials)}")
    if _shape(weights) != (5,):
        raise DimensionError(f"combination needs 5 weights, got shape {_shape(weights)}")
    shape = next((_shape(p) for p in potentials if p is not None), None)
    if shape is None:
        raise ContractError("the unary potential is required")
    for p in potentials:
        if p is not None and _shape(p) != shape:
            raise DimensionError(f"potential shapes differ: {_shape(p)} vs {shape}")
    zero = np.zeros(shape)
    score = None
    for k, p in enumerate(potentials):
        term = T.mul(zero if p is None else p, T.getitem(weights, k))
        score = term if score is None else T.add(score, term)
    score = T.add(score, T.getitem(weights, 4))
    return T.softmax(score)


def attend(features, dist):
    """Probability-weighted sum of feature rows: ``sum_i dist[i] * features[i]``."""
    fs, ds = _shape(features), _shape(dist)
    if len(fs) < 2 or fs[:-1] != ds:
        raise DimensionError(f"attend: features {fs} do not match distribution {ds}")
    weighted = T.matmul(T.reshape(dist, ds[:-1] + (1, ds[-1])), features)
    return T.reshape(weighted, fs[:-2] + (fs[-1],))


def _scaled(weights, dist, n):
    # marginal weights re-weighted by the current belief of the summed modality
    return T.mul(T.mul(weights, dist), float(n))


def _pair_marginals(c, p: PairwiseParams, beliefs_x=None, beliefs_y=None):
    """Return (score per row modality, score per column modality) of correlation ``c``."""
    if beliefs_x is None:
        return pairwise_marginal(c, p.over_y, axis=1), pairwise_marginal(c, p.over_x, axis=0)
    n_x, n_y = _shape(c)[-2:]
    wy = _scaled(p.over_y, beliefs_y, n_y)
    wx = _scaled(p.over_x, beliefs_x, n_x)
    lead = "b" if len(_shape(c)) == 3 else ""
    rows = T.tanh(T.einsum(f"{lead}ij,{lead}j->{lead}i", c, wy))
    cols = T.tanh(T.einsum(f"{lead}ij,{lead}i->{lead}j", c, wx))
    return rows, cols


def _ternary_marginals(c3, p: TernaryParams, beliefs=None):
    if beliefs is None:
        return (
            ternary_marginal(c3, p.over_va, 0),
            ternary_marginal(c3, p.over_qa, 1),
            ternary_marginal(c3, p.over_qv, 2),
        )
    n_q, n_v, n_a = _shape(c3)[-3:]
    b = "b" if len(_shape(c3)) == 4 else ""
    pq, pv, pa = beliefs["Q"], beliefs["V"], beliefs["A"]
    m_va = T.mul(T.mul(p.over_va, T.einsum(f"{b}j,{b}k->{b}jk", pv, pa)), float(n_v * n_a))
    m_qa = T.mul(T.mul(p.over_qa, T.einsum(f"{b}i,{b}k->{b}ik", pq, pa)), float(n_q * n_a))
    m_qv = T.mul(T.mul(p.over_qv, T.einsum(f"{b}i,{b}j->{b}ij", pq, pv)), float(n_q * n_v))
    return (
        T.tanh(T.einsum(f"{b}ijk,{b}jk->{b}i", c3, m_va)),
        T.tanh(T.einsum(f"{b}ijk,{b}ik->{b}j", c3, m_qa)),
        T.tanh(T.einsum(f"{b}ijk,{b}ij->{b}k", c3, m_qv)),
    )


def attention_forward(v, q, a, params: AttentionParams, order: int, dropout=None, iterations: int = 1):
    """Potentials, distributions and attended vectors for two (``a is None``) or three modalities.

    ``order`` 1 keeps unary potentials only, 2 adds pairwise, 3 adds the ternary
    tier (three modalities only).  ``iterations`` > 1 repeats the combination with
    marginal weights modulated by the previous distributions; one iteration is
    the standard model.
    """
    if order not in (1, 2, 3):
        raise ContractError(f"order must be 1, 2 or 3, got {order}")
    if iterations < 1:
        raise ContractError("at least one mean-field iteration is required")
    feats = {"V": v, "Q": q}
    if a is not None:
        feats["A"] = a
    elif order == 3:
        raise ContractError("ternary potentials need the answer modality")
    present = tuple(m for m in MODALITIES if m in feats)
    drop = dropout or (lambda site, x: x)

    pots = {m: dict.fromkeys(TIERS[m]) for m in present}
    for m in present:
        u = params.unary[m]
        pots[m]["unary"] = unary_potential(
            feats[m], u.w_embed, u.w_score, dropout=lambda x, m=m: drop(f"unary_{m}", x)
        )

    corr = {}
    if order >= 2:
        corr["qv"] = pairwise_correlation(q, v, params.pair_qv.w_x, params.pair_qv.w_y)
        if a is not None:
            corr["av"] = pairwise_correlation(a, v, params.pair_av.w_x, params.pair_av.w_y)
            corr["aq"] = pairwise_correlation(a, q, params.pair_aq.w_x, params.pair_aq.w_y)
    if order >= 3:
        tp = params.ternary
        corr["qva"] = ternary_correlation(q, v, a, tp.w_q, tp.w_v, tp.w_a)

    beliefs = None
    dists = {}
    for _ in range(iterations):
        if order >= 2:
            bq = beliefs["Q"] if beliefs else None
            bv = beliefs["V"] if beliefs else None
            pots["Q"]["pair_v"], pots["V"]["pair_q"] = _pair_marginals(corr["qv"], params.pair_qv, bq, bv)
            if a is not None:
                ba = beliefs["A"] if beliefs else None
                pots["A"]["pair_v"], pots["V"]["pair_a"] = _pair_marginals(corr["av"], params.pair_av, ba, bv)
                pots["A"]["pair_q"], pots["Q"]["pair_a"] = _pair_marginals(corr["aq"], params.pair_aq, ba, bq)
        if order >= 3:
            tq, tv, ta = _ternary_marginals(corr["qva"], params.ternary, beliefs)
            pots["Q"]["ternary"], pots["V"]["ternary"], pots["A"]["ternary"] = tq, tv, ta
        dists = {
            m: combine_potentials([pots[m][t] for t in TIERS[m]], params.combine[m]) for m in present
        }
        beliefs = dists
    attended = {m: attend(feats[m], dists[m]) for m in present}
    return AttentionResult(attended, dists, pots)

