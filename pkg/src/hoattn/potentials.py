"""Unary, pairwise and ternary attention potentials.

All operations accept optional leading batch axes; modality rows sit on axis -2
and feature columns on axis -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embed import Bundle, _init_uniform
from .errors import ContractError, DimensionError


def _shape(x):
    return np.shape(T._value(x))


@dataclass
class UnaryParams(Bundle):
    w_embed: np.ndarray  # [d, d]
    w_score: np.ndarray  # [d, 1]

    @classmethod
    def init(cls, rng, d: int) -> "UnaryParams":
        return cls(_init_uniform(rng, (d, d), d), _init_uniform(rng, (d, 1), d))


@dataclass
class PairwiseParams(Bundle):
    """Projections for modalities X and Y plus the marginalisation weights over each."""

    w_x: np.ndarray  # [d, d]
    w_y: np.ndarray  # [d, d]
    over_x: np.ndarray  # [n_x]
    over_y: np.ndarray  # [n_y]

    @classmethod
    def init(cls, rng, d: int, n_x: int, n_y: int) -> "PairwiseParams":
        return cls(
            _init_uniform(rng, (d, d), d),
            _init_uniform(rng, (d, d), d),
            np.full(n_x, 1.0 / n_x),
            np.full(n_y, 1.0 / n_y),
        )


@dataclass
class TernaryParams(Bundle):
    w_q: np.ndarray
    w_v: np.ndarray
    w_a: np.ndarray
    over_va: np.ndarray  # [n_v, n_a] -> question marginal
    over_qa: np.ndarray  # [n_q, n_a] -> image marginal
    over_qv: np.ndarray  # [n_q, n_v] -> answer marginal

    @classmethod
    def init(cls, rng, d: int, n_q: int, n_v: int, n_a: int) -> "TernaryParams":
        return cls(
            _init_uniform(rng, (d, d), d),
            _init_uniform(rng, (d, d), d),
            _init_uniform(rng, (d, d), d),
            np.full((n_v, n_a), 1.0 / (n_v * n_a)),
            np.full((n_q, n_a), 1.0 / (n_q * n_a)),
            np.full((n_q, n_v), 1.0 / (n_q * n_v)),
        )


def unary_potential(x, w_embed, w_score, dropout=None):
    """``tanh(x @ w_embed) @ w_score`` flattened to one score per row.

    ``dropout`` (a callable) is applied to the tanh activations when given.
    """
    xs, ws, ss = _shape(x), _shape(w_embed), _shape(w_score)
    if len(xs) < 2 or ws != (xs[-1], xs[-1]) or ss != (xs[-1], 1):
        raise DimensionError(f"unary potential: input {xs} with weights {ws} and {ss}")
    hidden = T.tanh(T.matmul(x, w_embed))
    if dropout is not None:
        hidden = dropout(hidden)
    scores = T.matmul(hidden, w_score)
    return T.reshape(scores, xs[:-1])


def pairwise_correlation(x, y, w_x, w_y):
    """``C[i, j] = <(x W_x)[i], (y W_y)[j]>``, shape ``[.., n_x, n_y]``."""
    xs, ys = _shape(x), _shape(y)
    if xs[-1] != ys[-1] or _shape(w_x) != (xs[-1], xs[-1]) or _shape(w_y) != (ys[-1], ys[-1]):
        raise DimensionError(f"pairwise correlation: inputs {xs}, {ys} with weights {_shape(w_x)}, {_shape(w_y)}")
    px = T.matmul(x, w_x)
    py = T.matmul(y, w_y)
    return T.matmul(px, T.swapaxes(py, -1, -2))


def pairwise_marginal(c2, w, axis: int):
    """``tanh`` of the ``w``-weighted sum of ``c2`` over one of its two trailing axes.

    ``axis`` is 0 to sum over rows (result indexed by columns) or 1 to sum over
    columns (result indexed by rows); batch axes are untouched.
    """
    cs, ws = _shape(c2), _shape(w)
    if axis not in (0, 1):
        raise ContractError(f"pairwise marginal axis must be 0 or 1, got {axis}")
    if len(cs) < 2:
        raise DimensionError(f"pairwise marginal needs a matrix, got shape {cs}")
    summed = cs[-2] if axis == 0 else cs[-1]
    if ws != (summed,):
        raise DimensionError(f"marginal weights of shape {ws} for an axis of length {summed}")
    if axis == 0:
        c2 = T.swapaxes(c2, -1, -2)
    return T.tanh(T.matmul(c2, w))


def ternary_correlation(q, v, a, w_q, w_v, w_a):
    """``C[i, j, k] = sum_l (q W_q)[i, l] (v W_v)[j, l] (a W_a)[k, l]``."""
    shapes = [_shape(m) for m in (q, v, a)]
    d = shapes[0][-1]
    if any(s[-1] != d for s in shapes) or any(_shape(w) != (d, d) for w in (w_q, w_v, w_a)):
        raise DimensionError(f"ternary correlation: inputs {shapes} do not share a width matching the weights")
    pq, pv, pa = T.matmul(q, w_q), T.matmul(v, w_v), T.matmul(a, w_a)
    if len(shapes[0]) == 2:
        return T.einsum("il,jl,kl->ijk", pq, pv, pa)
    return T.einsum("bil,bjl,bkl->bijk", pq, pv, pa)


_TERNARY_SPECS = {
    0: "ijk,jk->i",
    1: "ijk,ik->j",
    2: "ijk,ij->k",
}


def ternary_marginal(c3, m, target_axis: int):
    """``tanh`` of the ``m``-weighted double sum of ``c3`` over the two non-target axes.

    Axes are ordered (question, image, answer); ``m`` is indexed by the remaining
    two in that order.
    """
    cs = _shape(c3)
    if target_axis not in _TERNARY_SPECS:
        raise ContractError(f"ternary marginal target axis must be 0, 1 or 2, got {target_axis}")
    if len(cs) < 3:
        raise DimensionError(f"ternary marginal needs a 3-way tensor, got shape {cs}")
    trailing = cs[-3:]
    expected = tuple(n for i, n in enumerate(trailing) if i != target_axis)
    if _shape(m) != expected:
        raise DimensionError(f"marginal weights of shape {_shape(m)}, expected {expected}")
    spec = _TERNARY_SPECS[target_axis]
    if len(cs) == 4:
        lhs, out = spec.split("->")
        spec = "b" + lhs + "->b" + out
    elif len(cs) != 3:
        raise DimensionError(f"at most one batch axis is supported, got shape {cs}")
    return T.tanh(T.einsum(spec, c3, m))
