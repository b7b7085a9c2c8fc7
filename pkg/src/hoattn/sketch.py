"""Count sketch, tensor sketch and the compact pooling units built on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, DimensionError

BRUTE_FORCE_LIMIT = 10**6


@dataclass(frozen=True, eq=False)
class CountSketchParams:
    """Hash ``h: [0, d_in) -> [0, d_out)`` and sign ``s: [0, d_in) -> {+1, -1}``."""

    d_in: int
    d_out: int
    h: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)
    seed: int = 0

    @classmethod
    def from_seed(cls, d_in: int, d_out: int, seed: int) -> "CountSketchParams":
        rng = np.random.default_rng(seed)
        h = rng.integers(0, d_out, size=d_in, dtype=np.uint32)
        s = (2 * rng.integers(0, 2, size=d_in) - 1).astype(np.int8)
        return cls(d_in, d_out, h, s, seed)

    @classmethod
    def from_maps(cls, h, s, d_out: int, seed: int = 0) -> "CountSketchParams":
        h = np.asarray(h, dtype=np.uint32)
        s = np.asarray(s, dtype=np.int8)
        if h.shape != s.shape or h.ndim != 1:
            raise DimensionError(f"hash and sign maps must be equal-length vectors, got {h.shape} and {s.shape}")
        if h.size and int(h.max()) >= d_out:
            raise DimensionError(f"hash value {int(h.max())} outside [0, {d_out})")
        if not np.all(np.abs(s) == 1):
            raise ValueError("sign map entries must be +1 or -1")
        return cls(int(h.size), d_out, h, s, seed)

    def __eq__(self, other):
        if not isinstance(other, CountSketchParams):
            return NotImplemented
        return (
            self.d_in == other.d_in
            and self.d_out == other.d_out
            and self.seed == other.seed
            and np.array_equal(self.h, other.h)
            and np.array_equal(self.s, other.s)
        )

    __hash__ = None


class SketchStack(tuple):
    """One :class:`CountSketchParams` per fused input, all with the same ``d_out``."""

    def __new__(cls, params: Sequence[CountSketchParams]):
        params = tuple(params)
        if not params:
            raise DimensionError("a sketch stack needs at least one count sketch")
        outs = {p.d_out for p in params}
        if len(outs) != 1:
            raise DimensionError(f"sketch stack output dimensions differ: {sorted(outs)}")
        seeds = [p.seed for p in params]
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"sketch stack seeds must be distinct, got {seeds}")
        return super().__new__(cls, params)

    @property
    def d_out(self) -> int:
        return self[0].d_out

    @classmethod
    def from_seeds(cls, d_ins: Sequence[int], d_out: int, seeds: Sequence[int]) -> "SketchStack":
        return cls(CountSketchParams.from_seed(d, d_out, s) for d, s in zip(d_ins, seeds, strict=True))


def count_sketch(a, p: CountSketchParams):
    """Project ``a`` (last axis of length ``d_in``) to ``d_out`` buckets; linear in ``a``."""
    n = np.shape(T._value(a))[-1] if np.ndim(T._value(a)) else None
    if n != p.d_in:
        raise DimensionError(f"count sketch expects input length {p.d_in}, got shape {np.shape(T._value(a))}")
    return T.scatter_sum(a, p.h, p.s, p.d_out)


def circular_convolve(u, v, method="auto"):
    return T.circular_convolve(u, v, method=method)


def _check_arity(vectors, stack):
    if len(vectors) != len(stack):
        raise DimensionError(f"{len(vectors)} inputs for a sketch stack of arity {len(stack)}")


def tensor_sketch(vectors: Sequence, stack: SketchStack):
    """Sketch of the outer product of ``vectors`` via convolution of their count sketches."""
    _check_arity(vectors, stack)
    out = None
    for vec, p in zip(vectors, stack):
        cs = count_sketch(vec, p)
        out = cs if out is None else T.circular_convolve(out, cs)
    return out


def brute_force_sketch_outer(vectors: Sequence, stack: SketchStack) -> np.ndarray:
    """Materialise the outer product and hash it entry by entry (test oracle)."""
    _check_arity(vectors, stack)
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    for v, p in zip(vectors, stack):
        if v.shape != (p.d_in,):
            raise DimensionError(f"expected a vector of length {p.d_in}, got shape {v.shape}")
    size = int(np.prod([p.d_in for p in stack]))
    if size > BRUTE_FORCE_LIMIT:
        raise CapacityError(f"outer product has {size} entries, limit is {BRUTE_FORCE_LIMIT}")
    d_out = stack.d_out
    out = np.zeros(d_out)
    for idx in np.ndindex(*(p.d_in for p in stack)):
        bucket = 0
        value = 1.0
        for j, (i, p) in enumerate(zip(idx, stack)):
            bucket += int(p.h[i])
            value *= float(p.s[i]) * vectors[j][i]
        out[bucket % d_out] += value
    return out


def mcb(a_v, a_q, stack: SketchStack):
    """Compact bilinear pooling of two attended vectors."""
    if len(stack) != 2:
        raise DimensionError(f"mcb needs a stack of arity 2, got {len(stack)}")
    return tensor_sketch([a_v, a_q], stack)


def mct(a_v, a_q, a_a, stack: SketchStack):
    """Compact trilinear pooling of three attended vectors."""
    if len(stack) != 3:
        raise DimensionError(f"mct needs a stack of arity 3, got {len(stack)}")
    return tensor_sketch([a_v, a_q, a_a], stack)


def mcb_two_layer(a_v, a_q, a_a, inner: SketchStack, outer: SketchStack):
    """Cascade: ``mcb(mcb(a_v, a_q), a_a)``; the outer stack's first input has ``d_in = inner.d_out``."""
    if len(inner) != 2 or len(outer) != 2:
        raise DimensionError("mcb_two_layer needs two stacks of arity 2")
    if outer[0].d_in != inner.d_out:
        raise DimensionError(f"outer stack expects {outer[0].d_in} inputs from a layer of width {inner.d_out}")
    return mcb(mcb(a_v, a_q, inner), a_a, outer)


def signed_sqrt_l2(x, eps=1e-12):
    """Optional post-sketch normalisation ``sign(x) sqrt|x|`` then unit norm (eager only)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.sign(x) * np.sqrt(np.abs(x))
    return y / max(np.linalg.norm(y), eps)
