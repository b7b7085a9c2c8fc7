"""Fusion of attended vectors and answer classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .embed import Bundle, _init_uniform
from .errors import ConfigError, ContractError, DimensionError
from .sketch import CountSketchParams, SketchStack, count_sketch, mcb, mcb_two_layer, mct

FUSION_MODES = ("mcb", "mct", "mcb2")


@dataclass
class FusionSketches:
    """Count sketches used by one fusion mode.

    ``mcb``: ``inner`` fuses (V, Q).  ``mct``: ``inner`` fuses (V, Q, A).
    ``mcb2``: ``inner`` fuses (V, Q) and ``outer`` fuses (inner output, A).
    """

    mode: str
    inner: SketchStack
    outer: SketchStack | None = None

    @classmethod
    def create(cls, mode: str, d: int, d_out: int, seed: int) -> "FusionSketches":
        # distinct per-sketch seeds derived from the model seed
        seeds = np.random.SeedSequence([seed, 0x5EED]).generate_state(4, dtype=np.uint64)
        seeds = [int(s) for s in seeds]
        if mode == "mcb":
            return cls(mode, SketchStack.from_seeds([d, d], d_out, seeds[:2]))
        if mode == "mct":
            return cls(mode, SketchStack.from_seeds([d, d, d], d_out, seeds[:3]))
        if mode == "mcb2":
            inner = SketchStack.from_seeds([d, d], d_out, seeds[:2])
            outer = SketchStack.from_seeds([d_out, d], d_out, seeds[2:4])
            return cls(mode, inner, outer)
        raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")

    @property
    def arity(self) -> int:
        return 2 if self.mode == "mcb" else 3

    def modality_sketches(self) -> list[CountSketchParams]:
        """The sketch applied to each raw attended vector (V, Q[, A])."""
        if self.mode == "mcb2":
            return [self.inner[0], self.inner[1], self.outer[1]]
        return list(self.inner)

    def named(self) -> dict[str, CountSketchParams]:
        out = {f"inner.{i}": p for i, p in enumerate(self.inner)}
        if self.outer is not None:
            out.update({f"outer.{i}": p for i, p in enumerate(self.outer)})
        return out

    @classmethod
    def from_named(cls, mode: str, sketches: dict) -> "FusionSketches":
        inner = SketchStack([sketches[k] for k in sorted(sketches) if k.startswith("inner.")])
        outer_keys = sorted(k for k in sketches if k.startswith("outer."))
        outer = SketchStack([sketches[k] for k in outer_keys]) if outer_keys else None
        return cls(mode, inner, outer)


@dataclass
class ClassifierParams(Bundle):
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def init(cls, rng, d_in: int, d_hidden: int, n_classes: int) -> "ClassifierParams":
        if n_classes < 2:
            raise ContractError(f"need at least two answer classes, got {n_classes}")
        return cls(
            _init_uniform(rng, (d_in, d_hidden), d_in),
            np.zeros(d_hidden),
            _init_uniform(rng, (d_hidden, n_classes), d_hidden),
            np.zeros(n_classes),
        )


def fuse(attended: Sequence, sketches: FusionSketches):
    """Correlation vector of the attended modalities in (V, Q[, A]) order."""
    if len(attended) != sketches.arity:
        raise ConfigError(f"fusion mode {sketches.mode!r} needs {sketches.arity} modalities, got {len(attended)}")
    if sketches.mode == "mcb":
        return mcb(*attended, sketches.inner)
    if sketches.mode == "mct":
        return mct(*attended, sketches.inner)
    return mcb_two_layer(*attended, sketches.inner, sketches.outer)


def decision_features(attended: Sequence, sketches: FusionSketches, normalize: bool = False):
    """``[Psi(a_V); Psi(a_Q); (Psi(a_A);) fused]`` along the last axis."""
    fused = fuse(attended, sketches)
    if normalize:
        fused = T.l2_normalize(T.signed_sqrt(fused))
    singles = [count_sketch(a, p) for a, p in zip(attended, sketches.modality_sketches())]
    return T.concat(singles + [fused], axis=-1)


def classify(features, p: ClassifierParams, dropout=None):
    """``relu(x W_h + b_h)`` then the output layer; ``dropout`` acts on the hidden layer."""
    fs = np.shape(T._value(features))
    if fs[-1] != np.shape(T._value(p.w_hidden))[0]:
        raise DimensionError(f"classifier expects {np.shape(T._value(p.w_hidden))[0]} inputs, got shape {fs}")
    hidden = T.relu(T.add(T.matmul(features, p.w_hidden), p.b_hidden))
    if dropout is not None:
        hidden = dropout(hidden)
    return T.add(T.matmul(hidden, p.w_out), p.b_out)


def predict_mc(logits, candidates: Sequence[int]) -> int:
    """Highest-scoring class among ``candidates``; ties go to the earliest candidate."""
    if len(candidates) == 0:
        raise ContractError("no candidate answers")
    logits = np.asarray(T._value(logits))
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.min() < 0 or cand.max() >= logits.shape[-1]:
        raise ContractError(f"candidate ids must lie in [0, {logits.shape[-1]})")
    return int(cand[int(np.argmax(logits[cand]))])


def predict_mc_batch(logits, candidates) -> np.ndarray:
    logits = np.asarray(T._value(logits))
    cand = np.asarray(candidates, dtype=np.int64)
    scores = np.take_along_axis(logits, cand, axis=-1)
    return np.take_along_axis(cand, np.argmax(scores, axis=-1)[:, None], axis=-1)[:, 0]
