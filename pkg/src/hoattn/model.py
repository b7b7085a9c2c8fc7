"""The full attention model: embeddings, attention, fusion and classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionResult, attention_forward, init_combination_weights
from .decision import ClassifierParams, FusionSketches, classify, decision_features
from .embed import QuestionEncoderParams, _init_uniform, answer_embed, question_encode
from .errors import ConfigError
from .potentials import PairwiseParams, TernaryParams, UnaryParams


@dataclass
class ModelConfig:
    vocab_size: int
    answer_vocab_size: int
    n_classes: int
    d_feat: int = 512
    n_v: int = 196
    n_q: int = 14
    n_a: int = 18
    d: int = 512
    sketch_dim: int = 8192
    d_hidden: Optional[int] = None
    modalities: int = 3
    order: int = 3
    fusion: str = "mcb2"
    mean_field_iters: int = 1
    sketch_normalize: bool = False
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.modalities not in (2, 3):
            problems.append(f"modalities must be 2 or 3, got {self.modalities}")
        if self.order not in (1, 2, 3):
            problems.append(f"order must be 1, 2 or 3, got {self.order}")
        if self.order == 3 and self.modalities == 2:
            problems.append("order 3 needs three modalities")
        expected = ("mcb",) if self.modalities == 2 else ("mct", "mcb2")
        if self.fusion not in expected:
            problems.append(f"fusion {self.fusion!r} does not fit {self.modalities} modalities; use one of {expected}")
        if self.d % 2:
            problems.append(f"d must be even, got {self.d}")
        if self.n_classes < 2:
            problems.append("n_classes must be at least 2")
        for name in ("d", "d_feat", "n_v", "n_q", "n_a", "sketch_dim", "vocab_size", "answer_vocab_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.mean_field_iters < 1:
            problems.append("mean_field_iters must be at least 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def hidden(self) -> int:
        return self.d_hidden or self.d

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    logits: object
    attention: AttentionResult


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1417]))
    c = config
    params = {
        "image.w": _init_uniform(rng, (c.d_feat, c.d), c.d_feat),
        "image.b": np.zeros(c.d),
    }
    params.update(QuestionEncoderParams.init(rng, c.vocab_size, c.d).named("question"))
    mods = ("V", "Q", "A") if c.modalities == 3 else ("V", "Q")
    if c.modalities == 3:
        params["answer.embedding"] = rng.normal(0.0, 1.0 / np.sqrt(c.d), size=(c.answer_vocab_size, c.d))
    for m in mods:
        params.update(UnaryParams.init(rng, c.d).named(f"unary.{m}"))
    if c.order >= 2:
        params.update(PairwiseParams.init(rng, c.d, c.n_q, c.n_v).named("pair_qv"))
        if c.modalities == 3:
            params.update(PairwiseParams.init(rng, c.d, c.n_a, c.n_v).named("pair_av"))
            params.update(PairwiseParams.init(rng, c.d, c.n_a, c.n_q).named("pair_aq"))
    if c.order >= 3:
        params.update(TernaryParams.init(rng, c.d, c.n_q, c.n_v, c.n_a).named("ternary"))
    for m in mods:
        params[f"combine.{m}"] = init_combination_weights()
    d_in = c.sketch_dim * (c.modalities + 1)
    params.update(ClassifierParams.init(rng, d_in, c.hidden, c.n_classes).named("classifier"))
    return params


class HighOrderAttentionModel:
    def __init__(self, config: ModelConfig, params: dict | None = None, sketches: FusionSketches | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        self.sketches = sketches or FusionSketches.create(config.fusion, config.d, config.sketch_dim, config.seed)

    def copy(self) -> "HighOrderAttentionModel":
        return HighOrderAttentionModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.sketches)

    def forward(self, batch: dict, graph: T.Graph | None = None, dropout=None) -> ModelOutput:
        """Logits ``[B, n_classes]`` plus the attention internals for one encoded batch.

        With a ``graph`` every parameter is registered on it and the result is
        differentiable; without one the pass runs eagerly on arrays.
        ``dropout(site, x)`` is only supplied in training.
        """
        c = self.config
        if graph is None:
            lookup = self.params.__getitem__
        else:
            nodes = {k: graph.param(v, k) for k, v in self.params.items()}
            lookup = nodes.__getitem__
        drop = dropout or (lambda site, x: x)

        v = T.add(T.matmul(batch["features"], lookup("image.w")), lookup("image.b"))
        q = question_encode(batch["question"], QuestionEncoderParams.from_named("question", lookup), drop)
        a = answer_embed(batch["answers"], lookup("answer.embedding")) if c.modalities == 3 else None

        mods = ("V", "Q", "A") if c.modalities == 3 else ("V", "Q")
        att_params = AttentionParams(
            unary={m: UnaryParams.from_named(f"unary.{m}", lookup) for m in mods},
            combine={m: lookup(f"combine.{m}") for m in mods},
        )
        if c.order >= 2:
            att_params.pair_qv = PairwiseParams.from_named("pair_qv", lookup)
            if c.modalities == 3:
                att_params.pair_av = PairwiseParams.from_named("pair_av", lookup)
                att_params.pair_aq = PairwiseParams.from_named("pair_aq", lookup)
        if c.order >= 3:
            att_params.ternary = TernaryParams.from_named("ternary", lookup)

        att = attention_forward(v, q, a, att_params, c.order, dropout=drop, iterations=c.mean_field_iters)
        attended = [att.attended[m] for m in mods]
        features = decision_features(attended, self.sketches, normalize=c.sketch_normalize)
        clf = ClassifierParams.from_named("classifier", lookup)
        logits = classify(features, clf, dropout=lambda x: drop("last", x))
        return ModelOutput(logits, att)

    def logits(self, batch: dict) -> np.ndarray:
        return self.forward(batch).logits

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def check_compatible(config: ModelConfig, **expected) -> None:
    """Raise ConfigError listing every field that differs from ``expected``."""
    bad = [f"{k}: model has {getattr(config, k)!r}, data has {v!r}" for k, v in expected.items() if getattr(config, k) != v]
    if bad:
        raise ConfigError("checkpoint and dataset are incompatible: " + "; ".join(bad))
