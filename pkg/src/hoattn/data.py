"""Synthetic multiple-choice grid VQA with an exact symbolic oracle.

Each scene is a 4x4 grid; every cell is empty or holds a coloured shape.  A
cell's feature row is the prototype of its content plus Gaussian noise, with
prototypes drawn once per *world* so separately generated datasets stay
compatible with each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embed import AnswerVocab, Vocab, load_feature_records, write_image_features
from .errors import FormatError, OracleError

GRID = 4
N_CELLS = GRID * GRID
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
COUNTS = ("0", "1", "2", "3")
ANSWER_CLASSES = COLORS + ("yes", "no") + COUNTS
KINDS = ("what_color", "exists", "count_color")
QUESTION_WORDS = (
    "what", "color", "is", "the", "there", "a", "how", "many", "objects", "are",
) + COLORS + SHAPES
DEFAULT_D_FEAT = 16
DEFAULT_N_Q = 8
N_CANDIDATES = 4
MAX_PER_COLOR = 3
MAX_NOISE_TRIES = 1000

CLASS_ID = {a: i for i, a in enumerate(ANSWER_CLASSES)}
EMPTY = len(COLORS) * len(SHAPES)


def object_index(color: str, shape: str) -> int:
    return COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)


def question_vocab() -> Vocab:
    return Vocab(QUESTION_WORDS)


def answer_vocab() -> AnswerVocab:
    return AnswerVocab(ANSWER_CLASSES)


@dataclass(frozen=True)
class World:
    """Per-(colour, shape) prototypes plus one for empty cells (row ``EMPTY``)."""

    prototypes: np.ndarray
    seed: int = 0

    @classmethod
    def create(cls, d_feat: int = DEFAULT_D_FEAT, seed: int = 0) -> "World":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A1D]))
        protos = rng.normal(size=(EMPTY + 1, d_feat)).astype(np.float32).astype(np.float64)
        return cls(protos, seed)

    @property
    def d_feat(self) -> int:
        return self.prototypes.shape[1]

    @property
    def min_distance(self) -> float:
        diff = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        return float(dist[np.triu_indices(len(dist), 1)].min())

    def decode(self, features: np.ndarray) -> list:
        """Nearest-prototype content of every cell; raises if a row is not unambiguously close."""
        radius = 0.5 * self.min_distance
        dist = np.sqrt(((features[:, None, :] - self.prototypes[None, :, :]) ** 2).sum(-1))
        nearest = dist.argmin(axis=1)
        cells = []
        for i, k in enumerate(nearest):
            if dist[i, k] >= radius:
                raise OracleError(f"cell {i} is {dist[i, k]:.3f} from its nearest prototype (limit {radius:.3f})")
            cells.append(None if k == EMPTY else (COLORS[k // len(SHAPES)], SHAPES[k % len(SHAPES)]))
        return cells


@dataclass
class GridScene:
    cells: list  # N_CELLS entries: None or (color, shape)
    features: np.ndarray = field(repr=False)  # [N_CELLS, d_feat]


@dataclass
class QaExample:
    scene: GridScene
    tokens: list
    kind: str
    candidates: list  # class ids
    gold: int
    target_cells: list

    @property
    def candidate_answers(self) -> list:
        return [ANSWER_CLASSES[c] for c in self.candidates]


@dataclass
class Dataset:
    examples: list
    world: World
    seed: int = 0
    noise_sigma: float = 0.0

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def split(self, val_fraction: float):
        n_val = int(round(len(self.examples) * val_fraction))
        cut = len(self.examples) - n_val
        return self.examples[:cut], self.examples[cut:]


# ---------------------------------------------------------------------------
# generation


def _place(rng, cells, free, obj):
    pos = int(free.pop(rng.integers(len(free))))
    cells[pos] = obj
    return pos


def _fill_distractors(rng, cells, free, n, allowed):
    """Add up to ``n`` objects drawn from ``allowed`` while keeping each colour at most MAX_PER_COLOR."""
    for _ in range(n):
        counts = {c: sum(1 for o in cells if o and o[0] == c) for c in COLORS}
        options = [o for o in allowed if counts[o[0]] < MAX_PER_COLOR]
        if not options or not free:
            return
        _place(rng, cells, free, options[rng.integers(len(options))])


def _all_objects():
    return [(c, s) for c in COLORS for s in SHAPES]


def _scene_what_color(rng):
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    cells = [None] * N_CELLS
    free = list(range(N_CELLS))
    target = _place(rng, cells, free, (color, shape))
    others = [o for o in _all_objects() if o[1] != shape]
    _fill_distractors(rng, cells, free, int(rng.integers(2, 8)), others)
    tokens = ["what", "color", "is", "the", shape]
    return cells, tokens, color, [target]


def _scene_exists(rng):
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    answer = "yes" if rng.integers(2) == 0 else "no"
    cells = [None] * N_CELLS
    free = list(range(N_CELLS))
    if answer == "yes":
        _place(rng, cells, free, (color, shape))
    else:
        near = [c for c in COLORS if c != color]
        _place(rng, cells, free, (near[rng.integers(len(near))], shape))
    others = [o for o in _all_objects() if o != (color, shape)]
    _fill_distractors(rng, cells, free, int(rng.integers(2, 7)), others)
    if answer == "yes":
        targets = [i for i, o in enumerate(cells) if o == (color, shape)]
    else:
        targets = [i for i, o in enumerate(cells) if o and o[1] == shape]
    tokens = ["is", "there", "a", color, shape]
    return cells, tokens, answer, targets


def _scene_count_color(rng):
    color = COLORS[rng.integers(len(COLORS))]
    count = int(rng.integers(len(COUNTS)))
    cells = [None] * N_CELLS
    free = list(range(N_CELLS))
    for _ in range(count):
        _place(rng, cells, free, (color, SHAPES[rng.integers(len(SHAPES))]))
    others = [o for o in _all_objects() if o[0] != color]
    _fill_distractors(rng, cells, free, int(rng.integers(2, 6)), others)
    targets = [i for i, o in enumerate(cells) if o and o[0] == color]
    tokens = ["how", "many", color, "objects", "are", "there"]
    return cells, tokens, str(count), targets


_GENERATORS = {
    "what_color": _scene_what_color,
    "exists": _scene_exists,
    "count_color": _scene_count_color,
}


def _candidates(rng, kind):
    if kind == "what_color":
        family = list(COLORS)
    elif kind == "count_color":
        family = list(COUNTS)
    else:
        # yes/no has only two members; the remaining slots are filled with colours
        extra = rng.permutation(len(COLORS))[: N_CANDIDATES - 2]
        family = ["yes", "no"] + [COLORS[i] for i in extra]
    order = rng.permutation(len(family))
    return [CLASS_ID[family[i]] for i in order]


def _render(rng, world: World, cells, noise_sigma: float):
    radius = 0.5 * world.min_distance
    rows = []
    for obj in cells:
        proto = world.prototypes[EMPTY if obj is None else object_index(*obj)]
        for _ in range(MAX_NOISE_TRIES):
            noise = rng.normal(scale=noise_sigma, size=world.d_feat) if noise_sigma > 0 else 0.0
            row = (proto + noise).astype(np.float32).astype(np.float64)
            # resample until the row decodes exactly to its own prototype
            if np.sqrt(((row - proto) ** 2).sum()) < radius:
                break
        else:
            raise OracleError(f"noise sigma {noise_sigma} is too large for exact decoding")
        rows.append(row)
    return np.stack(rows)


def generate_dataset(
    seed: int,
    n_examples: int,
    noise_sigma: float = 0.2,
    kinds: Sequence[str] = KINDS,
    d_feat: int = DEFAULT_D_FEAT,
    world_seed: int = 0,
) -> Dataset:
    """Deterministic function of its arguments; question kinds are drawn uniformly from ``kinds``."""
    if n_examples < 1:
        raise ValueError("n_examples must be at least 1")
    unknown = set(kinds) - set(KINDS)
    if unknown or not kinds:
        raise ValueError(f"unknown question kinds {sorted(unknown)}")
    world = World.create(d_feat, world_seed)
    if noise_sigma < 0 or noise_sigma >= 0.5 * world.min_distance:
        raise OracleError(
            f"noise sigma {noise_sigma} must be below half the minimum prototype distance "
            f"({0.5 * world.min_distance:.4f})"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    kinds = list(kinds)
    examples = []
    for _ in range(n_examples):
        kind = kinds[rng.integers(len(kinds))]
        cells, tokens, answer, targets = _GENERATORS[kind](rng)
        feats = _render(rng, world, cells, noise_sigma)
        ex = QaExample(
            GridScene(cells, feats),
            tokens,
            kind,
            _candidates(rng, kind),
            CLASS_ID[answer],
            targets,
        )
        if bayes_oracle(ex, world) != ex.gold:
            raise OracleError(f"generated example {len(examples)} is not answerable")
        examples.append(ex)
    return Dataset(examples, world, seed, noise_sigma)


# ---------------------------------------------------------------------------
# oracle


def bayes_oracle(example: QaExample, world: Optional[World] = None) -> int:
    """Answer class read off the nearest-prototype decoding of the scene."""
    if world is None:
        world = World.create(example.scene.features.shape[1])
    cells = world.decode(example.scene.features)
    tok = example.tokens
    if tok[:2] == ["what", "color"]:
        shape = tok[-1]
        hits = [o for o in cells if o and o[1] == shape]
        if len(hits) != 1:
            raise OracleError(f"{len(hits)} cells hold a {shape}; the question is ambiguous")
        return CLASS_ID[hits[0][0]]
    if tok[:2] == ["is", "there"]:
        color, shape = tok[3], tok[4]
        return CLASS_ID["yes" if (color, shape) in cells else "no"]
    if tok[:2] == ["how", "many"]:
        n = sum(1 for o in cells if o and o[0] == tok[2])
        if n >= len(COUNTS):
            raise OracleError(f"count {n} has no answer class")
        return CLASS_ID[str(n)]
    raise OracleError(f"unrecognised question {' '.join(tok)!r}")


# ---------------------------------------------------------------------------
# batching and files


def encode_batch(examples: Sequence[QaExample], vocab: Vocab, answers: AnswerVocab, n_q: int) -> dict:
    return {
        "features": np.stack([e.scene.features for e in examples]),
        "question": np.array([vocab.encode(e.tokens, n_q) for e in examples], dtype=np.int64),
        "answers": np.array([answers.encode(e.candidate_answers) for e in examples], dtype=np.int64),
        "candidates": np.array([e.candidates for e in examples], dtype=np.int64),
        "gold": np.array([e.gold for e in examples], dtype=np.int64),
    }


def feature_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".hoaf")


def _example_record(i: int, e: QaExample) -> dict:
    return {
        "id": i,
        "kind": e.kind,
        "cells": [list(o) if o else None for o in e.scene.cells],
        "tokens": e.tokens,
        "candidates": e.candidates,
        "candidate_answers": e.candidate_answers,
        "gold": e.gold,
        "target_cells": e.target_cells,
    }


def save_dataset(dataset: Dataset, path) -> None:
    """JSON lines (a header line, then one example per line) plus a ``.hoaf`` feature sidecar."""
    path = Path(path)
    header = {
        "format": "hoattn-gridvqa",
        "version": 1,
        "seed": dataset.seed,
        "noise_sigma": dataset.noise_sigma,
        "world_seed": dataset.world.seed,
        "d_feat": dataset.world.d_feat,
        "n_examples": len(dataset),
        "answer_classes": list(ANSWER_CLASSES),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_example_record(i, e), sort_keys=True) for i, e in enumerate(dataset.examples)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_image_features(feature_path(path), [e.scene.features for e in dataset.examples])


def load_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path} is empty", 0)
    offset = 0
    try:
        header = json.loads(lines[0])
        if not isinstance(header, dict) or header.get("format") != "hoattn-gridvqa":
            raise FormatError(f"{path} is not a grid-VQA dataset", 0)
        records = load_feature_records(feature_path(path))
        offset = len(lines[0]) + 1
        examples = []
        for line in lines[1:]:
            r = json.loads(line)
            cells = [tuple(o) if o else None for o in r["cells"]]
            examples.append(
                QaExample(GridScene(cells, None), r["tokens"], r["kind"], r["candidates"], r["gold"], r["target_cells"])
            )
            offset += len(line.encode("utf-8")) + 1
        world = World.create(header["d_feat"], header["world_seed"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed dataset line ({exc})", offset) from None
    if len(examples) != len(records):
        raise FormatError(f"{len(examples)} examples but {len(records)} feature records")
    for e, feats in zip(examples, records):
        e.scene.features = feats
    return Dataset(examples, world, header["seed"], header["noise_sigma"])


def class_balance(examples: Sequence[QaExample]) -> dict:
    counts = {a: 0 for a in ANSWER_CLASSES}
    for e in examples:
        counts[ANSWER_CLASSES[e.gold]] += 1
    return counts
