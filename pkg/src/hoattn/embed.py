"""Question, answer and image-feature embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence, get_type_hints

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, VocabError

PAD = 0
UNK = 1
ANSWER_UNK = 0

HOAF_MAGIC = b"HOAF"
HOAF_VERSION = 1
_HOAF_HEADER = struct.Struct("<4sIII")


class Vocab:
    """Question-word vocabulary; ids 0 and 1 are reserved for padding and unknown words."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = ["<pad>", "<unk>"]
        self.stoi = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Sequence[str], n_q: int) -> list[int]:
        """Token ids cut to ``n_q`` or padded with PAD."""
        ids = [self.id(t) for t in tokens[:n_q]]
        return ids + [PAD] * (n_q - len(ids))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i != PAD]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())


def normalize_answer(answer: str) -> str:
    return " ".join(answer.lower().split())


class AnswerVocab:
    """Whole-answer vocabulary: each normalised n-gram is one entry; id 0 absorbs everything unseen."""

    def __init__(self, answers: Iterable[str] = ()):
        self.itos = ["<unk>"]
        self.stoi = {}
        for a in answers:
            key = normalize_answer(a)
            if key not in self.stoi:
                self.stoi[key] = len(self.itos)
                self.itos.append(key)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, AnswerVocab) and self.itos == other.itos

    def id(self, answer: str) -> int:
        return self.stoi.get(normalize_answer(answer), ANSWER_UNK)

    def encode(self, answers: Sequence[str]) -> list[int]:
        return [self.id(a) for a in answers]


# ---------------------------------------------------------------------------
# parameter bundles


def _init_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Bundle:
    """Dataclass mixin: flatten to / rebuild from ``{"prefix.field": value}`` maps."""

    def named(self, prefix: str) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Bundle):
                out.update(v.named(f"{prefix}.{f.name}"))
            else:
                out[f"{prefix}.{f.name}"] = v
        return out

    @classmethod
    def from_named(cls, prefix: str, lookup):
        hints = get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            sub = hints[f.name]
            is_bundle = isinstance(sub, type) and issubclass(sub, Bundle)
            kwargs[f.name] = sub.from_named(key, lookup) if is_bundle else lookup(key)
        return cls(**kwargs)


@dataclass
class LstmParams(Bundle):
    """Gate blocks are stacked along the last axis in the order input, forget, output, cell."""

    w_in: np.ndarray
    w_rec: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, rng, d_in: int, d_h: int, forget_bias: float = 1.0) -> "LstmParams":
        bias = np.zeros(4 * d_h)
        bias[d_h : 2 * d_h] = forget_bias
        return cls(
            _init_uniform(rng, (d_in, 4 * d_h), d_in),
            _init_uniform(rng, (d_h, 4 * d_h), d_h),
            bias,
        )


@dataclass
class QuestionEncoderParams(Bundle):
    embedding: np.ndarray
    embed_bias: np.ndarray
    conv_kernel: np.ndarray
    conv_bias: np.ndarray
    lstm_words: LstmParams
    lstm_conv: LstmParams

    @classmethod
    def init(cls, rng, vocab_size: int, d: int) -> "QuestionEncoderParams":
        if d % 2:
            raise DimensionError(f"question embedding size must be even, got {d}")
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(vocab_size, d)),
            np.zeros(d),
            _init_uniform(rng, (3, d, d), 3 * d),
            np.zeros(d),
            LstmParams.init(rng, d, d // 2),
            LstmParams.init(rng, d, d // 2),
        )


# ---------------------------------------------------------------------------
# operations


def embed_tokens(ids, table):
    """Row lookup ``table[ids]``; ``ids`` may carry leading batch axes."""
    ids = np.asarray(ids, dtype=np.int64)
    n = np.shape(T._value(table))[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids[(ids < 0) | (ids >= n)][0])
        raise VocabError(f"token id {bad} outside vocabulary of size {n}")
    return T.take_rows(table, ids)


def temporal_conv3(x, kernel, bias):
    """Width-3 convolution over the sequence axis (second to last) with one row of zero padding per side.

    ``kernel[0]`` multiplies the previous position, ``kernel[1]`` the current one and
    ``kernel[2]`` the next.
    """
    xs, ks, bs = (np.shape(T._value(v)) for v in (x, kernel, bias))
    if len(xs) < 2 or xs[-2] < 1:
        raise DimensionError(f"temporal_conv3 needs a [.., n, d] input with n >= 1, got {xs}")
    d = xs[-1]
    if ks[:2] != (3, d) or len(ks) != 3 or bs != (ks[2],):
        raise DimensionError(f"kernel {ks} / bias {bs} do not fit input width {d}")
    n = xs[-2]
    zeros = np.zeros(xs[:-2] + (1, d))
    padded = T.concat([zeros, x, zeros], axis=-2)
    out = None
    for tap in range(3):
        window = T.getitem(padded, (Ellipsis, slice(tap, tap + n), slice(None)))
        term = T.matmul(window, T.getitem(kernel, tap))
        out = term if out is None else T.add(out, term)
    return T.add(out, bias)


def lstm_forward(x, w_in, w_rec, bias, h0=None, c0=None):
    """Hidden states at every step of a standard (peephole-free) LSTM over axis -2."""
    xs = np.shape(T._value(x))
    d_in = xs[-1]
    d_h = np.shape(T._value(w_rec))[0]
    if np.shape(T._value(w_in)) != (d_in, 4 * d_h) or np.shape(T._value(w_rec)) != (d_h, 4 * d_h):
        raise DimensionError(
            f"LSTM weights {np.shape(T._value(w_in))}, {np.shape(T._value(w_rec))} do not fit input width {d_in}"
        )
    if np.shape(T._value(bias)) != (4 * d_h,):
        raise DimensionError(f"LSTM bias must have length {4 * d_h}")
    lead = xs[:-2]
    h = np.zeros(lead + (d_h,)) if h0 is None else h0
    c = np.zeros(lead + (d_h,)) if c0 is None else c0
    projected = T.add(T.matmul(x, w_in), bias)
    outputs = []
    for t in range(xs[-2]):
        z = T.add(T.getitem(projected, (Ellipsis, t, slice(None))), T.matmul(h, w_rec))
        i = T.sigmoid(T.getitem(z, (Ellipsis, slice(0, d_h))))
        f = T.sigmoid(T.getitem(z, (Ellipsis, slice(d_h, 2 * d_h))))
        o = T.sigmoid(T.getitem(z, (Ellipsis, slice(2 * d_h, 3 * d_h))))
        g = T.tanh(T.getitem(z, (Ellipsis, slice(3 * d_h, 4 * d_h))))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        outputs.append(h)
    return T.stack(outputs, axis=-2)


def question_encode(ids, p: QuestionEncoderParams, dropout=None):
    """``[.., n_q, d]`` question features: word-level LSTM and conv-level LSTM, concatenated.

    ``dropout(site, x)`` is applied after the word embeddings and after each LSTM
    when given.
    """
    drop = dropout or (lambda site, x: x)
    words = T.add(embed_tokens(ids, p.embedding), p.embed_bias)
    words = drop("embed", words)
    conv = temporal_conv3(words, p.conv_kernel, p.conv_bias)
    h_words = lstm_forward(words, p.lstm_words.w_in, p.lstm_words.w_rec, p.lstm_words.bias)
    h_conv = lstm_forward(conv, p.lstm_conv.w_in, p.lstm_conv.w_rec, p.lstm_conv.bias)
    q = T.concat([h_words, h_conv], axis=-1)
    return drop("lstm", q)


def answer_embed(answer_ids, table):
    """One row per candidate; no sequence model is applied to answers."""
    return embed_tokens(answer_ids, table)


# ---------------------------------------------------------------------------
# binary image-feature records


def encode_image_features(features) -> bytes:
    feats = np.asarray(features)
    if feats.ndim != 2:
        raise DimensionError(f"image features must be [n_v, d_feat], got shape {feats.shape}")
    n_v, d_feat = feats.shape
    return _HOAF_HEADER.pack(HOAF_MAGIC, HOAF_VERSION, n_v, d_feat) + feats.astype("<f4").tobytes()


def write_image_features(path, records) -> None:
    """Write one or more ``[n_v, d_feat]`` records back to back."""
    if isinstance(records, np.ndarray) and records.ndim == 2:
        records = [records]
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(encode_image_features(rec))


def _decode_record(buf: bytes, offset: int):
    if len(buf) - offset < _HOAF_HEADER.size:
        raise FormatError("truncated feature header", offset)
    magic, version, n_v, d_feat = _HOAF_HEADER.unpack_from(buf, offset)
    if magic != HOAF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset)
    if version != HOAF_VERSION:
        raise FormatError(f"unsupported feature file version {version}", offset + 4)
    start = offset + _HOAF_HEADER.size
    nbytes = 4 * n_v * d_feat
    if len(buf) - start < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - start}", len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=n_v * d_feat, offset=start)
    return data.astype(np.float64).reshape(n_v, d_feat), start + nbytes


def load_feature_records(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    records = []
    offset = 0
    while offset < len(buf):
        rec, offset = _decode_record(buf, offset)
        records.append(rec)
    if not records:
        raise FormatError("empty feature file", 0)
    return records


def load_image_features(path) -> np.ndarray:
    """Read a single ``[n_v, d_feat]`` record as float64."""
    buf = Path(path).read_bytes()
    rec, end = _decode_record(buf, 0)
    if end != len(buf):
        raise FormatError("trailing bytes after the feature record", end)
    return rec
