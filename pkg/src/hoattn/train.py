"""Loss, RMSProp, dropout and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import QaExample, answer_vocab, encode_batch, question_vocab
from .decision import predict_mc_batch
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .model import HighOrderAttentionModel

log = logging.getLogger(__name__)

# dropout sites: the three named in the model description plus the pre-output layer
DROPOUT_SITES = {"embed": 0, "lstm": 1, "unary_V": 2, "unary_Q": 3, "unary_A": 4, "last": 5}
_SHUFFLE_STREAM = 0x5F
_DROPOUT_STREAM = 0xD0


@dataclass
class HyperParams:
    learning_rate: float = 4e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    batch_size: int = 300
    dropout_embed: float = 0.5
    dropout_last: float = 0.3
    d: int = 512
    sketch_dim: int = 8192
    max_iters: int = 180_000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        problems = []
        for name in ("learning_rate", "rms_alpha"):
            if not 0 < getattr(self, name) <= 1:
                problems.append(f"{name} must lie in (0, 1]")
        for name in ("dropout_embed", "dropout_last"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1)")
        for name in ("batch_size", "d", "sketch_dim", "log_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.rms_eps <= 0:
            problems.append("rms_eps must be positive")
        if self.max_iters < 0:
            problems.append("max_iters must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))

    def dropout_rate(self, site: str) -> float:
        return self.dropout_last if site == "last" else self.dropout_embed


def cross_entropy_loss(logits, gold):
    return T.cross_entropy(logits, gold)


@dataclass
class RmsPropState:
    mean_square: dict = field(default_factory=dict)


def rmsprop_step(param: np.ndarray, grad: np.ndarray, r: np.ndarray, hp: HyperParams):
    """One update: ``r = a*r + (1-a)*g^2``; ``param -= lr * g / (sqrt(r) + eps)``."""
    if param.shape != grad.shape or r.shape != grad.shape:
        raise DimensionError(f"rmsprop: parameter {param.shape}, gradient {grad.shape}, state {r.shape}")
    r = hp.rms_alpha * r + (1.0 - hp.rms_alpha) * grad * grad
    param = param - hp.learning_rate * grad / (np.sqrt(r) + hp.rms_eps)
    return param, r


def dropout_mask(shape, rate: float, seed: int, step: int, site: int) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1 / (1 - rate)``."""
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _DROPOUT_STREAM, step, site]))
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def make_dropout(hp: HyperParams, step: int) -> Callable:
    def drop(site, x):
        rate = hp.dropout_rate(site)
        if rate == 0:
            return x
        return T.mul(x, dropout_mask(np.shape(T._value(x)), rate, hp.seed, step, DROPOUT_SITES[site]))

    return drop


class BatchSchedule:
    """Position ``p`` of the example stream is ``perm(p // n)[p % n]``; each epoch has its own permutation."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ContractError("cannot train on an empty dataset")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, _SHUFFLE_STREAM, epoch]))
            self._perms = {epoch: rng.permutation(self.n)}
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        start = step * self.batch_size
        out = np.empty(self.batch_size, dtype=np.int64)
        for j in range(self.batch_size):
            p = start + j
            out[j] = self._perm(p // self.n)[p % self.n]
        return out


def _take(arrays: dict, idx) -> dict:
    return {k: v[idx] for k, v in arrays.items()}


def evaluate_arrays(model: HighOrderAttentionModel, arrays: dict, batch_size: int = 500) -> np.ndarray:
    """Multiple-choice predictions for every encoded example (dropout off)."""
    n = len(arrays["gold"])
    preds = []
    for start in range(0, n, batch_size):
        part = _take(arrays, slice(start, start + batch_size))
        preds.append(predict_mc_batch(model.logits(part), part["candidates"]))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: HighOrderAttentionModel, arrays: dict) -> float:
    if len(arrays["gold"]) == 0:
        return float("nan")
    return float(np.mean(evaluate_arrays(model, arrays) == arrays["gold"]))


@dataclass
class TrainResult:
    model: HighOrderAttentionModel
    best_model: HighOrderAttentionModel
    best_val: float
    rms: RmsPropState
    step: int
    metrics: list = field(default_factory=list)


def format_metrics_row(step: int, loss: float, train_acc: float, val_acc: float) -> str:
    return f"{step},{loss:.12g},{train_acc:.6f},{val_acc:.6f}"


METRICS_HEADER = "step,loss,train_acc,val_acc"


def train_loop(
    train_examples: Sequence[QaExample],
    val_examples: Sequence[QaExample],
    model: HighOrderAttentionModel,
    hp: HyperParams,
    rms: Optional[RmsPropState] = None,
    start_step: int = 0,
    on_log: Optional[Callable[[str], None]] = None,
    dump_dir: Optional[Path] = None,
) -> TrainResult:
    """Train ``model`` in place from ``start_step`` up to ``hp.max_iters`` updates.

    A metrics row is produced every ``hp.log_every`` steps and after the final
    step; ``on_log`` receives each formatted row as it is produced.
    """
    if not train_examples:
        raise ContractError("training set is empty")
    cfg = model.config
    vocab, answers = question_vocab(), answer_vocab()
    train = encode_batch(train_examples, vocab, answers, cfg.n_q)
    val = encode_batch(val_examples, vocab, answers, cfg.n_q) if val_examples else None
    rms = rms or RmsPropState({k: np.zeros_like(v) for k, v in model.params.items()})
    schedule = BatchSchedule(len(train_examples), hp.batch_size, hp.seed)

    best_val = -1.0
    best_model = model.copy()
    metrics = []
    window_loss, window_correct, window_seen = 0.0, 0, 0
    for step in range(start_step, hp.max_iters):
        idx = schedule.indices(step)
        batch = _take(train, idx)
        graph = T.Graph()
        out = model.forward(batch, graph, dropout=make_dropout(hp, step))
        loss = cross_entropy_loss(out.logits, batch["gold"])
        value = float(loss.value)
        if not np.isfinite(value):
            _dump_nonfinite(dump_dir, step, idx, value)
            raise TrainingError(f"non-finite loss {value} at step {step + 1} (batch example indices {idx.tolist()})")
        grads = T.backward(graph, loss)
        for name, g in grads.items():
            model.params[name], rms.mean_square[name] = rmsprop_step(
                model.params[name], g, rms.mean_square[name], hp
            )
        preds = predict_mc_batch(out.logits.value, batch["candidates"])
        window_loss += value
        window_correct += int(np.sum(preds == batch["gold"]))
        window_seen += len(idx)
        done = step + 1
        if done % hp.log_every == 0 or done == hp.max_iters:
            val_acc = accuracy(model, val) if val is not None else float("nan")
            steps_in_window = window_seen // hp.batch_size
            row = format_metrics_row(done, window_loss / steps_in_window, window_correct / window_seen, val_acc)
            metrics.append(row)
            if on_log:
                on_log(row)
            log.info("step %d loss %.4f val %.4f", done, window_loss / steps_in_window, val_acc)
            if val is not None and val_acc > best_val:
                best_val = val_acc
                best_model = model.copy()
            window_loss, window_correct, window_seen = 0.0, 0, 0
    return TrainResult(model, best_model, best_val, rms, max(hp.max_iters, start_step), metrics)


def _dump_nonfinite(dump_dir, step, idx, value):
    if dump_dir is None:
        return
    path = Path(dump_dir) / "nonfinite_batch.json"
    path.write_text(json.dumps({"step": step + 1, "loss": repr(value), "example_indices": idx.tolist()}))


def hyperparams_dict(hp: HyperParams) -> dict:
    return asdict(hp)
