"""JSON run configuration for the ``train`` command.

Defaults follow the paper-scale setup (RMSProp lr 4e-4, alpha 0.99, eps 1e-8,
batch 300, d 512, sketch dimension 8192, dropout 0.5 / 0.3); toy runs override
them in their config files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .train import HyperParams


@dataclass
class RunConfig:
    dataset: str = "data/train.jsonl"
    checkpoint: str = "run/model.hoac"
    metrics: str = "run/metrics.csv"
    resume: Optional[str] = None
    val_fraction: float = 0.2
    # model
    modalities: int = 3
    order: int = 3
    fusion: str = "mcb2"
    n_q: int = 14
    d: int = 512
    sketch_dim: int = 8192
    d_hidden: Optional[int] = None
    mean_field_iters: int = 1
    sketch_normalize: bool = False
    # optimisation
    learning_rate: float = 4e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    batch_size: int = 300
    dropout_embed: float = 0.5
    dropout_last: float = 0.3
    max_iters: int = 180_000
    log_every: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        problems = [f"unknown key {k!r}" for k in raw if k not in known]
        for k, v in raw.items():
            if k in known and not _type_ok(known[k].type, v):
                problems.append(f"key {k!r} has invalid value {v!r} (expected {known[k].type})")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        cfg = cls(**raw)
        if base_dir is not None:
            for key in ("dataset", "checkpoint", "metrics", "resume"):
                value = getattr(cfg, key)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, key, str(base_dir / value))
        if not 0 <= cfg.val_fraction < 1:
            raise ConfigError("invalid config: val_fraction must lie in [0, 1)")
        cfg.hyperparams()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw, path.parent)

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            learning_rate=self.learning_rate,
            rms_alpha=self.rms_alpha,
            rms_eps=self.rms_eps,
            batch_size=self.batch_size,
            dropout_embed=self.dropout_embed,
            dropout_last=self.dropout_last,
            d=self.d,
            sketch_dim=self.sketch_dim,
            max_iters=self.max_iters,
            seed=self.seed,
            log_every=self.log_every,
        )

    def model_config(self, vocab_size, answer_vocab_size, n_classes, d_feat, n_v, n_a) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            answer_vocab_size=answer_vocab_size,
            n_classes=n_classes,
            d_feat=d_feat,
            n_v=n_v,
            n_q=self.n_q,
            n_a=n_a,
            d=self.d,
            sketch_dim=self.sketch_dim,
            d_hidden=self.d_hidden,
            modalities=self.modalities,
            order=self.order,
            fusion=self.fusion,
            mean_field_iters=self.mean_field_iters,
            sketch_normalize=self.sketch_normalize,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _type_ok(annotation: str, value) -> bool:
    optional = annotation.startswith("Optional[")
    base = annotation[9:-1] if optional else annotation
    if value is None:
        return optional
    if base == "bool":
        return isinstance(value, bool)
    if base == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if base == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if base == "str":
        return isinstance(value, str)
    return True
