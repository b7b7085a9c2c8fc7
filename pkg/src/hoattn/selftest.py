"""Built-in numerical checks run by ``hoattn selftest``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import answer_vocab, question_vocab
from .model import HighOrderAttentionModel, ModelConfig
from .sketch import SketchStack, brute_force_sketch_outer, tensor_sketch
from .train import cross_entropy_loss


@dataclass
class CheckResult:
    name: str
    tolerance: float
    measured: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured)) and self.measured < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} measured={self.measured:.3e}  tolerance={self.tolerance:.0e}"


def sketch_identity_error(n_seeds: int = 50, seed: int = 0) -> float:
    """Worst |tensor_sketch - brute force| over arities 2, 3 and d_out 8, 16."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in (2, 3):
        for d_out in (8, 16):
            for _ in range(n_seeds):
                d_ins = [int(x) for x in rng.integers(1, 9, size=k)]
                seeds = [int(x) for x in rng.choice(2**32, size=k, replace=False)]
                stack = SketchStack.from_seeds(d_ins, d_out, seeds)
                vecs = [rng.normal(size=n) for n in d_ins]
                diff = np.abs(tensor_sketch(vecs, stack) - brute_force_sketch_outer(vecs, stack))
                worst = max(worst, float(diff.max()))
    return worst


def convolution_method_error(n: int = 128, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, n))
    fft = T.circular_convolve(u, v, method="fft")
    direct = T.circular_convolve(u, v, method="direct")
    return float(np.max(np.abs(fft - direct)))


def softmax_errors(seed: int = 0, trials: int = 100) -> tuple[float, float]:
    """(worst |sum - 1|, worst shift-invariance gap) over random vectors."""
    rng = np.random.default_rng(seed)
    sum_err = shift_err = 0.0
    for _ in range(trials):
        x = rng.normal(scale=5.0, size=int(rng.integers(1, 40)))
        p = T.softmax(x)
        sum_err = max(sum_err, abs(float(p.sum()) - 1.0))
        shifted = T.softmax(x + rng.normal(scale=50.0))
        shift_err = max(shift_err, float(np.max(np.abs(p - shifted))))
    return sum_err, shift_err


def tiny_model(seed: int = 0, fusion: str = "mcb2") -> tuple[HighOrderAttentionModel, dict]:
    """A three-modality model with d=8, n_v=4, n_q=3, n_a=3, sketch_dim=16 and a random batch of 2."""
    config = ModelConfig(
        vocab_size=len(question_vocab()),
        answer_vocab_size=len(answer_vocab()),
        n_classes=10,
        d_feat=5,
        n_v=4,
        n_q=3,
        n_a=3,
        d=8,
        sketch_dim=16,
        modalities=3,
        order=3,
        fusion=fusion,
        seed=seed,
    )
    model = HighOrderAttentionModel(config)
    rng = np.random.default_rng(seed + 1)
    # At init the fused features are tiny and b_hidden is zero, so every hidden
    # unit sits on its relu kink; move the biases away from it.
    b = model.params["classifier.b_hidden"]
    model.params["classifier.b_hidden"] = rng.choice([-1.0, 1.0], size=b.shape) * rng.uniform(0.25, 1.0, size=b.shape)
    n = 2
    candidates = np.stack([rng.choice(config.n_classes, size=config.n_a, replace=False) for _ in range(n)])
    batch = {
        "features": rng.normal(size=(n, config.n_v, config.d_feat)),
        "question": rng.integers(2, config.vocab_size, size=(n, config.n_q)),
        "answers": rng.integers(1, config.answer_vocab_size, size=(n, config.n_a)),
        "candidates": candidates,
        "gold": candidates[:, 0].copy(),
    }
    return model, batch


# Central-difference step for the model check.  Several gradient entries are
# ~1e-9 while the loss is O(1), so at eps=1e-5 float64 roundoff alone gives
# relative errors near 1e-3.
MODEL_CHECK_EPS = 1e-3


def tiny_model_grad_error(seed: int = 0, fusion: str = "mcb2", details: bool = False):
    model, batch = tiny_model(seed, fusion)
    graph = T.Graph()
    loss = cross_entropy_loss(model.forward(batch, graph).logits, batch["gold"])
    return T.grad_check(graph, loss, eps=MODEL_CHECK_EPS, details=details)


def run_all() -> list[CheckResult]:
    sum_err, shift_err = softmax_errors()
    return [
        CheckResult("tensor_sketch_identity", 1e-9, sketch_identity_error()),
        CheckResult("fft_vs_direct_convolution", 1e-9, convolution_method_error()),
        CheckResult("softmax_sums_to_one", 1e-12, sum_err),
        CheckResult("softmax_shift_invariance", 1e-12, shift_err),
        CheckResult("grad_check_tiny_model", 1e-4, tiny_model_grad_error()),
    ]

