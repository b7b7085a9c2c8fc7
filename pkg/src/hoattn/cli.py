"""``hoattn`` command line: gen-data, train, eval, attend-dump, selftest.

Exit codes: 0 ok, 1 check or evaluation failure, 2 usage or config error,
3 I/O or format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, selftest
from .attention import TIERS
from .config import RunConfig
from .data import (
    ANSWER_CLASSES,
    GRID,
    KINDS,
    N_CANDIDATES,
    N_CELLS,
    Dataset,
    answer_vocab,
    bayes_oracle,
    class_balance,
    encode_batch,
    generate_dataset,
    load_dataset,
    question_vocab,
    save_dataset,
)
from .errors import ConfigError, FormatError, HoattnError, OracleError, TrainingError
from .model import HighOrderAttentionModel, check_compatible
from .train import METRICS_HEADER, evaluate_arrays, train_loop

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("hoattn")


class UsageError(HoattnError):
    pass


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(seed: int, n: int, out_path, noise_sigma: float = 0.2, kinds=KINDS) -> Dataset:
    if n < 1:
        raise UsageError(f"--n must be at least 1, got {n}")
    dataset = generate_dataset(seed, n, noise_sigma=noise_sigma, kinds=kinds)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out_path)
    print(f"wrote {len(dataset)} examples to {out_path}")
    kinds_count = {k: 0 for k in KINDS}
    for e in dataset.examples:
        kinds_count[e.kind] += 1
    print("kinds: " + " ".join(f"{k}={v}" for k, v in kinds_count.items()))
    print("answers: " + " ".join(f"{k}={v}" for k, v in class_balance(dataset.examples).items()))
    return dataset


# ---------------------------------------------------------------------------
# train


def dataset_shape(dataset: Dataset) -> dict:
    return dict(
        vocab_size=len(question_vocab()),
        answer_vocab_size=len(answer_vocab()),
        n_classes=len(ANSWER_CLASSES),
        d_feat=dataset.world.d_feat,
        n_v=N_CELLS,
        n_a=N_CANDIDATES,
    )


def best_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".best" + path.suffix)


def cmd_train(config_path, seed: int | None = None, dataset_path=None, checkpoint_path=None):
    cfg = RunConfig.load(config_path)
    if seed is not None:
        cfg.seed = seed
    if dataset_path is not None:
        cfg.dataset = str(dataset_path)
    if checkpoint_path is not None:
        cfg.checkpoint = str(checkpoint_path)
    hp = cfg.hyperparams()
    dataset = load_dataset(cfg.dataset)
    train_ex, val_ex = dataset.split(cfg.val_fraction)
    model_cfg = cfg.model_config(**dataset_shape(dataset))

    rms, start = None, 0
    if cfg.resume:
        ckpt = checkpoint.load(cfg.resume)
        if ckpt.model.config != model_cfg:
            raise ConfigError("resume checkpoint was trained with a different model configuration")
        model, rms, start = ckpt.model, ckpt.rms, ckpt.step
    else:
        model = HighOrderAttentionModel(model_cfg)

    metrics_path = Path(cfg.metrics)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    append = bool(cfg.resume) and metrics_path.exists()
    with open(metrics_path, "a" if append else "w", encoding="utf-8", newline="\n") as fh:
        if not append:
            fh.write(METRICS_HEADER + "\n")

        def on_log(row):
            fh.write(row + "\n")
            fh.flush()
            print(row)

        result = train_loop(train_ex, val_ex, model, hp, rms=rms, start_step=start, on_log=on_log,
                            dump_dir=metrics_path.parent)

    ckpt_path = Path(cfg.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"run": cfg.to_dict(), "best_val": result.best_val, "dataset_seed": dataset.seed}
    checkpoint.save(checkpoint.Checkpoint(result.model, result.rms, result.step, meta), ckpt_path)
    checkpoint.save(checkpoint.Checkpoint(result.best_model, None, result.step, meta), best_path(ckpt_path))
    print(f"saved checkpoint at step {result.step} to {ckpt_path} (best val {result.best_val:.4f})")
    return result


# ---------------------------------------------------------------------------
# eval


def accuracy_report(predictions, examples) -> dict:
    """Overall and per-kind accuracy; per-kind entries carry their example counts."""
    predictions = np.asarray(predictions)
    gold = np.array([e.gold for e in examples])
    correct = predictions == gold
    per_kind = {}
    for kind in KINDS:
        mask = np.array([e.kind == kind for e in examples], dtype=bool)
        if mask.any():
            per_kind[kind] = {"n": int(mask.sum()), "accuracy": float(correct[mask].mean())}
    overall = float(correct.mean()) if len(examples) else float("nan")
    return {"n": len(examples), "accuracy": overall, "per_kind": per_kind}


def load_compatible(checkpoint_path, dataset: Dataset):
    ckpt = checkpoint.load(checkpoint_path)
    shape = dataset_shape(dataset)
    check_compatible(ckpt.model.config, **shape)
    return ckpt


def cmd_eval(checkpoint_path=None, dataset_path=None, oracle: bool = False, min_accuracy: float | None = None):
    dataset = load_dataset(dataset_path)
    examples = dataset.examples
    if oracle:
        preds = [bayes_oracle(e, dataset.world) for e in examples]
    else:
        model = load_compatible(checkpoint_path, dataset).model
        arrays = encode_batch(examples, question_vocab(), answer_vocab(), model.config.n_q)
        preds = evaluate_arrays(model, arrays)
    report = accuracy_report(preds, examples)
    print(f"overall accuracy {report['accuracy']:.4f} over {report['n']} examples")
    for kind, r in report["per_kind"].items():
        print(f"  {kind:<12} {r['accuracy']:.4f} (n={r['n']})")
    ok = min_accuracy is None or report["accuracy"] >= min_accuracy
    return report, ok


# ---------------------------------------------------------------------------
# attend-dump


def write_pgm(path, values: np.ndarray) -> np.ndarray:
    """Binary PGM (P5) of ``values`` min-max scaled to 0..255; a constant map is all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        pixels = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(values.shape, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return pixels


def write_attention_csv(path, potentials: dict, dist: np.ndarray, tiers) -> None:
    lines = ["index," + ",".join(tiers) + ",P"]
    for i in range(len(dist)):
        row = [repr(float(potentials[t][i])) if potentials[t] is not None else "0.0" for t in tiers]
        lines.append(f"{i}," + ",".join(row) + f",{float(dist[i])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_attend_dump(checkpoint_path, dataset_path, example_id: int, out_dir) -> dict:
    dataset = load_dataset(dataset_path)
    if not 0 <= example_id < len(dataset):
        raise LookupError(f"example {example_id} not found (dataset has {len(dataset)} examples)")
    model = load_compatible(checkpoint_path, dataset).model
    example = dataset[example_id]
    batch = encode_batch([example], question_vocab(), answer_vocab(), model.config.n_q)
    att = model.forward(batch).attention
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for m, dist in att.distributions.items():
        pots = {t: (None if p is None else np.asarray(p)[0]) for t, p in att.potentials[m].items()}
        path = out_dir / f"attention_{m}.csv"
        write_attention_csv(path, pots, np.asarray(dist)[0], TIERS[m])
        written[m] = path
    p_v = np.asarray(att.distributions["V"])[0].reshape(GRID, GRID)
    write_pgm(out_dir / "attention_V.pgm", p_v)
    print(f"example {example_id}: {' '.join(example.tokens)} -> wrote {len(written)} CSV files and a heatmap to {out_dir}")
    return written


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest() -> bool:
    results = selftest.run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return ok


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoattn", description="High-order attention for multiple-choice VQA.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic grid-VQA dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=5000, help="number of examples")
    p.add_argument("--out", required=True, help="output .jsonl path (features go to <out>.hoaf)")
    p.add_argument("--noise-sigma", type=float, default=0.2)
    p.add_argument("--kinds", default=",".join(KINDS), help="comma-separated question kinds")

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--dataset", help="override the config dataset path")
    p.add_argument("--checkpoint", help="override the output checkpoint path")

    p = sub.add_parser("eval", help="multiple-choice accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--oracle", action="store_true", help="score the Bayes oracle instead of a checkpoint")
    p.add_argument("--min-accuracy", type=float, help="exit 1 when overall accuracy is below this")

    p = sub.add_parser("attend-dump", help="export attention potentials and distributions for one example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--example-id", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    sub.add_parser("selftest", help="run the built-in numerical checks")
    return parser


def _run(args) -> int:
    if args.command == "gen-data":
        kinds = [k for k in args.kinds.split(",") if k]
        bad = sorted(set(kinds) - set(KINDS))
        if bad or not kinds:
            raise UsageError(f"unknown question kinds {bad}; choose from {list(KINDS)}")
        cmd_gen_data(args.seed, args.n, args.out, args.noise_sigma, kinds)
        return EXIT_OK
    if args.command == "train":
        cmd_train(args.config, args.seed, args.dataset, args.checkpoint)
        return EXIT_OK
    if args.command == "eval":
        if not args.oracle and not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        _, ok = cmd_eval(args.checkpoint, args.dataset, args.oracle, args.min_accuracy)
        return EXIT_OK if ok else EXIT_CHECK
    if args.command == "attend-dump":
        cmd_attend_dump(args.checkpoint, args.dataset, args.example_id, args.out)
        return EXIT_OK
    return EXIT_OK if cmd_selftest() else EXIT_CHECK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    threads = os.environ.get("HOATTN_THREADS", "1")
    try:
        n_threads = int(threads)
        if n_threads < 1:
            raise ValueError
    except ValueError:
        print(f"error: HOATTN_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=n_threads):
            return _run(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OracleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
