"""Command-line surface: synthetic data, training, evaluation, prediction,
and gradient verification.

Every run resolves its settings as flags > config file > defaults and dumps
the resolved set (plus input/output paths and the package version) into a
``manifest.json`` next to its outputs, so a run is reproducible from the
manifest alone.  Config files use ``key = value`` lines; keys match the long
flag names with dashes or underscores.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage or config
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import (
    Bag,
    Dataset,
    SynthConfig,
    generate_synthetic,
    load_bags,
    load_dataset,
    load_tag_list,
    save_dataset,
    save_tag_list,
)
from .embeddings import MissingVectorError, build_matrix, load_embeddings, normalize_table
from .losses import DegenerateBagError, run_gradient_check_suite
from .metrics import evaluate
from .model import TASKS, forward, load_checkpoint, predict_topk, save_checkpoint
from .training import TrainConfig, TrainingDiverged, train

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Bad flags, bad config, or inconsistent inputs (exit code 2)."""


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_pair(text):
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _parse_int_list(text):
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError(f"expected a comma-separated list of integers, got {text!r}")
    return [int(p) for p in parts]


def _read_config_file(path):
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _resolve(args, defaults, types):
    """Merge defaults, config-file entries, and explicit flags (in that order).

    Config files may set any tunable (keys of ``defaults``); run-specific
    paths are command-line flags.
    """
    resolved = dict(defaults)
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if getattr(args, "config", None) is not None:
        for key, raw in _read_config_file(args.config).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} for this command")
            caster = types.get(key, str)
            try:
                resolved[key] = caster(raw)
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}")
    resolved.update(given)
    return resolved


def _write_manifest(out_dir, command, resolved, inputs, outputs):
    manifest = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(resolved.items())},
        "seed": resolved.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _save_embeddings_text(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


# --------------------------------------------------------------------------
# synth

SYNTH_DEFAULTS = {
    "num_seen": 10,
    "num_unseen": 5,
    "embed_dim": 16,
    "feature_dim": 32,
    "bag_size": 8,
    "tags_per_image": (1, 3),
    "distractors_per_bag": (4, 6),
    "noise_sigma": 0.02,
    "label_noise_rate": 0.0,
    "train_size": 200,
    "test_size": 100,
    "test_include_seen": False,
    "distractor_max_cosine": 0.3,
    "unseen_max_cos_seen": 0.42,
    "unseen_max_cos_pair": 0.25,
    "seed": 0,
}

SYNTH_TYPES = {
    "num_seen": int, "num_unseen": int, "embed_dim": int, "feature_dim": int,
    "bag_size": int, "tags_per_image": _parse_int_pair,
    "distractors_per_bag": _parse_int_pair, "noise_sigma": float,
    "label_noise_rate": float, "train_size": int, "test_size": int,
    "test_include_seen": _parse_bool, "distractor_max_cosine": float,
    "unseen_max_cos_seen": float, "unseen_max_cos_pair": float, "seed": int,
    "out": str,
}


def cmd_synth(resolved):
    out = Path(resolved["out"])
    cfg_fields = {k: v for k, v in resolved.items() if k in SYNTH_DEFAULTS}
    cfg = SynthConfig(**cfg_fields)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    train_set, test_set, table, _ = generate_synthetic(cfg)

    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_set, out / "train.jsonl")
    save_dataset(test_set, out / "test.jsonl")
    save_tag_list(train_set.seen_tags, out / "seen.txt")
    save_tag_list(train_set.unseen_tags, out / "unseen.txt")
    _save_embeddings_text(table, out / "embeddings.txt")
    _write_manifest(
        out, "synth", resolved, inputs={},
        outputs={name: str(out / name) for name in
                 ("train.jsonl", "test.jsonl", "seen.txt", "unseen.txt", "embeddings.txt")},
    )
    print(f"wrote {len(train_set)} train and {len(test_set)} test bags to {out}")
    return 0


# --------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "lr": 1e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "iterations": 1000,
    "seed": 0,
    "pooling": "mean",
    "hidden_dim": 512,
    "log_every": 100,
    "checkpoint_every": 1000,
    "bag_size": 0,  # 0 = use every instance in each bag
}

TRAIN_TYPES = {
    "lr": float, "beta1": float, "beta2": float, "epsilon": float,
    "iterations": int, "seed": int, "pooling": str, "hidden_dim": int,
    "log_every": int, "checkpoint_every": int, "bag_size": int,
    "bags": str, "embeddings": str, "seen": str, "out": str,
}


def _truncate_bags(dataset, bag_size):
    if bag_size <= 0:
        return dataset
    bags = [
        Bag(b.id, b.features[:, : min(bag_size, b.num_instances)], b.tags)
        for b in dataset.bags
    ]
    return Dataset(bags, dataset.seen_tags, dataset.unseen_tags, split=dataset.split)


def cmd_train(resolved):
    out = Path(resolved["out"])
    table, duplicates = load_embeddings(resolved["embeddings"])
    if duplicates:
        print(f"note: {duplicates} duplicate embedding tokens (last occurrence kept)", file=sys.stderr)
    table = normalize_table(table)
    seen = load_tag_list(resolved["seen"])
    matrix, _ = build_matrix(table, seen, [])
    dataset = Dataset(load_bags(resolved["bags"]), seen, [], split="train")
    dataset = _truncate_bags(dataset, resolved["bag_size"])

    cfg = TrainConfig(
        learning_rate=resolved["lr"],
        beta1=resolved["beta1"],
        beta2=resolved["beta2"],
        epsilon=resolved["epsilon"],
        iterations=resolved["iterations"],
        seed=resolved["seed"],
        pooling=resolved["pooling"],
        hidden_dim=resolved["hidden_dim"],
        log_every=resolved["log_every"],
        checkpoint_every=resolved["checkpoint_every"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))

    out.mkdir(parents=True, exist_ok=True)
    params, curve = train(dataset, matrix, cfg, checkpoint_dir=out)
    save_checkpoint(params, out / "model.ckpt")
    with open(out / "loss.csv", "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for iteration, loss in curve:
            fh.write(f"{iteration},{loss!r}\n")
    _write_manifest(
        out, "train", resolved,
        inputs={"bags": str(resolved["bags"]), "embeddings": str(resolved["embeddings"]),
                "seen": str(resolved["seen"])},
        outputs={"checkpoint": str(out / "model.ckpt"), "loss_curve": str(out / "loss.csv")},
    )
    print(f"final running-mean loss: {curve[-1][1]!r}")
    return 0


# --------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = {
    "task": "zst",
    "ks": [3, 5],
    "pooling": "",  # empty = use the checkpoint's stored mode
    "report_path": "",
}

EVAL_TYPES = {
    "task": str, "ks": _parse_int_list, "pooling": str, "report_path": str,
    "checkpoint": str, "embeddings": str, "seen": str, "unseen": str,
    "bags": str, "out": str,
}


def _load_eval_inputs(resolved):
    table, _ = load_embeddings(resolved["embeddings"])
    table = normalize_table(table)
    seen = load_tag_list(resolved["seen"])
    unseen = load_tag_list(resolved["unseen"])
    _, extended = build_matrix(table, seen, unseen)
    pooling = resolved.get("pooling") or None
    params = load_checkpoint(resolved["checkpoint"], extended, pooling=pooling)
    return params, seen, unseen


def cmd_eval(resolved):
    out = Path(resolved["out"])
    if resolved["task"] not in TASKS:
        raise UsageError(f"task must be one of {TASKS}, got {resolved['task']!r}")
    params, _, _ = _load_eval_inputs(resolved)
    test = load_dataset(resolved["bags"], resolved["seen"], resolved["unseen"], split="test")
    report = evaluate(params, test, resolved["task"], ks=resolved["ks"])

    out.mkdir(parents=True, exist_ok=True)
    report_path = Path(resolved["report_path"]) if resolved["report_path"] else out / "report.jsonl"
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_records())
    _write_manifest(
        out, "eval", resolved,
        inputs={key: str(resolved[key]) for key in ("checkpoint", "embeddings", "seen", "unseen", "bags")},
        outputs={"report_text": str(out / "report.txt"), "report_records": str(report_path)},
    )

    print(f"task: {report.task}")
    print(f"miap: {report.miap:.4f}")
    for k in sorted(report.per_k):
        p, r, f1 = report.per_k[k]
        print(f"K={k}: precision {p:.4f}  recall {r:.4f}  f1 {f1:.4f}")
    if report.zsr_top1 is not None:
        print(f"zsr per-class top-1: {report.zsr_top1:.4f}")
    print(f"images evaluated: {report.images_evaluated}, skipped: {report.images_skipped}")
    return 0


# --------------------------------------------------------------------------
# predict

PREDICT_DEFAULTS = {
    "task": "gzst",
    "k": 0,  # 0 = task default (1 for zsr, 3 otherwise)
    "pooling": "",
}

PREDICT_TYPES = {
    "task": str, "k": int, "pooling": str,
    "checkpoint": str, "embeddings": str, "seen": str, "unseen": str,
    "bags": str, "out": str,
}


def cmd_predict(resolved):
    if resolved["task"] not in TASKS:
        raise UsageError(f"task must be one of {TASKS}, got {resolved['task']!r}")
    params, seen, unseen = _load_eval_inputs(resolved)
    bags = load_bags(resolved["bags"])
    k = resolved["k"] or (1 if resolved["task"] == "zsr" else 3)
    universe = list(seen) + list(unseen)

    lines = []
    for bag in bags:
        scores = forward(params, bag).bag_scores
        top = predict_topk(scores, resolved["task"], k, len(seen))
        lines.append(f"# {bag.id}")
        for idx in top:
            lines.append(f"{universe[idx]}\t{scores[idx]!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)

    if resolved.get("out"):
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "predictions.tsv", "w", encoding="utf-8") as fh:
            fh.write(text)
        _write_manifest(
            out, "predict", resolved,
            inputs={key: str(resolved[key]) for key in ("checkpoint", "embeddings", "seen", "unseen", "bags")},
            outputs={"predictions": str(out / "predictions.tsv")},
        )
    return 0


# --------------------------------------------------------------------------
# gradcheck

GRADCHECK_DEFAULTS = {
    "trials": 100,
    "seed": 0,
    "pooling": "both",
    "allow_ties": False,
}

GRADCHECK_TYPES = {
    "trials": int, "seed": int, "pooling": str, "allow_ties": _parse_bool,
}


def cmd_gradcheck(resolved):
    if resolved["pooling"] == "both":
        poolings = ("mean", "max")
    elif resolved["pooling"] in ("mean", "max"):
        poolings = (resolved["pooling"],)
    else:
        raise UsageError(f"pooling must be mean, max, or both, got {resolved['pooling']!r}")
    report = run_gradient_check_suite(
        trials=resolved["trials"],
        seed=resolved["seed"],
        poolings=poolings,
        allow_ties=resolved["allow_ties"],
    )
    print(f"configurations checked: {report.trials}")
    print(f"max relative error: {report.max_rel_error!r}")
    if report.max_rel_error < GRADCHECK_TOLERANCE:
        print(f"PASS (tolerance {GRADCHECK_TOLERANCE})")
        return 0
    worst = report.worst_trial
    print(
        f"FAIL (tolerance {GRADCHECK_TOLERANCE}): trial {worst['trial']} "
        f"with {worst['pooling']} pooling, seed base {resolved['seed']}"
    )
    return 1


# --------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="miltag",
        description="Multi-label zero-shot tagging over bags of instance features.",
    )
    parser.add_argument("--version", action="version", version=f"miltag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.set_defaults(**{})
        p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-seen", type=int, dest="num_seen")
    p.add_argument("--num-unseen", type=int, dest="num_unseen")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--bag-size", type=int, dest="bag_size")
    p.add_argument("--tags-per-image", type=_parse_int_pair, dest="tags_per_image",
                   metavar="LO,HI")
    p.add_argument("--distractors-per-bag", type=_parse_int_pair, dest="distractors_per_bag",
                   metavar="LO,HI")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--label-noise-rate", type=float, dest="label_noise_rate")
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--test-include-seen", type=_parse_bool, dest="test_include_seen",
                   metavar="BOOL")
    p.add_argument("--distractor-max-cosine", type=float, dest="distractor_max_cosine")
    p.add_argument("--unseen-max-cos-seen", type=float, dest="unseen_max_cos_seen")
    p.add_argument("--unseen-max-cos-pair", type=float, dest="unseen_max_cos_pair")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth, defaults=SYNTH_DEFAULTS, types=SYNTH_TYPES)

    p = sub.add_parser("train", help="train the tagging head",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--bags", required=True, help="training bag file")
    p.add_argument("--embeddings", required=True, help="word-vector text file")
    p.add_argument("--seen", required=True, help="seen tag list")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--pooling", choices=("mean", "max"))
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--bag-size", type=int, dest="bag_size",
                   help="keep only the first N instances of each bag (0 = all)")
    p.add_argument("--log-every", type=int, dest="log_every")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train, defaults=TRAIN_DEFAULTS, types=TRAIN_TYPES)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--seen", required=True)
    p.add_argument("--unseen", required=True)
    p.add_argument("--bags", required=True, help="test bag file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--k", type=_parse_int_list, dest="ks", metavar="K1,K2,...")
    p.add_argument("--pooling", choices=("mean", "max"))
    p.add_argument("--report-path", dest="report_path")
    p.set_defaults(func=cmd_eval, defaults=EVAL_DEFAULTS, types=EVAL_TYPES)

    p = sub.add_parser("predict", help="print top-K tags for each bag",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--seen", required=True)
    p.add_argument("--unseen", required=True)
    p.add_argument("--bags", required=True)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--k", type=int)
    p.add_argument("--pooling", choices=("mean", "max"))
    p.add_argument("--out", help="optional directory for predictions + manifest")
    p.set_defaults(func=cmd_predict, defaults=PREDICT_DEFAULTS, types=PREDICT_TYPES)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pooling", choices=("mean", "max", "both"))
    p.add_argument("--allow-ties", action="store_true", dest="allow_ties",
                   help="append a tied max-pool case that is expected to fail")
    p.set_defaults(func=cmd_gradcheck, defaults=GRADCHECK_DEFAULTS, types=GRADCHECK_TYPES)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = args.func
    defaults = args.defaults
    types = args.types
    cleaned = argparse.Namespace(
        **{k: v for k, v in vars(args).items() if k not in ("func", "defaults", "types")}
    )
    try:
        resolved = _resolve(cleaned, defaults, types)
        return handler(resolved)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, DegenerateBagError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, MissingVectorError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
