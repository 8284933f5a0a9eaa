"""Command-line front end: data generation, training, evaluation, explanation.

Configuration comes from ``--key value`` flags and an optional ``key = value``
config file (``#`` comments); flags override file values.  Every run writes a
``run.txt`` echo of its fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetSpec, generate, load_folder, save_folder
from .explain import explain_decision, export_explanation
from .gradcheck import max_relative_grad_error, toy_setup
from .losses import LossWeights
from .metrics import (
    accuracy,
    fidelity,
    format_fidelity,
    format_pr_table,
    precision_table,
    prototype_compactness,
)
from .model import ModelConfig, ProtoSoloNet
from .training import (
    LOG_HEADER,
    TrainConfig,
    load_model,
    save_checkpoint,
    train,
)

# every recognized config-file key, with its parser
_KEY_TYPES = {
    "classes": int,
    "per-class": int,
    "size": int,
    "data-seed": int,
    "train-fraction": float,
    "prototypes-per-class": int,
    "mode": str,
    "agg": str,
    "epsilon": float,
    "warm-epochs": int,
    "joint-epochs": int,
    "fc-epochs": int,
    "warm-lr": float,
    "joint-lr": float,
    "fc-lr": float,
    "batch-size": int,
    "seed": int,
    "projection": str,
    "separation-sign": str,
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "fc-batch-size": int,
    "anchor-weight": float,
    "spread-weight": float,
    "augment": lambda v: v.lower() in ("1", "true", "yes"),
    "kappa": float,
}

_MODE_MAP = {"fmc": "feature_map", "vec": "feature_vector"}
_AGG_MAP = {"sa": "single_activation", "dense": "dense_sum"}


def parse_config_file(path):
    """Parse UTF-8 ``key = value`` lines; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEY_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = _KEY_TYPES[key](value)
    return values


def _resolved(file_values, flag_values):
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def _write_manifest(directory, resolved, seed):
    lines = [f"protosolo = {__version__}", f"numpy = {np.__version__}", f"seed = {seed}"]
    lines += [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    (directory / "run.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _build_model_config(resolved, image_size, num_classes):
    return ModelConfig(
        num_classes=num_classes,
        prototypes_per_class=resolved.get("prototypes-per-class", 10),
        image_size=image_size,
        comparison_mode=_MODE_MAP[resolved.get("mode", "fmc")],
        aggregation=_AGG_MAP[resolved.get("agg", "sa")],
        epsilon=resolved.get("epsilon", 1e-4),
    )


def _build_train_config(resolved):
    return TrainConfig(
        warm_epochs=resolved.get("warm-epochs", 5),
        joint_epochs=resolved.get("joint-epochs", 30),
        fc_epochs=resolved.get("fc-epochs", 10),
        warm_lr=resolved.get("warm-lr", 3e-3),
        joint_lr=resolved.get("joint-lr", 2e-3),
        fc_lr=resolved.get("fc-lr", 0.2),
        batch_size=resolved.get("batch-size", 2),
        fc_batch_size=resolved.get("fc-batch-size", 2),
        anchor_weight=resolved.get("anchor-weight", 1.2),
        spread_weight=resolved.get("spread-weight", 0.05),
        seed=resolved.get("seed", 0),
        projection=resolved.get("projection", "none"),
        weights=LossWeights(
            resolved.get("lambda1", 0.8),
            resolved.get("lambda2", -0.08),
            resolved.get("lambda3", 1e-4),
        ),
        separation_sign=resolved.get("separation-sign", "repel"),
        use_augmentation=resolved.get("augment", False),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"output directory {out} is non-empty; pass --force to overwrite")
    spec = DatasetSpec(
        num_classes=args.classes,
        per_class=args.per_class,
        image_size=args.size,
        seed=args.seed,
        train_fraction=args.train_fraction,
    )
    train_samples, test_samples = generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    save_folder(train_samples, out / "train")
    save_folder(test_samples, out / "test")
    echo = "\n".join(
        f"{k} = {v}"
        for k, v in (
            ("classes", spec.num_classes),
            ("per-class", spec.per_class),
            ("size", spec.image_size),
            ("seed", spec.seed),
            ("train-fraction", spec.train_fraction),
        )
    )
    (out / "spec.txt").write_text(echo + "\n", encoding="utf-8")
    _write_manifest(out, {"command": "gen-data"}, spec.seed)
    print(f"wrote {len(train_samples)} train / {len(test_samples)} test samples to {out}")
    return 0


def _resolve_train_flags(args):
    if args.projection and args.no_projection:
        raise ValueError("conflicting flags: --projection and --no-projection")
    flag_values = {
        "mode": args.mode,
        "agg": args.agg,
        "seed": args.seed,
        "size": args.size,
    }
    if args.projection:
        flag_values["projection"] = "project"
    elif args.no_projection:
        flag_values["projection"] = "none"
    file_values = parse_config_file(Path(args.config)) if args.config else {}
    return _resolved(file_values, flag_values)


def cmd_train(args):
    resolved = _resolve_train_flags(args)
    data_root = Path(args.data)
    size = resolved.get("size", 64)
    samples = load_folder(data_root / "train", size=size)
    num_classes = len({s.label for s in samples})
    model_config = _build_model_config(resolved, size, num_classes)
    train_config = _build_train_config(resolved)
    model = ProtoSoloNet(model_config, seed=train_config.seed)
    ckpt, logs = train(samples, model, train_config)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    log_path = out.with_suffix(out.suffix + ".log.tsv")
    log_path.write_text(
        LOG_HEADER + "\n" + "\n".join(l.row() for l in logs) + "\n", encoding="utf-8"
    )
    manifest = dict(resolved)
    manifest["command"] = "train"
    manifest["data"] = str(data_root)
    _write_manifest(out.parent, manifest, train_config.seed)
    final = logs[-1]
    print(f"trained {len(logs)} epochs; final train_acc={final.train_acc:.4f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_eval(args):
    model = load_model(Path(args.ckpt))
    samples = load_folder(Path(args.data) / args.split, size=model.config.image_size)
    acc = accuracy(model, samples)
    print(f"top1_accuracy\t{acc:.2f}")
    return 0


def cmd_explain(args):
    model = load_model(Path(args.ckpt))
    size = model.config.image_size
    test_samples = load_folder(Path(args.data) / args.split, size=size)
    train_samples = load_folder(Path(args.data) / "train", size=size)
    if args.id is not None:
        matches = [s for s in test_samples if s.id == args.id]
        if not matches:
            raise ValueError(f"no sample with id {args.id!r} in {args.split} split")
        sample = matches[0]
    else:
        sample = test_samples[args.index]
    table_order = np.argsort(
        -model.forward(sample.image[None]).logits.data[0]
    )
    classes = [int(k) for k in table_order[: args.top]]
    record = explain_decision(
        sample, model, classes=classes, train_samples=train_samples, kappa=args.kappa
    )
    out = Path(args.out)
    sidecar = export_explanation(record, out)
    _write_manifest(out, {"command": "explain", "input": sample.id}, 0)
    print(f"predicted class {record.predicted_class}; wrote {sidecar}")
    return 0


def cmd_metrics(args):
    model = load_model(Path(args.ckpt))
    size = model.config.image_size
    train_samples = load_folder(Path(args.data) / "train", size=size)
    test_samples = load_folder(Path(args.data) / "test", size=size)
    acc = accuracy(model, test_samples)
    rep = fidelity(model, train_samples)
    table = precision_table(model, train_samples, kappa=args.kappa)
    pc = prototype_compactness(model.config)
    print(f"top1_accuracy\t{acc:.2f}")
    print(format_fidelity(rep))
    print(format_pr_table(table))
    print(f"prototype_compactness\t{pc}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            json.dumps(
                {
                    "accuracy": acc,
                    "fidelity": {
                        "cos": rep.mean_cos,
                        "ed": rep.mean_ed,
                        "pcc": rep.mean_pcc,
                        "js": rep.mean_js,
                        "undefined": rep.undefined_count,
                    },
                    "pr_table": {
                        "thresholds": list(table.thresholds),
                        "percentages": table.percentages,
                    },
                    "prototype_compactness": pc,
                },
                indent=2,
            ),
            encoding="utf-8",
        )
    return 0


def cmd_gradcheck(args):
    model, images, labels = toy_setup(seed=args.seed)
    err, name = max_relative_grad_error(model, images, labels)
    print(f"max_relative_gradient_error\t{err:.3e}\t({name})")
    return 0


_ABLATION_ROWS = (
    ("baseline U=1", "vec", "dense", "project", 1),
    ("baseline + SA", "vec", "sa", "project", 10),
    ("SA + FMC (P)", "fmc", "sa", "project", 10),
    ("SA + FMC + NP", "fmc", "sa", "none", 10),
)


def cmd_ablate(args):
    file_values = parse_config_file(Path(args.config)) if args.config else {}
    data_root = Path(args.data)
    size = file_values.get("size", 64)
    train_samples = load_folder(data_root / "train", size=size)
    test_samples = load_folder(data_root / "test", size=size)
    num_classes = len({s.label for s in train_samples})
    seeds = [int(s) for s in args.seeds.split(",")]
    print("row\tmode\tagg\tprojection\tU\taccuracy")
    results = []
    for name, mode, agg, projection, u in _ABLATION_ROWS:
        accs = []
        for seed in seeds:
            resolved = dict(file_values)
            resolved.update(
                {"mode": mode, "agg": agg, "projection": projection, "seed": seed,
                 "prototypes-per-class": u}
            )
            model = ProtoSoloNet(
                _build_model_config(resolved, size, num_classes), seed=seed
            )
            train(train_samples, model, _build_train_config(resolved))
            accs.append(accuracy(model, test_samples))
        mean_acc = float(np.mean(accs))
        results.append((name, mean_acc))
        print(f"{name}\t{mode}\t{agg}\t{projection}\t{u}\t{mean_acc:.2f}")
    if args.out:
        Path(args.out).write_text(
            "\n".join(f"{n}\t{a:.2f}" for n, a in results) + "\n", encoding="utf-8"
        )
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protosolo",
        description="Interpretable classification from a single prototype activation per class.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on an image-folder dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("fmc", "vec"), default=None)
    p.add_argument("--agg", choices=("sa", "dense"), default=None)
    p.add_argument("--projection", action="store_true")
    p.add_argument("--no-projection", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write overlays + sidecar for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--id", default=None)
    p.add_argument("--top", type=int, default=2)
    p.add_argument("--kappa", type=float, default=95.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("metrics", help="fidelity, precision table, compactness")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kappa", type=float, default=95.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference check on a toy model")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the 4-row ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
