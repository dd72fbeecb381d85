"""Command-line surface: synth, pretrain, finetune, eval, propagate, sweep,
gradcheck.

Configuration precedence is CLI flag > JSON config file (``--config``) >
built-in default. Unknown config keys are rejected. Every command that
produces artifacts echoes its effective configuration as JSON next to
them, and every command is deterministic given (config, seed): rerunning
writes byte-identical files.

Datasets are referenced by prefix: ``<prefix>.bkei`` (images),
``<prefix>.bkel`` (labels), ``<prefix>.split.json`` (train/test split).
``BKE_THREADS`` caps worker parallelism; the current implementation is
single-threaded, so any valid value only bounds pools of size one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    SplitSpec,
    read_container,
    read_split,
    split_path,
    stratified_split,
    stratified_subsample,
    synth_blobs,
    write_container,
    write_split,
)
from .ensemble import (
    BkeConfig,
    bke_loss,
    evaluate_classifier,
    finetune,
    normalize_similarity,
    probabilities,
    propagate_iterative,
    similarity_matrix,
    soft_targets_closed_form,
)
from .metrics import write_epoch_csv, write_report_json
from .models import load_checkpoint, save_checkpoint
from .rng import substream
from .selfsup import SslConfig, cross_model_loss, cross_view_loss, pretrain
from .textio import fmt_float, read_float_matrix, write_float_matrix

GRADCHECK_TOL = 1e-4

DEFAULT_GRIDS: dict[str, list] = {
    "omega": [0.1, 0.3, 0.5, 0.7, 0.9],
    "batch_size": [32, 64, 128, 256, 512],
    "tau": [2.0, 4.0, 8.0, 16.0],
    "lambda": [0.5, 1.0, 2.0, 4.0],
}


@dataclass(frozen=True)
class Field:
    name: str
    kind: type
    default: object
    help: str
    required: bool = False
    choices: tuple | None = None


_SSL_FIELDS = [
    Field("epochs", int, SslConfig.epochs, "pretraining epochs"),
    Field("batch_size", int, SslConfig.batch_size, "pretraining batch size"),
    Field("learning_rate", float, SslConfig.learning_rate, "SGD learning rate"),
    Field("momentum", float, SslConfig.momentum, "SGD momentum"),
    Field("zeta", float, SslConfig.zeta, "EMA decay for the target network"),
]

_BKE_FIELDS = [
    Field("omega", float, BkeConfig.omega, "ensembling weight in [0,1)"),
    Field("batch_size", int, BkeConfig.batch_size, "fine-tuning batch size N"),
    Field("lambda", float, BkeConfig.lam, "weight of the KL term"),
    Field("tau", float, BkeConfig.tau, "softmax temperature for soft targets"),
    Field("epochs", int, BkeConfig.epochs, "fine-tuning epochs"),
    Field("learning_rate", float, BkeConfig.learning_rate, "SGD learning rate"),
    Field("momentum", float, BkeConfig.momentum, "SGD momentum"),
    Field("positive_class", int, BkeConfig.positive_class, "class treated as positive"),
    Field("fraction", float, 1.0, "per-class fraction of labeled training data"),
]

COMMANDS: dict[str, list[Field]] = {
    "synth": [
        Field("out", str, None, "output dataset prefix", required=True),
        Field("n_per_class", int, 300, "images per class"),
        Field("side", int, 16, "image side in pixels"),
        Field("test_per_class", int, 100, "held-out test images per class"),
        Field("seed", int, 0, "RNG seed"),
    ],
    "pretrain": [
        Field("data", str, None, "dataset prefix", required=True),
        Field("out", str, None, "output directory", required=True),
        Field("seed", int, 0, "RNG seed"),
        *_SSL_FIELDS,
    ],
    "finetune": [
        Field("data", str, None, "dataset prefix", required=True),
        Field("checkpoint", str, None, "Phase-I checkpoint path", required=True),
        Field("out", str, None, "output directory", required=True),
        Field("seed", int, 0, "RNG seed"),
        *_BKE_FIELDS,
    ],
    "eval": [
        Field("data", str, None, "dataset prefix", required=True),
        Field("checkpoint", str, None, "fine-tuned model checkpoint", required=True),
        Field("out", str, None, "output directory", required=True),
        Field("subset", str, "test", "which split to score", choices=("train", "test", "all")),
        Field("positive_class", int, 0, "class treated as positive"),
    ],
    "propagate": [
        Field("features", str, None, "CSV of features, one row per sample", required=True),
        Field("logits", str, None, "CSV of logits, one row per sample", required=True),
        Field("out", str, None, "output CSV for the soft targets", required=True),
        Field("omega", float, 0.5, "ensembling weight in [0,1)"),
        Field("tau", float, 1.0, "softmax temperature"),
        Field("method", str, "closed", "propagation method", choices=("closed", "iter")),
        Field("iters", int, 200, "iterations for --method iter"),
    ],
    "sweep": [
        Field("data", str, None, "dataset prefix", required=True),
        Field("checkpoint", str, None, "Phase-I checkpoint path", required=True),
        Field("out", str, None, "output directory", required=True),
        Field("param", str, None, "hyperparameter to sweep", required=True,
              choices=tuple(DEFAULT_GRIDS)),
        Field("values", str, "", "comma-separated grid (default: built-in grid)"),
        Field("seed", int, 0, "RNG seed"),
        *_BKE_FIELDS,
    ],
    "gradcheck": [
        Field("seed", int, 0, "RNG seed for the random instances"),
        Field("perturb", bool, False, "inject a wrong gradient (negative control)"),
    ],
}


class ConfigError(ValueError):
    pass


def _coerce(field: Field, value, source: str):
    if field.kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{source}: {field.name} must be a boolean, got {value!r}")
    if field.kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if field.kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{source}: {field.name} must be an integer, got {value!r}")
        return value
    if not isinstance(value, field.kind):
        raise ConfigError(
            f"{source}: {field.name} must be {field.kind.__name__}, got {value!r}"
        )
    return value


def build_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, with unknown keys rejected."""
    fields = {f.name: f for f in COMMANDS[command]}
    effective = {name: f.default for name, f in fields.items()}

    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{config_path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        unknown = sorted(set(doc) - set(fields))
        if unknown:
            raise ConfigError(f"{config_path}: unknown config keys: {', '.join(unknown)}")
        for key, value in doc.items():
            effective[key] = _coerce(fields[key], value, str(config_path))

    for name, field in fields.items():
        flag_value = getattr(args, name, None)
        if field.kind is bool:
            if flag_value:  # store_true: only an explicit flag overrides
                effective[name] = True
        elif flag_value is not None:
            effective[name] = _coerce(field, flag_value, "flag")

    missing = [n for n, f in fields.items() if f.required and effective[n] is None]
    if missing:
        raise ConfigError(f"missing required options: {', '.join('--' + m for m in missing)}")
    for name, field in fields.items():
        if field.choices and effective[name] not in field.choices:
            raise ConfigError(
                f"{name} must be one of {', '.join(map(str, field.choices))}, "
                f"got {effective[name]!r}"
            )
    return effective


def _echo_config(command: str, cfg: dict, path: Path) -> None:
    doc = {"command": command, **cfg}
    threads = os.environ.get("BKE_THREADS")
    if threads is not None:
        doc["threads"] = int(threads)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(prefix: str):
    container = read_container(prefix)
    manifest = split_path(prefix)
    if manifest.exists():
        split = read_split(manifest)
    else:
        idx = tuple(range(len(container)))
        split = SplitSpec(train_indices=idx, test_indices=(), fraction=1.0, seed=0)
    return container, split


def _subsample_split(container, split: SplitSpec, fraction: float, seed: int) -> SplitSpec:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    train = list(split.train_indices)
    keep = stratified_subsample(container.labels[train], fraction, seed)
    return SplitSpec(
        train_indices=tuple(train[i] for i in keep),
        test_indices=split.test_indices,
        fraction=fraction,
        seed=seed,
    )


def _bke_config(cfg: dict) -> BkeConfig:
    config = BkeConfig(
        omega=cfg["omega"],
        batch_size=cfg["batch_size"],
        lam=cfg["lambda"],
        tau=cfg["tau"],
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
        positive_class=cfg["positive_class"],
    )
    config.validate()
    return config


# --- commands ----------------------------------------------------------------


def _cmd_synth(cfg: dict) -> int:
    if cfg["test_per_class"] >= cfg["n_per_class"]:
        raise ConfigError("test_per_class must be smaller than n_per_class")
    container = synth_blobs(cfg["n_per_class"], cfg["side"], cfg["seed"])
    prefix = cfg["out"]
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_container(container, prefix)
    split = stratified_split(container.labels, cfg["test_per_class"], cfg["seed"])
    write_split(split, split_path(prefix))
    _echo_config("synth", cfg, Path(str(prefix) + ".synth.config.json"))
    print(
        f"wrote {len(container)} images ({cfg['side']}x{cfg['side']}) to {prefix}: "
        f"{len(split.train_indices)} train / {len(split.test_indices)} test"
    )
    return 0


def _cmd_pretrain(cfg: dict) -> int:
    container, split = _load_dataset(cfg["data"])
    images = container.images[list(split.train_indices)]
    ssl_cfg = SslConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        zeta=cfg["zeta"],
        seed=cfg["seed"],
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _, history = pretrain(
        images,
        ssl_cfg,
        checkpoint_path=out_dir / "checkpoint.bkec",
        log_path=out_dir / "pretrain_loss.csv",
    )
    _echo_config("pretrain", cfg, out_dir / "config.json")
    final = history[-1]
    print(
        f"pretrained {ssl_cfg.epochs} epochs on {len(images)} images; "
        f"final loss {final.loss_total:.6f} (cv {final.loss_cv:.6f}, cm {final.loss_cm:.6f})"
    )
    return 0


def _cmd_finetune(cfg: dict) -> int:
    container, split = _load_dataset(cfg["data"])
    if not split.test_indices:
        raise ConfigError(f"{split_path(cfg['data'])}: split has no test indices")
    split = _subsample_split(container, split, cfg["fraction"], cfg["seed"])
    config = _bke_config(cfg)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle, history, report = finetune(container, split, cfg["checkpoint"], config)
    save_checkpoint(bundle, out_dir / "model.bkec")
    write_epoch_csv(history, out_dir / "metrics.csv")
    write_report_json(report, out_dir / "report.json")
    _echo_config("finetune", cfg, out_dir / "config.json")
    print(
        f"fine-tuned {config.epochs} epochs on {len(split.train_indices)} images; "
        f"last-{report.window}-epoch mean acc {report.means['acc']:.4f}, "
        f"hm {report.means['hm']:.4f}"
    )
    return 0


def _cmd_eval(cfg: dict) -> int:
    container, split = _load_dataset(cfg["data"])
    bundle = load_checkpoint(cfg["checkpoint"])
    if cfg["subset"] == "train":
        indices = list(split.train_indices)
    elif cfg["subset"] == "test":
        indices = list(split.test_indices)
    else:
        indices = list(range(len(container)))
    if not indices:
        raise ConfigError(f"subset {cfg['subset']!r} of {cfg['data']} is empty")
    scores = evaluate_classifier(
        bundle, container.images[indices], container.labels[indices], cfg["positive_class"]
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(scores, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config("eval", cfg, out_dir / "config.json")
    print(
        f"evaluated {len(indices)} {cfg['subset']} images: "
        + ", ".join(f"{k} {v:.4f}" for k, v in sorted(scores.items()))
    )
    return 0


def _cmd_propagate(cfg: dict) -> int:
    features = read_float_matrix(cfg["features"])
    logits = read_float_matrix(cfg["logits"])
    if len(features) != len(logits):
        raise ConfigError(
            f"row count mismatch: {len(features)} feature rows vs {len(logits)} logit rows"
        )
    y_hat = normalize_similarity(similarity_matrix(features))
    p = probabilities(logits, cfg["tau"]).values
    if cfg["method"] == "closed":
        q = soft_targets_closed_form(y_hat, p, cfg["omega"])
    else:
        q = propagate_iterative(y_hat, p, cfg["omega"], cfg["iters"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_float_matrix(q.values, out)
    _echo_config("propagate", cfg, Path(str(out) + ".config.json"))
    print(f"wrote {q.values.shape[0]}x{q.values.shape[1]} soft targets ({q.method}) to {out}")
    return 0


def _parse_grid(param: str, raw: str) -> list:
    if not raw:
        return list(DEFAULT_GRIDS[param])
    values = []
    for cell in raw.split(","):
        cell = cell.strip()
        try:
            values.append(int(cell) if param == "batch_size" else float(cell))
        except ValueError:
            raise ConfigError(f"bad grid value {cell!r} for {param}") from None
    if not values:
        raise ConfigError("empty grid")
    return values


def _cmd_sweep(cfg: dict) -> int:
    container, split = _load_dataset(cfg["data"])
    if not split.test_indices:
        raise ConfigError(f"{split_path(cfg['data'])}: split has no test indices")
    split = _subsample_split(container, split, cfg["fraction"], cfg["seed"])
    base = _bke_config(cfg)
    grid = _parse_grid(cfg["param"], cfg["values"])
    attr = {"lambda": "lam"}.get(cfg["param"], cfg["param"])

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in grid:
        config = replace(base, **{attr: value})
        config.validate()
        _, _, report = finetune(container, split, cfg["checkpoint"], config)
        rows.append((cfg["param"], value, report.means["hm"], report.means["acc"]))
        print(f"{cfg['param']}={value}: hm {rows[-1][2]:.4f}, acc {rows[-1][3]:.4f}")
    with open(out_dir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("param,value,hm,acc\n")
        for param, value, hm, acc in rows:
            cell = str(value) if isinstance(value, int) else fmt_float(value)
            fh.write(f"{param},{cell},{fmt_float(hm)},{fmt_float(acc)}\n")
    _echo_config("sweep", cfg, out_dir / "config.json")
    print(f"swept {len(rows)} values of {cfg['param']} -> {out_dir / 'sweep.csv'}")
    return 0


def _gradcheck_instances(seed: int, perturb: bool):
    """Three small loss instances; perturb injects a tape-only term into
    the first so autodiff and finite differences disagree."""
    rng = substream(seed, "gradcheck")

    def randn(*shape):
        return np.array([rng.normal() for _ in range(int(np.prod(shape)))]).reshape(shape)

    def wrong(loss, leaf):
        if perturb and T.tape_active():
            return T.add(loss, T.scale(T.mean_all(leaf), 0.01))
        return loss

    q1, q1p = randn(3, 5), randn(3, 5)
    z2 = randn(3, 5)
    logits = randn(4, 3)
    labels = np.array([0, 2, 1, 2])
    q = T.softmax_rows(T.Tensor(randn(4, 3)), 1.0).data

    yield "cross_view", {"q1": q1, "q1p": q1p}, (
        lambda p: wrong(cross_view_loss(p["q1"], p["q1p"]), p["q1"])
    )
    yield "cross_model", {"q1p": q1p}, (lambda p: cross_model_loss(p["q1p"], z2))
    yield "bke", {"logits": logits}, (
        lambda p: bke_loss(p["logits"], labels, q, tau=1.7, lam=2.0)
    )


def _cmd_gradcheck(cfg: dict) -> int:
    failed = False
    for name, params, fn in _gradcheck_instances(cfg["seed"], cfg["perturb"]):
        report = T.finite_difference_check(fn, params, tol=GRADCHECK_TOL)
        status = "ok" if report.passed else "FAIL"
        print(
            f"{name}: max rel err {report.max_rel_err:.3e} over "
            f"{report.n_components} components [{status}]"
        )
        failed = failed or not report.passed
    return 1 if failed else 0


_DISPATCH = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "propagate": _cmd_propagate,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bke", description="two-phase self-supervised training pipeline"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, fields in COMMANDS.items():
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", help="JSON config file")
        for field in fields:
            flag = "--" + field.name.replace("_", "-")
            if field.kind is bool:
                sub.add_argument(flag, action="store_true", default=False, help=field.help)
            else:
                sub.add_argument(flag, type=field.kind, default=None, help=field.help,
                                 choices=field.choices)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    threads = os.environ.get("BKE_THREADS")
    if threads is not None:
        if not threads.isdigit() or int(threads) < 1:
            print(f"error: BKE_THREADS must be a positive integer, got {threads!r}",
                  file=sys.stderr)
            return 1
    try:
        cfg = build_config(args.command, args)
        return _DISPATCH[args.command](cfg)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
