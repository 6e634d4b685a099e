"""Command-line driver: reproducible train / distill / eval / bench / inspect runs.

Config precedence is defaults < --config JSON file < explicit flags, and the
fully resolved configuration is dumped into every run directory so a run is
replayable from its artifacts alone. Exit codes: 0 success, 2 configuration
error, 3 I/O error (unreadable or corrupt files), 4 data error.
"""

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from . import data as data_mod
from . import model as model_mod
from . import qnn, train as train_mod

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "dataset": "synthetic",
    "model": "qvit4_28",
    "seed": 0,
    "epochs": 100,
    "batch_size": 32,
    "depth": 1,
    "threads": 1,
    "out": "runs",
    "tag": "",
    "split": "test",
    "kd_mode": "intermediate",
    "kd_epochs": 50,
    "teacher_bundle": "",
    "teacher_embed": 16,
    "teacher_depth": 1,
    "teacher_epochs": 40,
    "synthetic_classes": 4,
    "synthetic_per_class": 30,
    "separability": 1.0,
    "angle_mode": "zero_to_pi",
    "resize": "nearest",
    "match_post_relu": False,
    "eval_train": True,
}


def _resolve_config(args, command):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = command
    cfg["kernel_backend"] = _kernels.BACKEND_NAME
    cfg["version"] = __version__
    return cfg


def _run_dir(cfg):
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    tag = cfg["tag"] or cfg["command"]
    base = Path(cfg["out"])
    path = base / f"{stamp}-{tag}"
    suffix = 1
    while path.exists():
        path = base / f"{stamp}-{tag}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def _data_root():
    return Path(os.environ.get("QVIT_DATA_ROOT", "."))


def resolve_dataset(cfg, image_size):
    """Name or path -> angle-normalized train/val/test splits."""
    name = cfg["dataset"]
    if name == "synthetic":
        splits = data_mod.synthetic_dataset(
            seed=cfg["seed"], n_classes=cfg["synthetic_classes"],
            n_per_class=cfg["synthetic_per_class"], image_size=image_size,
            separability=cfg["separability"])
        splits = dict(zip(("train", "val", "test"), splits))
    else:
        if name in data_mod.MEDMNIST_SPLIT_SIZES:
            path = _data_root() / f"{name}.npz"
            dataset_name = name
        else:
            path = Path(name)
            dataset_name = path.stem
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        splits = data_mod.load_medmnist(path, name=dataset_name
                                        if dataset_name in data_mod.MEDMNIST_SPLIT_SIZES
                                        else None)
    for key, split in splits.items():
        if split.images.shape[-1] != image_size:
            if cfg["resize"] not in data_mod.RESIZE_MODES:
                raise ConfigError(f"unknown resize mode {cfg['resize']!r}")
            resize = data_mod.RESIZE_MODES[cfg["resize"]]
            split = data_mod.DatasetSplit(
                images=np.clip(resize(split.images, image_size), 0.0, 1.0),
                labels=split.labels, n_classes=split.n_classes,
                split_name=split.split_name, meta=split.meta)
        splits[key] = data_mod.normalize_to_angles(split, cfg["angle_mode"])
    return splits


def _model_config(cfg, splits):
    sample = splits["train"]
    return model_mod.preset_config(
        cfg["model"], in_channels=sample.images.shape[1],
        n_classes=sample.n_classes, depth=cfg["depth"])


def _format_float(x):
    return "" if x is None else repr(float(x))


def write_metrics_csv(path, history, test_row=None):
    lines = ["epoch,split,loss,acc,auc"]
    for row in history:
        lines.append(",".join([
            str(row["epoch"]), "train", _format_float(row.get("train_loss")),
            _format_float(row.get("train_acc")), _format_float(row.get("train_auc"))]))
        lines.append(",".join([
            str(row["epoch"]), "val", _format_float(row.get("val_loss")),
            _format_float(row.get("val_acc")), _format_float(row.get("val_auc"))]))
    if test_row is not None:
        epoch, metrics = test_row
        lines.append(",".join([
            str(epoch), "test", _format_float(metrics.loss),
            _format_float(metrics.accuracy), _format_float(metrics.auc)]))
    Path(path).write_text("\n".join(lines) + "\n")


def _dump_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _preset_image_size(cfg):
    if cfg["model"] not in model_mod.PRESETS:
        raise ConfigError(f"unknown preset {cfg['model']!r}")
    return model_mod.PRESETS[cfg["model"]]["image_size"]


def cmd_train(cfg):
    run_dir = _run_dir(cfg)
    _dump_json(run_dir / "resolved_config.json", cfg)
    splits = resolve_dataset(cfg, _preset_image_size(cfg))
    mcfg = _model_config(cfg, splits)
    params = model_mod.init_params(mcfg, cfg["seed"])
    result = train_mod.train_loop(
        params, splits, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        seed=cfg["seed"], threads=cfg["threads"], eval_train=cfg["eval_train"])
    test_metrics = train_mod.evaluate(result.params, splits["test"],
                                      threads=cfg["threads"])
    model_mod.save_checkpoint(run_dir / "model.ckpt", result.params)
    write_metrics_csv(run_dir / "metrics.csv", result.history,
                      test_row=(result.best_epoch, test_metrics))
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_auc": result.best_val_auc,
        "test": test_metrics.to_dict(),
        "parameter_counts": model_mod.count_parameters(mcfg),
        "config": cfg,
    }
    _dump_json(run_dir / "summary.json", summary)
    print(f"run directory: {run_dir}")
    print(f"test ACC {test_metrics.accuracy:.4f}  test AUC {test_metrics.auc:.4f}")
    return run_dir


def cmd_distill(cfg):
    run_dir = _run_dir(cfg)
    _dump_json(run_dir / "resolved_config.json", cfg)
    splits = resolve_dataset(cfg, _preset_image_size(cfg))
    mcfg = _model_config(cfg, splits)
    student = model_mod.init_params(mcfg, cfg["seed"])

    if cfg["teacher_bundle"]:
        bundle = train_mod.load_teacher_bundle(cfg["teacher_bundle"])
    else:
        # teacher gets residuals + layer norm (normalized like the large
        # pretrained teachers it stands in for; also keeps its qubit-width
        # intermediates at a scale the student can actually match)
        tcfg = model_mod.ModelConfig(
            image_size=mcfg.image_size, in_channels=mcfg.in_channels,
            patch_size=mcfg.patch_size, embed_dim=cfg["teacher_embed"],
            depth=cfg["teacher_depth"], attention_kind="classical",
            mlp_hidden=2 * cfg["teacher_embed"], n_classes=mcfg.n_classes,
            head_to=mcfg.embed_dim, residual=True, layer_norm=True)
        _, bundle, teacher_result = train_mod.train_teacher(
            tcfg, splits, epochs=cfg["teacher_epochs"],
            batch_size=cfg["batch_size"], seed=cfg["seed"],
            threads=cfg["threads"])
        train_mod.save_teacher_bundle(run_dir / "teacher.qkd", bundle)
        _dump_json(run_dir / "teacher_summary.json", {
            "val_auc": teacher_result.best_val_auc,
            "best_epoch": teacher_result.best_epoch,
            "metadata": bundle.metadata,
        })

    if cfg["kd_mode"] == "intermediate":
        kd_history = train_mod.kd_pretrain(
            student, bundle, splits["train"], epochs=cfg["kd_epochs"],
            batch_size=cfg["batch_size"], seed=cfg["seed"],
            threads=cfg["threads"], match_post_relu=cfg["match_post_relu"])
        train_mod.transfer_head(student, bundle)
    elif cfg["kd_mode"] == "direct-logits":
        logit_targets = (np.maximum(bundle.targets, 0.0) @ bundle.head_weights
                         + bundle.head_bias)
        kd_history = train_mod.kd_direct_logits(
            student, logit_targets, splits["train"], epochs=cfg["kd_epochs"],
            batch_size=cfg["batch_size"], seed=cfg["seed"], threads=cfg["threads"])
    else:
        raise ConfigError(f"unknown kd mode {cfg['kd_mode']!r}")

    kd_lines = ["epoch,kd_loss"] + [
        f"{row['epoch']},{_format_float(row['kd_loss'])}" for row in kd_history]
    (run_dir / "kd_history.csv").write_text("\n".join(kd_lines) + "\n")

    result = train_mod.train_loop(
        student, splits, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        seed=cfg["seed"], threads=cfg["threads"], eval_train=cfg["eval_train"])
    test_metrics = train_mod.evaluate(result.params, splits["test"],
                                      threads=cfg["threads"])
    model_mod.save_checkpoint(run_dir / "model.ckpt", result.params)
    write_metrics_csv(run_dir / "metrics.csv", result.history,
                      test_row=(result.best_epoch, test_metrics))
    _dump_json(run_dir / "summary.json", {
        "kd_mode": cfg["kd_mode"],
        "kd_final_loss": kd_history[-1]["kd_loss"] if kd_history else None,
        "best_epoch": result.best_epoch,
        "best_val_auc": result.best_val_auc,
        "test": test_metrics.to_dict(),
        "config": cfg,
    })
    print(f"run directory: {run_dir}")
    print(f"test ACC {test_metrics.accuracy:.4f}  test AUC {test_metrics.auc:.4f}")
    return run_dir


def cmd_eval(cfg, checkpoint):
    params = model_mod.load_checkpoint(checkpoint)
    splits = resolve_dataset(cfg, params.config.image_size)
    if cfg["split"] not in splits:
        raise ConfigError(f"unknown split {cfg['split']!r}")
    split = splits[cfg["split"]]
    if split.n_classes != params.config.n_classes:
        raise ConfigError(
            f"dataset has {split.n_classes} classes, checkpoint expects "
            f"{params.config.n_classes}")
    metrics = train_mod.evaluate(params, split, threads=cfg["threads"])
    payload = metrics.to_dict()
    payload["split"] = cfg["split"]
    print(json.dumps(payload, indent=2, sort_keys=True))
    return metrics


def _time_rate(fn, min_seconds=0.4):
    fn()  # warm-up
    start = time.perf_counter()
    reps = 0
    while time.perf_counter() - start < min_seconds:
        fn()
        reps += 1
    return reps / (time.perf_counter() - start)


def run_bench(threads=1, batch=2048, min_seconds=0.4, seed=0):
    """Throughput of the circuit kernels for every importable backend."""
    rng = np.random.default_rng(seed)
    report = {"threads": threads, "batch": batch, "backends": {}}
    for name, backend in sorted(_kernels.available_backends().items()):
        entry = {}
        for n in (4, 8):
            spec = qnn.ring_spec(n, rng)
            rows = rng.uniform(-np.pi, np.pi, (batch, n))
            c, t = spec.controls(), spec.targets()
            fwd = _time_rate(lambda: backend.forward_batch(rows, spec.params, c, t),
                             min_seconds) * batch
            jac = _time_rate(lambda: backend.jacobian_batch(rows, spec.params, c, t),
                             min_seconds) * batch
            entry[f"forward_per_s_n{n}"] = fwd
            entry[f"gradient_per_s_n{n}"] = jac
            entry[f"gradient_over_forward_n{n}"] = fwd / jac
        report["backends"][name] = entry
    if threads > 1:
        for n in (4, 8):
            spec = qnn.ring_spec(n, rng)
            rows = rng.uniform(-np.pi, np.pi, (batch, n))
            fwd = _time_rate(lambda: qnn.qnn_forward_batch(rows, spec, threads=threads),
                             min_seconds) * batch
            jac = _time_rate(lambda: qnn.qnn_jacobians_batch(rows, spec, threads=threads),
                             min_seconds) * batch
            report[f"threaded_forward_per_s_n{n}"] = fwd
            report[f"threaded_gradient_per_s_n{n}"] = jac
    return report


def cmd_bench(cfg):
    # single-threaded table for every backend, plus a parallel probe on the
    # active one; results are throughput only, thread count never changes values
    threads = cfg["threads"] if cfg["threads"] > 1 else 4
    report = run_bench(threads=threads)
    report["kernel_backend"] = _kernels.BACKEND_NAME
    print(f"active backend: {_kernels.BACKEND_NAME}")
    for name, entry in report["backends"].items():
        for n in (4, 8):
            print(f"{name:9s} n={n}: forward {entry[f'forward_per_s_n{n}']:12.0f}/s  "
                  f"gradient {entry[f'gradient_per_s_n{n}']:11.0f}/s  "
                  f"ratio {entry[f'gradient_over_forward_n{n}']:.2f}")
    for n in (4, 8):
        print(f"{threads} threads n={n}: forward "
              f"{report[f'threaded_forward_per_s_n{n}']:12.0f}/s  gradient "
              f"{report[f'threaded_gradient_per_s_n{n}']:11.0f}/s")
    if cfg["out"] and cfg["tag"]:
        run_dir = _run_dir(cfg)
        _dump_json(run_dir / "bench.json", report)
        print(f"report written to {run_dir / 'bench.json'}")
    return report


def cmd_inspect(cfg):
    try:
        preset = model_mod.PRESETS[cfg["model"]]
    except KeyError:
        raise ConfigError(f"unknown preset {cfg['model']!r}") from None
    mcfg = model_mod.preset_config(cfg["model"], in_channels=3,
                                   n_classes=5, depth=cfg["depth"])
    counts = model_mod.count_parameters(mcfg)
    n = mcfg.embed_dim
    print(f"model {cfg['model']} (embed dim {n}, depth {mcfg.depth}, "
          f"image {mcfg.image_size}, patch {mcfg.patch_size})")
    for key in ("patch_embed", "positional", "attention", "mlp", "head", "total"):
        print(f"  {key:12s} {counts[key]:8d}")
    print(f"  attention per block: {counts['attention_per_block']} "
          f"({mcfg.attention_kind})")
    print(f"  SA vs QSA per block: {counts['sa_per_block']} vs "
          f"{counts['qsa_per_block']}  (quantum/classical = 6n/3n^2 = 2/n = "
          f"{2 / n:.4f})")
    return counts


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qvit",
        description="Quantum self-attention vision transformers at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with default overrides")
        p.add_argument("--dataset", help="synthetic, a MedMNIST name, or an .npz path")
        p.add_argument("--model", choices=sorted(model_mod.PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="directory that receives run folders")
        p.add_argument("--tag", help="suffix for the run folder name")
        p.add_argument("--synthetic-classes", dest="synthetic_classes", type=int)
        p.add_argument("--synthetic-per-class", dest="synthetic_per_class", type=int)
        p.add_argument("--separability", type=float)
        p.add_argument("--angle-mode", dest="angle_mode",
                       choices=sorted(data_mod.ANGLE_MODES))
        p.add_argument("--resize", choices=sorted(data_mod.RESIZE_MODES))
        p.add_argument("--no-eval-train", dest="eval_train", action="store_false",
                       default=None)

    p_train = sub.add_parser("train", help="train a model from scratch")
    add_common(p_train)

    p_distill = sub.add_parser("distill",
                               help="KD pre-train, transfer head, fine-tune")
    add_common(p_distill)
    p_distill.add_argument("--kd-mode", dest="kd_mode",
                           choices=["intermediate", "direct-logits"])
    p_distill.add_argument("--kd-epochs", dest="kd_epochs", type=int)
    p_distill.add_argument("--teacher-bundle", dest="teacher_bundle")
    p_distill.add_argument("--teacher-embed", dest="teacher_embed", type=int)
    p_distill.add_argument("--teacher-depth", dest="teacher_depth", type=int)
    p_distill.add_argument("--teacher-epochs", dest="teacher_epochs", type=int)
    p_distill.add_argument("--match-post-relu", dest="match_post_relu",
                           action="store_true", default=None)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--split", choices=["train", "val", "test"])

    p_bench = sub.add_parser("bench", help="kernel throughput for all backends")
    add_common(p_bench)

    p_inspect = sub.add_parser("inspect", help="parameter-count breakdown")
    add_common(p_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args, args.command)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "distill":
            cmd_distill(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "bench":
            cmd_bench(cfg)
        elif args.command == "inspect":
            cmd_inspect(cfg)
        return 0
    except (ConfigError, model_mod.CheckpointError, data_mod.DataError,
            FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, data_mod.DataError):
            return EXIT_DATA
        if isinstance(exc, (model_mod.CheckpointError, FileNotFoundError, OSError)):
            return EXIT_IO
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
