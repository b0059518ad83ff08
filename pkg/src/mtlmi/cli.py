"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, export-embeddings. Every
command takes ``--config FILE`` plus ``--key value`` overrides for any
config key. Exit codes: 0 success, 1 config/validation error, 2 numerical
failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import data as ds
from . import gradcheck as gc
from . import metrics as mx
from . import model as mdl
from . import training
from .config import RunConfig, parse_config
from .errors import (CompatibilityError, ContractError, FormatError,
                     MtlmiError, NumericsError)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def _require(cfg: RunConfig, *keys: str):
    for key in keys:
        if getattr(cfg, key) is None:
            raise ContractError(f"this command requires the {key} config key")


def cmd_gen_data(cfg: RunConfig) -> int:
    _require(cfg, "dataset_path")
    manifest, pixels = ds.generate_dataset(cfg.generator)
    ds.write_dataset(manifest, pixels, cfg.dataset_path)
    labels = manifest.label_array()
    print(f"wrote {manifest.sample_count} samples to {cfg.dataset_path}")
    for t_idx, task in enumerate(manifest.tasks):
        freqs = np.bincount(labels[:, t_idx], minlength=task.class_count)
        freqs = freqs / manifest.sample_count
        print(f"  {task.task_id}: "
              + " ".join(f"{f:.4f}" for f in freqs))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "dataset_path", "checkpoint_path", "log_path")
    manifest, pixels = ds.read_dataset(cfg.dataset_path)
    result = training.train_loop(manifest, pixels, cfg.train,
                                 log_path=cfg.log_path,
                                 checkpoint_path=cfg.checkpoint_path,
                                 resume=cfg.resume)
    last = result.epochs[-1]
    print(f"finished epoch {last.epoch}: mt_loss={last.mt_loss:.4f} "
          + " ".join(f"acc_{k}={v:.3f}"
                     for k, v in last.accuracy_per_task.items()))
    print(f"checkpoint written to {cfg.checkpoint_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "dataset_path", "checkpoint_path", "report_path")
    manifest, pixels = ds.read_dataset(cfg.dataset_path)
    params, bn_states, tasks = mdl.load_checkpoint(cfg.checkpoint_path)
    mdl.check_task_compatibility(tasks, manifest.tasks)
    report = mx.evaluate(params, bn_states, tasks, manifest, pixels)
    mx.write_metrics_csv(report, tasks, cfg.report_path)
    for task in tasks:
        print(f"{task.task_id}: macro_f={report.macro_f[task.task_id]:.4f} "
              f"accuracy={report.accuracy[task.task_id]:.4f}")
    print(f"report written to {cfg.report_path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gc.run_all(seed=cfg.train.seed)
    width = max(len(name) for name, _, _ in results)
    failed = False
    for name, err, ok in results:
        status = "pass" if ok else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
        failed |= not ok
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_export_embeddings(cfg: RunConfig) -> int:
    _require(cfg, "dataset_path", "checkpoint_path", "embeddings_path")
    manifest, pixels = ds.read_dataset(cfg.dataset_path)
    params, bn_states, tasks = mdl.load_checkpoint(cfg.checkpoint_path)
    mdl.check_task_compatibility(tasks, manifest.tasks)
    mx.export_embeddings(params, bn_states, manifest, pixels,
                         cfg.embeddings_path)
    print(f"wrote {manifest.sample_count} embeddings to {cfg.embeddings_path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-embeddings": cmd_export_embeddings,
}


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    overrides = {}
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or i + 1 >= len(extra):
            raise ContractError(f"expected --key value pairs, got {extra[i:]}")
        overrides[key[2:]] = extra[i + 1]
        i += 2
    return overrides


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mtlmi",
        description="multi-task scene recognition with MI regularization")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None,
                        help="key=value configuration file")
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = parse_config(args.config, _parse_overrides(extra))
        return COMMANDS[args.command](cfg)
    except (ContractError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except MtlmiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
