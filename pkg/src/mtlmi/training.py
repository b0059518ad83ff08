"""End-to-end training: batches -> forward -> losses -> backward -> Adam.

One checkpoint plus a training-state sidecar is written at every epoch
boundary, so an interrupted run can resume and reproduce the uninterrupted
result exactly (epoch order and negative sampling are pure functions of the
configured seed, epoch and step indices).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import model as mdl
from . import objective as obj
from .autodiff import Tape, Tensor
from .data import DatasetManifest, batch_iterator
from .errors import FormatError, NumericsError
from .model import TaskSpec
from .objective import OptimizerState, TrainConfig

# seed-stream tags, so shuffling and negative sampling never share a stream
_STREAM_EPOCH_SHUFFLE = 7
_STREAM_DERANGEMENT = 11

TRAINSTATE_MAGIC = b"MIST"
TRAINSTATE_VERSION = 1


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mt_loss: float
    mi_per_task: dict[str, float]
    accuracy_per_task: dict[str, float]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    bn_states: dict
    tasks: list[TaskSpec]
    epochs: list[EpochStats] = field(default_factory=list)


def _pair_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant selection matrices expanding N rows into all N*N pairs."""
    p_z = np.zeros((n * n, n))
    p_x = np.zeros((n * n, n))
    for i in range(n):
        for j in range(n):
            p_z[i * n + j, i] = 1.0
            p_x[i * n + j, j] = 1.0
    return p_z, p_x


def mi_bound_for_task(params, task, z_summary: Tensor, x_summary: Tensor,
                      cfg: TrainConfig, rng: np.random.Generator) -> Tensor:
    """The configured MI lower bound for one task on one batch."""
    n = z_summary.data.shape[0]
    if cfg.estimator == "jsd":
        perm = est.derangement_shuffle(n, rng)
        pos = mdl.critic_score(params, task, z_summary, x_summary)
        neg = mdl.critic_score(params, task, z_summary,
                               Tensor(x_summary.data[perm]))
        return est.jsd_lower_bound(est.PairScores(pos, neg))
    p_z, p_x = _pair_matrices(n)
    z_rep = ad.matmul(Tensor(p_z), z_summary)
    x_rep = ad.matmul(Tensor(p_x), x_summary)
    scores = mdl.critic_score(params, task, z_rep, x_rep)
    return est.nce_lower_bound(ad.reshape(scores, (n, n)))


def _encoder_grad_vector(grads: dict, params) -> np.ndarray:
    names = sorted(n for n in params if n.startswith("encoder."))
    return np.concatenate([np.asarray(grads.get(params[n], np.zeros_like(
        params[n].data))).reshape(-1) for n in names])


def train_step(params, bn_states, tasks, images: np.ndarray, labels: dict,
               cfg: TrainConfig, opt_state: OptimizerState, lr: float,
               rng: np.random.Generator):
    """One optimization step; returns the per-step log quantities."""
    image_t = Tensor(images)
    x_summary = mdl.input_summary(image_t)
    correct: dict[str, int] = {}
    with Tape() as tape:
        latent = mdl.encode(params, bn_states, image_t, mode="train")
        ces, z_summaries = [], []
        for task in tasks:
            logits, z_t = mdl.decode(params, task, latent)
            ces.append(obj.cross_entropy(logits, labels[task.task_id]))
            z_summaries.append(z_t)
            correct[task.task_id] = int(
                (logits.data.argmax(axis=1) == labels[task.task_id]).sum())

        weights = None
        if cfg.pareto_weighting == "min_norm":
            gvecs = [_encoder_grad_vector(tape.backward(ce), params)
                     for ce in ces]
            weights = obj.min_norm_task_weights(gvecs)
        mt = obj.multi_task_loss(ces, weights)

        mi_terms = []
        if cfg.lambda_l > 0:
            for task, z_t in zip(tasks, z_summaries):
                mi_terms.append(mi_bound_for_task(
                    params, task, z_t, x_summary, cfg, rng))
        combined = obj.combined_loss(mt, mi_terms, cfg.lambda_l, cfg.mi_sign)
        if not np.isfinite(combined.item()):
            raise NumericsError("non-finite combined loss")
        grads = tape.backward(combined)

    if cfg.lambda_l == 0:
        # critics are untrained in the baseline; still log their bound
        for task, z_t in zip(tasks, z_summaries):
            mi_terms.append(mi_bound_for_task(
                params, task, z_t, x_summary, cfg, rng))

    named = {name: grads[p] for name, p in params.items() if p in grads}
    named, preclip_norm = obj.clip_global_norm(named, cfg.clip_norm)
    obj.adam_step(params, named, opt_state, lr, cfg)
    return (mt.item(), [t.item() for t in mi_terms], combined.item(),
            preclip_norm, correct)


def _write_trainstate(path, opt_state: OptimizerState, next_epoch: int):
    with open(path, "wb") as fh:
        fh.write(TRAINSTATE_MAGIC)
        fh.write(struct.pack("<IQI", TRAINSTATE_VERSION, opt_state.step,
                             next_epoch))
        fh.write(struct.pack("<I", len(opt_state.m)))
        for name in sorted(opt_state.m):
            mdl._write_array(fh, name, opt_state.m[name])
            mdl._write_array(fh, name, opt_state.v[name])


def _read_trainstate(path) -> tuple[OptimizerState, int]:
    with open(path, "rb") as fh:
        magic = mdl._read_exact(fh, 4, "trainstate magic")
        if magic != TRAINSTATE_MAGIC:
            raise FormatError(f"bad trainstate magic {magic!r}")
        version, step, next_epoch = struct.unpack(
            "<IQI", mdl._read_exact(fh, 16, "trainstate header"))
        if version != TRAINSTATE_VERSION:
            raise FormatError(f"unsupported trainstate version {version}")
        (count,) = struct.unpack("<I", mdl._read_exact(fh, 4, "moment count"))
        state = OptimizerState(step=step)
        for _ in range(count):
            name, m = mdl._read_array(fh)
            _, v = mdl._read_array(fh)
            state.m[name] = m
            state.v[name] = v
    return state, next_epoch


def train_loop(manifest: DatasetManifest, pixels: np.ndarray,
               cfg: TrainConfig,
               log_path: Optional[str] = None,
               checkpoint_path: Optional[str] = None,
               resume: bool = False) -> TrainResult:
    cfg.validate()
    tasks = manifest.tasks
    start_epoch = 0
    if resume:
        params, bn_states, ckpt_tasks = mdl.load_checkpoint(checkpoint_path)
        mdl.check_task_compatibility(ckpt_tasks, tasks)
        opt_state, start_epoch = _read_trainstate(
            str(checkpoint_path) + ".trainstate")
    else:
        params = mdl.init_params(tasks, cfg.seed)
        bn_states = mdl.init_bn_states()
        opt_state = OptimizerState()

    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume else "w")
        if not resume:
            log_fh.write("step,epoch,lr,mt_loss,mi_per_task,"
                         "combined_loss,grad_norm_preclip\n")
        epochs_path = str(log_path) + ".epochs.csv"
        epochs_fh = open(epochs_path, "a" if resume else "w")
        if not resume:
            epochs_fh.write("epoch,lr,mt_loss,"
                            + ",".join(f"mi_{t.task_id}" for t in tasks) + ","
                            + ",".join(f"acc_{t.task_id}" for t in tasks)
                            + "\n")
    result = TrainResult(params, bn_states, tasks)
    step = opt_state.step
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = obj.lr_at_epoch(epoch, cfg)
            sums = {"mt": 0.0, "n": 0, "seen": 0}
            mi_sums = np.zeros(len(tasks))
            correct_sums = {t.task_id: 0 for t in tasks}
            for b_idx, (images, labels) in enumerate(batch_iterator(
                    manifest, pixels, cfg.batch_size,
                    [cfg.seed, _STREAM_EPOCH_SHUFFLE, epoch])):
                rng = np.random.default_rng(
                    [cfg.seed, _STREAM_DERANGEMENT, epoch, b_idx])
                mt, mis, combined, norm, correct = train_step(
                    params, bn_states, tasks, images, labels, cfg,
                    opt_state, lr, rng)
                step += 1
                sums["mt"] += mt
                sums["n"] += 1
                sums["seen"] += images.shape[0]
                mi_sums += np.array(mis)
                for tid, c in correct.items():
                    correct_sums[tid] += c
                if log_fh is not None:
                    mi_field = ";".join(repr(m) for m in mis)
                    log_fh.write(f"{step},{epoch},{lr!r},{mt!r},{mi_field},"
                                 f"{combined!r},{norm!r}\n")
                    log_fh.flush()
            nb = max(1, sums["n"])
            stats = EpochStats(
                epoch=epoch, lr=lr, mt_loss=sums["mt"] / nb,
                mi_per_task={t.task_id: mi_sums[i] / nb
                             for i, t in enumerate(tasks)},
                accuracy_per_task={tid: c / max(1, sums["seen"])
                                   for tid, c in correct_sums.items()})
            result.epochs.append(stats)
            if log_fh is not None:
                row = ([str(epoch), repr(lr), repr(stats.mt_loss)]
                       + [repr(stats.mi_per_task[t.task_id]) for t in tasks]
                       + [repr(stats.accuracy_per_task[t.task_id])
                          for t in tasks])
                epochs_fh.write(",".join(row) + "\n")
                epochs_fh.flush()
            if checkpoint_path is not None:
                mdl.save_checkpoint(checkpoint_path, params, bn_states, tasks)
                _write_trainstate(str(checkpoint_path) + ".trainstate",
                                  opt_state, epoch + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
            epochs_fh.close()
    return result
