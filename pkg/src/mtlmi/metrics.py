"""Confusion matrices, macro F-scores, category means, diagnostics, exports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from .autodiff import Tensor
from .errors import ContractError
from .model import TaskSpec


@dataclass
class ConfusionMatrix:
    task_id: str
    counts: np.ndarray  # (K, K); rows = ground truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / max(1, self.total)


def confusion_matrix(predictions, labels, k: int,
                     task_id: str = "") -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ContractError("predictions and labels must be equal-length vectors")
    if len(preds) and (preds.min() < 0 or preds.max() >= k
                       or labs.min() < 0 or labs.max() >= k):
        raise ContractError(f"class index outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labs, preds), 1)
    return ConfusionMatrix(task_id, counts)


def macro_f_score(cm: ConfusionMatrix) -> float:
    """Unweighted mean over classes of per-class F1.

    A class with zero precision+recall (including classes absent from both
    predictions and ground truth) contributes F1 = 0.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise ContractError("empty confusion matrix")
    k = counts.shape[0]
    f1s = []
    for c in range(k):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(f1s))


def zero_support_classes(cm: ConfusionMatrix) -> list[int]:
    """Classes never predicted and never present in the ground truth."""
    return [c for c in range(cm.counts.shape[0])
            if cm.counts[c, :].sum() == 0 and cm.counts[:, c].sum() == 0]


@dataclass
class MetricsReport:
    confusions: dict[str, ConfusionMatrix]
    macro_f: dict[str, float]
    accuracy: dict[str, float]
    category_f: dict[str, float] = field(default_factory=dict)
    flagged_classes: dict[str, list] = field(default_factory=dict)


def category_mean_f(macro_f: dict[str, float],
                    category_map: dict[str, str]) -> dict[str, float]:
    """Unweighted mean of task macro F within each category."""
    by_cat: dict[str, list] = {}
    for task_id, f in macro_f.items():
        if task_id not in category_map:
            raise ContractError(f"task {task_id!r} has no category mapping")
        by_cat.setdefault(category_map[task_id], []).append(f)
    return {cat: float(np.mean(v)) for cat, v in sorted(by_cat.items())}


def forgetting_probe(per_epoch_accuracy: np.ndarray) -> np.ndarray:
    """Largest regression from a running best, per task.

    ``per_epoch_accuracy`` is (epochs, tasks); needs at least 2 epochs.
    """
    acc = np.asarray(per_epoch_accuracy, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] < 2:
        raise ContractError("need an (epochs >= 2, tasks) accuracy matrix")
    best = np.maximum.accumulate(acc, axis=0)
    return (best - acc).max(axis=0)


def evaluate(params, bn_states, tasks: Sequence[TaskSpec],
             manifest, pixels, batch: int = 64) -> MetricsReport:
    """Eval-mode pass over the whole dataset, producing the full report."""
    n = manifest.sample_count
    labels = manifest.label_array()
    preds = {t.task_id: np.empty(n, dtype=np.int64) for t in tasks}
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        images = Tensor(pixels[sl].astype(np.float64) / 255.0)
        latent = mdl.encode(params, bn_states, images, mode="eval")
        for task in tasks:
            logits, _ = mdl.decode(params, task, latent)
            preds[task.task_id][sl] = logits.data.argmax(axis=1)
    confusions, macro, acc, flagged = {}, {}, {}, {}
    for t_idx, task in enumerate(tasks):
        cm = confusion_matrix(preds[task.task_id], labels[:, t_idx],
                              task.class_count, task.task_id)
        confusions[task.task_id] = cm
        macro[task.task_id] = macro_f_score(cm)
        acc[task.task_id] = cm.accuracy()
        flagged[task.task_id] = zero_support_classes(cm)
    cats = category_mean_f(macro, {t.task_id: t.category for t in tasks})
    return MetricsReport(confusions, macro, acc, cats, flagged)


def write_metrics_csv(report: MetricsReport, tasks: Sequence[TaskSpec], path):
    with open(path, "w") as fh:
        fh.write("task_id,class_count,macro_f,accuracy,zero_support_classes\n")
        for task in tasks:
            flagged = ";".join(map(str, report.flagged_classes.get(task.task_id, [])))
            fh.write(f"{task.task_id},{task.class_count},"
                     f"{report.macro_f[task.task_id]!r},"
                     f"{report.accuracy[task.task_id]!r},{flagged}\n")
        fh.write("category,mean_f\n")
        for cat, f in report.category_f.items():
            fh.write(f"{cat},{f!r}\n")


def export_embeddings(params, bn_states, manifest, pixels, path,
                      batch: int = 64):
    """One TSV row per sample: index, task labels, 64-dim pooled latent."""
    n = manifest.sample_count
    labels = manifest.label_array()
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise OSError(f"cannot open embeddings path {path}: {exc}") from exc
    with fh:
        header = (["index"] + [t.task_id for t in manifest.tasks]
                  + [f"e{i}" for i in range(mdl.LATENT_CHANNELS)])
        fh.write("\t".join(header) + "\n")
        for start in range(0, n, batch):
            sl = slice(start, min(start + batch, n))
            images = Tensor(pixels[sl].astype(np.float64) / 255.0)
            latent = mdl.encode(params, bn_states, images, mode="eval")
            pooled = latent.data.mean(axis=(2, 3))
            for row, emb in enumerate(pooled):
                i = start + row
                cells = ([str(i)] + [str(x) for x in labels[i]]
                         + [repr(float(v)) for v in emb])
                fh.write("\t".join(cells) + "\n")
