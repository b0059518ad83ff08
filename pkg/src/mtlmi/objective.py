"""Loss assembly, Adam with weight decay and clipping, LR schedule, and the
optional min-norm (Pareto) task-weighting solver."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericsError


@dataclass
class TrainConfig:
    lambda_l: float = 0.1
    lr_initial: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_epoch: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_epsilon: float = 1e-8
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    estimator: str = "jsd"
    pareto_weighting: str = "off"
    # documented lower-bound knob on the MI constraint; it drops out of the
    # relaxed objective and never enters computation
    epsilon_m_doc: float = 0.0
    mi_sign: str = "subtract"

    def validate(self):
        if self.lambda_l < 0:
            raise ContractError("lambda_l must be >= 0")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ContractError(f"{name} must lie in [0, 1), got {v}")
        if self.lr_initial <= 0 or self.lr_after <= 0:
            raise ContractError("learning rates must be positive")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (negative sampling)")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")
        if self.estimator not in ("jsd", "nce"):
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if self.pareto_weighting not in ("off", "min_norm"):
            raise ContractError(
                f"unknown pareto_weighting {self.pareto_weighting!r}")
        if self.mi_sign not in ("subtract", "add"):
            raise ContractError(f"unknown mi_sign {self.mi_sign!r}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the given class indices."""
    picked = ad.gather_logit(ad.log_softmax(logits), labels)
    return ad.neg(ad.mean(picked))


def multi_task_loss(per_task_ce: Sequence[Tensor],
                    weights: Optional[Sequence[float]] = None) -> Tensor:
    """Mean of the per-task cross-entropies (or a convex reweighting)."""
    if not per_task_ce:
        raise ContractError("multi_task_loss needs at least one task loss")
    t = len(per_task_ce)
    if weights is None:
        weights = [1.0 / t] * t
    total = ad.multiply_scalar(per_task_ce[0], weights[0])
    for w, ce in zip(weights[1:], per_task_ce[1:]):
        total = ad.add(total, ad.multiply_scalar(ce, w))
    return total


def combined_loss(mt_loss: Tensor, per_task_mi: Sequence[Tensor],
                  lambda_l: float, mi_sign: str = "subtract") -> Tensor:
    """mt_loss - lambda_l * sum(MI bounds): minimizing maximizes the bounds.

    ``mi_sign="add"`` reproduces the alternative plus-sign form for ablation.
    With lambda_l = 0 the result is exactly mt_loss (the MI terms are not
    even wired into the graph, keeping the baseline bit-identical).
    """
    if lambda_l < 0:
        raise ContractError("lambda_l must be >= 0")
    if lambda_l == 0.0:
        return mt_loss
    scale = -lambda_l if mi_sign == "subtract" else lambda_l
    total = mt_loss
    for mi in per_task_mi:
        total = ad.add(total, ad.multiply_scalar(mi, scale))
    return total


@dataclass
class OptimizerState:
    """Adam first/second moments per parameter plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float, cfg: TrainConfig):
    """One in-place Adam update over every parameter present in ``grads``.

    Weight decay enters as an additive term on the gradient before the
    moment updates (classic L2, not decoupled).
    """
    state.step += 1
    t = state.step
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_initial if epoch < cfg.lr_switch_epoch else cfg.lr_after


def min_norm_task_weights(task_gradients: Sequence[np.ndarray],
                          iterations: int = 200) -> list[float]:
    """Convex weights minimizing ||sum_t w_t g_t||^2 (Frank-Wolfe on the hull).

    T = 1 is trivial and T = 2 uses the closed form
    alpha* = clamp(((g2 - g1) . g2) / ||g1 - g2||^2, 0, 1) on g1. All-zero
    gradients fall back to uniform weights.
    """
    t = len(task_gradients)
    if t == 0:
        raise ContractError("need at least one task gradient")
    if t == 1:
        return [1.0]
    gram = np.array([[float(np.dot(a, b)) for b in task_gradients]
                     for a in task_gradients])
    if np.allclose(gram, 0.0):
        return [1.0 / t] * t

    def pair_alpha(v11, v12, v22):
        # weight on the first argument of the two-point min-norm problem
        denom = v11 - 2 * v12 + v22
        if denom <= 1e-18:
            return 0.5
        return float(np.clip((v22 - v12) / denom, 0.0, 1.0))

    if t == 2:
        a = pair_alpha(gram[0, 0], gram[0, 1], gram[1, 1])
        return [a, 1.0 - a]

    # pairwise variant: shift mass from the worst active vertex to the best
    # one, which converges linearly and lands exactly on simplex faces
    w = np.full(t, 1.0 / t)
    for _ in range(iterations):
        q = gram @ w
        best = int(np.argmin(q))
        active = np.flatnonzero(w > 1e-15)
        worst = int(active[np.argmax(q[active])])
        num = q[worst] - q[best]  # negative directional derivative / 2
        if num <= 1e-15:
            break
        den = gram[best, best] - 2 * gram[best, worst] + gram[worst, worst]
        gamma = w[worst] if den <= 1e-18 else min(w[worst], num / den)
        w[best] += gamma
        w[worst] -= gamma
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    return [float(x) for x in w]
