"""Finite-difference verification over every primitive and the full loss.

Each registered check builds a scalar function of one or more tensors and
compares analytic gradients against central differences. The end-to-end
check drives the complete model plus both loss terms on a 2-sample batch;
its parameter space is large, so a fixed random subset of coordinates per
tensor is probed there (all coordinates are swept for the primitives).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import model as mdl
from . import objective as obj
from .autodiff import BatchNormState, Tensor, gradient_check
from .data import TASKS

TOLERANCE = 1e-4
STEP = 1e-5


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check_conv2d(rng):
    inp = _t(rng, 2, 2, 5, 5)
    kernel = _t(rng, 3, 2, 3, 3)
    bias = _t(rng, 3)
    f = lambda: ad.mean(ad.conv2d(inp, kernel, bias, stride=2, padding=1))
    return gradient_check(f, [inp, kernel, bias], STEP)


def check_leaky_relu(rng):
    x = _t(rng, 40)
    # keep points away from the kink, where finite differences are invalid
    x.data[np.abs(x.data) < 1e-3] += 0.01
    return gradient_check(lambda: ad.mean(ad.leaky_relu(x, 0.01)), x, STEP)


def check_softplus(rng):
    x = _t(rng, 50)
    return gradient_check(lambda: ad.mean(ad.softplus(x)), x, STEP)


def check_batch_norm(rng):
    x = _t(rng, 2, 3, 4, 4)
    gamma = _t(rng, 3)
    beta = _t(rng, 3)
    state = BatchNormState.create(3)

    def f():
        st = state.copy()  # keep running stats fixed across FD evaluations
        out = ad.batch_norm(x, gamma, beta, st, mode="train")
        # nonlinear reduction: the plain mean of a normalized batch is
        # constant in x, which would make the check vacuous
        return ad.mean(ad.softplus(out))

    return gradient_check(f, [x, gamma, beta], STEP)


def check_matmul(rng):
    a = _t(rng, 3, 4)
    b = _t(rng, 4, 2)
    return gradient_check(lambda: ad.mean(ad.matmul(a, b)), [a, b], STEP)


def check_add(rng):
    a = _t(rng, 4, 5)
    b = _t(rng, 5)
    return gradient_check(lambda: ad.mean(ad.add(a, b)), [a, b], STEP)


def check_multiply_scalar(rng):
    a = _t(rng, 7)
    return gradient_check(lambda: ad.mean(ad.multiply_scalar(a, -2.5)), a, STEP)


def check_multiply(rng):
    a = _t(rng, 4, 3)
    b = _t(rng, 3)
    return gradient_check(lambda: ad.mean(ad.multiply(a, b)), [a, b], STEP)


def check_concat(rng):
    a = _t(rng, 3, 2)
    b = _t(rng, 3, 4)
    def f():
        c = ad.concat([a, b], axis=1)
        return ad.mean(ad.softplus(c))
    return gradient_check(f, [a, b], STEP)


def check_flatten(rng):
    a = _t(rng, 2, 3, 4)
    return gradient_check(lambda: ad.mean(ad.softplus(ad.flatten(a))), a, STEP)


def check_global_average_pool(rng):
    a = _t(rng, 2, 3, 4, 4)
    return gradient_check(
        lambda: ad.mean(ad.softplus(ad.global_average_pool(a))), a, STEP)


def check_mean(rng):
    a = _t(rng, 3, 3)
    return gradient_check(lambda: ad.mean(ad.softplus(a)), a, STEP)


def check_log_softmax(rng):
    a = _t(rng, 4, 5)
    return gradient_check(lambda: ad.mean(ad.log_softmax(a)), a, STEP)


def check_gather_logit(rng):
    a = _t(rng, 5, 4)
    idx = rng.integers(0, 4, size=5)
    return gradient_check(
        lambda: ad.mean(ad.gather_logit(ad.log_softmax(a), idx)), a, STEP)


def check_end_to_end(rng, batch: int = 2):
    """Combined loss through encoder, all decoders, critics and both terms."""
    tasks = TASKS
    params = mdl.init_params(tasks, seed=1234)
    bn_states = mdl.init_bn_states()
    images = Tensor(rng.random((batch, 3, 32, 32)))
    x_summary = mdl.input_summary(images)
    cfg = obj.TrainConfig(lambda_l=0.1)
    labels = {t.task_id: rng.integers(0, t.class_count, size=batch)
              for t in tasks}
    perm = np.roll(np.arange(batch), 1)

    def f():
        bn = {k: v.copy() for k, v in bn_states.items()}
        latent = mdl.encode(params, bn, images, mode="train")
        ces, mis = [], []
        for task in tasks:
            logits, z_t = mdl.decode(params, task, latent)
            ces.append(obj.cross_entropy(logits, labels[task.task_id]))
            pos = mdl.critic_score(params, task, z_t, x_summary)
            neg = mdl.critic_score(params, task, z_t,
                                   Tensor(x_summary.data[perm]))
            mis.append(est.jsd_lower_bound(est.PairScores(pos, neg)))
        return obj.combined_loss(obj.multi_task_loss(ces), mis, cfg.lambda_l)

    points = [params[name] for name in sorted(params)]
    return gradient_check(f, points, STEP, max_coords=4,
                          rng=np.random.default_rng(99))


CHECKS = [
    ("conv2d", check_conv2d),
    ("leaky_relu", check_leaky_relu),
    ("softplus", check_softplus),
    ("batch_norm", check_batch_norm),
    ("matmul", check_matmul),
    ("add", check_add),
    ("multiply_scalar", check_multiply_scalar),
    ("multiply", check_multiply),
    ("concat", check_concat),
    ("flatten", check_flatten),
    ("global_average_pool", check_global_average_pool),
    ("mean", check_mean),
    ("log_softmax", check_log_softmax),
    ("gather_logit", check_gather_logit),
    ("end_to_end_combined_loss", check_end_to_end),
]


def run_all(seed: int = 0) -> list[tuple[str, float, bool]]:
    results = []
    for name, fn in CHECKS:
        err = fn(np.random.default_rng(seed))
        results.append((name, err, err < TOLERANCE))
    return results
