import itertools
import math

import numpy as np
import pytest

from mtlmi import autodiff as ad
from mtlmi import estimators as est
from mtlmi import model as mdl
from mtlmi.autodiff import Tensor, gradient_check
from mtlmi.data import TASKS
from mtlmi.errors import ContractError
from mtlmi.estimators import (PairScores, derangement_shuffle,
                              jsd_lower_bound, nce_lower_bound)


def test_derangement_n2_is_swap():
    perm = derangement_shuffle(2, np.random.default_rng(0))
    assert list(perm) == [1, 0]


def test_derangement_rejects_small_n():
    with pytest.raises(ContractError):
        derangement_shuffle(1, np.random.default_rng(0))


def test_derangement_no_fixed_points():
    rng = np.random.default_rng(1)
    for n in (2, 3, 5, 16, 64):
        for _ in range(20):
            perm = derangement_shuffle(n, rng)
            assert not np.any(perm == np.arange(n))
            assert sorted(perm) == list(range(n))


def test_derangement_uniform_over_all_nine():
    # oracle: enumerate the 9 derangements of 4 elements exhaustively
    derangements = [p for p in itertools.permutations(range(4))
                    if all(p[i] != i for i in range(4))]
    assert len(derangements) == 9
    rng = np.random.default_rng(2)
    counts = {p: 0 for p in derangements}
    draws = 10000
    for _ in range(draws):
        counts[tuple(derangement_shuffle(4, rng))] += 1
    for p in derangements:
        assert abs(counts[p] / draws - 1.0 / 9.0) < 0.02


def test_jsd_all_zero_scores():
    scores = PairScores(Tensor(np.zeros(8)), Tensor(np.zeros(8)))
    assert jsd_lower_bound(scores).item() == pytest.approx(
        -2.0 * math.log(2.0), abs=1e-12)


def test_jsd_symmetric_scores_closed_form():
    a = math.log(3.0)
    scores = PairScores(Tensor(np.full(4, a)), Tensor(np.full(4, -a)))
    # -sp(-a) - sp(-a) = -2 ln(4/3) at a = ln 3
    assert jsd_lower_bound(scores).item() == pytest.approx(
        -2.0 * math.log(4.0 / 3.0), abs=1e-12)


def test_jsd_asymptote_approaches_zero_from_below():
    scores = PairScores(Tensor(np.full(4, 29.0)), Tensor(np.full(4, -29.0)))
    v = jsd_lower_bound(scores).item()
    assert -1e-10 < v < 0.0


def test_jsd_nonpositive_on_random_scores():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        scores = PairScores(Tensor(rng.standard_normal(n) * 5),
                            Tensor(rng.standard_normal(n) * 5))
        assert jsd_lower_bound(scores).item() <= 1e-12


def test_jsd_permutation_invariant():
    rng = np.random.default_rng(4)
    pos = rng.standard_normal(16)
    neg = rng.standard_normal(16)
    perm = rng.permutation(16)
    a = jsd_lower_bound(PairScores(Tensor(pos), Tensor(neg))).item()
    b = jsd_lower_bound(PairScores(Tensor(pos[perm]), Tensor(neg[perm]))).item()
    assert abs(a - b) < 1e-12


def test_pair_scores_validation():
    with pytest.raises(ContractError):
        PairScores(Tensor(np.zeros(1)), Tensor(np.zeros(1)))


def test_nce_constant_matrix():
    assert nce_lower_bound(Tensor(np.full((16, 16), 2.5))).item() == pytest.approx(
        -math.log(16.0), abs=1e-12)


def test_nce_degenerate_single_sample():
    assert nce_lower_bound(Tensor(np.zeros((1, 1)))).item() == 0.0


def test_nce_strong_diagonal_closed_form():
    m = np.full((4, 4), -10.0)
    np.fill_diagonal(m, 10.0)
    expected = -math.log(1.0 + 3.0 * math.exp(-20.0))
    assert nce_lower_bound(Tensor(m)).item() == pytest.approx(expected, rel=1e-9)


def test_nce_nonpositive_on_random_matrices():
    # log-sum-exp dominates the diagonal entry, so the bound is never positive
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(2, 24))
        m = rng.standard_normal((n, n)) * 8
        assert nce_lower_bound(Tensor(m)).item() <= 1e-12


def test_nce_floor_when_diagonal_is_row_max():
    # with the matched pair scoring highest in its row, lse <= s_ii + ln N
    rng = np.random.default_rng(15)
    for _ in range(50):
        n = int(rng.integers(2, 24))
        m = rng.standard_normal((n, n)) * 4
        np.fill_diagonal(m, m.max(axis=1) + rng.random(n))
        v = nce_lower_bound(Tensor(m)).item()
        assert -math.log(n) - 1e-12 <= v <= 1e-12


def test_nce_permutation_invariant():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((10, 10))
    perm = rng.permutation(10)
    a = nce_lower_bound(Tensor(m)).item()
    b = nce_lower_bound(Tensor(m[np.ix_(perm, perm)])).item()
    assert abs(a - b) < 1e-12


def test_jsd_gradient_through_critic():
    params = mdl.init_params(TASKS, seed=17)
    rng = np.random.default_rng(7)
    z = Tensor(rng.random((4, 32)))
    x = Tensor(rng.random((4, 64)))
    task = TASKS[0]
    perm = derangement_shuffle(4, rng)

    def f():
        pos = mdl.critic_score(params, task, z, x)
        neg = mdl.critic_score(params, task, z, Tensor(x.data[perm]))
        return jsd_lower_bound(PairScores(pos, neg))

    points = [params[f"critic.{task.task_id}.layer1.weight"],
              params[f"critic.{task.task_id}.layer2.weight"]]
    assert gradient_check(f, points, step=1e-5, max_coords=50) < 1e-4


def train_critic_on_pairs(shuffle_pairs: bool, steps: int = 2000,
                          seed: int = 1, batch: int = 64, dim: int = 8) -> float:
    """Discrimination protocol: fresh copies-plus-noise batches every step,
    small critic trained with Adam on derangement negatives. With
    ``shuffle_pairs`` the z rows are decoupled from their x rows, so the data
    carry no pairwise dependence and the bound should stay at -2 ln 2."""
    from mtlmi.autodiff import Tape
    from mtlmi.objective import OptimizerState, TrainConfig, adam_step

    rng = np.random.default_rng(seed)
    width = 64
    params = {
        "w1": Tensor(rng.uniform(-1, 1, (2 * dim, width)) / np.sqrt(2 * dim),
                     requires_grad=True),
        "b1": Tensor(np.zeros(width), requires_grad=True),
        "w2": Tensor(rng.uniform(-1, 1, (width, 1)) / np.sqrt(width),
                     requires_grad=True),
        "b2": Tensor(np.zeros(1), requires_grad=True),
    }
    cfg = TrainConfig(weight_decay=0.0)
    state = OptimizerState()

    def sample_batch():
        x = rng.standard_normal((batch, dim))
        z = x + 0.05 * rng.standard_normal((batch, dim))
        if shuffle_pairs:
            z = z[rng.permutation(batch)]
        return z, x

    def bound(z, x):
        def score(xs):
            h = ad.leaky_relu(ad.add(ad.matmul(
                ad.concat([Tensor(z), Tensor(xs)], axis=1), params["w1"]),
                params["b1"]), 0.01)
            return ad.reshape(ad.add(ad.matmul(h, params["w2"]), params["b2"]),
                              (-1,))
        perm = derangement_shuffle(len(x), rng)
        return jsd_lower_bound(PairScores(score(x), score(x[perm])))

    for _ in range(steps):
        z, x = sample_batch()
        with Tape() as tape:
            grads = tape.backward(ad.neg(bound(z, x)))
        named = {name: grads[p] for name, p in params.items() if p in grads}
        adam_step(params, named, state, 1e-3, cfg)
    return float(np.mean([bound(*sample_batch()).item() for _ in range(50)]))


def test_discrimination_dependent_vs_independent():
    dependent = train_critic_on_pairs(shuffle_pairs=False)
    independent = train_critic_on_pairs(shuffle_pairs=True)
    assert dependent - independent >= 0.5
    assert abs(independent - (-2.0 * math.log(2.0))) <= 0.1
