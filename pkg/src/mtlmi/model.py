"""Shared encoder, per-task decoder heads, per-task critics, checkpoint I/O.

The network is a pure function of a flat name->Tensor parameter map plus the
batch-norm running statistics, so the same code serves training (tape active)
and evaluation (no tape).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import CompatibilityError, ContractError, DimensionError, FormatError

LEAKY_ALPHA_DEFAULT = 0.01
LATENT_CHANNELS = 64
TASK_SUMMARY_DIM = 32
INPUT_SUMMARY_DIM = 64
CRITIC_HIDDEN = 128


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    class_count: int
    category: str

    def __post_init__(self):
        if self.class_count < 2:
            raise ContractError(
                f"task {self.task_id!r} needs at least 2 classes")


def _uniform_kernel(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(task_set: list[TaskSpec], seed: int) -> dict[str, Tensor]:
    """Deterministic parameter map for encoder, decoders and critics.

    Kernels and weights are uniform with bound 1/sqrt(fan_in); biases start
    at zero, batch-norm gamma at one and beta at zero.
    """
    if not task_set:
        raise ContractError("task set must be nonempty")
    ids = [t.task_id for t in task_set]
    if len(set(ids)) != len(ids):
        raise ContractError("task ids must be unique")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(prefix, cin, cout, k):
        params[f"{prefix}.kernel"] = _uniform_kernel(
            rng, (cout, cin, k, k), cin * k * k)
        params[f"{prefix}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def bn(prefix, c):
        params[f"{prefix}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        params[f"{prefix}.beta"] = Tensor(np.zeros(c), requires_grad=True)

    def affine(prefix, nin, nout):
        params[f"{prefix}.weight"] = _uniform_kernel(rng, (nin, nout), nin)
        params[f"{prefix}.bias"] = Tensor(np.zeros(nout), requires_grad=True)

    conv("encoder.conv1", 3, 16, 3)
    bn("encoder.bn1", 16)
    conv("encoder.conv2", 16, 32, 3)
    bn("encoder.bn2", 32)
    conv("encoder.conv3", 32, LATENT_CHANNELS, 3)
    bn("encoder.bn3", LATENT_CHANNELS)

    for task in task_set:
        conv(f"decoder.{task.task_id}.conv1", LATENT_CHANNELS, TASK_SUMMARY_DIM, 3)
        conv(f"decoder.{task.task_id}.conv2", TASK_SUMMARY_DIM, task.class_count, 1)

    for task in task_set:
        affine(f"critic.{task.task_id}.layer1",
               TASK_SUMMARY_DIM + INPUT_SUMMARY_DIM, CRITIC_HIDDEN)
        affine(f"critic.{task.task_id}.layer2", CRITIC_HIDDEN, 1)

    return params


def init_bn_states() -> dict[str, BatchNormState]:
    return {
        "encoder.bn1": BatchNormState.create(16),
        "encoder.bn2": BatchNormState.create(32),
        "encoder.bn3": BatchNormState.create(LATENT_CHANNELS),
    }


def encode(params: dict[str, Tensor], bn_states: dict[str, BatchNormState],
           images: Tensor, mode: str = "train",
           alpha: float = LEAKY_ALPHA_DEFAULT) -> Tensor:
    """Map (N, 3, S, S) images in [0, 1] to the shared latent (N, 64, S/4, S/4)."""
    if images.data.ndim != 4 or images.data.shape[1] != 3:
        raise DimensionError("encode expects (N, 3, H, W) images")
    h, w = images.data.shape[2:]
    if h % 4 or w % 4:
        raise DimensionError("encode needs spatial dims divisible by 4")
    x = ad.conv2d(images, params["encoder.conv1.kernel"],
                  params["encoder.conv1.bias"], stride=1, padding=1)
    x = ad.leaky_relu(x, alpha)
    x = ad.batch_norm(x, params["encoder.bn1.gamma"], params["encoder.bn1.beta"],
                      bn_states["encoder.bn1"], mode)
    x = ad.conv2d(x, params["encoder.conv2.kernel"],
                  params["encoder.conv2.bias"], stride=2, padding=1)
    x = ad.leaky_relu(x, alpha)
    x = ad.batch_norm(x, params["encoder.bn2.gamma"], params["encoder.bn2.beta"],
                      bn_states["encoder.bn2"], mode)
    x = ad.conv2d(x, params["encoder.conv3.kernel"],
                  params["encoder.conv3.bias"], stride=2, padding=1)
    x = ad.leaky_relu(x, alpha)
    x = ad.batch_norm(x, params["encoder.bn3.gamma"], params["encoder.bn3.beta"],
                      bn_states["encoder.bn3"], mode)
    return x


def decode(params: dict[str, Tensor], task: TaskSpec, latent: Tensor,
           alpha: float = LEAKY_ALPHA_DEFAULT) -> tuple[Tensor, Tensor]:
    """Task head: returns (logits (N, K), task summary z_t (N, 32))."""
    prefix = f"decoder.{task.task_id}"
    if f"{prefix}.conv1.kernel" not in params:
        raise ContractError(f"unknown task id {task.task_id!r}")
    x = ad.conv2d(latent, params[f"{prefix}.conv1.kernel"],
                  params[f"{prefix}.conv1.bias"], stride=1, padding=1)
    x = ad.leaky_relu(x, alpha)
    summary = ad.global_average_pool(x)
    x = ad.conv2d(x, params[f"{prefix}.conv2.kernel"],
                  params[f"{prefix}.conv2.bias"], stride=1, padding=0)
    logits = ad.global_average_pool(x)
    return logits, summary


def critic_score(params: dict[str, Tensor], task: TaskSpec,
                 z_t_summary: Tensor, input_summary: Tensor,
                 alpha: float = LEAKY_ALPHA_DEFAULT) -> Tensor:
    """Score (N,) for each (task summary, input summary) pair."""
    if z_t_summary.data.shape[0] != input_summary.data.shape[0]:
        raise DimensionError("summary row counts differ")
    prefix = f"critic.{task.task_id}"
    if f"{prefix}.layer1.weight" not in params:
        raise ContractError(f"unknown task id {task.task_id!r}")
    x = ad.concat([z_t_summary, input_summary], axis=1)
    x = ad.add(ad.matmul(x, params[f"{prefix}.layer1.weight"]),
               params[f"{prefix}.layer1.bias"])
    x = ad.leaky_relu(x, alpha)
    x = ad.add(ad.matmul(x, params[f"{prefix}.layer2.weight"]),
               params[f"{prefix}.layer2.bias"])
    return ad.reshape(x, (-1,))


def input_summary(images: Tensor) -> Tensor:
    """Fixed 8x8 mean-pooled grayscale view of the raw images, flattened.

    Non-learned by design: the critic's x side stays deterministic, so it is
    built outside the tape and carries no gradient.
    """
    data = images.data
    n, c, h, w = data.shape
    if h % 8 or w % 8:
        raise DimensionError("input_summary needs spatial dims divisible by 8")
    gray = data.mean(axis=1)
    fh, fw = h // 8, w // 8
    pooled = gray.reshape(n, 8, fh, 8, fw).mean(axis=(2, 4))
    return Tensor(pooled.reshape(n, INPUT_SUMMARY_DIM))


# ---------------------------------------------------------------------------
# checkpoint format (magic "MIML")
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MIML"
CHECKPOINT_VERSION = 1


def _write_str(fh: BinaryIO, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, field: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"checkpoint truncated while reading {field}")
    return raw


def _read_str(fh: BinaryIO, field: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, field + " length"))
    return _read_exact(fh, n, field).decode("utf-8")


def _write_array(fh: BinaryIO, name: str, arr: np.ndarray):
    _write_str(fh, name)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh: BinaryIO) -> tuple[str, np.ndarray]:
    name = _read_str(fh, "record name")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} ndim"))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4, f"{name} dim"))[0]
                  for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, 8 * count, f"{name} values")
    return name, np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(path, params: dict[str, Tensor],
                    bn_states: dict[str, BatchNormState],
                    task_set: list[TaskSpec]):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(task_set)))
        for task in task_set:
            _write_str(fh, task.task_id)
            fh.write(struct.pack("<H", task.class_count))
            _write_str(fh, task.category)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_array(fh, name, params[name].data)
        fh.write(struct.pack("<I", len(bn_states)))
        for name in sorted(bn_states):
            st = bn_states[name]
            _write_array(fh, name + ".running_mean", st.running_mean)
            _write_array(fh, name + ".running_var", st.running_var)


def load_checkpoint(path) -> tuple[dict[str, Tensor],
                                   dict[str, BatchNormState],
                                   list[TaskSpec]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (ntasks,) = struct.unpack("<I", _read_exact(fh, 4, "task count"))
        task_set = []
        for _ in range(ntasks):
            tid = _read_str(fh, "task id")
            (k,) = struct.unpack("<H", _read_exact(fh, 2, "class count"))
            cat = _read_str(fh, "task category")
            task_set.append(TaskSpec(tid, k, cat))
        (nparams,) = struct.unpack("<I", _read_exact(fh, 4, "param count"))
        params = {}
        for _ in range(nparams):
            name, arr = _read_array(fh)
            params[name] = Tensor(arr, requires_grad=True)
        (nstates,) = struct.unpack("<I", _read_exact(fh, 4, "bn state count"))
        states: dict[str, BatchNormState] = {}
        for _ in range(nstates):
            mean_name, mean_arr = _read_array(fh)
            var_name, var_arr = _read_array(fh)
            base = mean_name.rsplit(".", 1)[0]
            if (not mean_name.endswith(".running_mean")
                    or var_name != base + ".running_var"):
                raise FormatError(
                    f"bn state records out of order: {mean_name}, {var_name}")
            states[base] = BatchNormState(mean_arr, var_arr)
    return params, states, task_set


def check_task_compatibility(checkpoint_tasks: list[TaskSpec],
                             dataset_tasks: list[TaskSpec]):
    if checkpoint_tasks != dataset_tasks:
        diffs = []
        by_id = {t.task_id: t for t in checkpoint_tasks}
        for t in dataset_tasks:
            other = by_id.pop(t.task_id, None)
            if other != t:
                diffs.append(f"dataset has {t}, checkpoint has {other}")
        for t in by_id.values():
            diffs.append(f"checkpoint-only task {t}")
        raise CompatibilityError(
            "checkpoint and dataset task sets differ: " + "; ".join(diffs))
