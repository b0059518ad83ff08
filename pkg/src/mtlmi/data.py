"""Procedural multi-attribute scene generator, MTSC dataset files, batching.

Every sample is fully determined by one 64-bit seed: attribute sampling and
each rendering stage draw from independent streams derived from that seed,
so labels are auditable and images regenerable from the manifest alone.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ContractError, FormatError
from .model import TaskSpec

# fixed task set: desk-scale analogue of place/weather/surface/environment
TASKS = [
    TaskSpec("place", 4, "place"),
    TaskSpec("weather", 3, "weather"),
    TaskSpec("surface", 2, "surface"),
    TaskSpec("environment", 3, "environment"),
]

PLACE_VERTICAL, PLACE_HORIZONTAL, PLACE_CROSSING, PLACE_TJUNCTION = range(4)
WEATHER_SUNNY, WEATHER_RAINY, WEATHER_FOGGY = range(3)
SURFACE_DRY, SURFACE_WET = range(2)
ENV_URBAN, ENV_RURAL, ENV_HIGHWAY = range(3)

# per-sample RNG stream indices (sub-seeds of the sample seed)
_STREAM_ATTRS = 0
_STREAM_BACKGROUND = 1
_STREAM_SPECKLE = 2
_STREAM_WEATHER = 3
_STREAM_NOISE = 4


@dataclass(frozen=True)
class SceneAttributes:
    place: int
    weather: int
    surface: int
    environment: int

    def labels(self) -> tuple[int, int, int, int]:
        return (self.place, self.weather, self.surface, self.environment)


@dataclass
class GeneratorConfig:
    sample_count: int = 2500
    image_size: int = 32
    seed: int = 0
    correlation_rho: float = 0.9
    imbalance_gamma: float = 0.0
    noise_sigma: float = 4.0

    def validate(self):
        if self.sample_count < 1:
            raise ContractError("sample_count must be >= 1")
        if self.image_size < 16 or self.image_size % 8:
            raise ContractError("image_size must be a multiple of 8, >= 16")
        if not 0.0 <= self.correlation_rho <= 1.0:
            raise ContractError("correlation_rho must lie in [0, 1]")
        if self.imbalance_gamma < 0:
            raise ContractError("imbalance_gamma must be >= 0")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SampleRecord:
    index: int
    labels: tuple[int, int, int, int]
    seed: int


@dataclass
class DatasetManifest:
    tasks: list[TaskSpec]
    records: list[SampleRecord]
    image_size: int
    channels: int = 3

    @property
    def sample_count(self) -> int:
        return len(self.records)

    def label_array(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=np.int64)


def sample_attributes(rng: np.random.Generator,
                      cfg: GeneratorConfig) -> SceneAttributes:
    """Draw one attribute tuple; surface is coupled to the weather draw."""
    weights = (np.arange(1, 5, dtype=np.float64)) ** (-cfg.imbalance_gamma)
    place = int(rng.choice(4, p=weights / weights.sum()))
    weather = int(rng.integers(3))
    environment = int(rng.integers(3))
    p_wet = cfg.correlation_rho if weather == WEATHER_RAINY else 1.0 - cfg.correlation_rho
    surface = SURFACE_WET if rng.random() < p_wet else SURFACE_DRY
    return SceneAttributes(place, weather, surface, environment)


def _road_mask(place: int, s: int) -> np.ndarray:
    band = slice(s * 11 // 32, s * 21 // 32)
    mask = np.zeros((s, s), dtype=bool)
    if place == PLACE_VERTICAL:
        mask[:, band] = True
    elif place == PLACE_HORIZONTAL:
        mask[band, :] = True
    elif place == PLACE_CROSSING:
        mask[band, :] = True
        mask[:, band] = True
    else:  # T-junction: full horizontal band, vertical stem below it
        mask[band, :] = True
        mask[s // 2:, band] = True
    return mask


def render_scene(attrs: SceneAttributes, seed: int,
                 cfg: GeneratorConfig) -> np.ndarray:
    """Deterministic (3, S, S) uint8 image for one attribute tuple.

    Composition order: environment background, road band, wet speckles,
    weather post-process (monotone per pixel outside of rain streaks),
    additive Gaussian noise, clamp to [0, 255].
    """
    s = cfg.image_size
    rng_bg = np.random.default_rng([seed, _STREAM_BACKGROUND])
    img = np.empty((s, s, 3), dtype=np.float64)

    if attrs.environment == ENV_URBAN:
        img[:] = 110.0
        for _ in range(6):
            x0, y0 = rng_bg.integers(0, s - 4, size=2)
            wdt, hgt = rng_bg.integers(4, s // 2, size=2)
            img[y0:y0 + hgt, x0:x0 + wdt] = rng_bg.uniform(60.0, 180.0)
    elif attrs.environment == ENV_RURAL:
        img[:] = (70.0, 125.0, 55.0)
        img += rng_bg.uniform(-18.0, 18.0, size=(s, s, 1))
    else:  # highway: dark field with dashed lane marks
        img[:] = (45.0, 45.0, 48.0)
        for row in (s // 6, 5 * s // 6):
            for x0 in range(0, s, 6):
                img[row, x0:x0 + 3] = 200.0

    mask = _road_mask(attrs.place, s)
    img[mask] = 90.0

    if attrs.surface == SURFACE_WET:
        rng_spk = np.random.default_rng([seed, _STREAM_SPECKLE])
        speckle = rng_spk.random((s, s)) < 0.12
        img[mask & speckle] = 215.0

    if attrs.weather == WEATHER_SUNNY:
        img = img * 1.15 + np.array([28.0, 14.0, 0.0])
    elif attrs.weather == WEATHER_RAINY:
        img = img * 0.85 + np.array([0.0, 0.0, 35.0])
        rng_wth = np.random.default_rng([seed, _STREAM_WEATHER])
        cols = rng_wth.integers(0, s, size=s)
        tops = rng_wth.integers(0, s - 6, size=s)
        for x, y0 in zip(cols, tops):
            img[y0:y0 + 6, x] += 22.0
    else:  # foggy: blend toward mid-gray, contrast collapses
        img = img * 0.45 + 128.0 * 0.55

    rng_noise = np.random.default_rng([seed, _STREAM_NOISE])
    img += rng_noise.normal(0.0, cfg.noise_sigma, size=(s, s, 3))
    return np.clip(img, 0.0, 255.0).astype(np.uint8).transpose(2, 0, 1)


def attributes_from_seed(seed: int, cfg: GeneratorConfig) -> SceneAttributes:
    return sample_attributes(np.random.default_rng([seed, _STREAM_ATTRS]), cfg)


def generate_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, np.ndarray]:
    """Build the full dataset: manifest records plus (N, 3, S, S) pixels."""
    cfg.validate()
    master = np.random.default_rng(cfg.seed)
    seeds = master.integers(0, 2 ** 63, size=cfg.sample_count, dtype=np.uint64)
    records = []
    pixels = np.empty((cfg.sample_count, 3, cfg.image_size, cfg.image_size),
                      dtype=np.uint8)
    for i, seed in enumerate(seeds):
        seed = int(seed)
        attrs = attributes_from_seed(seed, cfg)
        records.append(SampleRecord(i, attrs.labels(), seed))
        pixels[i] = render_scene(attrs, seed, cfg)
    return DatasetManifest(list(TASKS), records, cfg.image_size), pixels


# ---------------------------------------------------------------------------
# MTSC file format
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"MTSC"
DATASET_VERSION = 1


def write_dataset(manifest: DatasetManifest, pixels: np.ndarray, path):
    n = manifest.sample_count
    s = manifest.image_size
    if pixels.shape != (n, manifest.channels, s, s):
        raise ContractError("pixel blob shape disagrees with manifest")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIII", DATASET_VERSION, n, s, s,
                             manifest.channels))
        fh.write(struct.pack("<I", len(manifest.tasks)))
        for task in manifest.tasks:
            raw = task.task_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<H", task.class_count))
        labels = manifest.label_array().astype("<u2")
        fh.write(labels.tobytes())
        seeds = np.array([r.seed for r in manifest.records], dtype="<u8")
        fh.write(seeds.tobytes())
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    with open(str(path) + ".manifest.txt", "w") as fh:
        for r in manifest.records:
            fh.write(f"{r.index}\t{','.join(map(str, r.labels))}\t{r.seed}\n")


def _read(fh, n, fieldname) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"dataset truncated while reading {fieldname}")
    return raw


def read_dataset(path) -> tuple[DatasetManifest, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        magic = _read(fh, 4, "magic")
        if magic != DATASET_MAGIC:
            raise FormatError(
                f"bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}")
        version, n, h, w, channels = struct.unpack("<IIIII",
                                                   _read(fh, 20, "header"))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        if h != w:
            raise FormatError(f"non-square images in header: {h}x{w}")
        (task_count,) = struct.unpack("<I", _read(fh, 4, "task count"))
        tasks = []
        for i in range(task_count):
            (nlen,) = struct.unpack("<H", _read(fh, 2, "task name length"))
            name = _read(fh, nlen, "task name").decode("utf-8")
            (k,) = struct.unpack("<H", _read(fh, 2, "class count"))
            category = next((t.category for t in TASKS if t.task_id == name),
                            name)
            tasks.append(TaskSpec(name, k, category))
        labels = np.frombuffer(_read(fh, 2 * n * task_count, "labels"),
                               dtype="<u2").reshape(n, task_count)
        seeds = np.frombuffer(_read(fh, 8 * n, "seeds"), dtype="<u8")
        pixels = np.frombuffer(_read(fh, n * channels * h * w, "pixels"),
                               dtype=np.uint8).reshape(n, channels, h, w).copy()
    records = [SampleRecord(i, tuple(int(x) for x in labels[i]), int(seeds[i]))
               for i in range(n)]
    return DatasetManifest(tasks, records, h, channels), pixels


def batch_iterator(manifest: DatasetManifest, pixels: np.ndarray,
                   batch_size: int, epoch_seed) -> Iterator[tuple]:
    """Shuffled minibatches of ([0,1] float images, per-task label arrays).

    The final partial batch is dropped (negative sampling needs >= 2 rows).
    ``epoch_seed`` may be an int or a seed sequence list; the order is a
    pure function of it.
    """
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2")
    n = manifest.sample_count
    perm = np.random.default_rng(epoch_seed).permutation(n)
    labels = manifest.label_array()
    for start in range(0, n - batch_size + 1, batch_size):
        idx = perm[start:start + batch_size]
        images = pixels[idx].astype(np.float64) / 255.0
        batch_labels = {task.task_id: labels[idx, t]
                        for t, task in enumerate(manifest.tasks)}
        yield images, batch_labels
