"""Synthetic multi-modality images and non-IID client partitions.

A scene is a sum of Gaussian blobs ("anatomy"), which is spectrally low-pass
by construction.  A modality applies a monotone intensity curve, adds an
oriented sinusoidal carrier at or above half the Nyquist frequency and adds
white noise.  The same scene under two modalities therefore differs mostly
outside the low-pass disc.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError

BACKGROUND = 0.2
BLOB_PEAK = 0.8


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: int
    carrier: float = 0.7  # fraction of Nyquist
    orientation: float = 0.0  # radians
    amplitude: float = 0.1
    noise_scale: float = 0.02
    gamma: float = 1.0  # intensity transfer v -> v ** gamma

    def __post_init__(self):
        if self.carrier < 0.5:
            raise ConfigError(f"modality carrier must be >= 0.5 Nyquist, got {self.carrier}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")

    def intensity_transfer(self, v: np.ndarray) -> np.ndarray:
        """Gamma curve anchored at the scene background level and at 1."""
        if self.gamma == 1.0:
            return v
        b = BACKGROUND
        t = np.clip((v - b) / (1.0 - b), 0.0, None)
        return np.where(v >= b, b + (1.0 - b) * t ** self.gamma, v)

    def wavevector(self, size: int) -> tuple[int, int]:
        """Carrier snapped to an integer (ky, kx) bin so its energy sits in exactly two bins."""
        half = size / 2
        ky = int(round(self.carrier * half * math.sin(self.orientation)))
        kx = int(round(self.carrier * half * math.cos(self.orientation)))
        while math.hypot(ky, kx) < 0.5 * half:
            kx += 1 if kx >= 0 else -1
        return ky, kx


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    centers: np.ndarray  # (n, 2) as (row, col) fractions of the side
    radii: np.ndarray  # (n,) fractions of the side
    intensities: np.ndarray  # (n,)
    mask_level: float = 0.5  # fraction of the field maximum


def default_modalities(num_modalities: int, seed: int = 0) -> list[ModalitySpec]:
    rng = np.random.default_rng([seed, 7919])
    specs = []
    for m in range(num_modalities):
        gammas = np.linspace(0.94, 1.06, num_modalities) if num_modalities > 1 else [1.0]
        specs.append(ModalitySpec(
            modality_id=m,
            carrier=float(rng.uniform(0.6, 0.9)),
            orientation=float(m * math.pi / max(num_modalities, 1) + rng.uniform(-0.2, 0.2)),
            amplitude=float(rng.uniform(0.1, 0.16)),
            noise_scale=float(rng.uniform(0.01, 0.03)),
            gamma=float(gammas[m]),
        ))
    return specs


def random_scene(class_id: int, num_classes: int, rng: np.random.Generator) -> SceneSpec:
    """Blob layout determined by class: count and rotation of the arrangement."""
    n = 2 + class_id % 3
    base = class_id * math.pi / max(num_classes, 1)
    angles = base + 2 * math.pi * np.arange(n) / n + rng.normal(0, 0.12, n)
    dist = rng.uniform(0.2, 0.28, n)
    centers = 0.5 + np.stack([dist * np.sin(angles), dist * np.cos(angles)], axis=1)
    centers += rng.normal(0, 0.02, (1, 2))
    return SceneSpec(class_id=class_id, centers=centers, radii=rng.uniform(0.08, 0.12, n),
                     intensities=rng.uniform(0.5, 0.8, n))


def blob_field(scene: SceneSpec, size: int) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    fieldv = np.zeros((size, size))
    for (cy, cx), rad, amp in zip(scene.centers, scene.radii, scene.intensities):
        fieldv += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
    return fieldv


def render(scene: SceneSpec, size: int) -> np.ndarray:
    """Background plus blobs, scaled so the image spans ``[BACKGROUND, BLOB_PEAK]`` at most."""
    fieldv = blob_field(scene, size)
    peak = fieldv.max()
    scale = min(1.0, (BLOB_PEAK - BACKGROUND) / peak) if peak > 0 else 1.0
    return BACKGROUND + scale * fieldv


def scene_mask(scene: SceneSpec, size: int) -> np.ndarray:
    fieldv = blob_field(scene, size)
    return (fieldv >= scene.mask_level * fieldv.max()).astype(np.float64)


def texture(modality: ModalitySpec, size: int, phase: float) -> np.ndarray:
    ky, kx = modality.wavevector(size)
    idx = np.arange(size)
    yy, xx = np.meshgrid(idx, idx, indexing="ij")
    return modality.amplitude * np.sin(2 * math.pi * (ky * yy + kx * xx) / size + phase)


def generate_sample(scene: SceneSpec, modality: ModalitySpec, rng: np.random.Generator,
                    size: int = 32) -> tuple[np.ndarray, dict]:
    """Render ``scene`` under ``modality``: ``(image (H, W), targets)``."""
    base = render(scene, size)
    img = modality.intensity_transfer(base)
    if modality.amplitude:
        img = img + texture(modality, size, float(rng.uniform(0, 2 * math.pi)))
    if modality.noise_scale:
        img = img + rng.normal(0, modality.noise_scale, img.shape)
    img = np.clip(img, 0.0, 1.0)
    targets = {"class_id": scene.class_id, "mask": scene_mask(scene, size), "hr": img.copy()}
    return img, targets


def downsample(images: np.ndarray, scale: int) -> np.ndarray:
    """Box-filter downsampling over the last two axes."""
    *lead, h, w = images.shape
    return images.reshape(*lead, h // scale, scale, w // scale, scale).mean(axis=(-3, -1))


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W)
    labels: np.ndarray  # (N,)
    modalities: np.ndarray  # (N,)
    masks: np.ndarray  # (N, H, W)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def inputs_targets(self, task: str, sr_scale: int = 2) -> tuple[np.ndarray, np.ndarray]:
        if task == "classification":
            return self.images, self.labels
        if task == "segmentation":
            return self.images, self.masks
        if task == "super_resolution":
            return downsample(self.images, sr_scale), self.images[:, 0]
        raise ConfigError(f"unknown task {task!r}", "data.task")

    def save(self, path) -> None:
        from .io import write_container
        write_container(path, "dataset", self.meta, {
            "images": self.images, "labels": self.labels, "modalities": self.modalities, "masks": self.masks})

    @classmethod
    def load(cls, path) -> Dataset:
        from .io import read_container
        meta, arrays = read_container(path, expected_kind="dataset")
        return cls(arrays["images"], arrays["labels"], arrays["modalities"], arrays["masks"], meta)


def make_dataset(num_samples: int, image_size: int = 32, num_classes: int = 4, num_modalities: int = 3,
                 seed: int = 0) -> Dataset:
    """Balanced classes and modalities, one counter-based RNG stream per sample."""
    modalities = default_modalities(num_modalities, seed)
    images = np.zeros((num_samples, 1, image_size, image_size))
    masks = np.zeros((num_samples, image_size, image_size))
    labels = np.arange(num_samples) % num_classes
    mods = (np.arange(num_samples) // num_classes) % num_modalities
    for i in range(num_samples):
        rng = np.random.default_rng([seed, 104729, i])
        scene = random_scene(int(labels[i]), num_classes, rng)
        img, tg = generate_sample(scene, modalities[mods[i]], rng, image_size)
        images[i, 0] = img
        masks[i] = tg["mask"]
    meta = {"image_size": image_size, "num_classes": num_classes, "num_modalities": num_modalities,
            "seed": seed, "version": 1}
    return Dataset(images, labels.astype(np.int64), mods.astype(np.int64), masks, meta)


def cross_modality_pairs(n: int, image_size: int = 32, num_classes: int = 4, num_modalities: int = 3,
                         seed: int = 0, same_modality: bool = False):
    """Yield ``(image_a, image_b, modality_a, modality_b)`` for one scene per pair."""
    modalities = default_modalities(num_modalities, seed)
    for i in range(n):
        rng = np.random.default_rng([seed, 15485863, i])
        scene = random_scene(int(rng.integers(num_classes)), num_classes, rng)
        a = int(rng.integers(num_modalities))
        if same_modality or num_modalities == 1:
            b = a
        else:
            b = int((a + 1 + rng.integers(num_modalities - 1)) % num_modalities)
        img_a, _ = generate_sample(scene, modalities[a], rng, image_size)
        img_b, _ = generate_sample(scene, modalities[b], rng, image_size)
        yield img_a, img_b, a, b


# ------------------------------------------------------------------ partitions
def dirichlet_partition(labels: np.ndarray, num_clients: int, gamma: float, rng: np.random.Generator,
                        max_retries: int = 100) -> list[np.ndarray]:
    """Per-class Dirichlet(gamma) label skew; every client gets at least one sample."""
    labels = np.asarray(labels)
    if gamma <= 0:
        raise ConfigError(f"Dirichlet gamma must be positive, got {gamma}", "data.partition.gamma")
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1", "federation.num_clients")
    if num_clients > len(labels):
        raise ConfigError(f"cannot give {num_clients} clients at least one of {len(labels)} samples",
                          "federation.num_clients")
    classes = np.unique(labels)
    shards: list[list[int]] = []
    for _ in range(max_retries):
        shards = [[] for _ in range(num_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(num_clients, gamma))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].extend(part.tolist())
        if all(shards):
            break
    else:
        # deterministic fix-up: feed empty clients from the currently largest shard
        for k in range(num_clients):
            if not shards[k]:
                donor = max(range(num_clients), key=lambda j: (len(shards[j]), -j))
                shards[k].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


def modality_partition(modalities: np.ndarray, num_clients: int, mode: str = "disjoint",
                       overlap: float = 0.5) -> list[np.ndarray]:
    """Split samples by modality.

    ``disjoint``: modality ``m`` goes to client ``m % K`` (one modality per client
    when there are exactly ``K``).  ``overlapping``: client ``k`` holds modalities
    ``k % M`` (primary) and ``(k + 1) % M`` (secondary); a fraction ``overlap`` of
    each modality's samples is spread over its secondary holders.
    """
    modalities = np.asarray(modalities)
    mods = np.unique(modalities)
    n_mod = int(mods.max()) + 1 if len(mods) else 0
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1", "federation.num_clients")
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    if mode == "disjoint":
        if n_mod < num_clients:
            raise ConfigError(f"disjoint mode needs at least {num_clients} modalities, found {n_mod}",
                              "data.partition.mode")
        for m in mods:
            shards[int(m) % num_clients].extend(np.flatnonzero(modalities == m).tolist())
    elif mode == "overlapping":
        if not 0.0 <= overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {overlap}", "data.partition.overlap")
        for m in mods:
            idx = np.flatnonzero(modalities == m)
            primary = [k for k in range(num_clients) if k % n_mod == m]
            secondary = [k for k in range(num_clients) if (k + 1) % n_mod == m and k not in primary]
            if not primary and not secondary:
                primary = [int(m) % num_clients]
            if not secondary:
                n_sec = 0
            elif not primary:
                n_sec = len(idx)
            else:
                n_sec = int(round(overlap * len(idx)))
            head, tail = idx[:len(idx) - n_sec], idx[len(idx) - n_sec:]
            for holders, part in ((primary, head), (secondary, tail)):
                for j, chunk in enumerate(np.array_split(part, len(holders)) if holders else []):
                    shards[holders[j]].extend(chunk.tolist())
    else:
        raise ConfigError(f"unknown modality partition mode {mode!r}", "data.partition.mode")
    return [np.array(sorted(s), dtype=np.int64) for s in shards]
