"""Toy patch-token backbone, task heads and the composed per-client model."""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .exceptions import ConfigError, DimensionError
from .fusion import ECAFusion, FiLMFusion, PrefixSuffixPrompt, ProjectionPrompt, TokenLayout
from .spectral import SpectralTokenizer, TokenizerParams
from .tensor import (Module, Tensor, bce_with_logits, concat, cross_entropy, mse, relu, softmax_rows,
                     swap_last, upsample_nearest)

TASKS = ("classification", "segmentation", "super_resolution")


def layer_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator per (seed, key...) with string keys hashed stably."""
    words = [int(seed)]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.default_rng(words)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, L, patch*patch*C)`` in row-major patch order."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}", "model.patch_size")
    gh, gw = h // patch, w // patch
    x = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


def _gauss(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)


class Block(Module):
    """Residual single-head self-attention followed by a residual ReLU MLP."""

    def __init__(self, dim: int, rng_for: Callable[[str], np.random.Generator], hidden: int):
        super().__init__()
        for name in ("Wq", "Wk", "Wv", "Wo"):
            self.param(name, _gauss(rng_for(name), dim, (dim, dim)) * (0.5 if name == "Wo" else 1.0))
        self.param("W1", _gauss(rng_for("W1"), dim, (dim, hidden)))
        self.param("b1", np.zeros(hidden))
        self.param("W2", _gauss(rng_for("W2"), hidden, (hidden, dim)) * 0.5)
        self.param("b2", np.zeros(dim))
        self.scale = 1.0 / math.sqrt(dim)

    def __call__(self, t: Tensor) -> Tensor:
        q, k, v = t @ self.Wq, t @ self.Wk, t @ self.Wv
        attn = softmax_rows((q @ swap_last(k)) * self.scale)
        t = t + (attn @ v) @ self.Wo
        return t + (relu(t @ self.W1 + self.b1) @ self.W2 + self.b2)


class Backbone(Module):
    def __init__(self, image_size: int, patch_size: int, channels: int, dim: int, depth: int,
                 rng_for: Callable[[str], np.random.Generator], mlp_ratio: int = 2):
        super().__init__()
        if image_size % patch_size:
            raise ConfigError(f"image size {image_size} not divisible by patch size {patch_size}",
                              "model.patch_size")
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.dim = dim
        fan_in = patch_size * patch_size * channels
        self.param("embed", _gauss(rng_for("embed"), fan_in, (fan_in, dim)))
        self.param("embed_bias", np.zeros(dim))
        self.param("pos", rng_for("pos").normal(0, 0.02, (self.grid * self.grid, dim)))
        self.blocks = []
        for i in range(depth):
            block = Block(dim, lambda name, i=i: rng_for(f"block{i}.{name}"), dim * mlp_ratio)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def __call__(self, x: np.ndarray) -> Tensor:
        patches = Tensor(patchify(x, self.patch_size))
        if patches.shape[1] != self.num_tokens:
            raise DimensionError(f"expected {self.num_tokens} patches, got {patches.shape[1]}")
        t = patches @ self.embed + self.embed_bias + self.pos
        for block in self.blocks:
            t = block(t)
        return t


def _split(seq: Tensor, layout: TokenLayout) -> tuple[Tensor, Tensor | None]:
    """Backbone-token body and the mean prompt token (prefix + suffix), if any."""
    body = seq[:, layout.prefix:layout.prefix + layout.body, :]
    extra = []
    if layout.prefix:
        extra.append(seq[:, :layout.prefix, :])
    if layout.suffix:
        extra.append(seq[:, layout.prefix + layout.body:, :])
    if not extra:
        return body, None
    prompt = extra[0] if len(extra) == 1 else concat(extra, axis=1)
    return body, prompt.mean(axis=1, keepdims=True)


class ClassificationHead(Module):
    """Position-aware linear read-out of the backbone tokens plus the mean prompt token."""

    kind = "classification"

    def __init__(self, dim: int, num_tokens: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.param("W", _gauss(rng, dim * num_tokens, (num_tokens * dim, num_classes)))
        self.param("W_prompt", _gauss(rng, dim, (dim, num_classes)))
        self.param("b", np.zeros(num_classes))

    def __call__(self, seq: Tensor, layout: TokenLayout, x: np.ndarray) -> Tensor:
        body, prompt = _split(seq, layout)
        logits = body.reshape(seq.shape[0], -1) @ self.W + self.b
        if prompt is not None:
            logits = logits + prompt[:, 0, :] @ self.W_prompt
        return logits


class SegmentationHead(Module):
    """One logit per backbone token, nearest-upsampled to the input grid."""

    kind = "segmentation"

    def __init__(self, dim: int, grid: int, patch_size: int, rng: np.random.Generator):
        super().__init__()
        self.grid, self.patch_size = grid, patch_size
        self.param("W", _gauss(rng, dim, (dim, 1)))
        self.param("b", np.zeros(1))

    def __call__(self, seq: Tensor, layout: TokenLayout, x: np.ndarray) -> Tensor:
        body, prompt = _split(seq, layout)
        if prompt is not None:
            body = body + prompt
        logits = (body @ self.W + self.b).reshape(seq.shape[0], self.grid, self.grid)
        return upsample_nearest(logits, self.patch_size)


class SuperResolutionHead(Module):
    """Per-token pixel blocks, pixel-shuffled, added to a nearest upsample of the input."""

    kind = "super_resolution"

    def __init__(self, dim: int, grid: int, patch_size: int, scale: int, rng: np.random.Generator):
        super().__init__()
        self.grid, self.patch_size, self.scale = grid, patch_size, scale
        block = scale * patch_size
        self.param("W", _gauss(rng, dim, (dim, block * block)) * 0.1)
        self.param("b", np.zeros(block * block))

    def __call__(self, seq: Tensor, layout: TokenLayout, x: np.ndarray) -> Tensor:
        body, prompt = _split(seq, layout)
        if prompt is not None:
            body = body + prompt
        out = body @ self.W + self.b
        residual = pixel_shuffle(out, self.grid, self.scale * self.patch_size)
        base = x[:, 0].repeat(self.scale, axis=-2).repeat(self.scale, axis=-1)
        return residual + base


def pixel_shuffle(tokens: Tensor, grid: int, block: int) -> Tensor:
    """``(B, grid*grid, block*block)`` -> ``(B, grid*block, grid*block)``."""
    b = tokens.shape[0]
    t = tokens.reshape(b, grid, grid, block, block).transpose(0, 1, 3, 2, 4)
    return t.reshape(b, grid * block, grid * block)


def task_loss(prediction: Tensor, target: np.ndarray, kind: str) -> Tensor:
    if kind == "classification":
        return cross_entropy(prediction, target)
    if kind == "segmentation":
        return bce_with_logits(prediction, target)
    if kind == "super_resolution":
        return mse(prediction, target)
    raise ConfigError(f"unknown task kind {kind!r}", "data.task")


@dataclass
class ModelConfig:
    task: str = "classification"
    image_size: int = 32
    channels: int = 1
    num_classes: int = 4
    sr_scale: int = 2
    patch_size: int = 4
    dim: int = 32
    depth: int = 2
    tokenizer_hidden: int = 64
    bands: int = 4
    sectors: int = 8
    cutoff: float = 0.25
    head_dim: int | None = None
    suffix_tokens: int = 2
    prefix_mode: str = "pooled"
    retrieval: str = "topk"  # "topk" | "mean"
    fusion: str = "eca"  # "eca" | "film"
    prompting: str = "psp"  # "psp" | "projection"
    identity_standins: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", "data.task")
        for key, allowed in (("retrieval", ("topk", "mean")), ("fusion", ("eca", "film")),
                             ("prompting", ("psp", "projection"))):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"model.{key} must be one of {allowed}", f"model.{key}")

    @property
    def input_size(self) -> int:
        """Backbone input side length (the low-resolution side for SR)."""
        if self.task == "super_resolution":
            if self.image_size % self.sr_scale:
                raise ConfigError("image_size must be divisible by sr_scale", "data.sr_scale")
            return self.image_size // self.sr_scale
        return self.image_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


SHARED_GROUPS = ("tokenizer", "backbone", "fusion", "prompt")


def is_personal(name: str) -> bool:
    """Heads and suffix tokens stay on the client; everything else is aggregated."""
    return name.startswith("head.") or name == "prompt.suffix"


class OmniModel(Module):
    """Tokenizer, backbone, fusion, prompt and head wired into one forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, client_id: int = 0):
        super().__init__()
        self.config = cfg = config
        shared = lambda *keys: layer_rng(seed, "shared", *keys)  # noqa: E731
        personal = lambda *keys: layer_rng(seed, "client", client_id, *keys)  # noqa: E731
        self.tokenizer = SpectralTokenizer(TokenizerParams.init(
            shared("tokenizer"), hidden=cfg.tokenizer_hidden, dim=cfg.dim,
            bands=cfg.bands, sectors=cfg.sectors, cutoff_radius=cfg.cutoff))
        self.backbone = Backbone(cfg.input_size, cfg.patch_size, cfg.channels, cfg.dim, cfg.depth,
                                 lambda name: shared("backbone", name))
        if cfg.fusion == "eca":
            self.fusion = ECAFusion(cfg.dim, cfg.head_dim, shared("fusion"))
        else:
            self.fusion = FiLMFusion(cfg.dim, shared("fusion"), identity=cfg.identity_standins)
        if cfg.prompting == "psp":
            self.prompt = PrefixSuffixPrompt(cfg.dim, cfg.suffix_tokens, personal("suffix"), cfg.prefix_mode)
        else:
            self.prompt = ProjectionPrompt(cfg.dim, identity=cfg.identity_standins)
        grid = self.backbone.grid
        if cfg.task == "classification":
            self.head = ClassificationHead(cfg.dim, self.backbone.num_tokens, cfg.num_classes, personal("head"))
        elif cfg.task == "segmentation":
            self.head = SegmentationHead(cfg.dim, grid, cfg.patch_size, personal("head"))
        else:
            self.head = SuperResolutionHead(cfg.dim, grid, cfg.patch_size, cfg.sr_scale, personal("head"))

    def shared_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if not is_personal(k)}

    def personal_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if is_personal(k)}

    def load(self, shared: dict[str, np.ndarray], personal: dict[str, np.ndarray]) -> None:
        self.load_state_dict({**shared, **personal})

    def __call__(self, x: np.ndarray, descriptors: np.ndarray,
                 retrieve: Callable[[np.ndarray], np.ndarray]) -> tuple[Tensor, Tensor, np.ndarray]:
        """Forward a batch; ``retrieve`` maps token values ``(B, d)`` to prototypes ``(B, k, d)``.

        Returns the prediction, the spectral tokens and the retrieved prototypes.
        """
        tokens = self.tokenizer(descriptors)
        prototypes = retrieve(tokens.data)
        r = self.backbone(x)
        z = self.fusion(r, Tensor(prototypes))
        seq, layout = self.prompt(z, r)
        return self.head(seq, layout, x), tokens, prototypes
