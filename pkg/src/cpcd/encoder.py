"""Trainable representation: small conv encoder plus linear projection heads.

The image branch and the patch branch share the same encoder weights; the
patch branch encodes every patch independently and concatenates the
per-patch features before its projection head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    in_channels: int = 3
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    feature_dim: int = 64
    head_dim: int = 128
    patch_count: int = 4

    def __post_init__(self):
        if not 1 <= len(self.conv_channels) <= 4:
            raise ValueError("conv stack depth must be between 1 and 4 layers")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "feature_dim": self.feature_dim,
            "head_dim": self.head_dim,
            "patch_count": self.patch_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class EmbeddingBatch:
    """Rows of encoder or head outputs for one batch."""

    values: Tensor               # (B, d)
    normalized: bool = False
    source: str = "image"        # "image" | "patch"

    @property
    def data(self) -> np.ndarray:
        return self.values.data


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Encoder:
    """Strided conv stack with ReLU, global average pool, and a linear map."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE11C]))
        k = config.kernel_size
        self.params: dict[str, Tensor] = {}
        cin = config.in_channels
        for i, cout in enumerate(config.conv_channels):
            fan_in = k * k * cin
            self.params[f"conv{i}_w"] = Tensor(_he_init(rng, (k, k, cin, cout), fan_in), requires_grad=True)
            self.params[f"conv{i}_b"] = Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        self.params["fc_w"] = Tensor(_he_init(rng, (cin, config.feature_dim), cin), requires_grad=True)
        self.params["fc_b"] = Tensor(np.zeros(config.feature_dim), requires_grad=True)
        self.n_params = sum(p.size for p in self.params.values())

    def __repr__(self) -> str:
        return f"Encoder(depth={len(self.config.conv_channels)}, n_params={self.n_params})"

    def forward(self, images: np.ndarray | Tensor) -> Tensor:
        """(B, H, W, C) pixels to (B, feature_dim) features."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[3] != self.config.in_channels:
            raise ad.ShapeMismatchError(
                f"expected (B,H,W,{self.config.in_channels}) images, got {x.shape}")
        pad = self.config.kernel_size // 2
        for i in range(len(self.config.conv_channels)):
            x = ad.conv2d(x, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"],
                          stride=2, pad=pad)
            x = ad.relu(x)
        pooled = ad.tensor_mean(x, axis=(1, 2))
        return ad.add(ad.matmul(pooled, self.params["fc_w"]), self.params["fc_b"])


class ProjectionHead:
    """Single linear map with bias onto the contrastive space."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0, name: str = "head"):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD, hash(name) & 0xFFFF]))
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = {
            f"{name}_w": Tensor(_he_init(rng, (in_dim, out_dim), in_dim), requires_grad=True),
            f"{name}_b": Tensor(np.zeros(out_dim), requires_grad=True),
        }

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[1] != self.in_dim:
            raise ad.ShapeMismatchError(
                f"{self.name}: feature width {features.shape[1]} does not match head input {self.in_dim}")
        return ad.add(ad.matmul(features, self.params[f"{self.name}_w"]),
                      self.params[f"{self.name}_b"])


def encode_image(encoder: Encoder, images: np.ndarray) -> EmbeddingBatch:
    return EmbeddingBatch(encoder.forward(images), normalized=False, source="image")


def encode_patches(encoder: Encoder, patch_sets: np.ndarray) -> EmbeddingBatch:
    """Encode (B, P, h, w, C) patch sets into (B, P*feature_dim) rows.

    Every patch goes through the shared encoder; per-sample features are
    concatenated in patch-slot order.
    """
    arr = np.asarray(patch_sets, dtype=np.float64)
    if arr.ndim != 5:
        raise ad.ShapeMismatchError(f"expected (B,P,h,w,C) patch sets, got shape {arr.shape}")
    b, p = arr.shape[0], arr.shape[1]
    if p != encoder.config.patch_count:
        raise ad.ShapeMismatchError(
            f"patch count {p} does not match configured {encoder.config.patch_count}")
    flat = arr.reshape(b * p, *arr.shape[2:])
    feats = encoder.forward(flat)                       # (B*P, feature_dim)
    grouped = ad.reshape(feats, (b, p * encoder.config.feature_dim))
    return EmbeddingBatch(grouped, normalized=False, source="patch")


def project(head: ProjectionHead, batch: EmbeddingBatch) -> EmbeddingBatch:
    return EmbeddingBatch(head.forward(batch.values), normalized=False, source=batch.source)


def normalize_embeddings(batch: EmbeddingBatch) -> EmbeddingBatch:
    """Unit-normalize rows; rejects rows with norm below 1e-12."""
    return EmbeddingBatch(ad.l2_normalize(batch.values), normalized=True, source=batch.source)


def build_model(config: EncoderConfig, seed: int = 0) -> tuple[Encoder, ProjectionHead, ProjectionHead]:
    """Encoder plus the image head f and the patch head g sharing one seed."""
    encoder = Encoder(config, seed=seed)
    image_head = ProjectionHead(config.feature_dim, config.head_dim, seed=seed, name="f_head")
    patch_head = ProjectionHead(config.feature_dim * config.patch_count, config.head_dim,
                                seed=seed, name="g_head")
    return encoder, image_head, patch_head


def all_parameters(encoder: Encoder, image_head: ProjectionHead,
                   patch_head: ProjectionHead) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for prefix, source in (("enc", encoder.params), ("", image_head.params), ("", patch_head.params)):
        for name, tensor in source.items():
            key = f"{prefix}/{name}" if prefix else name
            params[key] = tensor
    return params
