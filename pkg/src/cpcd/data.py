"""Synthetic texture datasets and the pretext-pair pipeline.

Each class is an oriented sinusoid grating with class-specific frequency
and orientation plus per-sample phase and additive noise; orientation and
frequency energies give a hand-crafted feature space in which the classes
are linearly separable, so a linear probe on good representations can
solve the task. The pretext view of a sample is its jigsaw patch set:
a random crop split into a shuffled grid of patches.
"""

from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"CPCDIMG1"

_STREAM_SHUFFLE = 0x5F1E
_STREAM_JIGSAW = 0x7A2B


class LabelAccessError(RuntimeError):
    """Raised when a label is read while pretext label reads are forbidden."""


_label_reads_forbidden = False


@contextmanager
def forbid_label_reads():
    """Audit guard: any ``latent_class`` read inside this context fails."""
    global _label_reads_forbidden
    previous = _label_reads_forbidden
    _label_reads_forbidden = True
    try:
        yield
    finally:
        _label_reads_forbidden = previous


class ImageSample:
    """One dataset image: stable id, pixels in [0,1], and an audited label."""

    __slots__ = ("id", "pixels", "_latent_class")

    def __init__(self, id: int, pixels: np.ndarray, latent_class: int):
        self.id = int(id)
        self.pixels = pixels
        self._latent_class = int(latent_class)

    @property
    def latent_class(self) -> int:
        if _label_reads_forbidden:
            raise LabelAccessError(f"latent_class of sample {self.id} read during pretext training")
        return self._latent_class

    def __repr__(self) -> str:
        h, w, c = self.pixels.shape
        return f"ImageSample(id={self.id}, {h}x{w}x{c})"


@dataclass
class JigsawPatchSet:
    """Shuffled grid of patches cut from one random crop of a parent image.

    ``patches[slot] = tiles[permutation[slot]]`` where ``tiles`` is the
    row-major tiling of the crop; re-tiling with the inverse permutation
    reconstructs the crop exactly when no photometric jitter was applied.
    """

    parent_id: int
    patches: np.ndarray          # (patch_count, p, p, C)
    permutation: np.ndarray      # bijection on 0..patch_count-1
    crop_offset: tuple[int, int] = (0, 0)

    @property
    def patch_count(self) -> int:
        return self.patches.shape[0]


@dataclass
class DatasetSpec:
    """Deterministic recipe for a synthetic texture dataset."""

    n_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 16
    channels: int = 3
    frequencies: tuple[float, ...] | None = None    # per class; default 2.5 + c
    orientations: tuple[float, ...] | None = None   # per class; default spaced within [0, pi/2)
    noise_level: float = 0.45
    amplitude: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.frequencies is not None and len(self.frequencies) != self.n_classes:
            raise ValueError("frequencies must list one value per class")
        if self.orientations is not None and len(self.orientations) != self.n_classes:
            raise ValueError("orientations must list one value per class")

    @property
    def n_samples(self) -> int:
        return self.n_classes * self.samples_per_class

    def class_frequency(self, c: int) -> float:
        return self.frequencies[c] if self.frequencies else 2.5 + c

    def class_orientation(self, c: int) -> float:
        """Default orientations stay inside [0, pi/2).

        Flips fold orientation as theta -> pi - theta, so angles spaced
        within one quadrant remain distinct classes under the flip
        augmentations; frequencies are flip-invariant outright.
        """
        if self.orientations:
            return self.orientations[c]
        return (np.pi / 2) * c / self.n_classes

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "samples_per_class": self.samples_per_class,
            "image_size": self.image_size,
            "channels": self.channels,
            "frequencies": list(self.frequencies) if self.frequencies else None,
            "orientations": list(self.orientations) if self.orientations else None,
            "noise_level": self.noise_level,
            "amplitude": self.amplitude,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        for key in ("frequencies", "orientations"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Dataset:
    samples: list[ImageSample]
    spec: DatasetSpec | None = None
    _by_id: dict[int, ImageSample] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise ValueError("duplicate sample ids in dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self, sample_id: int) -> ImageSample:
        return self._by_id[sample_id]

    def pixel_hash(self) -> str:
        digest = hashlib.sha256()
        for s in self.samples:
            digest.update(s.pixels.astype("<f4").tobytes())
        return digest.hexdigest()


def generate_synthetic_dataset(spec: DatasetSpec) -> Dataset:
    """Materialize the dataset described by ``spec``; byte-stable per seed.

    Pixels are rounded through float32 so in-memory generation and a disk
    round trip through the dataset file format agree exactly.
    """
    h = w = spec.image_size
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    samples = []
    for sample_id in range(spec.n_samples):
        cls = sample_id // spec.samples_per_class
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, sample_id]))
        ori = spec.class_orientation(cls)
        freq = spec.class_frequency(cls)
        proj = (np.cos(ori) * xs + np.sin(ori) * ys) / spec.image_size
        img = np.empty((h, w, spec.channels))
        base_phase = rng.uniform(0.0, 2.0 * np.pi)
        for ch in range(spec.channels):
            phase = base_phase + 2.0 * np.pi * ch / max(spec.channels, 1) * 0.25
            grating = 0.5 + 0.5 * spec.amplitude * np.sin(2.0 * np.pi * freq * proj + phase)
            img[:, :, ch] = grating + spec.noise_level * rng.standard_normal((h, w))
        img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
        samples.append(ImageSample(sample_id, img, cls))
    return Dataset(samples, spec)


def handcrafted_features(pixels: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Per-class grating energies; classes are separable in this space."""
    h = w = spec.image_size
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mono = pixels.mean(axis=2) - pixels.mean()
    feats = []
    for c in range(spec.n_classes):
        ori, freq = spec.class_orientation(c), spec.class_frequency(c)
        proj = (np.cos(ori) * xs + np.sin(ori) * ys) / spec.image_size
        arg = 2.0 * np.pi * freq * proj
        feats.append(np.hypot((mono * np.sin(arg)).sum(), (mono * np.cos(arg)).sum()))
    return np.array(feats)


# ---------------------------------------------------------------------------
# transformations


@dataclass
class JitterFactors:
    """One draw of photometric perturbation parameters."""

    brightness: float
    contrast: float
    saturation: float
    hue_shift: float


def draw_jitter_factors(strength: float, rng: np.random.Generator) -> JitterFactors:
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"jitter strength must be in [0,1], got {strength}")
    return JitterFactors(
        brightness=rng.uniform(1.0 - strength, 1.0 + strength),
        contrast=rng.uniform(1.0 - strength, 1.0 + strength),
        saturation=rng.uniform(1.0 - strength, 1.0 + strength),
        hue_shift=rng.uniform(-strength / 2.0, strength / 2.0),
    )


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(span > 0, span, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], axis=-1), np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1), np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1), np.stack([v, p, q], axis=-1),
    ]
    return np.select([(i == k)[..., None] for k in range(6)], choices, default=choices[0])


def apply_jitter(image: np.ndarray, factors: JitterFactors) -> np.ndarray:
    """Brightness, contrast, saturation, then hue; result clamped to [0,1]."""
    out = image * factors.brightness
    mean = out.mean()
    out = mean + factors.contrast * (out - mean)
    if image.shape[-1] == 3:
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + factors.saturation * (out - gray)
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + factors.hue_shift) % 1.0
        out = _hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def photometric_jitter(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    if strength == 0.0:
        return image.copy()
    return apply_jitter(image, draw_jitter_factors(strength, rng))


def geometric_flip(image: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    out = image
    if horizontal:
        out = out[:, ::-1, :]
    if vertical:
        out = out[::-1, :, :]
    return out.copy()


def make_jigsaw(image: np.ndarray, grid: int, patch_size: int, rng: np.random.Generator,
                jitter_strength: float = 0.0, parent_id: int = -1) -> JigsawPatchSet:
    """Random crop, tile into a grid, shuffle tiles, optionally jitter.

    One jitter factor draw is shared by every patch in the set.
    """
    h, w = image.shape[:2]
    crop = grid * patch_size
    if crop > h or crop > w:
        raise ValueError(f"jigsaw needs a {crop}x{crop} crop but image is {h}x{w}")
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    region = image[oy:oy + crop, ox:ox + crop, :]
    tiles = [region[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size, :]
             for r in range(grid) for c in range(grid)]
    permutation = rng.permutation(grid * grid)
    patches = np.stack([tiles[k] for k in permutation])
    if jitter_strength > 0.0:
        factors = draw_jitter_factors(jitter_strength, rng)
        patches = np.stack([apply_jitter(p, factors) for p in patches])
    return JigsawPatchSet(parent_id=parent_id, patches=patches,
                          permutation=permutation, crop_offset=(oy, ox))


def retile(patch_set: JigsawPatchSet, grid: int) -> np.ndarray:
    """Undo the shuffle and reassemble the cropped region."""
    inverse = np.empty_like(patch_set.permutation)
    inverse[patch_set.permutation] = np.arange(patch_set.patch_count)
    p = patch_set.patches.shape[1]
    out = np.empty((grid * p, grid * p, patch_set.patches.shape[3]))
    for tile_idx in range(patch_set.patch_count):
        r, c = divmod(tile_idx, grid)
        out[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = patch_set.patches[inverse[tile_idx]]
    return out


def batch_iterator(dataset: Dataset, batch_size: int, seed: int, epoch: int,
                   grid: int = 2, patch_size: int | None = None,
                   jitter_strength: float = 0.0):
    """Yield per-epoch shuffled batches of (sample, jigsaw set) pairs.

    The shuffle and every per-batch rng stream derive from
    (seed, epoch, batch index), so batches can be rebuilt independently.
    The last partial batch is dropped.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    if patch_size is None:
        patch_size = dataset.samples[0].pixels.shape[0] // grid
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, _STREAM_SHUFFLE]))
    order = order_rng.permutation(n)
    for batch_idx in range(n // batch_size):
        ids = order[batch_idx * batch_size:(batch_idx + 1) * batch_size]
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, batch_idx, _STREAM_JIGSAW]))
        batch = []
        for sample_id in ids:
            sample = dataset.samples[int(sample_id)]
            patch_set = make_jigsaw(sample.pixels, grid, patch_size, rng,
                                    jitter_strength=jitter_strength, parent_id=sample.id)
            batch.append((sample, patch_set))
        yield batch


# ---------------------------------------------------------------------------
# on-disk format: one binary file per sample plus a manifest


def write_dataset(directory: str | Path, dataset: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in dataset.samples:
        h, w, c = s.pixels.shape
        label = s._latent_class
        header = DATASET_MAGIC + struct.pack("<5I", h, w, c, s.id, label)
        payload = s.pixels.astype("<f4").tobytes()
        (directory / f"sample_{s.id:06d}.bin").write_bytes(header + payload)
        lines.append(f"{s.id} {label}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    if dataset.spec is not None:
        import json

        (directory / "spec.json").write_text(json.dumps(dataset.spec.to_dict(), indent=2, sort_keys=True))


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {directory}")
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        sample_id, label = (int(tok) for tok in line.split())
        raw = (directory / f"sample_{sample_id:06d}.bin").read_bytes()
        if raw[:8] != DATASET_MAGIC:
            raise ValueError(f"bad magic in sample file for id {sample_id}")
        h, w, c, file_id, file_label = struct.unpack("<5I", raw[8:28])
        if file_id != sample_id or file_label != label:
            raise ValueError(f"manifest disagrees with sample file for id {sample_id}")
        pixels = np.frombuffer(raw[28:], dtype="<f4").reshape(h, w, c).astype(np.float64)
        samples.append(ImageSample(sample_id, pixels, label))
    spec = None
    spec_path = directory / "spec.json"
    if spec_path.exists():
        import json

        spec = DatasetSpec.from_dict(json.loads(spec_path.read_text()))
    return Dataset(samples, spec)
