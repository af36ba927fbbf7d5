"""Datasets: the CIFAR-10 binary format and synthetic transfer tasks.

The synthetic tasks are class-conditional sinusoid textures. Each class owns
a frequency/phase signature; task B perturbs task A's signatures by a
controlled amount, so a model pretrained on A transfers to B imperfectly.
That gives fine-tuning experiments a fast, fully deterministic stand-in for
a real domain shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .seeding import substream

__all__ = [
    "LabeledDataset",
    "CIFAR10_MEAN",
    "CIFAR10_STD",
    "load_cifar10_binary",
    "normalize",
    "nearest_resize",
    "synth_signatures",
    "perturb_signatures",
    "render_dataset",
    "synth_task_pair",
]

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 channel-planar pixels
_CIFAR_HW = 32
_CIFAR_CLASSES = 10


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


def load_cifar10_binary(paths, apply_normalize: bool = True) -> LabeledDataset:
    """Read CIFAR-10 batch files (the python/binary release layout).

    Each 3073-byte record is a label byte followed by 3072 pixel bytes in
    channel-planar order (red plane, green plane, blue plane; each 32x32
    row-major). Pixels scale to [0, 1] and, by default, standardize with the
    usual per-channel statistics.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    label_chunks = []
    for path in paths:
        try:
            raw = np.fromfile(str(path), dtype=np.uint8)
        except OSError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
        if raw.size == 0:
            raise DatasetError(f"{path}: file is empty")
        if raw.size % _RECORD_BYTES != 0:
            full = raw.size // _RECORD_BYTES
            raise DatasetError(
                f"{path}: truncated record after {full} records; "
                f"{raw.size % _RECORD_BYTES} trailing bytes (expected multiples of {_RECORD_BYTES})"
            )
        records = raw.reshape(-1, _RECORD_BYTES)
        labels = records[:, 0]
        bad = np.nonzero(labels >= _CIFAR_CLASSES)[0]
        if bad.size:
            raise DatasetError(f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])}, expected 0..9")
        pixels = records[:, 1:].reshape(-1, 3, _CIFAR_HW, _CIFAR_HW).transpose(0, 2, 3, 1)
        chunks.append(pixels)
        label_chunks.append(labels)
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    labels = np.concatenate(label_chunks).astype(np.int64)
    if apply_normalize:
        images = normalize(images, CIFAR10_MEAN, CIFAR10_STD)
    return LabeledDataset(images, labels, _CIFAR_CLASSES, "cifar10")


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (images - mean) / std


def nearest_resize(images: np.ndarray, out_hw: int) -> np.ndarray:
    """Nearest-neighbor spatial resize of a (N, H, W, C) batch."""
    n, h, w, _ = images.shape
    rows = (np.arange(out_hw) * h // out_hw).astype(np.intp)
    cols = (np.arange(out_hw) * w // out_hw).astype(np.intp)
    return np.ascontiguousarray(images[:, rows][:, :, cols])


# --------------------------------------------------------------------------
# synthetic texture tasks


def synth_signatures(num_classes: int, seed: int = 0) -> np.ndarray:
    """Per-class texture parameters: two plane waves plus a chroma offset.

    Row layout: (fx1, fy1, phase1, fx2, fy2, phase2, chroma).
    """
    rng = substream(seed, "synth-signatures")
    sig = np.empty((num_classes, 7), dtype=np.float64)
    sig[:, 0] = rng.uniform(1.0, 4.0, num_classes)
    sig[:, 1] = rng.uniform(1.0, 4.0, num_classes)
    sig[:, 2] = rng.uniform(0.0, 2.0 * math.pi, num_classes)
    sig[:, 3] = rng.uniform(2.0, 6.0, num_classes)
    sig[:, 4] = rng.uniform(2.0, 6.0, num_classes)
    sig[:, 5] = rng.uniform(0.0, 2.0 * math.pi, num_classes)
    sig[:, 6] = rng.uniform(0.3, 1.2, num_classes)
    return sig


def perturb_signatures(signatures: np.ndarray, shift: float, seed: int = 0) -> np.ndarray:
    """Shifted copies of the signatures; `shift` scales the perturbation."""
    rng = substream(seed, "synth-shift")
    out = signatures.copy()
    out[:, (0, 1, 3, 4)] += shift * rng.normal(size=(len(signatures), 4))
    out[:, (2, 5)] += (2.0 * shift) * rng.normal(size=(len(signatures), 2))
    out[:, (0, 1, 3, 4)] = np.abs(out[:, (0, 1, 3, 4)])
    return out


def render_dataset(
    signatures: np.ndarray,
    n: int,
    image_hw: int = 16,
    noise: float = 0.08,
    seed: int = 0,
    name: str = "synth",
) -> LabeledDataset:
    """Balanced dataset of noisy textures; images are zero-centered."""
    num_classes = len(signatures)
    rng = substream(seed, f"synth-render-{name}")
    labels = np.tile(np.arange(num_classes), math.ceil(n / num_classes))[:n]
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:image_hw, 0:image_hw] / image_hw
    images = np.empty((n, image_hw, image_hw, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        fx1, fy1, p1, fx2, fy2, p2, chroma = signatures[c]
        img = np.empty((image_hw, image_hw, 3), dtype=np.float64)
        for ch in range(3):
            wave = np.sin(2.0 * math.pi * (fx1 * xx + fy1 * yy) + p1 + ch * chroma)
            wave += 0.5 * np.sin(2.0 * math.pi * (fx2 * xx + fy2 * yy) + p2 - ch * chroma)
            img[:, :, ch] = wave / 1.5
        img = 0.4 * img + noise * rng.normal(size=img.shape)
        images[i] = np.clip(img, -1.0, 1.0)
    return LabeledDataset(images, labels.astype(np.int64), num_classes, name)


def synth_task_pair(
    num_classes: int = 4,
    image_hw: int = 16,
    n_train: int = 256,
    n_val: int = 128,
    noise: float = 0.08,
    shift: float = 0.35,
    seed: int = 0,
) -> dict[str, LabeledDataset]:
    """Pretraining task A and transfer task B, with train/val splits each."""
    sig_a = synth_signatures(num_classes, seed)
    sig_b = perturb_signatures(sig_a, shift, seed)
    return {
        "a_train": render_dataset(sig_a, n_train, image_hw, noise, seed, "a-train"),
        "a_val": render_dataset(sig_a, n_val, image_hw, noise, seed, "a-val"),
        "b_train": render_dataset(sig_b, n_train, image_hw, noise, seed, "b-train"),
        "b_val": render_dataset(sig_b, n_val, image_hw, noise, seed, "b-val"),
    }
