"""Desk-scale image datasets, scaled to [-1, 1]."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, C, H, W) in [-1, 1]
    labels: Optional[torch.Tensor]
    sample_ids: list
    source: str

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=int)
        return ImageDataset(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            [self.sample_ids[i] for i in idx],
            self.source,
        )

    @property
    def num_classes(self) -> Optional[int]:
        return None if self.labels is None else int(self.labels.max()) + 1


def load_digits_dataset() -> ImageDataset:
    """scikit-learn's 1797 handwritten digits, 1x8x8 grayscale with 10 classes."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.tensor(d.images, dtype=torch.float32).unsqueeze(1) / 8.0 - 1.0
    y = torch.tensor(d.target, dtype=torch.long)
    return ImageDataset(x, y, [f"digits-{i:04d}" for i in range(len(y))], "digits")


def load_synthetic_dataset(n: int = 1024, size: int = 8, channels: int = 1, seed: int = 0) -> ImageDataset:
    """Random blob images; a cheap stand-in for smoke tests."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(1, size - 2, (2, n))
    r = rng.uniform(1.0, size / 3, n)
    img = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * r[:, None, None] ** 2))
    img = img[:, None].repeat(channels, 1) * 2.0 - 1.0
    img += 0.05 * rng.normal(size=img.shape)
    labels = torch.tensor((r > size / 6).astype(int))
    return ImageDataset(torch.tensor(np.clip(img, -1, 1), dtype=torch.float32), labels,
                        [f"synthetic-{i:05d}" for i in range(n)], "synthetic")


DATASETS = {"digits": load_digits_dataset, "synthetic": load_synthetic_dataset}


def load_dataset(name: str) -> ImageDataset:
    if name not in DATASETS:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    return DATASETS[name]()
