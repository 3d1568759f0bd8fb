'''
In-memory labelled image dataset shared by the loaders, the sharding helpers
and the training engine.
'''
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


class DataFormatError(ValueError):
    """Malformed input file or inconsistent dataset."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [count, channels, height, width], float64
    labels: np.ndarray  # [count], int64 in [0, class_count)
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [count, C, H, W], got shape {list(self.images.shape)}")
        if len(self.labels) != len(self.images):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise DataFormatError("dataset must hold at least one example")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataFormatError(f"labels must be in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)
