'''
Gaussian-cluster classification data for quick runs without MNIST on disk.

Class means sit on scaled orthonormal directions, so every pair of means is
exactly `separation` apart; each example adds unit-variance noise.
'''
import logging
import math
from typing import Optional, Tuple

import numpy as np

from etl.dataset import Dataset, DataFormatError

logger = logging.getLogger(__name__)


def class_means(classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """[classes, dim] means with pairwise distance `separation`."""
    if dim < classes:
        raise DataFormatError(f"need dim >= classes for equidistant means, got dim={dim}, classes={classes}")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (separation / math.sqrt(2.0)) * q[:, :classes].T


def synthetic_classes(classes: int, per_class: int, dim: int, separation: float,
                      rng: np.random.Generator,
                      image_shape: Optional[Tuple[int, int, int]] = None) -> Dataset:
    """`classes * per_class` shuffled examples stored as [count, *image_shape].

    image_shape defaults to (1, 1, dim); a given shape must hold exactly dim values.
    """
    if classes < 2:
        raise DataFormatError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise DataFormatError(f"per_class must be >= 1, got {per_class}")
    if separation < 0:
        raise DataFormatError(f"separation must be >= 0, got {separation}")
    shape = tuple(image_shape) if image_shape is not None else (1, 1, dim)
    if len(shape) != 3 or math.prod(shape) != dim:
        raise DataFormatError(f"image_shape {list(shape)} does not hold {dim} values")

    means = class_means(classes, dim, separation, rng)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    points = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    logger.debug("synthetic data: %d classes x %d, dim %d, separation %.2f", classes, per_class, dim, separation)
    return Dataset(points[order].reshape(len(labels), *shape), labels[order], classes)
