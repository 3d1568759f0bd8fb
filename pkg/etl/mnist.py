"""
MNIST IDX loader
- Big-endian IDX: images magic 0x00000803, count, rows, cols, then pixel bytes
                  labels magic 0x00000801, count, then label bytes
- Files may be gzip-compressed (.gz)
- Pixels scaled to [0, 1], then normalized with (x - mean) / std
- Example Usage:
    python -m etl.mnist \
        --images ../data/mnist/train-images-idx3-ubyte.gz \
        --labels ../data/mnist/train-labels-idx1-ubyte.gz
"""

import argparse
import gzip
import logging
import struct
import sys
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd

from etl.dataset import Dataset, DataFormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
MNIST_CLASSES = 10

PathLike = Union[str, Path]


# -------------- Raw IDX ----------------
def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx_images(path: PathLike) -> np.ndarray:
    """Raw uint8 pixels, shape [count, rows, cols]."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    expected = count * rows * cols
    if len(raw) - 16 < expected:
        raise DataFormatError(f"{path}: truncated, expected {expected} pixel bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: PathLike) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if len(raw) - 8 < count:
        raise DataFormatError(f"{path}: truncated, expected {count} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def write_idx_images(path: PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols) + pixels.tobytes())


def write_idx_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


# -------------- Dataset ----------------
def load_mnist_idx(images_path: PathLike, labels_path: PathLike, mean: float = MNIST_MEAN,
                   std: float = MNIST_STD, class_count: int = MNIST_CLASSES) -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise DataFormatError(f"count mismatch: {len(pixels)} images vs {len(labels)} labels")
    if std <= 0:
        raise DataFormatError(f"std must be > 0, got {std}")
    images = (pixels.astype(np.float64) / 255.0 - mean) / std
    logger.info("loaded %d images of %dx%d from %s", len(pixels), pixels.shape[1], pixels.shape[2], images_path)
    return Dataset(images[:, None, :, :], labels.astype(np.int64), class_count)


def standard_paths(directory: PathLike, split: str = "train") -> Tuple[Path, Path]:
    """Locate the standard MNIST file pair in `directory`, preferring uncompressed files."""
    prefix = "train" if split == "train" else "t10k"
    directory = Path(directory)
    found = []
    for kind, idx in (("images", 3), ("labels", 1)):
        base = directory / f"{prefix}-{kind}-idx{idx}-ubyte"
        gz = base.with_name(base.name + ".gz")
        if base.exists():
            found.append(base)
        elif gz.exists():
            found.append(gz)
        else:
            raise FileNotFoundError(f"neither {base} nor {gz} exists")
    return found[0], found[1]


# -------------- CLI ----------------
def parse_args():
    ap = argparse.ArgumentParser(description="Inspect an MNIST IDX image/label pair.")
    ap.add_argument("--images", required=True, help="IDX image file (optionally .gz)")
    ap.add_argument("--labels", required=True, help="IDX label file (optionally .gz)")
    return ap.parse_args()


def main():
    args = parse_args()
    try:
        data = load_mnist_idx(args.images, args.labels)
    except (DataFormatError, FileNotFoundError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        sys.exit(2)
    hist = pd.Series(data.label_histogram(), name="count").rename_axis("label")
    print(f"[OK] {len(data)} examples, input shape {list(data.input_shape)}")
    print(hist.to_string())


if __name__ == "__main__":
    main()
