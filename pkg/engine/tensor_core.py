"""
Dense tensor helpers shared by partitioning, aggregation and training.

Tensors are plain float64 numpy arrays. Every function here returns a new
array and never writes into its inputs, so a tensor can be shared read-only
between client training tasks.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

DTYPE = np.float64


class TensorError(ValueError):
    """Shape, index or finiteness violation in a tensor operation."""


# ---------- Channel selection ----------
@dataclass(frozen=True)
class ChannelSelection:
    """Ordered channel picks along dim 0 (out) and dim 1 (in).

    An empty `in_indices` means dim 1 is taken whole; 1-D tensors (biases)
    only use `out_indices`.
    """
    out_indices: Tuple[int, ...]
    in_indices: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "out_indices", tuple(int(i) for i in self.out_indices))
        object.__setattr__(self, "in_indices", tuple(int(i) for i in self.in_indices))
        for name, idx in (("out_indices", self.out_indices), ("in_indices", self.in_indices)):
            if len(set(idx)) != len(idx):
                raise TensorError(f"duplicate index in {name}: {list(idx)}")

    @classmethod
    def full(cls, shape: Sequence[int]) -> "ChannelSelection":
        """Selection covering the whole tensor."""
        if len(shape) == 1:
            return cls(tuple(range(shape[0])))
        return cls(tuple(range(shape[0])), tuple(range(shape[1])))

    def for_bias(self) -> "ChannelSelection":
        return ChannelSelection(self.out_indices)


def _resolve(shape: Sequence[int], sel: ChannelSelection) -> Tuple[np.ndarray, np.ndarray]:
    if not sel.out_indices:
        raise TensorError("selection has no output indices")
    out_idx = np.asarray(sel.out_indices, dtype=np.intp)
    if out_idx.min() < 0 or out_idx.max() >= shape[0]:
        raise TensorError(f"out index out of bounds for dim 0 of size {shape[0]}: {list(sel.out_indices)}")
    if len(shape) == 1:
        return out_idx, np.empty(0, dtype=np.intp)
    if sel.in_indices:
        in_idx = np.asarray(sel.in_indices, dtype=np.intp)
        if in_idx.min() < 0 or in_idx.max() >= shape[1]:
            raise TensorError(f"in index out of bounds for dim 1 of size {shape[1]}: {list(sel.in_indices)}")
    else:
        in_idx = np.arange(shape[1], dtype=np.intp)
    return out_idx, in_idx


def _index(t: np.ndarray, out_idx: np.ndarray, in_idx: np.ndarray):
    if t.ndim == 1:
        return (out_idx,)
    return np.ix_(out_idx, in_idx)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise TensorError(f"{what} contains NaN or Inf")
    return t


# ---------- Construction ----------
def zeros(shape: Sequence[int]) -> np.ndarray:
    shape = [int(d) for d in shape]
    if not shape:
        raise TensorError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise TensorError(f"all dimensions must be >= 1, got {shape}")
    return np.zeros(shape, dtype=DTYPE)


def as_tensor(values) -> np.ndarray:
    """Copy `values` into a fresh float64 array and check it is finite."""
    return check_finite(np.array(values, dtype=DTYPE))


def selected_shape(shape: Sequence[int], sel: ChannelSelection) -> List[int]:
    out_idx, in_idx = _resolve(shape, sel)
    if len(shape) == 1:
        return [len(out_idx)]
    return [len(out_idx), len(in_idx), *shape[2:]]


# ---------- Gather / scatter ----------
def gather_channels(t: np.ndarray, sel: ChannelSelection) -> np.ndarray:
    """Slice `t` down to the selected channels, preserving selection order.

    Result shape is [|out|, |in|, trailing...] (or [|out|] for 1-D).
    """
    out_idx, in_idx = _resolve(t.shape, sel)
    return np.array(t[_index(t, out_idx, in_idx)], dtype=DTYPE)


def scatter_add_channels(t: np.ndarray, sel: ChannelSelection, delta: np.ndarray,
                         weight: float = 1.0) -> np.ndarray:
    """Return a copy of `t` with `weight * delta` added at the selected positions."""
    out_idx, in_idx = _resolve(t.shape, sel)
    expected = selected_shape(t.shape, sel)
    if list(delta.shape) != expected:
        raise TensorError(f"delta shape {list(delta.shape)} does not match selection shape {expected}")
    result = np.array(t, dtype=DTYPE)
    result[_index(t, out_idx, in_idx)] += weight * delta
    return check_finite(result, "scatter result")


def add_scaled(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise a + alpha * b."""
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    return check_finite(np.asarray(a, dtype=DTYPE) + alpha * np.asarray(b, dtype=DTYPE), "add_scaled result")
