"""
Parameter coverage tracking.

Two boolean masks per partitionable global tensor:
  primary - gradient-trained at a sliced position at least once
  touched - primary, or reached by a broadcast copy
Masks only ever grow. `first_full_*` hold the 0-based round at which a mask
first saturated.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from engine.neural import ModelArch
from engine.tensor_core import ChannelSelection
from fl.aggregate import CoverageEvent, EventKind
from fl.partition import Ratio, SchemeKind, build_submodel_spec, rolling_sequence

logger = logging.getLogger(__name__)

PRIMARY = "primary"
TOUCHED = "touched"


class CoverageError(ValueError):
    """Event placement outside a tracked tensor, or an unpredictable scheme."""


@dataclass
class TensorCoverage:
    primary: np.ndarray
    touched: np.ndarray
    first_full_primary: Optional[int] = None
    first_full_touched: Optional[int] = None

    def copy(self) -> "TensorCoverage":
        return TensorCoverage(self.primary.copy(), self.touched.copy(),
                              self.first_full_primary, self.first_full_touched)


@dataclass
class CoverageMask:
    tensors: Dict[str, TensorCoverage]
    untracked: List[str] = field(default_factory=list)

    @classmethod
    def for_arch(cls, arch: ModelArch) -> "CoverageMask":
        """Track weights and biases of layers with at least one partitioned dim."""
        partitioned = {layer.name for layer in arch.param_layers() if layer.partition_out or layer.partition_in}
        tensors, untracked = {}, []
        for name, shape in arch.param_shapes().items():
            if name.rsplit(".", 1)[0] in partitioned:
                tensors[name] = TensorCoverage(np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool))
            else:
                untracked.append(name)
        return cls(tensors, untracked)

    @classmethod
    def for_shapes(cls, shapes: Dict[str, tuple]) -> "CoverageMask":
        return cls({name: TensorCoverage(np.zeros(s, dtype=bool), np.zeros(s, dtype=bool))
                    for name, s in shapes.items()})

    def copy(self) -> "CoverageMask":
        return CoverageMask({k: v.copy() for k, v in self.tensors.items()}, list(self.untracked))


def _positions(shape, sel: ChannelSelection):
    out_idx = np.asarray(sel.out_indices, dtype=np.intp)
    if out_idx.size == 0 or out_idx.min() < 0 or out_idx.max() >= shape[0]:
        raise CoverageError(f"placement out of bounds for shape {list(shape)}")
    if len(shape) == 1:
        return (out_idx,)
    in_idx = np.asarray(sel.in_indices, dtype=np.intp) if sel.in_indices else np.arange(shape[1])
    if in_idx.min() < 0 or in_idx.max() >= shape[1]:
        raise CoverageError(f"placement out of bounds for shape {list(shape)}")
    return np.ix_(out_idx, in_idx)


def record(mask: CoverageMask, events: Iterable[CoverageEvent], round: int) -> CoverageMask:
    """Mark event placements; primary events set both masks, broadcast only `touched`."""
    updated = mask.copy()
    for event in events:
        cov = updated.tensors.get(event.param)
        if cov is None:
            if event.param in updated.untracked:
                continue
            raise CoverageError(f"event for unknown tensor {event.param!r}")
        pos = _positions(cov.primary.shape, event.selection)
        cov.touched[pos] = True
        if event.kind is EventKind.PRIMARY:
            cov.primary[pos] = True
    for cov in updated.tensors.values():
        if cov.first_full_primary is None and cov.primary.all():
            cov.first_full_primary = round
        if cov.first_full_touched is None and cov.touched.all():
            cov.first_full_touched = round
    return updated


def _mask_array(cov: TensorCoverage, which: str) -> np.ndarray:
    if which == PRIMARY:
        return cov.primary
    if which == TOUCHED:
        return cov.touched
    raise CoverageError(f"which must be 'primary' or 'touched', got {which!r}")


def untrained_fraction(mask: CoverageMask, which: str = PRIMARY) -> float:
    """Share of tracked cells not yet covered by the chosen mask."""
    total = sum(cov.primary.size for cov in mask.tensors.values())
    if total == 0:
        return 0.0
    covered = sum(int(_mask_array(cov, which).sum()) for cov in mask.tensors.values())
    return (total - covered) / total


def tensor_untrained_fraction(mask: CoverageMask, name: str, which: str = PRIMARY) -> float:
    arr = _mask_array(mask.tensors[name], which)
    return float((arr.size - arr.sum()) / arr.size)


def rounds_to_full(mask: CoverageMask, which: str = PRIMARY) -> Dict[str, Optional[int]]:
    """Per tensor: number of rounds until saturation, or None if it never happened."""
    out: Dict[str, Optional[int]] = {}
    for name, cov in mask.tensors.items():
        first = cov.first_full_primary if which == PRIMARY else cov.first_full_touched
        out[name] = None if first is None else first + 1
    return out


# ---------- Predictions ----------
def diagonal_traversal_rounds(c_in: int, c_out: int) -> int:
    """Rounds a shared-start rolling window needs to sweep a layer's diagonal."""
    return max(c_in, c_out)


def _rolling_union_rounds(c_out: int, c_in: int, ratio: Ratio) -> Optional[int]:
    count_out, count_in = ratio.scale(c_out), ratio.scale(c_in)
    covered = np.zeros((c_out, c_in), dtype=bool)
    period = c_out * c_in // math.gcd(c_out, c_in)
    for r in range(period):
        covered[np.ix_(rolling_sequence(c_out, count_out, r), rolling_sequence(c_in, count_in, r))] = True
        if covered.all():
            return r + 1
    return None


def traversal_rounds(scheme: SchemeKind, ratio: Ratio, channels_out: Optional[int] = None,
                     channels_in: Optional[int] = None) -> Optional[int]:
    """Predicted rounds until a single-size population fully covers a layer; None means never.

    BLOCK_ROLLING at ratio 1/n needs n*n rounds; a shared-start rolling window
    on a square layer never leaves its diagonal band; a fixed window never moves.
    """
    if ratio.denominator == 1:
        return 1
    if scheme is SchemeKind.BLOCK_ROLLING:
        return ratio.denominator ** 2
    if scheme is SchemeKind.FIXED:
        return None
    if scheme is SchemeKind.ROLLING:
        if channels_out is None or channels_in is None:
            raise CoverageError("rolling prediction needs the layer's channel counts")
        if channels_out == channels_in:
            return None
        return _rolling_union_rounds(channels_out, channels_in, ratio)
    raise CoverageError(f"no deterministic traversal for scheme {scheme.value}")


# ---------- Selection-only simulation ----------
def simulate_coverage(arch: ModelArch, scheme: SchemeKind, ratio: Ratio, min_ratio: Ratio,
                      rounds: int, seed: int = 0) -> CoverageMask:
    """Record the primary placements of one client size over `rounds` rounds, no training."""
    mask = CoverageMask.for_arch(arch)
    names = list(arch.param_shapes())
    for r in range(rounds):
        rng = np.random.default_rng([seed, r])
        spec = build_submodel_spec(arch, scheme, ratio, min_ratio, r, rng)
        events = [CoverageEvent(name, spec.param_selection(name), EventKind.PRIMARY) for name in names]
        mask = record(mask, events, r)
        if all(cov.first_full_primary is not None for cov in mask.tensors.values()):
            logger.debug("%s at ratio %s saturated after %d rounds", scheme.value, ratio, r + 1)
            break
    return mask
