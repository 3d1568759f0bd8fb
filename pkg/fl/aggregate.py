"""
Server-side fusion of client updates.

Every parameter gets one weighted mean over the contributions that touch it:
a primary overlay (weight 1) where the sub-model was sliced from, and, with
broadcast on, a copy of the same delta (weight beta) at every other
tile-aligned position of the same tile shape. Parameters nobody touched are
returned bit-identical.
"""
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, List, NamedTuple, Sequence, Tuple

import numpy as np

from engine.neural import Params
from engine.tensor_core import ChannelSelection, TensorError, add_scaled, scatter_add_channels, selected_shape
from fl.partition import Ratio, SubModelSpec

logger = logging.getLogger(__name__)


class AggregationError(ValueError):
    """Malformed update or a spec that is not tile-aligned."""


@dataclass(frozen=True)
class ClientUpdate:
    spec: SubModelSpec
    delta: Params  # local-after minus distributed-before, sub-model shapes
    sample_count: int
    client_id: int = -1

    def __post_init__(self):
        if self.sample_count < 1:
            raise AggregationError(f"client {self.client_id}: sample_count must be >= 1")


@dataclass(frozen=True)
class AggregationPolicy:
    beta: float = 0.5
    broadcast_enabled: bool = False
    exclude_ratios: FrozenSet[Ratio] = field(default_factory=frozenset)
    sample_weighted: bool = False

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise AggregationError(f"beta must be in [0, 1), got {self.beta}")
        object.__setattr__(self, "exclude_ratios", frozenset(self.exclude_ratios))

    @property
    def broadcasts(self) -> bool:
        return self.broadcast_enabled and self.beta > 0


class EventKind(Enum):
    PRIMARY = "primary"
    BROADCAST = "broadcast"


class CoverageEvent(NamedTuple):
    param: str
    selection: ChannelSelection
    kind: EventKind


class AggregationResult(NamedTuple):
    params: Params
    events: List[CoverageEvent]
    warnings: List[str]
    used_updates: int


def compute_delta(after: Params, before: Params) -> Params:
    """after - before, per tensor."""
    if after.keys() != before.keys():
        raise AggregationError(f"param names differ: {sorted(after)} vs {sorted(before)}")
    try:
        return {name: add_scaled(after[name], before[name], -1.0) for name in after}
    except TensorError as e:
        raise AggregationError(str(e)) from e


# ---------- Broadcast targets ----------
def _tile_positions(indices: Sequence[int], total: int, what: str) -> Tuple[List[Tuple[int, ...]], int]:
    """All aligned positions of a contiguous run, and which one `indices` is."""
    size = len(indices)
    start = indices[0]
    if list(indices) != list(range(start, start + size)) or start % size or total % size:
        raise AggregationError(f"{what} selection {list(indices)[:8]}... is not a tile-aligned contiguous run")
    positions = [tuple(range(k * size, (k + 1) * size)) for k in range(total // size)]
    return positions, start // size


def tile_targets(sel: ChannelSelection, layer_shape: Sequence[int]) -> List[ChannelSelection]:
    """Every tile-aligned placement of `sel`'s tile shape except `sel` itself."""
    outs, out_pos = _tile_positions(sel.out_indices, layer_shape[0], "out")
    if len(layer_shape) == 1:
        return [ChannelSelection(o) for k, o in enumerate(outs) if k != out_pos]
    in_indices = sel.in_indices or tuple(range(layer_shape[1]))
    ins, in_pos = _tile_positions(in_indices, layer_shape[1], "in")
    return [
        ChannelSelection(outs[a], ins[b])
        for a, b in itertools.product(range(len(outs)), range(len(ins)))
        if (a, b) != (out_pos, in_pos)
    ]


def broadcast_targets(spec: SubModelSpec, layer_id: str, layer_shape: Sequence[int]) -> List[ChannelSelection]:
    """Broadcast placements of one layer's weight tensor for this spec."""
    return tile_targets(spec.selection(layer_id), layer_shape)


# ---------- Aggregation ----------
def aggregate_round(global_params: Params, updates: Sequence[ClientUpdate],
                    policy: AggregationPolicy) -> AggregationResult:
    """new = old + sum(w_c * delta_c) / sum(w_c) over contributions c touching each parameter."""
    kept = [u for u in updates if u.spec.ratio not in policy.exclude_ratios]
    dropped = len(updates) - len(kept)
    if dropped:
        logger.debug("excluded %d updates at ratios %s", dropped, sorted(str(r) for r in policy.exclude_ratios))
    if not kept:
        msg = f"no updates left after exclusion ({len(updates)} received); global model unchanged"
        logger.warning(msg)
        return AggregationResult({k: v.copy() for k, v in global_params.items()}, [], [msg], 0)

    weighted = {name: np.zeros_like(t) for name, t in global_params.items()}
    weights = {name: np.zeros_like(t) for name, t in global_params.items()}
    events: List[CoverageEvent] = []
    for update in kept:
        w = float(update.sample_count) if policy.sample_weighted else 1.0
        for name, g in global_params.items():
            if name not in update.delta:
                raise AggregationError(f"client {update.client_id}: update is missing {name}")
            sel = update.spec.param_selection(name)
            delta = update.delta[name]
            expected = selected_shape(g.shape, sel)
            if list(delta.shape) != expected:
                raise AggregationError(
                    f"client {update.client_id}: {name} delta shape {list(delta.shape)} != selection shape {expected}")
            ones = np.ones_like(delta)
            weighted[name] = scatter_add_channels(weighted[name], sel, delta, w)
            weights[name] = scatter_add_channels(weights[name], sel, ones, w)
            events.append(CoverageEvent(name, sel, EventKind.PRIMARY))
            if policy.broadcasts:
                for target in tile_targets(sel, g.shape):
                    weighted[name] = scatter_add_channels(weighted[name], target, delta, w * policy.beta)
                    weights[name] = scatter_add_channels(weights[name], target, ones, w * policy.beta)
                    events.append(CoverageEvent(name, target, EventKind.BROADCAST))

    new_params: Params = {}
    for name, g in global_params.items():
        touched = weights[name] > 0
        increment = weighted[name] / np.where(touched, weights[name], 1.0)
        new_params[name] = np.where(touched, g + increment, g)
    return AggregationResult(new_params, events, [], len(kept))
