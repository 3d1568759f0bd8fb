"""
Sub-model partitioning.

- Ratio: channel keep-fraction, one of 1, 1/2, 1/4, 1/8, 1/16 (letters a..e)
- Block arithmetic: block size from the smallest ratio, 1-based raster indexing
- Selection sequences: fixed, rolling, random, and block-wise rolling
- build_submodel_spec / extract_submodel: per-client, per-round slicing

Block indices are 1-based at this module's API and 0-based inside it.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from engine.neural import Conv, Dense, ModelArch, Params, ParamLayer
from engine.tensor_core import ChannelSelection, gather_channels

logger = logging.getLogger(__name__)

LETTERS = "abcde"


class PartitionError(ValueError):
    """Invalid ratio, grid, block index or divisibility."""


# ---------- Ratio ----------
@dataclass(frozen=True)
class Ratio:
    """value = 2 ** -log2_denominator; compare sizes through `.value`."""
    log2_denominator: int

    def __post_init__(self):
        if not 0 <= self.log2_denominator <= 4:
            raise PartitionError(f"log2_denominator must be in 0..4, got {self.log2_denominator}")

    @property
    def denominator(self) -> int:
        return 2 ** self.log2_denominator

    @property
    def value(self) -> float:
        return 1.0 / self.denominator

    @property
    def letter(self) -> str:
        return LETTERS[self.log2_denominator]

    def scale(self, width: int) -> int:
        """width * value, requiring exact divisibility."""
        if width % self.denominator:
            raise PartitionError(f"width {width} is not divisible by {self.denominator}")
        return width // self.denominator

    def __str__(self) -> str:
        return "1" if self.denominator == 1 else f"1/{self.denominator}"


def ratio_from_letter(letter: str) -> Ratio:
    """a -> 1, b -> 1/2, c -> 1/4, d -> 1/8, e -> 1/16."""
    if not isinstance(letter, str) or len(letter) != 1 or letter not in LETTERS:
        raise PartitionError(f"size letter must be one of a..e, got {letter!r}")
    return Ratio(LETTERS.index(letter))


class SchemeKind(Enum):
    RANDOM = "random"
    FIXED = "fixed"
    ROLLING = "rolling"
    BLOCK_ROLLING = "block_rolling"


# ---------- Blocks ----------
@dataclass(frozen=True)
class BlockGrid:
    block_out: int
    block_in: int
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class BlockPlacement:
    x: int  # 1-based block row
    y: int  # 1-based block column
    out_range: Tuple[int, int]
    in_range: Tuple[int, int]


def block_grid(M: int, N: int, min_ratio: Ratio) -> BlockGrid:
    """|B_out| = M * min_ratio, |B_in| = N * min_ratio."""
    if M % min_ratio.denominator or N % min_ratio.denominator:
        raise PartitionError(f"{M}x{N} tensor is not divisible into blocks at ratio {min_ratio}")
    block_out, block_in = M // min_ratio.denominator, N // min_ratio.denominator
    return BlockGrid(block_out, block_in, M // block_out, N // block_in)


def block_placement(i: int, grid: BlockGrid) -> BlockPlacement:
    """x = ceil(i / cols), y = (i - 1) % cols + 1."""
    if not 1 <= i <= grid.count:
        raise PartitionError(f"block index {i} out of range 1..{grid.count}")
    x = (i - 1) // grid.cols + 1
    y = (i - 1) % grid.cols + 1
    return BlockPlacement(
        x, y,
        ((x - 1) * grid.block_out, x * grid.block_out),
        ((y - 1) * grid.block_in, y * grid.block_in),
    )


def block_index(placement: BlockPlacement, grid: BlockGrid) -> int:
    return (placement.x - 1) * grid.cols + placement.y


# ---------- Selection sequences ----------
def _check_count(total: int, count: int) -> None:
    if count < 1 or count > total:
        raise PartitionError(f"cannot select {count} of {total} channels")


def fixed_sequence(total: int, count: int) -> List[int]:
    _check_count(total, count)
    return list(range(count))


def rolling_sequence(total: int, count: int, round: int) -> List[int]:
    """Contiguous window starting at round mod total, wrapping around."""
    _check_count(total, count)
    start = round % total
    return [(start + j) % total for j in range(count)]


def random_sequence(total: int, count: int, rng: np.random.Generator) -> List[int]:
    _check_count(total, count)
    return sorted(int(i) for i in rng.choice(total, size=count, replace=False))


def tile_size(client_ratio: Ratio, min_ratio: Ratio) -> int:
    """Blocks per tile side for a client: client_ratio / min_ratio."""
    if client_ratio.value < min_ratio.value:
        raise PartitionError(f"client ratio {client_ratio} is smaller than the block ratio {min_ratio}")
    return min_ratio.denominator // client_ratio.denominator


def brb_block_index(round: int, grid: BlockGrid, client_ratio: Ratio, min_ratio: Ratio) -> BlockPlacement:
    """Starting block of the client's tile this round.

    Tiles of t x t blocks roll over tile-aligned positions in raster order; a
    single-block dim (unpartitioned) keeps a tile extent of 1 along it.
    """
    t = tile_size(client_ratio, min_ratio)
    t_rows = t if grid.rows > 1 else 1
    t_cols = t if grid.cols > 1 else 1
    if grid.rows % t_rows or grid.cols % t_cols:
        raise PartitionError(f"{grid.rows}x{grid.cols} grid cannot hold {t}x{t} tiles")
    tile_rows, tile_cols = grid.rows // t_rows, grid.cols // t_cols
    pos = round % (tile_rows * tile_cols)
    tx, ty = divmod(pos, tile_cols)
    x, y = tx * t_rows + 1, ty * t_cols + 1
    return block_placement((x - 1) * grid.cols + y, grid)


def _block_rolling_digits(round: int, client_ratio: Ratio, min_ratio: Ratio) -> Tuple[int, int]:
    """(row digit, column digit) of the round's tile on the square reference grid."""
    n = min_ratio.denominator
    t = tile_size(client_ratio, min_ratio)
    start = brb_block_index(round, block_grid(n, n, min_ratio), client_ratio, min_ratio)
    return (start.x - 1) // t, (start.y - 1) // t


# ---------- Sub-model specs ----------
@dataclass(frozen=True)
class SubModelSpec:
    ratio: Ratio
    layers: Tuple[Tuple[str, ChannelSelection], ...]
    round: int
    scheme: SchemeKind

    def selection(self, layer_id: str) -> ChannelSelection:
        for name, sel in self.layers:
            if name == layer_id:
                return sel
        raise PartitionError(f"spec has no layer {layer_id!r}")

    def param_selection(self, param_name: str) -> ChannelSelection:
        layer_id, kind = param_name.rsplit(".", 1)
        sel = self.selection(layer_id)
        return sel.for_bias() if kind == "bias" else sel


def layer_dims(layer: ParamLayer) -> Tuple[int, int, int]:
    """(out channels, in channels, features per in channel)."""
    if isinstance(layer, Conv):
        return layer.out_channels, layer.in_channels, 1
    return layer.out_features, layer.in_features // layer.in_group, layer.in_group


def check_partitionable(arch: ModelArch, ratio: Ratio) -> None:
    for layer in arch.param_layers():
        out_ch, in_ch, _ = layer_dims(layer)
        if layer.partition_out and out_ch % ratio.denominator:
            raise PartitionError(f"{layer.name}: {out_ch} output channels not divisible by {ratio.denominator}")
        if layer.partition_in and in_ch % ratio.denominator:
            raise PartitionError(f"{layer.name}: {in_ch} input channels not divisible by {ratio.denominator}")


def build_submodel_spec(arch: ModelArch, scheme: SchemeKind, ratio: Ratio, min_ratio: Ratio,
                        round: int, rng: Optional[np.random.Generator] = None) -> SubModelSpec:
    """Per-layer channel selections for one client in one round.

    Each layer's input channels are the previous layer's output channels.
    For BLOCK_ROLLING the output tile digit alternates between the column and
    row digit of the round's raster position along the layer chain, so the
    first hidden-to-hidden layer follows brb_block_index exactly and every
    square layer visits each tile once per traversal.
    """
    check_partitionable(arch, min_ratio)
    check_partitionable(arch, ratio)
    if scheme is SchemeKind.RANDOM and rng is None:
        raise PartitionError("random scheme needs an rng")
    digits = _block_rolling_digits(round, ratio, min_ratio) if scheme is SchemeKind.BLOCK_ROLLING else (0, 0)

    layers: List[Tuple[str, ChannelSelection]] = []
    prev_out: Optional[List[int]] = None
    chain = 0
    for layer in arch.param_layers():
        out_ch, in_ch, group = layer_dims(layer)
        if layer.partition_in and prev_out is not None:
            in_channels = prev_out
        else:
            if prev_out is not None and len(prev_out) != in_ch:
                raise PartitionError(f"{layer.name}: unpartitioned input fed by a partitioned layer")
            in_channels = list(range(in_ch))

        if not layer.partition_out:
            out_channels = list(range(out_ch))
        else:
            count = ratio.scale(out_ch)
            if scheme is SchemeKind.FIXED:
                out_channels = fixed_sequence(out_ch, count)
            elif scheme is SchemeKind.ROLLING:
                out_channels = rolling_sequence(out_ch, count, round)
            elif scheme is SchemeKind.RANDOM:
                out_channels = random_sequence(out_ch, count, rng)
            else:
                digit = digits[1] if chain % 2 == 0 else digits[0]
                out_channels = list(range(digit * count, (digit + 1) * count))
            chain += 1

        in_features = [c * group + s for c in in_channels for s in range(group)]
        layers.append((layer.name, ChannelSelection(tuple(out_channels), tuple(in_features))))
        prev_out = out_channels
    return SubModelSpec(ratio, tuple(layers), round, scheme)


def extract_submodel(global_params: Params, spec: SubModelSpec) -> Params:
    """Gather every global tensor down to the spec's selections."""
    spec_layers = {name for name, _ in spec.layers}
    param_layers = {name.rsplit(".", 1)[0] for name in global_params}
    if spec_layers != param_layers:
        raise PartitionError(f"spec layers {sorted(spec_layers)} do not match params {sorted(param_layers)}")
    return {name: gather_channels(t, spec.param_selection(name)) for name, t in global_params.items()}


def selection_shapes(arch: ModelArch, spec: SubModelSpec) -> Dict[str, Tuple[int, ...]]:
    """Expected sub-model tensor shapes, for checking against shrink_arch."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for name, shape in arch.param_shapes().items():
        sel = spec.param_selection(name)
        if len(shape) == 1:
            shapes[name] = (len(sel.out_indices),)
        else:
            shapes[name] = (len(sel.out_indices), len(sel.in_indices), *shape[2:])
    return shapes
