"""
Client sharding
- iid: seeded permutation split into near-equal shards
- noniid-L: every client holds exactly L labels; each label's examples are
  split evenly among the clients holding it
- Example Usage:
    python -m etl.sharding --images ../data/mnist/train-images-idx3-ubyte.gz \
        --labels ../data/mnist/train-labels-idx1-ubyte.gz --clients 20 --split noniid-2
"""
import argparse
import logging
import re
import sys
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from etl.dataset import Dataset, DataFormatError

logger = logging.getLogger(__name__)

IID = "iid"
_SPLIT_RE = re.compile(r"^noniid-(\d+)$")


class ShardingError(ValueError):
    """Impossible client/label split request."""


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: Tuple[np.ndarray, ...]
    allowed_labels: Tuple[Tuple[int, ...], ...]
    labels_per_client: Optional[int]  # None for iid

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def shard_sizes(self) -> List[int]:
        return [len(ix) for ix in self.client_indices]


def parse_split(split: str) -> Optional[int]:
    """'iid' -> None, 'noniid-L' -> L."""
    if split == IID:
        return None
    m = _SPLIT_RE.match(split or "")
    if not m or int(m.group(1)) < 1:
        raise ShardingError(f"split must be 'iid' or 'noniid-<L>' with L >= 1, got {split!r}")
    return int(m.group(1))


def partition_iid(dataset: Dataset, num_clients: int, rng: np.random.Generator) -> PartitionPlan:
    if not 1 <= num_clients <= len(dataset):
        raise ShardingError(f"num_clients must be in 1..{len(dataset)}, got {num_clients}")
    shards = np.array_split(rng.permutation(len(dataset)), num_clients)
    everything = tuple(range(dataset.class_count))
    return PartitionPlan(
        tuple(np.sort(s).astype(np.int64) for s in shards),
        tuple(everything for _ in range(num_clients)),
        None,
    )


def partition_noniid(dataset: Dataset, num_clients: int, labels_per_client: int,
                     rng: np.random.Generator) -> PartitionPlan:
    """Round-robin label assignment over a seeded label permutation."""
    K, L = dataset.class_count, labels_per_client
    if not 1 <= L <= K:
        raise ShardingError(f"labels_per_client must be in 1..{K}, got {L}")
    if num_clients < 1:
        raise ShardingError(f"num_clients must be >= 1, got {num_clients}")

    perm = rng.permutation(K)
    allowed = [tuple(sorted(int(perm[(i * L + j) % K]) for j in range(L))) for i in range(num_clients)]
    shards: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    for label in range(K):
        holders = [i for i in range(num_clients) if label in allowed[i]]
        pool = rng.permutation(np.flatnonzero(dataset.labels == label))
        if not holders:
            logger.warning("label %d has no holder with %d clients x %d labels", label, num_clients, L)
            continue
        if len(pool) < len(holders):
            logger.warning("label %d has %d examples for %d holders", label, len(pool), len(holders))
        for holder, chunk in zip(holders, np.array_split(pool, len(holders))):
            shards[holder].append(chunk)

    client_indices = tuple(
        np.sort(np.concatenate(parts)).astype(np.int64) if parts else np.empty(0, dtype=np.int64)
        for parts in shards
    )
    return PartitionPlan(client_indices, tuple(allowed), L)


def make_plan(dataset: Dataset, num_clients: int, split: str, rng: np.random.Generator) -> PartitionPlan:
    L = parse_split(split)
    if L is None:
        return partition_iid(dataset, num_clients, rng)
    return partition_noniid(dataset, num_clients, L, rng)


def subset_dataset(dataset: Dataset, size: Optional[int], rng: np.random.Generator) -> Dataset:
    """Seeded shuffle, then the first `size` examples; None keeps everything."""
    if size is None:
        return dataset
    if size < 1:
        raise ShardingError(f"subset size must be >= 1, got {size}")
    if size >= len(dataset):
        if size > len(dataset):
            logger.warning("subset size %d exceeds dataset size %d; using all", size, len(dataset))
        return dataset
    return dataset.subset(rng.permutation(len(dataset))[:size])


def dataset_summary(dataset: Dataset, plan: PartitionPlan) -> pd.DataFrame:
    """One row per client: shard size and per-label counts."""
    rows = []
    for client, idx in enumerate(plan.client_indices):
        hist = np.bincount(dataset.labels[idx], minlength=dataset.class_count)
        row = {"client": client, "examples": len(idx)}
        row.update({f"label_{k}": int(c) for k, c in enumerate(hist)})
        rows.append(row)
    return pd.DataFrame(rows).set_index("client")


# -------------- CLI ----------------
def parse_args():
    ap = argparse.ArgumentParser(description="Show the per-client label histogram of a split.")
    ap.add_argument("--images", required=True)
    ap.add_argument("--labels", required=True)
    ap.add_argument("--clients", type=int, default=20)
    ap.add_argument("--split", default="noniid-2", help="iid | noniid-<L>")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--subset", type=int, default=None)
    return ap.parse_args()


def main():
    from etl.mnist import load_mnist_idx

    args = parse_args()
    rng = np.random.default_rng(args.seed)
    try:
        data = subset_dataset(load_mnist_idx(args.images, args.labels), args.subset, rng)
        plan = make_plan(data, args.clients, args.split, rng)
    except (DataFormatError, ShardingError, FileNotFoundError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        sys.exit(2)
    print(f"[OK] {plan.num_clients} clients, split {args.split}")
    print(dataset_summary(data, plan).to_string())


if __name__ == "__main__":
    main()
