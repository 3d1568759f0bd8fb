"""
Federated training loop.

Per round: sample clients without replacement, assign sub-model sizes,
slice each client's sub-model with the configured scheme, train locally,
aggregate the deltas and record coverage. Every random draw comes from a
Generator seeded by (run seed, stream tag, ...), so runs are reproducible and
client work is order-independent.
"""
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from engine.neural import (ModelArch, Params, Scaler, TrainConfig, evaluate, init_params, local_train,
                           shrink_arch)
from etl.dataset import Dataset
from etl.sharding import PartitionPlan, make_plan
from fl.aggregate import AggregationPolicy, ClientUpdate, aggregate_round, compute_delta
from fl.coverage import PRIMARY, TOUCHED, CoverageMask, record, untrained_fraction
from fl.partition import (LETTERS, Ratio, SchemeKind, SubModelSpec, build_submodel_spec, extract_submodel,
                          layer_dims, ratio_from_letter)

logger = logging.getLogger(__name__)

# rng stream tags
_SERVER, _CLIENT, _SIZES, _MODEL, _DATA = 1, 2, 3, 4, 5

# scheme name -> (selection scheme, broadcast on)
SCHEMES: Dict[str, Tuple[SchemeKind, bool]] = {
    "heterofl": (SchemeKind.FIXED, False),
    "fedrolex": (SchemeKind.ROLLING, False),
    "dropout": (SchemeKind.RANDOM, False),
    "fedbrb": (SchemeKind.BLOCK_ROLLING, True),
    "fedbrb_nowb": (SchemeKind.BLOCK_ROLLING, False),
    "tf": (SchemeKind.FIXED, False),
}
# full-model training of a global model as narrow as the smallest size letter
TRADITIONAL = "tf"

METRIC_COLUMNS = ["round", "lr", "train_loss", "test_accuracy",
                  "untrained_fraction_primary", "untrained_fraction_touched"]


class FederationError(ValueError):
    """Invalid federation config or run state."""


class SmallToLargeViolation(FederationError):
    """A distributed sub-model is not strictly smaller than the global model."""


def scheme_from_name(name: str) -> Tuple[SchemeKind, bool]:
    try:
        return SCHEMES[name]
    except KeyError:
        raise FederationError(f"unknown scheme {name!r}; expected one of {', '.join(SCHEMES)}") from None


# ---------- Size distribution ----------
_TOKEN_RE = re.compile(r"^([a-z])(\d+)$")


@dataclass(frozen=True)
class SizeDistribution:
    weights: Tuple[int, ...]  # one per letter a..e

    def __post_init__(self):
        if len(self.weights) != len(LETTERS) or any(w < 0 for w in self.weights):
            raise FederationError(f"need {len(LETTERS)} non-negative weights, got {self.weights}")
        if not any(self.weights):
            raise FederationError("size distribution has no positive weight")

    def weight(self, letter: str) -> int:
        return self.weights[LETTERS.index(letter)]

    @property
    def small_to_large(self) -> bool:
        return self.weights[0] == 0

    def support(self) -> List[Ratio]:
        return [ratio_from_letter(l) for l, w in zip(LETTERS, self.weights) if w > 0]

    @property
    def min_ratio(self) -> Ratio:
        return self.support()[-1]

    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()

    def sample(self, rng: np.random.Generator) -> Ratio:
        return Ratio(int(rng.choice(len(LETTERS), p=self.probabilities())))

    def __str__(self) -> str:
        return "-".join(f"{l}{w}" for l, w in zip(LETTERS, self.weights) if w > 0 or l == "a")


def parse_distribution(s: str) -> SizeDistribution:
    """'a0-b1-c1-d1-e1' -> weights per letter; omitted letters weigh 0."""
    weights = dict.fromkeys(LETTERS, 0)
    seen = set()
    for token in (s or "").strip().split("-"):
        m = _TOKEN_RE.match(token)
        if not m or m.group(1) not in LETTERS:
            raise FederationError(f"malformed size token {token!r} in {s!r}; expected letter a..e plus weight")
        letter = m.group(1)
        if letter in seen:
            raise FederationError(f"duplicate size letter {letter!r} in {s!r}")
        seen.add(letter)
        weights[letter] = int(m.group(2))
    return SizeDistribution(tuple(weights[l] for l in LETTERS))


def traditional_arch(arch: ModelArch, ratio: Ratio) -> ModelArch:
    """Global model for full-model FL at `ratio` width; scalers reset to 1."""
    small = shrink_arch(arch, ratio)
    layers = tuple(Scaler() if isinstance(layer, Scaler) else layer for layer in small.layers)
    return ModelArch(layers, small.input_shape, small.num_classes)


def traditional_distribution() -> SizeDistribution:
    return parse_distribution("a1")


# ---------- Config ----------
class Setting(Enum):
    DYNAMIC = "dynamic"
    FIXED = "fixed"


@dataclass(frozen=True)
class LrSchedule:
    decay_interval: int = 300
    decay_factor: float = 0.25

    def __post_init__(self):
        if self.decay_interval < 1:
            raise FederationError(f"decay_interval must be >= 1, got {self.decay_interval}")
        if not 0 < self.decay_factor <= 1:
            raise FederationError(f"decay_factor must be in (0, 1], got {self.decay_factor}")

    def lr_at(self, base_lr: float, round: int) -> float:
        return base_lr * self.decay_factor ** (round // self.decay_interval)


@dataclass(frozen=True)
class FederationConfig:
    distribution: SizeDistribution
    scheme: SchemeKind = SchemeKind.BLOCK_ROLLING
    policy: AggregationPolicy = field(default_factory=AggregationPolicy)
    setting: Setting = Setting.DYNAMIC
    num_clients: int = 100
    selected_fraction: float = 0.1
    rounds: int = 800
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    split: str = "noniid-2"
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not 0 < self.selected_fraction <= 1:
            raise FederationError(f"selected_fraction must be in (0, 1], got {self.selected_fraction}")
        if self.num_clients < 1:
            raise FederationError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 0:
            raise FederationError(f"rounds must be >= 0, got {self.rounds}")
        if self.eval_every < 1:
            raise FederationError(f"eval_every must be >= 1, got {self.eval_every}")

    @property
    def clients_per_round(self) -> int:
        # rounded first so 0.2 * 20 is 4, not 5
        return math.ceil(round(self.selected_fraction * self.num_clients, 9))


# ---------- State ----------
@dataclass(frozen=True)
class ClientState:
    client_id: int
    shard: Dataset
    ratio: Optional[Ratio] = None  # fixed setting only


@dataclass(frozen=True)
class FederationState:
    cfg: FederationConfig
    arch: ModelArch
    params: Params
    clients: Tuple[ClientState, ...]
    mask: CoverageMask
    min_ratio: Ratio
    testset: Dataset


@dataclass(frozen=True)
class RoundRecord:
    round: int  # 1-based
    lr: float
    train_loss: float
    test_accuracy: float
    untrained_fraction_primary: float
    untrained_fraction_touched: float
    client_ids: Tuple[int, ...] = ()
    ratios: Tuple[str, ...] = ()
    warnings: Tuple[str, ...] = ()

    def metrics(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


@dataclass
class RunReport:
    initial_accuracy: float
    rows: List[RoundRecord]
    mask: CoverageMask
    warnings: List[str] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy if self.rows else self.initial_accuracy

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.metrics() for r in self.rows], columns=METRIC_COLUMNS)


def init_state(cfg: FederationConfig, arch: ModelArch, trainset: Dataset, testset: Dataset,
               plan: Optional[PartitionPlan] = None) -> FederationState:
    """Shard the data, draw fixed-setting sizes and initialise the global model."""
    if plan is None:
        plan = make_plan(trainset, cfg.num_clients, cfg.split, np.random.default_rng([cfg.seed, _DATA]))
    if plan.num_clients != cfg.num_clients:
        raise FederationError(f"plan has {plan.num_clients} clients, config {cfg.num_clients}")
    size_rng = np.random.default_rng([cfg.seed, _SIZES])
    clients = []
    for cid, idx in enumerate(plan.client_indices):
        ratio = cfg.distribution.sample(size_rng) if cfg.setting is Setting.FIXED else None
        if len(idx) == 0:
            logger.warning("client %d has an empty shard and is never selected", cid)
            continue
        clients.append(ClientState(cid, trainset.subset(idx), ratio))
    if not clients:
        raise FederationError("every client shard is empty")
    return FederationState(
        cfg=cfg,
        arch=arch,
        params=init_params(arch, np.random.default_rng([cfg.seed, _MODEL])),
        clients=tuple(clients),
        mask=CoverageMask.for_arch(arch),
        min_ratio=cfg.distribution.min_ratio,
        testset=testset,
    )


def assign_sizes(cfg: FederationConfig, clients: Sequence[ClientState], round: int,
                 rng: np.random.Generator) -> List[Ratio]:
    """Dynamic: a fresh draw per selected client; fixed: the ratio drawn at init."""
    if cfg.setting is Setting.FIXED:
        return [c.ratio for c in clients]
    return [cfg.distribution.sample(rng) for _ in clients]


def check_small_to_large(arch: ModelArch, spec: SubModelSpec) -> None:
    """Every layer must be strictly narrower than its global layer in some partitioned dim."""
    for layer in arch.param_layers():
        if not (layer.partition_out or layer.partition_in):
            continue
        out_ch, in_ch, group = layer_dims(layer)
        sel = spec.selection(layer.name)
        narrower_out = layer.partition_out and len(sel.out_indices) < out_ch
        narrower_in = layer.partition_in and len(sel.in_indices) < in_ch * group
        if not (narrower_out or narrower_in):
            raise SmallToLargeViolation(
                f"round {spec.round}: {layer.name} at ratio {spec.ratio} is not smaller than the global layer")


def run_round(state: FederationState, round: int) -> Tuple[FederationState, RoundRecord]:
    cfg = state.cfg
    server_rng = np.random.default_rng([cfg.seed, _SERVER, round])
    k = min(cfg.clients_per_round, len(state.clients))
    picked = sorted(int(i) for i in server_rng.choice(len(state.clients), size=k, replace=False))
    selected = [state.clients[i] for i in picked]
    ratios = assign_sizes(cfg, selected, round, server_rng)
    lr = cfg.schedule.lr_at(cfg.train.lr, round)
    train_cfg = replace(cfg.train, lr=lr)

    updates, losses = [], []
    for client, ratio in zip(selected, ratios):
        rng = np.random.default_rng([cfg.seed, _CLIENT, client.client_id, round])
        # fixed setting: a random selection is drawn once per client and then reused
        spec_rng = rng if cfg.setting is Setting.DYNAMIC else np.random.default_rng([cfg.seed, _CLIENT, client.client_id])
        spec = build_submodel_spec(state.arch, cfg.scheme, ratio, state.min_ratio, round, spec_rng)
        if cfg.distribution.small_to_large:
            check_small_to_large(state.arch, spec)
        before = extract_submodel(state.params, spec)
        result = local_train(before, shrink_arch(state.arch, ratio), client.shard, train_cfg, rng)
        updates.append(ClientUpdate(spec, compute_delta(result.params, before), len(client.shard), client.client_id))
        losses.append(result.loss)
        logger.debug("round %d client %d ratio %s loss %.4f", round, client.client_id, ratio, result.loss)

    agg = aggregate_round(state.params, updates, cfg.policy)
    mask = record(state.mask, agg.events, round)
    last = round == cfg.rounds - 1
    if (round + 1) % cfg.eval_every == 0 or last:
        accuracy = evaluate(agg.params, state.arch, state.testset)
    else:
        accuracy = float("nan")
    finite = [l for l in losses if not math.isnan(l)]
    row = RoundRecord(
        round=round + 1,
        lr=lr,
        train_loss=float(np.mean(finite)) if finite else float("nan"),
        test_accuracy=accuracy,
        untrained_fraction_primary=untrained_fraction(mask, PRIMARY),
        untrained_fraction_touched=untrained_fraction(mask, TOUCHED),
        client_ids=tuple(c.client_id for c in selected),
        ratios=tuple(str(r) for r in ratios),
        warnings=tuple(agg.warnings),
    )
    for w in agg.warnings:
        logger.warning("round %d: %s", round, w)
    return replace(state, params=agg.params, mask=mask), row


def run(cfg: FederationConfig, arch: ModelArch, trainset: Dataset, testset: Dataset,
        progress: bool = False) -> RunReport:
    """All rounds with step-decayed lr; the report carries the pre-training accuracy separately."""
    state = init_state(cfg, arch, trainset, testset)
    report = RunReport(evaluate(state.params, arch, testset), [], state.mask)
    logger.info("run: %s %s %s seed %d, %d clients, %d rounds",
                cfg.scheme.value, cfg.distribution, cfg.setting.value, cfg.seed, cfg.num_clients, cfg.rounds)
    for r in tqdm(range(cfg.rounds), desc="rounds", disable=not progress, leave=False):
        state, row = run_round(state, r)
        report.rows.append(row)
        report.warnings.extend(f"round {row.round}: {w}" for w in row.warnings)
        if math.isnan(row.test_accuracy):
            continue
        logger.info("round %d/%d lr %.5f loss %.4f acc %.4f untrained %.3f",
                    row.round, cfg.rounds, row.lr, row.train_loss, row.test_accuracy,
                    row.untrained_fraction_primary)
    report.mask = state.mask
    return report
