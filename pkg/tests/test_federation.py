"""
Tests for the federated training loop:
1) size distributions, lr schedule, client counts
2) fixed vs dynamic size assignment
3) block-wise rolling placements and broadcast coverage through run_round
4) single full-size client reduces to centralized SGD
5) small-to-large guard, zero rounds, determinism
6) block rolling with broadcast off reduces to the fixed scheme
7) full-model baseline at a narrow width
"""
import math
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(__file__)))
from engine.neural import Scaler, TrainConfig, dense_arch, init_params, local_train
from etl.synthetic import synthetic_classes
from fl.aggregate import AggregationPolicy
from fl.coverage import tensor_untrained_fraction
from fl.federation import (METRIC_COLUMNS, TRADITIONAL, FederationConfig, FederationError, LrSchedule, Setting,
                           SmallToLargeViolation, assign_sizes, check_small_to_large, init_state,
                           parse_distribution, run, run_round, scheme_from_name, traditional_arch,
                           traditional_distribution, _CLIENT, _MODEL)
from fl.partition import Ratio, SchemeKind, build_submodel_spec

QUARTER = Ratio(2)


def data(seed=0, per_class=30):
    full = synthetic_classes(4, per_class + 10, 16, 4.0, np.random.default_rng(seed))
    n = 4 * per_class
    return full.subset(np.arange(n)), full.subset(np.arange(n, len(full)))


def small_cfg(dist="a1-b1", **kw):
    base = dict(distribution=parse_distribution(dist), num_clients=4, selected_fraction=0.5, rounds=3,
                train=TrainConfig(lr=0.05, batch_size=16, local_epochs=1), split="iid", seed=0)
    base.update(kw)
    return FederationConfig(**base)


ARCH = dense_arch(16, (16, 16), 4)


# ---------- Config pieces ----------
def test_parse_distribution():
    d = parse_distribution("a0-b1-c1-d1-e1")
    assert d.weights == (0, 1, 1, 1, 1)
    assert d.small_to_large and d.min_ratio == Ratio(4)
    c = parse_distribution("c1")
    assert c.weights == (0, 0, 1, 0, 0) and str(c) == "a0-c1"
    assert not parse_distribution("a1-e1").small_to_large
    for bad in ["a1-a2", "f1", "a-1", "a0", "", "b1-"]:
        with pytest.raises(FederationError):
            parse_distribution(bad)


def test_dynamic_sampling_frequency():
    dist = parse_distribution("a1-b1")
    rng = np.random.default_rng(0)
    draws = [dist.sample(rng) for _ in range(100_000)]
    share = sum(r == Ratio(0) for r in draws) / len(draws)
    assert abs(share - 0.5) < 0.01


def test_lr_schedule_and_client_count():
    schedule = LrSchedule(300, 0.25)
    assert schedule.lr_at(0.1, 299) == pytest.approx(0.1)
    assert schedule.lr_at(0.1, 600) == pytest.approx(0.00625)
    assert small_cfg(num_clients=100, selected_fraction=0.1).clients_per_round == 10
    assert small_cfg(num_clients=20, selected_fraction=0.2).clients_per_round == 4
    with pytest.raises(FederationError):
        small_cfg(selected_fraction=0.0)


def test_scheme_names():
    assert scheme_from_name("fedbrb") == (SchemeKind.BLOCK_ROLLING, True)
    assert scheme_from_name("heterofl") == (SchemeKind.FIXED, False)
    with pytest.raises(FederationError):
        scheme_from_name("fedavg")


# ---------- Size assignment ----------
def test_fixed_setting_keeps_client_sizes():
    train, test = data()
    cfg = small_cfg("a1-b1-c1", setting=Setting.FIXED, scheme=SchemeKind.FIXED)
    state = init_state(cfg, ARCH, train, test)
    sizes = {c.client_id: str(c.ratio) for c in state.clients}
    for r in range(4):
        state, row = run_round(state, r)
        assert list(row.ratios) == [sizes[cid] for cid in row.client_ids]


def test_dynamic_setting_draws_fresh_sizes():
    train, test = data()
    cfg = small_cfg("a1-b1-c1")
    state = init_state(cfg, ARCH, train, test)
    assert all(c.ratio is None for c in state.clients)
    ratios = assign_sizes(cfg, state.clients * 50, 0, np.random.default_rng(1))
    assert {str(r) for r in ratios} == {"1", "1/2", "1/4"}


def random_scheme_masks(setting):
    train, test = data()
    cfg = small_cfg("b1", scheme=SchemeKind.RANDOM, setting=setting, num_clients=1, selected_fraction=1.0)
    state = init_state(cfg, ARCH, train, test)
    masks = []
    for r in range(5):
        state, _ = run_round(state, r)
        masks.append(state.mask.tensors["fc2.weight"].primary.copy())
    return masks


def test_random_scheme_resamples_only_in_dynamic_setting():
    fixed = random_scheme_masks(Setting.FIXED)
    assert all(np.array_equal(m, fixed[0]) for m in fixed)
    dynamic = random_scheme_masks(Setting.DYNAMIC)
    assert dynamic[-1].sum() > dynamic[0].sum()


# ---------- Placements and coverage ----------
def test_block_rolling_walks_raster_blocks():
    train, test = data()
    cfg = small_cfg("c1", rounds=20)
    state = init_state(cfg, ARCH, train, test)
    for r in range(20):
        state, _ = run_round(state, r)
        primary = state.mask.tensors["fc2.weight"].primary
        x, y = divmod(r % 16, 4)
        assert primary[4 * x:4 * x + 4, 4 * y:4 * y + 4].all()
        if r < 16:
            assert tensor_untrained_fraction(state.mask, "fc2.weight") == pytest.approx(1 - (r + 1) / 16)


def test_broadcast_touches_whole_layer_in_first_round():
    train, test = data()
    cfg = small_cfg("c1", policy=AggregationPolicy(0.5, True))
    state = init_state(cfg, ARCH, train, test)
    state, row = run_round(state, 0)
    assert tensor_untrained_fraction(state.mask, "fc2.weight", "touched") == 0.0
    assert tensor_untrained_fraction(state.mask, "fc2.weight", "primary") == pytest.approx(15 / 16)
    assert row.untrained_fraction_touched < row.untrained_fraction_primary


# ---------- Centralized equivalence ----------
def test_single_full_client_matches_centralized_sgd():
    train, test = data()
    cfg = small_cfg("a1", scheme=SchemeKind.FIXED, num_clients=1, selected_fraction=1.0, rounds=3)
    state = init_state(cfg, ARCH, train, test)
    for r in range(cfg.rounds):
        state, _ = run_round(state, r)

    params = init_params(ARCH, np.random.default_rng([cfg.seed, _MODEL]))
    for r in range(cfg.rounds):
        rng = np.random.default_rng([cfg.seed, _CLIENT, 0, r])
        train_cfg = replace(cfg.train, lr=cfg.schedule.lr_at(cfg.train.lr, r))
        params = local_train(params, ARCH, train, train_cfg, rng).params
    for k in params:
        assert np.allclose(state.params[k], params[k], atol=1e-10, rtol=0), k


# ---------- Guard, edge cases, determinism ----------
def test_small_to_large_guard():
    with pytest.raises(SmallToLargeViolation):
        check_small_to_large(ARCH, build_submodel_spec(ARCH, SchemeKind.BLOCK_ROLLING, Ratio(0), QUARTER, 0))
    check_small_to_large(ARCH, build_submodel_spec(ARCH, SchemeKind.BLOCK_ROLLING, QUARTER, QUARTER, 0))


def test_zero_rounds_reports_initial_accuracy():
    train, test = data()
    report = run(small_cfg(rounds=0), ARCH, train, test)
    assert report.rows == []
    assert report.final_accuracy == report.initial_accuracy
    assert list(report.to_frame().columns) == METRIC_COLUMNS


def test_eval_every_skips_intermediate_rounds():
    train, test = data()
    frame = run(small_cfg(rounds=3, eval_every=2), ARCH, train, test).to_frame()
    assert frame["round"].tolist() == [1, 2, 3]
    acc = frame["test_accuracy"].tolist()
    assert math.isnan(acc[0]) and not math.isnan(acc[1]) and not math.isnan(acc[2])


@pytest.mark.parametrize("scheme", list(SchemeKind))
def test_runs_are_deterministic(scheme):
    train, test = data()
    cfg = small_cfg("a1-b1-c1", scheme=scheme, policy=AggregationPolicy(0.5, scheme is SchemeKind.BLOCK_ROLLING))
    a = run(cfg, ARCH, train, test).to_frame()
    b = run(cfg, ARCH, train, test).to_frame()
    assert a.equals(b)
    assert (a["untrained_fraction_primary"].diff().dropna() <= 0).all()


# ---------- Scheme plug-compatibility ----------
@pytest.mark.parametrize("ratio,min_ratio", [(Ratio(0), Ratio(0)), (Ratio(1), Ratio(1)), (Ratio(1), QUARTER),
                                             (QUARTER, Ratio(4))])
def test_block_rolling_at_traversal_start_matches_fixed(ratio, min_ratio):
    positions = ratio.denominator ** 2
    fixed = build_submodel_spec(ARCH, SchemeKind.FIXED, ratio, min_ratio, 0)
    for r in (0, positions, 3 * positions):
        rolled = build_submodel_spec(ARCH, SchemeKind.BLOCK_ROLLING, ratio, min_ratio, r)
        assert rolled.layers == fixed.layers


@pytest.mark.parametrize("dist,rounds", [("a1", 3), ("b1", 1)])
def test_block_rolling_without_broadcast_reproduces_fixed_runs(dist, rounds):
    train, test = data()
    policy = AggregationPolicy(0.0, False)
    fixed = run(small_cfg(dist, rounds=rounds, scheme=SchemeKind.FIXED, policy=policy), ARCH, train, test)
    rolled = run(small_cfg(dist, rounds=rounds, scheme=SchemeKind.BLOCK_ROLLING, policy=policy), ARCH, train, test)
    assert fixed.to_frame().equals(rolled.to_frame())
    for name, cov in fixed.mask.tensors.items():
        assert np.array_equal(cov.primary, rolled.mask.tensors[name].primary)


# ---------- Full-model baseline ----------
def test_traditional_arch_is_narrow_and_unscaled():
    small = traditional_arch(ARCH, Ratio(4))
    assert small.param_shapes()["fc2.weight"] == (1, 1)
    assert small.param_shapes()["out.weight"] == (4, 1)
    assert all(layer.ratio == 1.0 for layer in small.layers if isinstance(layer, Scaler))
    assert str(traditional_distribution()) == "a1"
    assert scheme_from_name(TRADITIONAL) == (SchemeKind.FIXED, False)


def test_traditional_run_trains_every_cell():
    train, test = data()
    cfg = small_cfg("a1", scheme=SchemeKind.FIXED, rounds=1)
    report = run(cfg, traditional_arch(ARCH, QUARTER), train, test)
    assert report.rows[0].untrained_fraction_primary == 0.0
    assert set(report.rows[0].ratios) == {"1"}
