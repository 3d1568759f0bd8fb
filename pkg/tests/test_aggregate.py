"""
Tests for server-side aggregation:
1) per-parameter weighted mean with primary and broadcast contributions
2) broadcast target enumeration
3) exclusion and empty rounds
4) randomized equivalence against a per-cell brute-force oracle
5) scaling the deltas scales the increments
"""
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(__file__)))
from engine.neural import dense_arch, init_params
from engine.tensor_core import ChannelSelection
from fl.aggregate import (AggregationError, AggregationPolicy, ClientUpdate, EventKind, aggregate_round,
                          broadcast_targets, compute_delta, tile_targets)
from fl.partition import Ratio, SchemeKind, SubModelSpec, build_submodel_spec, selection_shapes

HALF, QUARTER = Ratio(1), Ratio(2)


def one_layer_update(out, in_, delta, ratio=HALF, cid=0):
    spec = SubModelSpec(ratio, (("fc", ChannelSelection(out, in_)),), 0, SchemeKind.BLOCK_ROLLING)
    return ClientUpdate(spec, {"fc.weight": np.array(delta, dtype=float)}, 1, cid)


def test_compute_delta():
    before = {"w": np.array([[1.0]])}
    assert compute_delta({"w": np.array([[2.0]])}, before)["w"].tolist() == [[1.0]]
    assert not compute_delta(before, before)["w"].any()
    with pytest.raises(AggregationError):
        compute_delta({"v": np.zeros(1)}, before)


def test_primary_and_broadcast_weighted_mean():
    params = {"fc.weight": np.zeros((2, 2))}
    updates = [one_layer_update((0,), (0,), [[1.0]], cid=0), one_layer_update((1,), (1,), [[0.4]], cid=1)]
    result = aggregate_round(params, updates, AggregationPolicy(beta=0.5, broadcast_enabled=True))
    w = result.params["fc.weight"]
    assert w[0, 0] == pytest.approx(0.8, abs=1e-15)  # (1*1.0 + 0.5*0.4) / 1.5
    assert w[1, 1] == pytest.approx(0.6, abs=1e-15)
    assert w[0, 1] == pytest.approx(0.7, abs=1e-15)
    kinds = [e.kind for e in result.events]
    assert kinds.count(EventKind.PRIMARY) == 2 and kinds.count(EventKind.BROADCAST) == 6


def test_same_block_average_leaves_rest_bit_identical():
    rng = np.random.default_rng(1)
    params = {"fc.weight": rng.standard_normal((4, 4))}
    d1, d2 = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    updates = [one_layer_update((2, 3), (0, 1), d1), one_layer_update((2, 3), (0, 1), d2, cid=1)]
    new = aggregate_round(params, updates, AggregationPolicy()).params["fc.weight"]
    old = params["fc.weight"]
    assert np.allclose(new[2:, :2], old[2:, :2] + (d1 + d2) / 2, atol=1e-15, rtol=0)
    untouched = np.ones((4, 4), dtype=bool)
    untouched[2:, :2] = False
    assert np.array_equal(new[untouched], old[untouched])


def test_full_client_is_plain_overlay():
    arch = dense_arch(3, (4, 4), 2)
    rng = np.random.default_rng(2)
    params = init_params(arch, rng)
    spec = build_submodel_spec(arch, SchemeKind.FIXED, Ratio(0), HALF, 0)
    delta = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    new = aggregate_round(params, [ClientUpdate(spec, delta, 10)], AggregationPolicy(0.9, True)).params
    for k in params:
        assert np.allclose(new[k], params[k] + delta[k], atol=1e-15, rtol=0)


def test_broadcast_target_counts():
    shape = (16, 16)
    block = ChannelSelection(range(4, 8), range(8, 12))
    assert len(tile_targets(block, shape)) == 15
    quadrant = ChannelSelection(range(8, 16), range(8, 16))
    targets = tile_targets(quadrant, shape)
    assert {(t.out_indices[0], t.in_indices[0]) for t in targets} == {(0, 0), (0, 8), (8, 0)}
    assert tile_targets(ChannelSelection.full(shape), shape) == []
    spec = SubModelSpec(QUARTER, (("fc", block),), 3, SchemeKind.BLOCK_ROLLING)
    assert broadcast_targets(spec, "fc", shape) == tile_targets(block, shape)


def test_misaligned_selection_rejected_for_broadcast():
    with pytest.raises(AggregationError):
        tile_targets(ChannelSelection((3, 0), (3, 0)), (4, 4))
    with pytest.raises(AggregationError):
        tile_targets(ChannelSelection((1, 2), (0, 1)), (4, 4))


def test_exclusion_and_empty_round():
    params = {"fc.weight": np.arange(4.0).reshape(2, 2)}
    update = one_layer_update((0,), (0,), [[9.0]], ratio=HALF)
    result = aggregate_round(params, [update], AggregationPolicy(exclude_ratios={HALF}))
    assert np.array_equal(result.params["fc.weight"], params["fc.weight"])
    assert result.used_updates == 0 and result.warnings and not result.events
    assert aggregate_round(params, [], AggregationPolicy()).used_updates == 0


def test_policy_and_update_validation():
    with pytest.raises(AggregationError):
        AggregationPolicy(beta=1.0)
    with pytest.raises(AggregationError):
        ClientUpdate(one_layer_update((0,), (0,), [[1.0]]).spec, {}, 0)
    params = {"fc.weight": np.zeros((2, 2))}
    with pytest.raises(AggregationError):
        aggregate_round(params, [one_layer_update((0,), (0,), [[1.0, 2.0]])], AggregationPolicy())


# ---------- Brute-force oracle ----------
def aligned_tiles(sel, shape):
    outs_sel = tuple(sel.out_indices)
    size_o = len(outs_sel)
    outs = [tuple(range(k * size_o, (k + 1) * size_o)) for k in range(shape[0] // size_o)]
    if len(shape) == 1:
        return [ChannelSelection(o) for o in outs if o != outs_sel]
    ins_sel = tuple(sel.in_indices) or tuple(range(shape[1]))
    size_i = len(ins_sel)
    ins = [tuple(range(k * size_i, (k + 1) * size_i)) for k in range(shape[1] // size_i)]
    return [ChannelSelection(o, i) for o in outs for i in ins if (o, i) != (outs_sel, ins_sel)]


def oracle(params, updates, beta, broadcast):
    num = {k: np.zeros_like(v) for k, v in params.items()}
    den = {k: np.zeros_like(v) for k, v in params.items()}
    for u in updates:
        for name, g in params.items():
            sel = u.spec.param_selection(name)
            d = u.delta[name]
            placements = [(sel, 1.0)]
            if broadcast and beta > 0:
                placements += [(t, beta) for t in aligned_tiles(sel, g.shape)]
            for target, w in placements:
                ins = target.in_indices or tuple(range(g.shape[1])) if g.ndim > 1 else ()
                for a, i in enumerate(target.out_indices):
                    if g.ndim == 1:
                        num[name][i] += w * d[a]
                        den[name][i] += w
                        continue
                    for b, j in enumerate(ins):
                        num[name][i, j] += w * d[a, b]
                        den[name][i, j] += w
    return {k: np.where(den[k] > 0, params[k] + num[k] / np.where(den[k] > 0, den[k], 1), params[k])
            for k in params}


def random_instance(rng):
    width = int(rng.choice([4, 8]))
    arch = dense_arch(3, (width, width), 2)
    min_log = int(rng.integers(1, 3 if width == 4 else 4))
    min_ratio = Ratio(min_log)
    params = init_params(arch, rng)
    updates = []
    for cid in range(int(rng.integers(1, 5))):
        ratio = Ratio(int(rng.integers(0, min_log + 1)))
        scheme = SchemeKind.FIXED if rng.random() < 0.3 else SchemeKind.BLOCK_ROLLING
        spec = build_submodel_spec(arch, scheme, ratio, min_ratio, int(rng.integers(0, 64)))
        delta = {name: rng.standard_normal(shape) for name, shape in selection_shapes(arch, spec).items()}
        updates.append(ClientUpdate(spec, delta, int(rng.integers(1, 50)), cid))
    return params, updates


def test_randomized_oracle_equivalence():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        params, updates = random_instance(rng)
        beta = float(rng.choice([0.0, 0.3, 0.5, 0.9]))
        broadcast = bool(rng.random() < 0.7)
        got = aggregate_round(params, updates, AggregationPolicy(beta, broadcast)).params
        want = oracle(params, updates, beta, broadcast)
        for k in params:
            assert np.allclose(got[k], want[k], atol=1e-12, rtol=0), (trial, k)
        if beta == 0.0:
            off = aggregate_round(params, updates, AggregationPolicy(0.0, False)).params
            assert all(np.array_equal(got[k], off[k]) for k in params)


def test_scaling_every_delta_scales_every_increment():
    rng = np.random.default_rng(3)
    for trial in range(100):
        params, updates = random_instance(rng)
        policy = AggregationPolicy(float(rng.choice([0.0, 0.5])), bool(rng.random() < 0.5))
        base = aggregate_round(params, updates, policy).params
        tripled = [ClientUpdate(u.spec, {k: 3.0 * v for k, v in u.delta.items()}, u.sample_count, u.client_id)
                   for u in updates]
        scaled = aggregate_round(params, tripled, policy).params
        for k in params:
            assert np.allclose(scaled[k] - params[k], 3.0 * (base[k] - params[k]), atol=1e-12, rtol=0), (trial, k)
