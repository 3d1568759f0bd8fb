"""
Unit tests for the dense tensor helpers:
1) zeros / as_tensor construction and validation
2) gather_channels ordering, including wrapped selections
3) scatter_add_channels weighting and single-cell updates
4) add_scaled
"""
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(__file__)))
from engine.tensor_core import (ChannelSelection, TensorError, add_scaled, as_tensor, gather_channels,
                                scatter_add_channels, selected_shape, zeros)


def grid4():
    return np.array([[10 * i + j for j in range(4)] for i in range(4)], dtype=float)


def test_zeros_shapes():
    assert zeros([2, 2]).tolist() == [[0, 0], [0, 0]]
    assert zeros([1]).tolist() == [0]
    t = zeros([3, 3, 3, 3])
    assert t.size == 81 and not t.any()
    assert t.dtype == np.float64


def test_zeros_rejects_bad_shapes():
    with pytest.raises(TensorError):
        zeros([])
    with pytest.raises(TensorError):
        zeros([2, 0])


def test_as_tensor_rejects_non_finite():
    with pytest.raises(TensorError):
        as_tensor([1.0, np.nan])
    with pytest.raises(TensorError):
        as_tensor([np.inf])


def test_gather_direct_slices():
    t = grid4()
    assert gather_channels(t, ChannelSelection((0, 1), (0, 1))).tolist() == [[0, 1], [10, 11]]
    assert gather_channels(t, ChannelSelection((2, 3), (2, 3))).tolist() == [[22, 23], [32, 33]]


def test_gather_preserves_wrapped_order():
    t = grid4()
    assert gather_channels(t, ChannelSelection((3, 0), (3, 0))).tolist() == [[33, 30], [3, 0]]


def test_gather_returns_copy_and_keeps_trailing_dims():
    t = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    g = gather_channels(t, ChannelSelection((1,), (0, 2)))
    assert g.shape == (1, 2, 2, 2)
    g[:] = -1
    assert (t >= 0).all()


def test_empty_in_indices_means_whole_dim():
    t = grid4()
    assert gather_channels(t, ChannelSelection((1,))).tolist() == [[10, 11, 12, 13]]
    assert selected_shape((4, 4), ChannelSelection((1,))) == [1, 4]


def test_selection_validation():
    with pytest.raises(TensorError):
        ChannelSelection((1, 1))
    with pytest.raises(TensorError):
        gather_channels(grid4(), ChannelSelection((4,), (0,)))
    with pytest.raises(TensorError):
        gather_channels(grid4(), ChannelSelection((), ()))


def test_scatter_full_and_weighted():
    delta = np.array([[1.0, 2.0], [3.0, 4.0]])
    full = ChannelSelection.full((2, 2))
    assert scatter_add_channels(zeros([2, 2]), full, delta).tolist() == [[1, 2], [3, 4]]
    assert scatter_add_channels(zeros([2, 2]), full, delta, 0.5).tolist() == [[0.5, 1], [1.5, 2]]


def test_scatter_single_cell_leaves_rest():
    t = np.ones((4, 4))
    out = scatter_add_channels(t, ChannelSelection((0,), (0,)), np.array([[5.0]]))
    expected = np.ones((4, 4))
    expected[0, 0] = 6
    assert np.array_equal(out, expected)
    assert np.array_equal(t, np.ones((4, 4)))


def test_scatter_shape_mismatch():
    with pytest.raises(TensorError):
        scatter_add_channels(zeros([4, 4]), ChannelSelection((0, 1), (0, 1)), np.ones((1, 2)))


def test_gather_scatter_round_trip_on_zero():
    t = grid4()
    sel = ChannelSelection((3, 1), (2, 0))
    back = scatter_add_channels(zeros([4, 4]), sel, gather_channels(t, sel))
    assert np.array_equal(gather_channels(back, sel), gather_channels(t, sel))
    mask = np.zeros((4, 4), dtype=bool)
    mask[np.ix_([3, 1], [2, 0])] = True
    assert not back[~mask].any()


def test_add_scaled():
    assert add_scaled(np.array([1.0, 1.0]), np.array([2.0, 2.0]), -1).tolist() == [-1, -1]
    assert add_scaled(np.array([0.0, 0.0]), np.array([3.0, 4.0]), 2).tolist() == [6, 8]
    a = np.array([0.1, -2.5])
    assert np.array_equal(add_scaled(a, np.array([7.0, 9.0]), 0.0), a)
    with pytest.raises(TensorError):
        add_scaled(np.zeros(2), np.zeros(3), 1.0)
