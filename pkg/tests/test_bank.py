"""Memory bank: initialization, lookups, negative sampling, EMA updates."""

import math

import numpy as np
import pytest

from cpcd.bank import MemoryBank


def test_init_shapes_and_unit_rows():
    bank = MemoryBank(200, 128, seed=0)
    assert bank.rows.shape == (200, 128)
    np.testing.assert_allclose(np.linalg.norm(bank.rows, axis=1), 1.0, atol=1e-9)
    assert bank.initialized.all()


def test_init_deterministic():
    a = MemoryBank(50, 16, seed=9)
    b = MemoryBank(50, 16, seed=9)
    np.testing.assert_array_equal(a.rows, b.rows)
    assert not np.array_equal(a.rows, MemoryBank(50, 16, seed=10).rows)


def test_lookup_returns_detached_copy():
    bank = MemoryBank(4, 8, seed=0)
    row = bank.lookup_positive(2)
    np.testing.assert_array_equal(row, bank.rows[2])
    row[:] = 0.0
    assert np.linalg.norm(bank.rows[2]) > 0.9
    again = bank.lookup_positive(2)
    np.testing.assert_array_equal(again, bank.rows[2])


def test_lookup_out_of_range():
    bank = MemoryBank(4, 8, seed=0)
    with pytest.raises(IndexError):
        bank.lookup_positive(4)
    with pytest.raises(IndexError):
        bank.lookup_positive(-1)


def test_negatives_never_include_anchor():
    bank = MemoryBank(16, 4, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        ids, _ = bank.sample_negatives(5, 3, rng)
        assert 5 not in ids
        assert len(set(ids.tolist())) == 3


def test_exhaustive_negative_draw():
    bank = MemoryBank(6, 4, seed=0)
    ids, rows = bank.sample_negatives(2, 5, np.random.default_rng(1))
    assert sorted(ids.tolist()) == [0, 1, 3, 4, 5]
    np.testing.assert_array_equal(rows, bank.rows[ids])
    with pytest.raises(ValueError):
        bank.sample_negatives(2, 6, np.random.default_rng(1))


def test_negative_marginals_uniform():
    bank = MemoryBank(11, 2, seed=0)
    rng = np.random.default_rng(7)
    counts = np.zeros(11)
    draws = 100_000
    for _ in range(draws // 4):
        ids, _ = bank.sample_negatives(0, 4, rng)
        counts[ids] += 1
    counts = counts[1:]                      # anchor never drawn
    p = 1.0 / 10.0
    expected = draws * p
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.abs(counts - expected).max() < 3 * sigma


def test_update_worked_example():
    bank = MemoryBank(3, 2, seed=0)
    bank.rows[0] = [1.0, 0.0]
    bank.update_epoch({0: np.array([0.0, 1.0])})
    np.testing.assert_allclose(bank.rows[0], [0.70710678, 0.70710678], atol=1e-8)


def test_update_fixed_point():
    bank = MemoryBank(3, 4, seed=1)
    row = bank.rows[1].copy()
    bank.update_epoch({1: row.copy()})
    np.testing.assert_allclose(bank.rows[1], row, atol=1e-12)


def test_update_untouched_rows_unchanged():
    bank = MemoryBank(5, 4, seed=2)
    before = bank.rows.copy()
    bank.update_epoch({0: np.ones(4) / 2.0})
    np.testing.assert_array_equal(bank.rows[1:], before[1:])


def test_constant_target_convergence_halves_angle():
    bank = MemoryBank(2, 8, seed=3)
    target = np.zeros(8)
    target[0] = 1.0
    previous_angle = math.acos(float(np.clip(bank.rows[0] @ target, -1, 1)))
    for _ in range(20):
        bank.update_epoch({0: target.copy()})
        angle = math.acos(float(np.clip(bank.rows[0] @ target, -1, 1)))
        assert angle <= previous_angle / 2 + 1e-9
        previous_angle = angle
    assert previous_angle < 1e-3


def test_update_skips_non_finite_and_reports():
    bank = MemoryBank(3, 2, seed=4)
    before = bank.rows[1].copy()
    skipped = bank.update_epoch({1: np.array([np.nan, 1.0]), 0: np.array([0.0, 1.0])})
    assert skipped == [1]
    np.testing.assert_array_equal(bank.rows[1], before)


def test_norms_after_update():
    bank = MemoryBank(10, 6, seed=5)
    rng = np.random.default_rng(0)
    bank.update_epoch({i: rng.standard_normal(6) for i in range(10)})
    np.testing.assert_allclose(np.linalg.norm(bank.rows, axis=1), 1.0, atol=1e-9)


def test_replay_equality():
    def run():
        bank = MemoryBank(8, 4, seed=6)
        rng = np.random.default_rng(11)
        for _ in range(5):
            bank.update_epoch({i: rng.standard_normal(4) for i in range(0, 8, 2)})
        return bank.rows.copy()

    np.testing.assert_array_equal(run(), run())


def test_no_gradient_flows_into_bank():
    from cpcd import autodiff as ad
    from cpcd.autodiff import Tensor, backward

    bank = MemoryBank(4, 3, seed=7)
    anchor = Tensor(bank.lookup_positive(0), requires_grad=True)
    positive = bank.lookup_positive(1)
    loss = ad.tensor_sum(ad.mul(anchor, positive))
    backward(loss)
    assert anchor.grad is not None
    # bank rows are plain arrays outside the graph: nothing to accumulate into
    assert not hasattr(bank.rows, "grad")
