import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from busmtl.losses import bce_loss, ce_loss, dice_loss, loss_breakdown, total_loss

from conftest import central_difference, relative_error


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _square(shape, top, left, size):
    m = np.zeros(shape)
    m[top:top + size, left:left + size] = 1
    return m


# -- closed forms -------------------------------------------------------------


def test_bce_perfect_prediction():
    gt = t(_square((8, 8), 2, 2, 3))
    assert bce_loss(gt, gt).item() <= 1e-6


def test_bce_half_is_ln2():
    gt = t(_square((8, 8), 2, 2, 3))
    assert bce_loss(torch.full((8, 8), 0.5, dtype=torch.float64), gt).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_quarter_on_ones():
    assert bce_loss(torch.full((4, 4), 0.25, dtype=torch.float64), torch.ones(4, 4, dtype=torch.float64)).item() \
        == pytest.approx(-math.log(0.25), abs=1e-12)


def test_dice_perfect_and_empty():
    gt = t(_square((8, 8), 1, 1, 4))
    assert dice_loss(gt, gt).item() == pytest.approx(0.0, abs=1e-12)
    z = torch.zeros(8, 8, dtype=torch.float64)
    assert dice_loss(z, z).item() == 0.0


def test_dice_disjoint_area_eight():
    a = np.zeros((8, 8))
    a[0, :8] = 1
    b = np.zeros((8, 8))
    b[7, :8] = 1
    eps = 1e-6
    assert dice_loss(t(a), t(b)).item() == pytest.approx(1 - eps / (16 + eps), abs=1e-15)


def test_ce_closed_forms():
    assert ce_loss(t([0.0, 1.0, 0.0]), 1).item() <= 1e-6
    assert ce_loss(t([1 / 3] * 3), 2).item() == pytest.approx(math.log(3), abs=1e-12)
    assert ce_loss(t([0.5, 0.25, 0.25]), 1).item() == pytest.approx(math.log(4), abs=1e-12)


def test_total_loss_combinations():
    assert total_loss(1.0, 1.0, 0.6) == pytest.approx(1.0)
    assert total_loss(0.5, 1.0, 0.6) == pytest.approx(0.7)
    assert total_loss(0.3, 0.9, 1.0) == 0.3
    assert total_loss(0.3, 0.9, 0.0) == 0.9


def test_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(4, 4), torch.zeros(4, 5))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(4, 4), torch.zeros(5, 4))


# -- properties -------------------------------------------------------------


prob_maps = st.integers(0, 10**6).map(lambda s: np.random.default_rng(s).random((2, 6, 6)))
binary_maps = st.integers(0, 10**6).map(lambda s: (np.random.default_rng(s).random((2, 6, 6)) > 0.6).astype(float))


@settings(max_examples=100, deadline=None)
@given(prob_maps, binary_maps)
def test_loss_ranges(pred, gt):
    assert 0.0 <= dice_loss(t(pred), t(gt)).item() <= 1.0
    assert bce_loss(t(pred), t(gt)).item() >= 0.0


@settings(max_examples=100, deadline=None)
@given(binary_maps, binary_maps)
def test_dice_symmetric_on_binary(a, b):
    assert dice_loss(t(a), t(b)).item() == pytest.approx(dice_loss(t(b), t(a)).item(), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1), st.floats(0, 1))
def test_total_monotone(seg, ce, bump, lam):
    assert total_loss(seg + bump, ce, lam) >= total_loss(seg, ce, lam) - 1e-12
    assert total_loss(seg, ce + bump, lam) >= total_loss(seg, ce, lam) - 1e-12


def test_batch_reduction_is_mean_of_per_sample():
    rng = np.random.default_rng(0)
    pred, gt = rng.random((4, 8, 8)), (rng.random((4, 8, 8)) > 0.5).astype(float)
    for fn in (bce_loss, dice_loss):
        per = [fn(t(pred[i]), t(gt[i])).item() for i in range(4)]
        assert fn(t(pred), t(gt)).item() == pytest.approx(np.mean(per), abs=1e-12)
    probs = torch.softmax(torch.randn(4, 3, dtype=torch.float64), -1)
    labels = torch.tensor([0, 2, 1, 1])
    per = [ce_loss(probs[i], labels[i]).item() for i in range(4)]
    assert ce_loss(probs, labels).item() == pytest.approx(np.mean(per), abs=1e-12)


def test_breakdown_invariants():
    rng = np.random.default_rng(2)
    pred, gt = t(rng.random((2, 8, 8))), t((rng.random((2, 8, 8)) > 0.5).astype(float))
    probs = torch.softmax(torch.randn(2, 3, dtype=torch.float64), -1)
    total, parts = loss_breakdown(pred, gt, probs, torch.tensor([0, 1]), 0.6)
    assert parts.seg == pytest.approx(parts.bce + parts.dice, abs=1e-12)
    assert parts.total == pytest.approx(0.6 * parts.seg + 0.4 * parts.ce, abs=1e-12)
    assert total.item() == parts.total


# -- gradients --------------------------------------------------------------


@pytest.mark.parametrize("fn", [bce_loss, dice_loss], ids=["bce", "dice"])
def test_mask_loss_gradients(fn):
    rng = np.random.default_rng(7)
    pred = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
    gt = t((rng.random((8, 8)) > 0.5).astype(float))
    fn(pred, gt).backward()
    for i in range(8):
        for j in range(8):
            numeric = central_difference(lambda: fn(pred, gt), pred.data, (i, j), h=1e-7)
            assert relative_error(pred.grad[i, j].item(), numeric) < 1e-4


def test_ce_gradient():
    logits = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 1])
    loss = lambda: ce_loss(torch.softmax(logits, -1), labels)
    loss().backward()
    for i in range(4):
        for k in range(3):
            numeric = central_difference(loss, logits.data, (i, k), h=1e-7)
            assert relative_error(logits.grad[i, k].item(), numeric) < 1e-4
