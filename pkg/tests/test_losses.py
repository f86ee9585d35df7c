import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from spgnet.losses import (
    LossConfig,
    OHEMConfig,
    ScheduleConfig,
    cross_entropy_ignore,
    multi_stage_loss,
    ohem_select,
    poly_lr,
    stage_loss,
)
from spgnet.selftest import oracle_ohem


def test_poly_lr_values():
    cfg = ScheduleConfig(0.01, 80_000, 0.9)
    assert poly_lr(0, cfg) == 0.01
    assert poly_lr(40_000, cfg) == pytest.approx(0.01 * 0.5 ** 0.9)
    assert poly_lr(40_000, cfg) == pytest.approx(0.0053589, abs=1e-7)
    assert poly_lr(80_000, cfg) == 0.0
    with pytest.raises(ValueError):
        poly_lr(80_001, cfg)
    with pytest.raises(ValueError):
        poly_lr(-1, cfg)


@settings(max_examples=50, deadline=None)
@given(a=st.integers(0, 999), b=st.integers(0, 999))
def test_poly_lr_monotone(a, b):
    cfg = ScheduleConfig(0.02, 999, 0.9)
    lo, hi = sorted((a, b))
    assert poly_lr(hi, cfg) <= poly_lr(lo, cfg)


def test_uniform_logits_cost_log_c():
    logits = torch.zeros(2, 4, 3, 3)
    labels = torch.randint(0, 4, (2, 3, 3))
    _, mean = cross_entropy_ignore(logits, labels)
    assert mean.item() == pytest.approx(math.log(4))


def test_ignored_pixels_contribute_nothing():
    logits = torch.randn(1, 3, 2, 2, requires_grad=True)
    labels = torch.tensor([[[0, 255], [2, 255]]])
    loss_map, mean = cross_entropy_ignore(logits, labels)
    assert loss_map[0, 0, 1] == 0 and loss_map[0, 1, 1] == 0
    expected = F.cross_entropy(logits[0, :, [0, 1], [0, 0]].T, torch.tensor([0, 2]))
    assert mean.item() == pytest.approx(expected.item())
    mean.backward()
    assert torch.all(logits.grad[0, :, :, 1] == 0)


def test_all_ignored_gives_zero_with_gradient():
    logits = torch.randn(1, 3, 2, 2, requires_grad=True)
    _, mean = cross_entropy_ignore(logits, torch.full((1, 2, 2), 255))
    assert mean.item() == 0.0
    mean.backward()
    assert logits.grad is not None


def test_out_of_range_label_rejected():
    with pytest.raises(ValueError, match="label 7"):
        cross_entropy_ignore(torch.zeros(1, 3, 2, 2), torch.tensor([[[0, 7], [1, 2]]]))


def test_ohem_example():
    prob = torch.tensor([0.9, 0.6, 0.3, 0.1])
    keep = ohem_select(prob, torch.ones(4, dtype=torch.bool), 0.7, 1)
    assert keep.tolist() == [False, True, True, True]


def test_ohem_min_kept_overrides_threshold():
    prob = torch.tensor([0.9, 0.8, 0.95, 0.85])
    keep = ohem_select(prob, torch.ones(4, dtype=torch.bool), 0.7, 2)
    assert keep.tolist() == [False, True, False, True]


def test_ohem_ties_break_by_position_and_skip_invalid():
    prob = torch.tensor([0.8, 0.8, 0.8, 0.8])
    valid = torch.tensor([False, True, True, True])
    keep = ohem_select(prob, valid, 0.5, 2)
    assert keep.tolist() == [False, True, True, False]
    assert ohem_select(prob, valid, 0.5, 10).tolist() == [False, True, True, True]


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_ohem_matches_sort_oracle(data):
    n = data.draw(st.integers(1, 40))
    prob = np.array(data.draw(st.lists(st.sampled_from([0.1, 0.25, 0.5, 0.7, 0.9]), min_size=n, max_size=n)))
    valid = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    thr = data.draw(st.sampled_from([0.2, 0.5, 0.7, 1.0]))
    k = data.draw(st.integers(0, 50))
    got = ohem_select(torch.from_numpy(prob), torch.from_numpy(valid), thr, k).numpy()
    assert np.array_equal(got, oracle_ohem(prob, valid, thr, k))
    assert not (got & ~valid).any()
    assert got.sum() >= min(k, valid.sum())


def test_ohem_stage_loss_averages_kept_pixels():
    logits = torch.tensor([[[[4.0, 0.0]], [[0.0, 0.0]]]])  # 1x2x1x2
    labels = torch.tensor([[[0, 0]]])
    cfg = LossConfig(ohem=OHEMConfig(0.7, 1))
    # pixel 0 is easy (p ~ 0.98), pixel 1 is hard (p = 0.5)
    assert stage_loss(logits, labels, cfg).item() == pytest.approx(math.log(2))


def test_stage_loss_upsamples_stride_four_logits():
    logits = torch.zeros(1, 3, 4, 4)
    labels = torch.randint(0, 3, (1, 16, 16))
    assert stage_loss(logits, labels, LossConfig()).item() == pytest.approx(math.log(3))


def test_multi_stage_loss_sums_and_skips():
    labels = torch.randint(0, 4, (1, 8, 8))
    a, b = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
    total, per = multi_stage_loss([a, None, b], labels, LossConfig(stage_weights=[1.0, 3.0, 0.5]))
    la, lb = stage_loss(a, labels, LossConfig()), stage_loss(b, labels, LossConfig())
    assert per[1] is None
    assert total.item() == pytest.approx(la.item() + 0.5 * lb.item())
    with pytest.raises(ValueError):
        multi_stage_loss([a, b], labels, LossConfig(stage_weights=[1.0]))


def test_config_validation():
    with pytest.raises(ValueError):
        OHEMConfig(keep_threshold=0)
    with pytest.raises(ValueError):
        LossConfig(stage_weights=[-1.0])
    with pytest.raises(ValueError):
        ScheduleConfig(power=0)
    assert LossConfig(ohem={"keep_threshold": 0.5, "min_kept": 3}).ohem.min_kept == 3
