"""Quick invariant checks runnable from the command line (``spgnet selftest``)."""

from __future__ import annotations

import time
import traceback

import numpy as np
import torch

from spgnet.attention import SPG, SPGConfig, check_bundle
from spgnet.backbone import PoolingStrategy, check_pyramid
from spgnet.evaluate import ConfusionMatrix, EvalStrategy, fuse_multi_scale_flip, predict
from spgnet.losses import ohem_select
from spgnet.model import NetworkPlan, build
from spgnet.profiler import build_meta, profile


def oracle_iou(pred, gt, num_classes, ignore=255):
    """Set-based IoU per class; NaN where the class is absent from both maps."""
    pred, gt = list(np.ravel(pred)), list(np.ravel(gt))
    out = []
    for c in range(num_classes):
        p = {i for i, (a, g) in enumerate(zip(pred, gt)) if a == c and g != ignore}
        g = {i for i, v in enumerate(gt) if v == c}
        union = p | g
        out.append(len(p & g) / len(union) if union else float("nan"))
    return out


def oracle_ohem(prob, valid, threshold, min_kept):
    """Rank all valid pixels by (probability, position) and apply the keep rule."""
    flat = [(float(p), i) for i, (p, v) in enumerate(zip(np.ravel(prob), np.ravel(valid))) if v]
    ranked = sorted(flat)
    below = [i for p, i in flat if p < threshold]
    k = min(min_kept, len(flat))
    chosen = below if len(below) >= k else [i for _, i in ranked[:k]]
    mask = np.zeros(np.size(prob), dtype=bool)
    mask[chosen] = True
    return mask.reshape(np.shape(prob))


def _tiny(depths=(18,), **kw):
    torch.manual_seed(0)
    plan = NetworkPlan.stacked(depths=depths, channels=16, num_classes=4, width_multiplier="1/8", **kw)
    return build(plan).eval()


def check_strides():
    model = _tiny()
    image = torch.randn(1, 3, 65, 97)
    pyramid = model.stages[0].encode(image)
    check_pyramid(pyramid, image.shape[-2:])
    out = model(image)
    assert out.final_prediction.shape[-2:] == image.shape[-2:]


def check_masks():
    x = torch.randn(2, 16, 9, 7)
    for variant in ("sigmoid", "softmax"):
        spg = SPG(SPGConfig(4, 16, variant)).eval()
        check_bundle(spg(x), x, variant)


def check_residual_identity():
    spg = SPG(SPGConfig(4, 16, "sigmoid")).eval()
    x = torch.randn(1, 16, 8, 8)
    with torch.no_grad():
        spg.transform.weight.zero_()
        assert torch.equal(spg(x).next_input, spg.out(x))


def check_ohem():
    rng = np.random.default_rng(1)
    for _ in range(50):
        shape = tuple(rng.integers(1, 20, size=2))
        prob = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=shape)
        valid = rng.random(shape) < 0.8
        thr, k = float(rng.uniform(0.05, 1)), int(rng.integers(0, 50))
        got = ohem_select(torch.from_numpy(prob), torch.from_numpy(valid), thr, k).numpy()
        assert np.array_equal(got, oracle_ohem(prob, valid, thr, k))


def check_miou():
    rng = np.random.default_rng(2)
    for _ in range(50):
        c = int(rng.integers(2, 9))
        shape = tuple(rng.integers(1, 17, size=2))
        gt, pred = rng.integers(0, c, size=shape), rng.integers(0, c, size=shape)
        conf = ConfusionMatrix(c).accumulate(pred, gt)
        np.testing.assert_array_equal(conf.iou(), oracle_iou(pred, gt, c))


def check_fusion_normalisation():
    model = _tiny()
    image = torch.randn(1, 3, 40, 56)
    for strategy in (EvalStrategy("tiled", crop=32), EvalStrategy("gap", scales=[0.75, 1.0], flip=True)):
        p = fuse_multi_scale_flip(model, image, strategy)
        assert float((p.sum(dim=1) - 1).abs().max()) <= 1e-6


def check_ap_degeneracy():
    model = _tiny().double()
    image = torch.randn(1, 3, 64, 64, dtype=torch.float64)
    gap = predict(model, image, EvalStrategy("gap"))
    ap = predict(model, image, EvalStrategy("ap", crop=64))
    assert torch.allclose(ap, gap, rtol=1e-6, atol=0)


def check_gradients():
    spg = SPG(SPGConfig(3, 8, "sigmoid")).double().eval()
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: spg(t).next_input, (x,), eps=1e-6, atol=1e-6, rtol=1e-4)


def check_complexity():
    report = profile(build_meta(NetworkPlan.stacked(depths=[18])), 1024, 2048)
    assert abs(report.params / 11.7e6 - 1) <= 0.05, report.params
    assert abs(report.macs / 107.6e9 - 1) <= 0.05, report.macs


CHECKS = [
    ("stride bookkeeping", check_strides),
    ("SPG mask range / normalisation", check_masks),
    ("zeroed excite path is a residual identity", check_residual_identity),
    ("OHEM matches sort oracle", check_ohem),
    ("mIoU matches set oracle", check_miou),
    ("fused probabilities sum to one", check_fusion_normalisation),
    ("AP degenerates to GAP", check_ap_degeneracy),
    ("SPG finite-difference gradients", check_gradients),
    ("1-stage ResNet-18 complexity", check_complexity),
]


def run(out=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            fn()
            out(f"PASS  {name} ({time.perf_counter() - start:.2f}s)")
        except Exception as err:  # report and keep going
            ok = False
            detail = str(err) or traceback.format_exc(limit=1).strip().splitlines()[-1]
            out(f"FAIL  {name}: {detail}")
    out("selftest " + ("passed" if ok else "FAILED"))
    return ok
