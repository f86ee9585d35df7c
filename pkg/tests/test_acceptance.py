"""Acceptance gate: one test per criterion, summarised as PASS/FAIL lines at the end of the run."""

import math
import time

import numpy as np
import pytest
import torch
from torch.func import functional_call

from spgnet.attention import SPG, SPGConfig, check_bundle
from spgnet.backbone import check_pyramid
from spgnet.cli import dispatch
from spgnet.config import load_config
from spgnet.datapipe import open_dataset, render_synthetic
from spgnet.decoder import UpsampleModule
from spgnet.engine import load_checkpoint, save_checkpoint, train
from spgnet.evaluate import ConfusionMatrix, EvalStrategy, evaluate_dataset, fuse_multi_scale_flip, predict, tiles
from spgnet.losses import LossConfig, OHEMConfig, multi_stage_loss, ohem_select
from spgnet.model import NetworkPlan
from spgnet.profiler import build_meta, profile
from spgnet.selftest import oracle_iou, oracle_ohem
from spgnet.visualize import AttentionQuery, attention_map, top_channel_indices

from conftest import CONFIGS, tiny_model

# (label, stacked-plan keywords, params in millions, GFLOPs as multiply-accumulates)
COMPLEXITY_ROWS = [
    ("1-stage R18", dict(depths=[18]), 11.7, 107.6),
    ("2-stage R18", dict(depths=[18, 18]), 23.9, 218.0),
    ("3-stage R18", dict(depths=[18, 18, 18]), 36.2, 328.5),
    ("2-stage R50 D256", dict(depths=[50, 50], channels=256), 59.8, 654.8),
    ("2-stage R50 D128", dict(depths=[50, 50]), 55.6, 467.6),
    ("2-stage R101 D128", dict(depths=[101, 101]), 93.5, 785.3),
    ("2-stage R101 D256", dict(depths=[101, 101], channels=256), 97.8, 972.4),
    ("upsample module, no pooling", dict(depths=[18], global_context=False), 11.6, 107.5),
    ("FPN-style decoder", dict(depths=[18], decoder_style="fpn"), 11.5, 118.6),
]
TOLERANCE = 0.05

# Desk-scale learning check.  Reference run (seed 0, this code, CPU, 1 thread):
# 1-stage 98.94%, 2-stage SPG(sigmoid) 98.77% training pixel accuracy.
MIN_ONE_STAGE_ACCURACY = 0.90
MAX_TWO_STAGE_SHORTFALL = 0.02


def _macs(plan, h=1024, w=2048):
    report = profile(build_meta(plan), h, w)
    return report.params / 1e6, report.macs / 1e9


@pytest.mark.criterion(1, "complexity regression against reference parameter and FLOP counts")
def test_complexity_regression():
    start = time.perf_counter()
    failures = []
    for label, kw, params, gflops in COMPLEXITY_ROWS:
        p, f = _macs(NetworkPlan.stacked(**kw))
        if abs(p / params - 1) > TOLERANCE or abs(f / gflops - 1) > TOLERANCE:
            failures.append(f"{label}: {p:.2f}M/{f:.1f}B vs {params}M/{gflops}B")
    assert not failures, failures

    _, with_spg = _macs(NetworkPlan.stacked(depths=[18, 18]))
    _, without = _macs(NetworkPlan.stacked(depths=[18, 18], link="plain"))
    assert with_spg / without - 1 <= 0.015
    assert abs(without / 215.5 - 1) <= TOLERANCE

    strategy = EvalStrategy("tiled", crop=769, overlap_fraction=1 / 3)
    assert len(tiles(1024, 2048, strategy)) == 8
    p, tile = _macs(NetworkPlan.stacked(depths=[18]), 769, 769)
    assert abs(p / 11.7 - 1) <= TOLERANCE
    assert abs(tile / 30.6 - 1) <= TOLERANCE
    assert time.perf_counter() - start < 60


def _relative_gradcheck(fn, inputs):
    """Max relative deviation between analytic and central-difference Jacobians."""
    analytic = torch.autograd.functional.jacobian(fn, tuple(inputs))
    eps = 1e-6
    worst = 0.0
    for i, x in enumerate(inputs):
        flat = x.detach().reshape(-1)
        for j in range(flat.numel()):
            plus = [t.detach().clone() for t in inputs]
            minus = [t.detach().clone() for t in inputs]
            plus[i].view(-1)[j] += eps
            minus[i].view(-1)[j] -= eps
            numeric = (fn(*plus) - fn(*minus)) / (2 * eps)
            a = analytic[i].reshape(numeric.numel(), -1)[:, j]
            scale = max(float(numeric.abs().max()), float(a.abs().max()), 1e-3)
            worst = max(worst, float((a - numeric.reshape(-1)).abs().max()) / scale)
    return worst


def _randomize_norms(module):
    # default BN (zero bias, unit statistics) maps all-zero inputs exactly onto the
    # ReLU kink; trained-like statistics keep the check away from it
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.uniform_(0.5, 1.5)
                m.bias.uniform_(-0.5, 0.5)
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 2.0)
    return module


def _with_params(module, make_out, *data):
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().clone() for _, p in module.named_parameters()]

    def fn(*tensors):
        k = len(data)
        state = dict(zip(names, tensors[k:]))
        return make_out(lambda *a: functional_call(module, state, a), *tensors[:k])

    return fn, list(data) + params


@pytest.mark.criterion(2, "finite-difference gradient suite in double precision")
def test_gradient_suite():
    start = time.perf_counter()
    torch.manual_seed(0)
    results = {}
    for variant in ("sum", "softmax", "sigmoid"):
        spg = _randomize_norms(SPG(SPGConfig(4, 8, variant)).double().eval())
        x = torch.randn(1, 8, 5, 6, dtype=torch.float64)
        fn, inputs = _with_params(spg, lambda call, t: call(t).next_input.sum(dim=(2, 3))
                                  + call(t).logits.mean(), x)
        results[f"SPG {variant}"] = _relative_gradcheck(fn, inputs)

    up = _randomize_norms(UpsampleModule(4, 8).double().eval())
    enc = torch.randn(1, 4, 6, 7, dtype=torch.float64)
    prev = torch.randn(1, 8, 3, 4, dtype=torch.float64)
    fn, inputs = _with_params(up, lambda call, e, p: call(e, p).mean(dim=(2, 3)), enc, prev)
    results["upsample module"] = _relative_gradcheck(fn, inputs)

    labels = torch.randint(0, 4, (2, 16, 16))
    labels[0, :3] = 255
    for name, cfg in (("multi-stage loss", LossConfig(stage_weights=[0.5, 2.0, 1.0])),
                      ("multi-stage loss + OHEM", LossConfig(ohem=OHEMConfig(0.5, 64)))):
        a = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        b = torch.randn(2, 4, 16, 16, dtype=torch.float64)
        results[name] = _relative_gradcheck(lambda s, t: multi_stage_loss([s, None, t], labels, cfg)[0].reshape(1),
                                            [a, b])
    bad = {k: v for k, v in results.items() if not v < 1e-4}
    assert not bad, bad
    assert time.perf_counter() - start < 120


@pytest.mark.criterion(3, "mIoU and OHEM match brute-force oracles on 200 instances each")
def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        c = int(rng.integers(2, 9))
        shape = tuple(int(v) for v in rng.integers(1, 65, size=2))
        gt = rng.integers(0, c, size=shape)
        gt[rng.random(shape) < 0.05] = 255
        # skew predictions towards the truth so IoUs are spread over (0, 1)
        pred = np.where(rng.random(shape) < 0.6, np.where(gt == 255, 0, gt), rng.integers(0, c, size=shape))
        conf = ConfusionMatrix(c).accumulate(pred, gt)
        expected = oracle_iou(pred, gt, c)
        np.testing.assert_array_equal(conf.iou(), expected)
        present = [v for v in expected if not math.isnan(v)]
        assert conf.miou()[0] == math.fsum(present) / len(present)

    for _ in range(200):
        shape = tuple(int(v) for v in rng.integers(1, 33, size=2))
        prob = rng.choice([0.05, 0.2, 0.4, 0.6, 0.7, 0.8, 0.95], size=shape)
        if rng.random() < 0.5:
            prob = rng.random(shape)
        valid = rng.random(shape) < rng.uniform(0.3, 1)
        thr, k = float(rng.uniform(0.05, 1)), int(rng.integers(0, shape[0] * shape[1] + 5))
        got = ohem_select(torch.from_numpy(prob), torch.from_numpy(valid), thr, k).numpy()
        assert np.array_equal(got, oracle_ohem(prob, valid, thr, k))


@pytest.mark.criterion(4, "architectural invariants")
def test_architectural_invariants():
    torch.manual_seed(0)
    x = torch.randn(2, 16, 9, 7)
    for variant in ("sum", "softmax", "sigmoid"):
        spg = SPG(SPGConfig(4, 16, variant)).eval()
        check_bundle(spg(x), x, variant, atol=1e-6)

    for depths in ((18,), (18, 18), (18, 50)):
        model = tiny_model(depths)
        for size in ((64, 64), (65, 97), (33, 47)):
            image = torch.randn(1, 3, *size)
            check_pyramid(model.stages[0].encode(image), size)
            with torch.no_grad():
                out = model(image)
            assert out.final_prediction.shape[-2:] == size

    model = tiny_model((18, 18))
    image = torch.randn(1, 3, 56, 72)
    for strategy in (EvalStrategy("tiled", crop=40), EvalStrategy("tiled", crop=33, scales=[0.75, 1.25], flip=True),
                     EvalStrategy("gap", scales=[0.5, 1.0, 1.75], flip=True), EvalStrategy("ap", crop=48)):
        p = fuse_multi_scale_flip(model, image, strategy)
        assert float((p.sum(dim=1) - 1).abs().max()) <= 1e-6

    dmodel = tiny_model((18, 18)).double()
    dimage = torch.randn(1, 3, 64, 96, dtype=torch.float64)
    gap = predict(dmodel, dimage, EvalStrategy("gap"))
    ap = predict(dmodel, dimage, EvalStrategy("ap", crop=96))
    assert float(((ap - gap).abs() / gap.abs()).max()) <= 1e-6

    for variant in ("softmax", "sigmoid"):
        spg = SPG(SPGConfig(4, 16, variant)).eval()
        with torch.no_grad():
            spg.transform.weight.zero_()
            spg.mask.weight.zero_()
            spg.mask.bias.zero_()
            assert torch.equal(spg(x).next_input, spg.out(x))


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for name in ("desk_one_stage", "desk_two_stage"):
        cfg = load_config(CONFIGS / f"{name}.yaml")
        data = open_dataset(cfg.paths["data_uri"])
        start = time.perf_counter()
        result = train(cfg.network, data, cfg.train, root / name)
        report = evaluate_dataset(result.model, data, EvalStrategy("gap"))
        runs[name] = dict(cfg=cfg, data=data, result=result, report=report,
                          seconds=time.perf_counter() - start, out=root / name)
    return runs


@pytest.mark.criterion(5, "desk-scale learning check on synthetic shapes")
def test_desk_scale_learning(desk_runs):
    one, two = desk_runs["desk_one_stage"], desk_runs["desk_two_stage"]
    for run in (one, two):
        cfg = run["cfg"]
        assert cfg.paths["data_uri"] == "synth://0/64/4/64"
        assert cfg.train.max_iter == 2000 and cfg.train.batch_size == 8
        assert cfg.network.channels == 16
        assert all(s.encoder.depth == 18 and s.encoder.width_multiplier == 0.125 for s in cfg.network.stages)
    assert len(two["cfg"].network.stages) == 2 and two["cfg"].network.stages[0].spg.variant == "sigmoid"
    acc1, acc2 = one["report"]["pixel_accuracy"], two["report"]["pixel_accuracy"]
    print(f"\n1-stage accuracy {acc1:.4f} ({one['seconds']:.0f}s), 2-stage {acc2:.4f} ({two['seconds']:.0f}s)")
    assert acc1 >= MIN_ONE_STAGE_ACCURACY
    assert acc2 >= acc1 - MAX_TWO_STAGE_SHORTFALL
    assert one["seconds"] + two["seconds"] < 15 * 60


@pytest.mark.criterion(6, "seeded training repeats exactly; checkpoints round-trip bitwise")
def test_determinism(desk_runs, tmp_path):
    one = desk_runs["desk_one_stage"]
    again = train(one["cfg"].network, one["data"], one["cfg"].train)
    assert again.log == one["result"].log

    image = torch.randn(2, 3, 64, 64)
    for run in desk_runs.values():
        model = run["result"].model
        path = save_checkpoint(tmp_path / "ckpt.pt", model, run["result"].iteration, run["cfg"].train)
        restored = load_checkpoint(path, model.plan).model
        with torch.no_grad():
            a, b = model(image), restored(image)
        assert torch.equal(a.final_prediction, b.final_prediction)
        for x, y in zip(a.per_stage_logits, b.per_stage_logits):
            assert torch.equal(x, y)


@pytest.mark.criterion(7, "visualization contract")
def test_visualization_contract(desk_runs, tmp_path):
    rng = np.random.default_rng(7)
    for _ in range(100):
        w = rng.choice([-1.0, 0.0, 0.25, 1.0], size=(4, 16))
        c, k = int(rng.integers(0, 4)), int(rng.integers(1, 17))
        idx = top_channel_indices(w, AttentionQuery(c, k))
        row = w[c]
        assert idx == sorted(range(16), key=lambda i: (-row[i], i))[:k]
        mask = rng.normal(size=(16, 6, 5))
        m = attention_map(mask, idx)
        assert m.min() >= 0 and m.max() <= 1
        perm = rng.permutation(16)
        np.testing.assert_allclose(attention_map(mask[perm], [int(np.argsort(perm)[i]) for i in idx]), m, atol=1e-12)

    ckpt = desk_runs["desk_two_stage"]["result"].checkpoints[-1]
    sample = render_synthetic(0, 5, 4, 64)
    from PIL import Image

    image = tmp_path / "sample.png"
    Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(image)
    outputs = []
    for run in ("a", "b"):
        argv = ["visualize", "--checkpoint", str(ckpt), "--image", str(image), "--class", "1", "--class", "3",
                "--out", str(tmp_path / run)]
        assert dispatch(argv) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).iterdir())})
    assert len(outputs[0]) == 5
    assert outputs[0] == outputs[1]
