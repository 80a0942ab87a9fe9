"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line."""

import time
from fractions import Fraction

import numpy as np
import pytest

from mrsyolo import ops
from mrsyolo.blocks import AKDC, MAKDF, C3k2, band_length
from mrsyolo.evalkit import COCO_THRESHOLDS, DetectionRecord as R, average_precision, iou, pr_curve
from mrsyolo.fileio import (FormatError, load_checkpoint, load_tensor, read_records,
                            save_checkpoint, save_tensor)
from mrsyolo.gradcheck import check_block, randomize
from mrsyolo.head import CRU, SRU, CRUConfig, ScConv, SRUConfig
from mrsyolo.model import ModelConfig, build, count_flops
from mrsyolo.neck import RCFPN, SBA
from mrsyolo.nn import Conv2d, Module
from mrsyolo.prune import ChannelPruner, lamp_scores, unstructured_prune
from mrsyolo.tensor import Tensor, no_grad

from test_evalkit import oracle_ap
from test_head import sru_oracle
from test_prune import ThreeLayer, global_oracle


def test_criterion_1_gradient_suite(criterion):
    blocks = ["akdc", "makdf", "c3k2", "rau", "sba", "sru", "cru", "head", "full"]
    with criterion(1, "gradient suite: 9 blocks x seeds {1,2,3}, rel err <= 1e-4, < 2 min"):
        start = time.perf_counter()
        worst = 0.0
        for name in blocks:
            for seed in (1, 2, 3):
                res = check_block(name, seed=seed, tol=1e-4)
                assert res.passed, (name, seed, res.max_error)
                worst = max(worst, res.max_error)
        elapsed = time.perf_counter() - start
        assert elapsed < 120, elapsed
        print(f"max relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_akdc_geometry(criterion):
    with criterion(2, "AKDC geometry: M = 3K+2 for K in {1,3,5}; branch weights sum to 1 +- 1e-12"):
        assert [band_length(k) for k in (1, 3, 5)] == [5, 11, 17]
        for k, m in zip((1, 3, 5), (5, 11, 17)):
            blk = randomize(AKDC(12, k), k)
            assert blk.band_h.kernel_size == (1, m) and blk.band_v.kernel_size == (m, 1)
            x = Tensor(np.random.default_rng(k).normal(size=(2, 12, 8, 8)))
            total = sum(w.data for w in blk.branch_weights(x))
            assert np.all(np.abs(total - 1) <= 1e-12)
        assert [b.m for b in MAKDF(12).branches] == [5, 11, 17]


def test_criterion_3_sru_conservation(criterion):
    with criterion(3, "SRU: W1+W2 = 1, sum conserved, t=0 identity, scalar-loop oracle to 1e-9"):
        rng = np.random.default_rng(3)
        for t in (0.0, 0.4, 0.99):
            for seed in range(5):
                sru = randomize(SRU(8, SRUConfig(t)), seed)
                sru.beta.data = rng.normal(size=8)
                x = Tensor(rng.normal(size=(2, 8, 4, 4)))
                w1 = sru.gate(x)
                assert np.all(w1.astype(int) + (~w1).astype(int) == 1)
                y = sru(x).data
                assert abs(y.sum() - x.data.sum()) <= 1e-9 * x.size
                if t == 0.0:
                    assert np.array_equal(y, x.data)
                small = Tensor(rng.normal(size=(1, 8, 2, 3)))
                ref = sru_oracle(small.data, sru.gamma.data, sru.beta.data, t)
                assert np.max(np.abs(sru(small).data - ref)) <= 1e-9


def test_criterion_4_cru_fusion(criterion):
    with criterion(4, "CRU: eta1 + eta2 = 1 +- 1e-12; C=16, alpha=1/2, r=2 gives 16-channel Y1, Y2"):
        w = CRUConfig(alpha=0.5, squeeze=2).widths(16)
        assert (w["sq_up"], w["sq_low"], w["y2_pwc"]) == (4, 4, 12)
        cru = randomize(CRU(16), 4)
        y1, y2 = cru.branches(Tensor(np.random.default_rng(4).normal(size=(2, 16, 6, 6))))
        assert y1.shape[1] == 16 and y2.shape[1] == 16
        for seed in range(5):
            cru = randomize(CRU(24), seed)
            y1, y2 = cru.branches(Tensor(np.random.default_rng(seed).normal(size=(3, 24, 4, 4)) * 5))
            e1, e2 = cru.fusion_weights(y1, y2)
            assert np.all(np.abs(e1.data + e2.data - 1) <= 1e-12)


def test_criterion_5_lamp(criterion):
    with criterion(5, "LAMP: [3,1,2] -> [1/14, 4/13, 1]; max = 1; global oracle; scale invariance"):
        s = lamp_scores([3, 1, 2])
        exact = [Fraction(1, 14), Fraction(4, 13), Fraction(1)]
        assert all(abs(a - float(b)) <= 1e-15 for a, b in zip(s.score, exact))
        rng = np.random.default_rng(5)
        for _ in range(20):
            assert lamp_scores(rng.normal(size=rng.integers(1, 50))).score.max() == 1.0
        model = ThreeLayer().init(11)
        names = [n for n, m in model.named_modules() if isinstance(m, Conv2d)]
        assert sum(getattr(model, n).weight.size for n in names) <= 10_000
        for rate in (0.1, 0.5, 0.8):
            plan = unstructured_prune(model, rate)
            got = {(li, i) for li, n in enumerate(names) for i in np.flatnonzero(plan.masks[n].ravel())}
            assert got == global_oracle(model, rate)
            scaled = ThreeLayer().init(11)
            for n, k in zip(names, (0.01, 7.0, 300.0)):
                getattr(scaled, n).weight.data *= k
            other = unstructured_prune(scaled, rate)
            assert all(np.array_equal(plan.masks[n], other.masks[n]) for n in names)


def test_criterion_6_pruning_sweep(criterion, tmp_path):
    with criterion(6, "pruning sweep 0.1-0.9: monotone params/FLOPs, rate 0.5 within 50% +- 10, finite, < 5 min"):
        start = time.perf_counter()
        path = tmp_path / "ref.mrsw"
        save_checkpoint(build(ModelConfig(), seed=0), path)
        model = load_checkpoint(path)
        pruner = ChannelPruner(model)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 3, 64, 64)))
        params, flops = [model.num_params()], [count_flops(model).total_flops]
        for rate in np.round(np.arange(1, 10) * 0.1, 10):
            new, plan = pruner.prune(float(rate))
            params.append(new.num_params())
            flops.append(count_flops(new).total_flops)
            with no_grad():
                outs = new(x)
            assert all(np.all(np.isfinite(t.data)) for lvl in outs for t in lvl)
            if rate == 0.5:
                reduction = plan.achieved_rate
                assert abs(reduction - 0.5) <= 0.10, reduction
        assert all(a >= b for a, b in zip(params, params[1:])), params
        assert all(a >= b for a, b in zip(flops, flops[1:])), flops
        elapsed = time.perf_counter() - start
        assert elapsed < 300, elapsed
        print(f"rate 0.5 reduction {reduction:.4f}; {elapsed:.1f}s")


def test_criterion_7_metrics(criterion):
    with criterion(7, "metrics: fixture AP 0.8333, IoU fixtures, 10 COCO thresholds, 20 oracle cases"):
        gts = [R("i", 0, (0, 0, 10, 10)), R("i", 0, (20, 20, 30, 30))]
        preds = [R("i", 0, (0, 0, 10, 10), 0.9), R("i", 0, (50, 50, 60, 60), 0.8),
                 R("i", 0, (20, 20, 30, 30), 0.7)]
        assert abs(average_precision(pr_curve(preds, gts)) - 0.8333) <= 1e-4
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1
        assert iou((0, 0, 1, 1), (3, 3, 4, 4)) == 0
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == 1 / 3
        assert len(COCO_THRESHOLDS) == 10
        assert np.allclose(COCO_THRESHOLDS, np.linspace(0.5, 0.95, 10))
        rng = np.random.default_rng(7)
        for _ in range(20):
            def box():
                x0, y0 = rng.integers(0, 6, 2)
                w, h = rng.integers(1, 5, 2)
                return (x0, y0, x0 + w, y0 + h)
            g = [R(str(rng.integers(2)), 0, box()) for _ in range(rng.integers(1, 5))]
            p = [R(str(rng.integers(2)), 0, box(), float(s))
                 for s in rng.permutation(np.linspace(0.05, 0.95, rng.integers(1, 8)))]
            for thr in (0.5, 0.75):
                assert abs(average_precision(pr_curve(p, g, thr)) - oracle_ap(p, g, thr)) <= 1e-12


def test_criterion_8_structural_walk(criterion, toy_model):
    with criterion(8, "structural walk: C3k2-MAKDF backbone, RCFPN neck, SC_Detect head"):
        mods = toy_model.modules()
        counts = {}
        for m in mods:
            counts[type(m).__name__] = counts.get(type(m).__name__, 0) + 1
        bb = toy_model.backbone
        stages = [bb.stage1, bb.stage2, bb.stage3, bb.stage4]
        assert all(isinstance(s, C3k2) and isinstance(s.m[0].cv2, MAKDF) for s in stages)
        assert isinstance(toy_model.neck, RCFPN)
        assert counts["RCFPN"] == 1 and counts["SBA"] == 2 and counts["RAU"] == 4
        assert counts["ScConv"] == 3 and counts["SRU"] == 3 and counts["CRU"] == 3
        assert counts["MAKDF"] == 4 + 5 and counts["AKDC"] == 3 * counts["MAKDF"]
        assert all(isinstance(l.pre, ScConv) for l in toy_model.head.levels)
        base = build(ModelConfig(variant="baseline"))
        names = {type(m).__name__ for m in base.modules()}
        assert not names & {"MAKDF", "AKDC", "RCFPN", "SBA", "ScConv"}


def test_criterion_9_round_trips(criterion, tmp_path):
    with criterion(9, "round trips: checkpoint and tensor files within 1e-6 relative; malformed-file diagnostics"):
        model = build(ModelConfig(widths=(12, 24, 24, 48), input_size=(32, 32)), 9)
        x = np.random.default_rng(9).normal(size=(2, 3, 32, 32))
        save_tensor(x, tmp_path / "x.mrst")
        xin = load_tensor(tmp_path / "x.mrst")
        assert np.max(np.abs(xin - x) / np.maximum(np.abs(x), 1e-30)) <= 1e-6
        save_checkpoint(model, tmp_path / "m.mrsw")
        back = load_checkpoint(tmp_path / "m.mrsw")
        with no_grad():
            a = [t.data for lvl in model(Tensor(xin)) for t in lvl]
            b = [t.data for lvl in back(Tensor(xin)) for t in lvl]
        for u, v in zip(a, b):
            assert np.linalg.norm(u - v) <= 1e-6 * np.linalg.norm(u)
        raw = (tmp_path / "m.mrsw").read_bytes()
        (tmp_path / "t.mrsw").write_bytes(raw[:-1])
        with pytest.raises(FormatError, match="blob length"):
            load_checkpoint(tmp_path / "t.mrsw")
        (tmp_path / "b.mrsw").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "b.mrsw")
        (tmp_path / "r.jsonl").write_text('{"image_id": "a", "class_id": 0, "box": [0, 0, 1, 1]}\n'
                                          'not json\n'
                                          '{"image_id": "a", "class_id": 0, "box": [0, 0, 1, 1]}\n')
        with pytest.raises(FormatError, match="line 2"):
            read_records(tmp_path / "r.jsonl")
