import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorloc import numerics as nm
from priorloc.config import ModelConfig
from priorloc.lochead import (LocHeadParams, PseudoProposal, decode_intervals, diou_loss, focal_loss, head_forward,
                              loc_loss, mil_loss, mine_pseudo_proposals, pseudo_segment_labels, regression_targets,
                              runs_above, suppressed_mil_loss)
from priorloc.numerics import Tensor, finite_diff_check

CFG = ModelConfig(embed_dim=6, text_heads=2)


def run_oracle(x, thr):
    out, start = [], None
    for t, v in enumerate(list(x) + [-np.inf]):
        if v > thr and start is None:
            start = t
        elif v <= thr and start is not None:
            out.append((start, t))
            start = None
    return out


class TestMining:
    def test_zero_attention_mines_nothing(self):
        M = np.random.default_rng(0).normal(size=(12, 3))
        assert mine_pseudo_proposals(np.zeros(12), M, [1, 1]) == []

    def test_single_plateau_one_proposal(self):
        A = np.zeros(15)
        A[4:9] = 1.0
        M = np.zeros((15, 2))
        M[4:9, 0] = 3.0
        props = mine_pseudo_proposals(A, M, [1])
        assert [(p.cls, p.start_seg, p.end_seg) for p in props] == [(0, 4, 9)]

    def test_two_plateaus(self):
        A = np.ones(20)
        M = np.zeros((20, 2))
        M[2:6, 0] = 1.0
        M[6:8, 0] = 0.1
        M[8:13, 0] = 0.9
        props = mine_pseudo_proposals(A, M, [1])
        spans = {(p.start_seg, p.end_seg) for p in props}
        assert spans == set(run_oracle(M[:, 0], 0.3))

    def test_respects_label_and_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            T = int(rng.integers(5, 40))
            label = rng.integers(0, 2, size=3)
            label[0] = 1
            props = mine_pseudo_proposals(rng.random(T), rng.normal(size=(T, 4)), label)
            for p in props:
                assert label[p.cls] == 1
                assert 0 <= p.start_seg < p.end_seg <= T
                assert 0.0 <= p.confidence <= 1.0

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(-0.5, 0.5))
    @settings(max_examples=80, deadline=None)
    def test_runs_above_matches_scan(self, x, thr):
        assert runs_above(np.array(x), thr) == run_oracle(x, thr)

    def test_segment_labels(self):
        props = [PseudoProposal(0, 1, 4, 0.5), PseudoProposal(1, 3, 6, 0.9)]
        np.testing.assert_array_equal(pseudo_segment_labels(props, 8, 2), [2, 0, 0, 1, 1, 1, 2, 2])

    def test_regression_targets(self):
        idx, bounds = regression_targets([PseudoProposal(0, 2, 4, 0.5)], 6)
        np.testing.assert_array_equal(idx, [2, 3])
        np.testing.assert_array_equal(bounds, [[2, 4], [2, 4]])


class TestFocal:
    def test_confident_correct_is_near_zero(self):
        labels = np.array([0, 2, 1])
        logits = np.full((3, 3), -30.0)
        logits[np.arange(3), labels] = 30.0
        assert focal_loss(Tensor(logits), labels).item() < 1e-20

    def test_gamma_zero_uniform_alpha_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        ce = -lp[np.arange(6), labels].mean()
        assert focal_loss(Tensor(logits), labels, gamma=0.0, alpha=None).item() == pytest.approx(ce, abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(7, 3))
        labels = rng.integers(0, 3, size=7)
        total = 0.0
        for t in range(7):
            z = sum(math.exp(v) for v in logits[t])
            pt = math.exp(logits[t, labels[t]]) / z
            w = 0.75 if labels[t] == 2 else 0.25
            total += -w * (1 - pt) ** 2 * math.log(pt)
        assert focal_loss(Tensor(logits), labels).item() == pytest.approx(total / 7, abs=1e-12)


class TestDiou:
    def test_identical_is_zero(self):
        assert diou_loss(Tensor([[1.0, 4.0], [0.0, 2.5]]), [[1.0, 4.0], [0.0, 2.5]]).item() == 0.0

    def test_hand_example(self):
        assert diou_loss(Tensor([[0.0, 2.0]]), [[4.0, 6.0]]).item() == pytest.approx(1 + 16 / 36, abs=1e-12)

    def test_empty_target(self):
        assert diou_loss(Tensor(np.zeros((0, 2))), np.zeros((0, 2))).item() == 0.0

    def test_monotone_slide(self):
        vals = [diou_loss(Tensor([[s, s + 2.0]]), [[10.0, 12.0]]).item() for s in np.linspace(0.0, 10.0, 41)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_concentric_is_one_minus_iou(self):
        assert diou_loss(Tensor([[0.0, 10.0]]), [[4.0, 6.0]]).item() == pytest.approx(1 - 0.2, abs=1e-12)

    @given(st.floats(-10, 10), st.floats(0.1, 10), st.floats(-10, 10), st.floats(0.1, 10))
    @settings(max_examples=100, deadline=None)
    def test_range(self, s0, l0, s1, l1):
        v = diou_loss(Tensor([[s0, s0 + l0]]), [[s1, s1 + l1]]).item()
        assert 0.0 <= v < 2.0


class TestMil:
    def test_floor(self):
        # Logits whose top-k softmax equals the normalised target exactly.
        label = np.array([1, 0])
        logits = np.tile(np.log([0.5, 1e-300, 0.5]), (4, 1))
        y = np.array([0.5, 0.0, 0.5])
        ent = -(0.5 * math.log(0.5)) * 2
        assert mil_loss(Tensor(logits), label, 2).item() == pytest.approx(ent, abs=1e-8)
        assert y.sum() == 1.0

    def test_single_segment(self):
        logits = np.array([[0.2, -0.4, 1.0]])
        p = np.exp(logits[0]) / np.exp(logits[0]).sum()
        ref = -(0.5 * math.log(p[0]) + 0.5 * math.log(p[2]))
        assert mil_loss(Tensor(logits), [1, 0], 1).item() == pytest.approx(ref, abs=1e-12)

    def test_scalar_fixture(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(8, 4))
        label = [1, 0, 1]
        k = 3
        s = np.sort(logits, axis=0)[::-1][:k].mean(axis=0)
        p = np.exp(s) / np.exp(s).sum()
        ref = -(math.log(p[0]) + math.log(p[2]) + math.log(p[3])) / 3
        assert mil_loss(Tensor(logits), label, k).item() == pytest.approx(ref, abs=1e-12)

    def test_suppressed_variant_ignores_background_target(self):
        logits = np.zeros((4, 3))
        v = suppressed_mil_loss(Tensor(logits), Tensor(np.ones((4, 1))), [1, 0], 2).item()
        assert v == pytest.approx(math.log(3), abs=1e-12)


class TestHead:
    def test_offsets_non_negative(self):
        p = LocHeadParams.init(CFG, 3, np.random.default_rng(0))
        logits, off = head_forward(Tensor(np.random.default_rng(1).normal(size=(9, 6)) * 5), p)
        assert logits.shape == (9, 4) and off.shape == (9, 2)
        assert np.all(off.data >= 0)

    def test_decode_intervals(self):
        out = decode_intervals(Tensor([[1.0, 2.0], [0.5, 0.5], [3.0, 0.0]]), np.array([0, 2])).data
        np.testing.assert_allclose(out, [[-0.5, 2.5], [-0.5, 2.5]])

    def test_loc_loss_is_sum(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(10, 3)))
        off = Tensor(rng.random((10, 2)))
        props = [PseudoProposal(1, 2, 6, 0.8)]
        out = loc_loss(logits, off, [0, 1], props, 2)
        assert out.total.item() == pytest.approx(out.focal.item() + out.diou.item() + out.mil.item(), abs=1e-12)

    def test_loc_loss_floor(self):
        label = [1, 0]
        T = 6
        props = [PseudoProposal(0, 0, 3, 1.0)]
        logits = np.full((T, 3), -60.0)
        logits[:3, 0] = 60.0
        logits[3:, 2] = 60.0
        # Offsets that decode to exactly [0, 3] for each segment inside the proposal.
        off = np.array([[0.5, 2.5], [1.5, 1.5], [2.5, 0.5], [1, 1], [1, 1], [1, 1]])
        out = loc_loss(Tensor(logits), Tensor(off), label, props, 3)
        assert out.focal.item() < 1e-20 and out.diou.item() == 0.0
        assert out.mil.item() == pytest.approx(math.log(2), abs=1e-8)

    def test_gradient_reaches_both_stacks(self):
        rng = np.random.default_rng(4)
        p = LocHeadParams.init(CFG, 2, rng)
        F_e = Tensor(rng.normal(size=(8, 6)))
        props = [PseudoProposal(0, 2, 6, 0.9)]

        def total_for(name):
            def f(x):
                setattr(p, name, x)
                lg, off = head_forward(F_e, p)
                return loc_loss(lg, off, [1, 0], props, 2).total
            return f

        for name in ("cls_w", "reg_w"):
            x = getattr(p, name)
            rep = finite_diff_check(total_for(name), Tensor(x.data.copy()), op_name=name)
            assert rep.passed, rep

    def test_overfit_single_video(self):
        rng = np.random.default_rng(5)
        p = LocHeadParams.init(CFG, 2, rng)
        F_e = Tensor(rng.normal(size=(24, 6)))
        props = [PseudoProposal(0, 4, 12, 0.9), PseudoProposal(1, 15, 20, 0.7)]
        opt = nm.Adam(p.named(), lr=0.05)
        first = None
        for _ in range(200):
            lg, off = head_forward(F_e, p)
            loss = loc_loss(lg, off, [1, 1], props, 3).total
            first = loss.item() if first is None else first
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
        lg, off = head_forward(F_e, p)
        final = loc_loss(lg, off, [1, 1], props, 3)
        # The MIL term has a non-zero entropy floor; compare the excess.
        floor = math.log(3)
        assert final.total.item() - floor < 0.1 * (first - floor)
