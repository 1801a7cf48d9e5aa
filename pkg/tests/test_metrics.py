import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corridor_lab.baselines import constant_velocity
from corridor_lab.core import TrajectoryWindow
from corridor_lab.metrics import ade, evaluate, fde, normalize_curves


def brute_ade(pred, gt):
    total = 0.0
    for (px, py), (gx, gy) in zip(pred, gt):
        total += ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5
    return total / len(pred)


def brute_fde(pred, gt):
    (px, py), (gx, gy) = pred[-1], gt[-1]
    return ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5


def test_identical():
    p = np.random.default_rng(0).normal(size=(12, 2))
    assert ade(p, p) == 0.0 and fde(p, p) == 0.0


def test_three_four_five():
    gt = np.random.default_rng(1).normal(size=(12, 2))
    assert ade(gt + [3.0, 4.0], gt) == pytest.approx(5.0, abs=1e-12)


def test_final_point_only():
    gt = np.zeros((12, 2))
    pred = gt.copy()
    pred[-1] = [0.0, 2.0]
    assert fde(pred, gt) == 2.0
    assert ade(pred, gt) == 2.0 / 12


def test_length_mismatch():
    with pytest.raises(ValueError):
        ade(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        fde(np.zeros((3, 2)), np.zeros((4, 2)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 20))
def test_matches_brute_force(seed, t):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(scale=50, size=(t, 2)), rng.normal(scale=50, size=(t, 2))
    assert abs(ade(pred, gt) - brute_ade(pred.tolist(), gt.tolist())) < 1e-9
    assert abs(fde(pred, gt) - brute_fde(pred.tolist(), gt.tolist())) < 1e-9
    # symmetry, translation invariance, bound by the worst step
    assert ade(pred, gt) == pytest.approx(ade(gt, pred))
    shift = rng.normal(size=2) * 100
    assert ade(pred + shift, gt + shift) == pytest.approx(ade(pred, gt), abs=1e-9)
    assert ade(pred, gt) <= np.max(np.linalg.norm(pred - gt, axis=1)) + 1e-12
    assert fde(pred, gt) >= 0


def window(past, future, ident=0):
    return TrajectoryWindow(ident, "s", np.asarray(past, float), np.asarray(future, float), 0)


def test_evaluate_perfect_and_brute():
    rng = np.random.default_rng(4)
    ws = [window(rng.normal(size=(8, 2)), rng.normal(size=(12, 2)), i) for i in range(7)]
    perfect = evaluate(lambda batch: np.stack([w.future for w in batch]), ws[:1])
    assert (perfect.ade_mean, perfect.fde_mean, perfect.n_windows) == (0.0, 0.0, 1)

    noisy = {id(w): w.future + rng.normal(size=(12, 2)) for w in ws}
    rep = evaluate(lambda batch: np.stack([noisy[id(w)] for w in batch]), ws)
    assert rep.ade_mean == pytest.approx(np.mean([brute_ade(noisy[id(w)], w.future) for w in ws]), abs=1e-12)
    assert rep.fde_mean == pytest.approx(np.mean([brute_fde(noisy[id(w)], w.future) for w in ws]), abs=1e-12)
    rev = evaluate(lambda batch: np.stack([noisy[id(w)] for w in batch]), ws[::-1])
    assert (rev.ade_mean, rev.fde_mean) == (rep.ade_mean, rep.fde_mean)


def test_evaluate_cv_on_lines():
    ws = []
    for k in range(5):
        v = np.array([0.7 * k - 1.0, 0.3])
        pts = np.array([10.0, 5.0]) + np.arange(20)[:, None] * v
        ws.append(window(pts[:8], pts[8:], k))
    rep = evaluate(lambda batch: np.stack([constant_velocity(w) for w in batch]), ws)
    assert rep.ade_mean < 1e-9


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(lambda b: b, [])


class TestNormalize:
    def test_single_scene(self):
        fr, mean, std = normalize_curves({"a": {0.02: 4.0, 0.8: 2.0}}, {"a": 5.0})
        assert fr == [0.02, 0.8]
        np.testing.assert_allclose(mean, [0.8, 0.4])
        np.testing.assert_allclose(std, [0.0, 0.0])

    def test_identical_scenes(self):
        c = {0.1: 3.0, 0.5: 1.5}
        fr, mean, _ = normalize_curves({"a": c, "b": dict(c)}, {"a": 6.0, "b": 6.0})
        np.testing.assert_allclose(mean, [0.5, 0.25])

    def test_two_scene_arithmetic(self):
        fr, mean, std = normalize_curves({"a": {0.1: 2.0, 0.8: 1.0}, "b": {0.1: 9.0, 0.8: 3.0}},
                                         {"a": 4.0, "b": 10.0})
        # a: 0.5, 0.25 ; b: 0.9, 0.3
        np.testing.assert_allclose(mean, [0.7, 0.275])
        np.testing.assert_allclose(std, [0.2, 0.025])

    def test_missing_fraction(self):
        with pytest.raises(ValueError):
            normalize_curves({"a": {0.1: 1.0, 0.8: 1.0}, "b": {0.1: 1.0}}, {"a": 1.0, "b": 1.0})
