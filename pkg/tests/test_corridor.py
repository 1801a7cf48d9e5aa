import numpy as np
import pytest

from corridor_lab import autograd as ag
from corridor_lab.core import GridShape, SplitDataset
from corridor_lab.corridor import (
    AdaptationConfig,
    LatentCorridor,
    Mode,
    adapt,
    base_view,
    expected_trainable_count,
    init_corridor,
    load_corridors,
    materialize,
    parameter_overhead,
    save_corridors,
    scene_seed,
    trainable_count,
)
from corridor_lab.heatmap import ObservationStack
from corridor_lab.predictor import build_model
from corridor_lab.prompting import ApplyMode, apply_prompt

from test_predictor import SMALL, random_window, seg_for


def max_minor(g):
    return np.max(np.abs(g[:-1, :-1] * g[1:, 1:] - g[:-1, 1:] * g[1:, :-1]))


def all_minors(g):
    # every 2x2 minor, not only adjacent ones
    m = np.einsum("ik,jl->ijkl", g, g) - np.einsum("il,jk->ijkl", g, g)
    return np.max(np.abs(m))


class TestCorridorInit:
    def test_default_grid_has_96_params(self):
        c = init_corridor(GridShape(36, 60), seed=0)
        assert c.param_count == 96
        assert np.all(np.isfinite(materialize(c))) and np.any(materialize(c) != 0)

    def test_deterministic(self):
        a, b = init_corridor(SMALL, 7), init_corridor(SMALL, 7)
        assert np.array_equal(a.u.data, b.u.data) and np.array_equal(a.v.data, b.v.data)

    def test_kaiming_uniform_bounds(self):
        c = init_corridor(GridShape(400, 900), 1)
        for vec, fan in ((c.u.data, 400), (c.v.data, 900)):
            bound = np.sqrt(2.0) * np.sqrt(3.0 / fan)
            assert np.all(np.abs(vec) <= bound)
            assert np.var(vec) == pytest.approx(2.0 / fan, rel=0.15)


class TestMaterialize:
    def test_basis(self):
        u, v = np.zeros(12), np.zeros(16)
        u[2], v[5] = 1.0, 1.0
        g = materialize(LatentCorridor("s", ag.Tensor(u), ag.Tensor(v)))
        assert g[2, 5] == 1.0 and np.count_nonzero(g) == 1

    def test_zero_u(self):
        g = materialize(LatentCorridor("s", ag.Tensor(np.zeros(12)), ag.Tensor(np.ones(16))))
        assert not g.any()

    def test_rank_one_minors(self):
        for seed in range(20):
            g = materialize(init_corridor(SMALL, seed))
            assert all_minors(g) < 1e-12 and max_minor(g) < 1e-12


class TestApplyPrompt:
    def obs(self):
        rng = np.random.default_rng(0)
        return ObservationStack(rng.uniform(size=(3, 12, 16)), rng.uniform(size=(4, 12, 16)))

    @pytest.mark.parametrize("mode", [m for m in ApplyMode if m.how == "sum"])
    def test_zero_sum_identity(self, mode):
        o = self.obs()
        out = apply_prompt(o, np.zeros((12, 16)), mode)
        assert np.array_equal(out.heatmaps, o.heatmaps) and np.array_equal(out.seg, o.seg)

    def test_ones_mul_identity(self):
        o = self.obs()
        out = apply_prompt(o, np.ones((12, 16)), ApplyMode.MUL_ALL_HEATMAPS)
        assert np.array_equal(out.heatmaps, o.heatmaps)

    def test_sum_all_pointwise(self):
        o = self.obs()
        g = np.random.default_rng(1).normal(size=(12, 16))
        out = apply_prompt(o, g, ApplyMode.SUM_ALL_HEATMAPS)
        for t in range(3):
            np.testing.assert_allclose(out.heatmaps[t] - o.heatmaps[t], g, atol=1e-15)
        assert np.array_equal(out.seg, o.seg)

    def test_targets_per_mode(self):
        o = self.obs()
        g = np.full((12, 16), 2.0)
        first = apply_prompt(o, g, ApplyMode.SUM_FIRST_HEATMAP)
        assert np.array_equal(first.heatmaps[1:], o.heatmaps[1:]) and not np.array_equal(first.heatmaps[0], o.heatmaps[0])
        seg = apply_prompt(o, g, ApplyMode.SUM_SEG)
        assert np.array_equal(seg.heatmaps, o.heatmaps) and np.allclose(seg.seg, o.seg + 2)
        both = apply_prompt(o, g, ApplyMode.MUL_BOTH)
        assert np.allclose(both.heatmaps, 2 * o.heatmaps) and np.allclose(both.seg, 2 * o.seg)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_prompt(self.obs(), np.zeros((12, 15)), ApplyMode.SUM_ALL_HEATMAPS)


def test_parameter_overhead_arithmetic():
    assert parameter_overhead(900_000, (288, 480)) == pytest.approx(768 / 900_000)
    assert parameter_overhead(900_000, (288, 480)) < 0.001
    assert 288 * 480 == 138_240 and 138_240 / 900_000 > 0.15
    m = build_model(GridShape(36, 60), 8, 12, 12)
    assert parameter_overhead(m.param_count, GridShape(36, 60), 2) == 2 * 96 / m.param_count
    with pytest.raises(ValueError):
        parameter_overhead(0, (2, 2))


# ---------------------------------------------------------------- adapt

def scenes(names=("a", "b"), n=12):
    rng = np.random.default_rng(0)
    out = {}
    for s in names:
        ws = [random_window(rng, scene=s, ident=i) for i in range(n)]
        out[s] = SplitDataset(ws[:8], ws[8:], 0.8, 40.0, list(range(8)), list(range(8, n)))
    return out


@pytest.fixture
def base():
    return build_model(SMALL, 3, 2, 3, seed=1)


SEGS = {"a": seg_for(), "b": seg_for()}


def cfg(mode, epochs=2):
    return AdaptationConfig(mode=mode, epochs=epochs, seed=3, batch_size=4)


def test_lc_freezes_base_and_zero_prompt_recovers(base, tmp_path):
    base.save(tmp_path / "before.ckpt")
    views = adapt(base, scenes(), SEGS, cfg("LC"))
    base.save(tmp_path / "after.ckpt")
    assert (tmp_path / "before.ckpt").read_bytes() == (tmp_path / "after.ckpt").read_bytes()
    ws = scenes()["a"].test_windows
    v = views["a"]
    assert not np.array_equal(v.logits(ws, SEGS["a"]), base_view(base, "a").logits(ws, SEGS["a"]))
    v.corridor.u.data[:] = 0.0
    assert np.array_equal(v.logits(ws, SEGS["a"]), base_view(base, "a").logits(ws, SEGS["a"]))


def test_rank_one_after_training(base):
    views = adapt(base, scenes(), SEGS, cfg("LC", epochs=3))
    for v in views.values():
        assert all_minors(v.prompt()) < 1e-12


@pytest.mark.parametrize("mode", list(Mode))
def test_trainable_counts(base, mode):
    views = adapt(base, scenes(), SEGS, cfg(mode, epochs=1))
    assert trainable_count(views, mode) == expected_trainable_count(mode, SMALL, base.part_count("head"), 2)
    head = base.part_count("head")
    hw = SMALL.h + SMALL.w
    assert expected_trainable_count(mode, SMALL, head, 2) == {
        Mode.LC: 2 * hw, Mode.LC_JOINT_FT: 2 * hw + head,
        Mode.LC_PER_SCENE_FT: 2 * (hw + head), Mode.FINETUNE_ONLY: 2 * head}[mode]


@pytest.mark.parametrize("mode", list(Mode))
def test_encoder_decoder_never_change(base, mode):
    before = {k: v.copy() for k, v in base.state_dict().items()}
    flags = dict(base.frozen)
    adapt(base, scenes(), SEGS, cfg(mode, epochs=1))
    assert all(np.array_equal(before[k], v) for k, v in base.state_dict().items())
    assert base.frozen == flags


def test_prompt_moves_after_one_step(base):
    views = adapt(base, scenes(("a",)), SEGS, cfg("LC", epochs=1))
    c0 = init_corridor(SMALL, scene_seed(3, "a"), "a")
    c1 = views["a"].corridor
    assert np.linalg.norm(c1.u.data - c0.u.data) + np.linalg.norm(c1.v.data - c0.v.data) > 0


@pytest.mark.parametrize("mode", ["LC", "LCPerSceneFT"])
def test_scene_isolation(base, mode):
    both = adapt(base, scenes(), SEGS, cfg(mode))
    only_b = adapt(base, {"b": scenes()["b"]}, SEGS, cfg(mode))
    assert np.array_equal(both["b"].corridor.u.data, only_b["b"].corridor.u.data)
    assert np.array_equal(both["b"].corridor.v.data, only_b["b"].corridor.v.data)
    if mode == "LCPerSceneFT":
        assert all(np.array_equal(both["b"].head[k].data, only_b["b"].head[k].data) for k in both["b"].head)


def test_joint_head_is_shared(base):
    views = adapt(base, scenes(), SEGS, cfg("LCJointFT", epochs=1))
    assert views["a"].head is views["b"].head
    assert views["a"].corridor is not views["b"].corridor


def test_threads_match_serial(base):
    a = adapt(base, scenes(), SEGS, cfg("LCPerSceneFT"), workers=1)
    b = adapt(base, scenes(), SEGS, cfg("LCPerSceneFT"), workers=2)
    for s in a:
        assert np.array_equal(a[s].prompt(), b[s].prompt())


def test_empty_scene_error_names_scene_and_fraction(base):
    sc = scenes()
    sc["b"] = SplitDataset([], sc["b"].test_windows, 0.02, 0.0, [], [])
    with pytest.raises(ValueError, match=r"'b'.*0\.02"):
        adapt(base, sc, SEGS, AdaptationConfig(mode="LC", fraction=0.02))


def test_corridor_store_round_trip(base, tmp_path):
    for mode in ("LCJointFT", "LCPerSceneFT", "LC"):
        views = adapt(base, scenes(), SEGS, cfg(mode, epochs=1))
        save_corridors(tmp_path / f"{mode}.ckpt", views)
        back = load_corridors(tmp_path / f"{mode}.ckpt", base)
        ws = scenes()["a"].test_windows
        for s in views:
            assert np.array_equal(back[s].logits(ws, SEGS[s]), views[s].logits(ws, SEGS[s]))
        if mode == "LCJointFT":
            assert back["a"].head is back["b"].head
