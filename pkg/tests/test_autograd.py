import numpy as np
import pytest

from corridor_lab import autograd as ag

from gradcases import PRIMITIVE_CASES, full_loss_case


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    for seed in range(10):
        loss_fn, params = PRIMITIVE_CASES[name](np.random.default_rng(seed))
        assert ag.finite_diff_check(loss_fn, params, eps=1e-4, seed=seed) < 1e-3


def test_full_loss_gradient():
    loss_fn, params = full_loss_case(np.random.default_rng(3), with_prompt=True)
    assert ag.finite_diff_check(loss_fn, params, eps=1e-4, n_coords=80) < 1e-3


def test_bce_symmetric_point():
    z = ag.Tensor(np.zeros((3, 4)))
    assert ag.bce_with_logits_sum(z, np.full((3, 4), 0.5)).item() == pytest.approx(12 * np.log(2))


def test_bce_extreme_logits_stay_finite():
    z = ag.Tensor(np.array([800.0, -800.0]), requires_grad=True)
    with ag.Tape() as tape:
        out = ag.bce_with_logits_sum(z, np.array([1.0, 0.0]))
        tape.backward(out)
    assert out.item() == pytest.approx(0.0, abs=1e-300)
    np.testing.assert_allclose(z.grad, [0.0, 0.0], atol=1e-300)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 2, 5, 6))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ag.conv2d(ag.Tensor(x), ag.Tensor(k)).data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 1, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 1, 4, 5))
    for o in range(3):
        for r in range(4):
            for c in range(5):
                ref[o, 0, r, c] = b[o] + np.sum(w[o] * xp[:, 0, r:r + 3, c:c + 3])
    np.testing.assert_allclose(ag.conv2d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b)).data, ref, atol=1e-12)


def test_sigmoid_derivative_at_zero():
    z = ag.Tensor(np.zeros(1), requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.sum(ag.sigmoid(z)))
    assert z.grad[0] == 0.25


def test_sum_of_squares_and_products():
    x = ag.Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.sum(ag.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)

    a = ag.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = ag.Tensor(np.array([5.0, -7.0]), requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.sum(ag.mul(a, b)))
    np.testing.assert_array_equal(a.grad, b.data)
    np.testing.assert_array_equal(b.grad, a.data)


def test_backward_linearity():
    rng = np.random.default_rng(5)
    loss_fn, params = full_loss_case(rng)
    with ag.Tape() as tape:
        tape.backward(loss_fn())
    g1 = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    with ag.Tape() as tape:
        tape.backward(ag.mul(loss_fn(), ag.Tensor(np.array(2.5))))
    for a, b in zip(g1, params):
        np.testing.assert_allclose(b.grad, 2.5 * a, rtol=1e-12, atol=1e-12)


def test_repeated_backward_errors():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    with ag.Tape() as tape:
        y = ag.sum(ag.mul(x, x))
        tape.backward(y)
        with pytest.raises(RuntimeError):
            tape.backward(y)
        tape.reset()
        x.grad = None
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_non_scalar_root():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    with ag.Tape() as tape:
        with pytest.raises(ValueError):
            tape.backward(ag.mul(x, x))


def test_shape_mismatch_names_op():
    with pytest.raises(ValueError, match="add"):
        ag.add(ag.Tensor(np.ones(2)), ag.Tensor(np.ones(3)))
    with pytest.raises(ValueError, match="conv2d"):
        ag.conv2d(ag.Tensor(np.ones((2, 1, 4, 4))), ag.Tensor(np.ones((3, 3, 3, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(ag.NonFiniteError):
        ag.mul(ag.Tensor(np.array([1e200])), ag.Tensor(np.array([1e200])))


def test_no_tape_means_no_recording():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    y = ag.mul(x, x)
    assert not y.requires_grad and y._backward is None


def test_each_node_visited_once():
    calls = []
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with ag.Tape() as tape:
        y = ag.mul(x, x)
        z = ag.add(y, y)
        out = ag.sum(z)
        for node in tape.nodes:
            inner = node._backward

            def wrapped(g, inner=inner, node=node):
                calls.append(id(node))
                inner(g)
            node._backward = wrapped
        tape.backward(out)
    assert sorted(calls) == sorted({id(n) for n in (y, z, out)})
    np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])


def test_upsample_matrix_half_pixel_convention():
    m = ag.upsample_matrix(3)
    expected = np.array([
        [1.0, 0.0, 0.0],
        [0.75, 0.25, 0.0],
        [0.25, 0.75, 0.0],
        [0.0, 0.75, 0.25],
        [0.0, 0.25, 0.75],
        [0.0, 0.0, 1.0],
    ])
    np.testing.assert_allclose(m, expected)
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    up = ag.bilinear_up2(ag.Tensor(x)).data
    assert up.shape == (1, 1, 4, 6)
    np.testing.assert_allclose(ag.avg_pool2(ag.Tensor(ag.bilinear_up2(ag.Tensor(np.ones((1, 1, 3, 3)))).data)).data,
                               np.ones((1, 1, 3, 3)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = np.array([1.0, -2.0])
        state = ag.AdamState([p.shape])
        ag.adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -5.0, 1e-3])
        p = np.zeros(3)
        ag.adam_step([p], [g], ag.AdamState([p.shape]), lr=0.01)
        # bias-corrected first step: lr * g / (|g| + eps)
        np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-5)

    def test_deterministic(self):
        def run():
            p = np.array([1.0, 2.0])
            s = ag.AdamState([p.shape])
            for k in range(5):
                ag.adam_step([p], [np.array([np.sin(k), np.cos(k)])], s, lr=0.05)
            return p, s
        (p1, s1), (p2, s2) = run(), run()
        assert np.array_equal(p1, p2) and np.array_equal(s1.m[0], s2.m[0]) and np.array_equal(s1.v[0], s2.v[0])


class TestFiniteDiffCheck:
    def test_quadratic(self):
        x = ag.Tensor(np.random.default_rng(0).normal(size=20), requires_grad=True)
        assert ag.finite_diff_check(lambda: ag.sum(ag.mul(x, x)), [x]) < 1e-8

    def test_detects_corrupted_backward(self, monkeypatch):
        real = ag.sigmoid

        def corrupted(x):
            out = real(x)
            if out._backward is not None:
                inner = out._backward
                out._backward = lambda g: inner(2.0 * g)
            return out
        monkeypatch.setattr(ag, "sigmoid", corrupted)
        x = ag.Tensor(np.random.default_rng(1).normal(size=10), requires_grad=True)
        assert ag.finite_diff_check(lambda: ag.sum(ag.sigmoid(x)), [x]) > 0.1


def test_checkpoint_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3, 4)), "b.weight": np.array([np.pi, -0.0, 1e-300]), "s": np.array(7.0)}
    ag.save_tensors(tmp_path / "t.ckpt", tensors)
    back = ag.load_tensors(tmp_path / "t.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k]).tobytes()
    raw = (tmp_path / "t.ckpt").read_bytes()
    assert raw[:4] == b"CLTN"
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        ag.load_tensors(tmp_path / "bad.ckpt")
