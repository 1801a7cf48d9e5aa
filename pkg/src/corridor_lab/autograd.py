"""A small reverse-mode autodiff engine over float64 numpy arrays.

Image tensors use the layout (channels, batch, rows, cols). Keeping channels
outermost lets every convolution run as one matrix product.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape everything is evaluated
eagerly with no bookkeeping, which is how inference runs.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as they are created, so the record is already in
    topological order and backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node: Tensor):
        self.nodes.append(node)

    def backward(self, root: Tensor):
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        self._consumed = True
        if not root.requires_grad:
            return
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            if node is not root:
                # intermediate buffers are not needed once propagated
                node.grad = None

    def reset(self):
        for node in self.nodes:
            node.grad = None
        self._consumed = False


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _check_finite(op: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in result")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.name = op
        tape.record(out)
    return out


def _shape_error(op: str, *shapes):
    raise ValueError(f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _shape_error("add", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)
    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _shape_error("sub", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)
    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _shape_error("mul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    return _make("mul", a.data * b.data, (a, b), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        x._accumulate(np.where(pos, g, slope * g))
    return _make("leaky_relu", np.where(pos, x.data, slope * x.data), (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))
    return _make("sigmoid", s, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.shape))
    return _make("sum", np.array(x.data.sum()), (x,), backward)


def outer(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        _shape_error("outer", u.shape, v.shape)

    def backward(g):
        if u.requires_grad:
            u._accumulate(g @ v.data)
        if v.requires_grad:
            v._accumulate(u.data @ g)
    return _make("outer", np.outer(u.data, v.data), (u, v), backward)


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    items = [as_tensor(t) for t in items]
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        _shape_error("stack", *shapes)

    def backward(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                t._accumulate(g[i])
    return _make("stack", np.stack([t.data for t in items]), items, backward)


# ---------------------------------------------------------------- image ops

def concat_channels(items: Sequence[Tensor]) -> Tensor:
    items = [as_tensor(t) for t in items]
    rest = {t.shape[1:] for t in items}
    if len(rest) != 1:
        _shape_error("concat_channels", *(t.shape for t in items))
    bounds = np.cumsum([0] + [t.shape[0] for t in items])

    def backward(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])
    return _make("concat_channels", np.concatenate([t.data for t in items], axis=0), items, backward)


def combine_channels(x: Tensor, p: Tensor, channels: Sequence[int], how: str) -> Tensor:
    """Add (``how='sum'``) or multiply (``how='mul'``) a spatial map into selected channels.

    ``x`` is (C, N, h, w); ``p`` is (h, w), shared by the batch, or (N, h, w),
    one map per sample. Channels not listed pass through untouched.
    """
    x, p = as_tensor(x), as_tensor(p)
    if x.data.ndim != 4 or p.data.ndim not in (2, 3) or p.shape[-2:] != x.shape[-2:] \
            or (p.data.ndim == 3 and p.shape[0] != x.shape[1]):
        _shape_error("combine_channels", x.shape, p.shape)
    if how not in ("sum", "mul"):
        raise ValueError(f"combine_channels: unknown combination {how!r}")
    idx = np.asarray(list(channels), dtype=np.intp)
    out = x.data.copy()
    if how == "sum":
        out[idx] += p.data
    else:
        out[idx] *= p.data

    def backward(g):
        if x.requires_grad:
            gx = g.copy()
            if how == "mul":
                gx[idx] *= p.data
            x._accumulate(gx)
        if p.requires_grad:
            gs = g[idx] if how == "sum" else g[idx] * x.data[idx]
            gs = gs.sum(axis=0)
            if p.data.ndim == 2:
                gs = gs.sum(axis=0)
            p._accumulate(gs)
    return _make("combine_channels", out, (x, p), backward)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """(C, N, h+2, w+2) padded input -> (C*9, N*h*w) patch matrix."""
    c, n = xp.shape[:2]
    cols = np.empty((c, 3, 3, n, h, w), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * 9, n * h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. weight is (out, in, 3, 3)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.shape[1:] != (x.shape[0], 3, 3) \
            or (bias is not None and bias.shape != (weight.shape[0],)):
        _shape_error("conv2d", x.shape, weight.shape, bias.shape if bias is not None else ())
    cin, n, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1))), h, w)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(cout, -1)
        if weight.requires_grad:
            weight._accumulate((gm @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            # transposed convolution: correlate grad with the flipped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gcols = _im2col(np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1))), h, w)
            x._accumulate((wflip @ gcols).reshape(cin, n, h, w))
    return _make("conv2d", out.reshape(cout, n, h, w), parents, backward)


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution. weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0] \
            or (bias is not None and bias.shape != (weight.shape[0],)):
        _shape_error("conv2d_1x1", x.shape, weight.shape, bias.shape if bias is not None else ())
    cin, n, h, w = x.shape
    cout = weight.shape[0]
    xm = x.data.reshape(cin, -1)
    out = weight.data @ xm
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(cout, -1)
        if weight.requires_grad:
            weight._accumulate(gm @ xm.T)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            x._accumulate((weight.data.T @ gm).reshape(x.shape))
    return _make("conv2d_1x1", out.reshape(cout, n, h, w), parents, backward)


def avg_pool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    c, n, h, w = x.shape
    if h % 2 or w % 2:
        _shape_error("avg_pool2", x.shape)
    out = x.data.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        x._accumulate(g4)
    return _make("avg_pool2", out, (x,), backward)


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) linear-interpolation matrix, half-pixel centres, edge-clamped.

    Output i samples source coordinate (i + 0.5) / 2 - 0.5, clamped below at 0.
    """
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_up2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        _shape_error("bilinear_up2", x.shape)
    uh, uw = upsample_matrix(x.shape[2]), upsample_matrix(x.shape[3])
    out = np.einsum("ij,cnjk,lk->cnil", uh, x.data, uw, optimize=True)

    def backward(g):
        x._accumulate(np.einsum("ij,cnil,lk->cnjk", uh, g, uw, optimize=True))
    return _make("bilinear_up2", out, (x,), backward)


# ---------------------------------------------------------------- dense + losses

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N, in) @ weight (in, out) + bias (out,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0] \
            or (bias is not None and bias.shape != (weight.shape[1],)):
        _shape_error("linear", x.shape, weight.shape, bias.shape if bias is not None else ())
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
    return _make("linear", out, parents, backward)


def bce_with_logits_sum(logits: Tensor, targets) -> Tensor:
    """Summed binary cross entropy on raw logits, in the overflow-free form."""
    z = as_tensor(logits)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=DTYPE)
    if z.shape != y.shape:
        _shape_error("bce_with_logits_sum", z.shape, y.shape)
    zd = z.data
    val = np.sum(np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd))))

    def backward(g):
        z._accumulate(g * (_sigmoid(zd) - y))
    return _make("bce_with_logits_sum", np.array(val), (z,), backward)


def squared_error_sum(pred: Tensor, target) -> Tensor:
    p = as_tensor(pred)
    y = np.asarray(target, dtype=DTYPE)
    if p.shape != y.shape:
        _shape_error("squared_error_sum", p.shape, y.shape)
    diff = p.data - y

    def backward(g):
        p._accumulate(2.0 * g * diff)
    return _make("squared_error_sum", np.array(np.sum(diff * diff)), (p,), backward)


# ---------------------------------------------------------------- optimisation

class AdamState:
    def __init__(self, shapes: Iterable[tuple[int, ...]]):
        shapes = list(shapes)
        self.step = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam update with bias correction. ``None`` grads are treated as zero."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("adam_step: params, grads and state disagree in length")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} does not match param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState(p.shape for p in self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)


# ---------------------------------------------------------------- verification

def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
                      n_coords: int = 50, seed: int = 0, atol: float = 1e-7) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` must rebuild the graph on every call. Coordinates are sampled
    uniformly over all parameters; every coordinate is used when there are
    fewer than ``n_coords``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    index = [(k, j) for k, p in enumerate(params) for j in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(index) > n_coords:
        picks = rng.choice(len(index), size=n_coords, replace=False)
        index = [index[i] for i in sorted(picks)]

    worst = 0.0
    for k, j in index:
        flat = params[k].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = loss_fn().item()
        flat[j] = orig - eps
        down = loss_fn().item()
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[k].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------- checkpoint files

MAGIC = b"CLTN"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        count_vals = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count_vals, offset=pos).reshape(shape)
        pos += 8 * count_vals
        out[name] = arr.astype(DTYPE)
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
