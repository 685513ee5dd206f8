"""Dense f64 tensors with tape-based reverse-mode differentiation.

Everything downstream (geometry, attention, the detector) computes on
:class:`Tensor`. Gradients are recorded on an explicit :class:`Graph` tape;
with no graph active, operations run in inference mode and record nothing.

Coordinate convention for :func:`bilinear_sample` (shared by all modules):
(x, y) with x rightward and y downward, pixel centers at
((j + 0.5) / W, (i + 0.5) / H), zero padding outside the unit square.
"""

from __future__ import annotations

import math
import struct

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "tensor",
    "zeros",
    "randn",
    "add",
    "mul",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "inverse_sigmoid",
    "softmax",
    "layer_norm",
    "bilinear_sample",
    "conv2d",
    "concat",
    "stack",
    "save_weights",
    "load_weights",
    "gradcheck",
]

_EPS_INV_SIGMOID = 1e-6
_EPS_LAYER_NORM = 1e-5


class Tensor:
    """N-D float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(self ** -1.0, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- method aliases ---------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Graph:
    """Ordered tape of executed operations, replayed in reverse by backward().

    A Graph instance must stay confined to one thread. Use as a context
    manager around the forward pass; ops record onto the innermost active
    graph. With no graph active, nothing is recorded.
    """

    def __init__(self):
        self._tape: list[_Node] = []

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._tape)

    def _record(self, node: _Node):
        self._tape.append(node)


_graph_stack: list[Graph] = []


def _active_graph():
    return _graph_stack[-1] if _graph_stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, parents, backward_fn) -> Tensor:
    """Wrap op output, recording a tape node when gradients are live."""
    g = _active_graph()
    needs = g is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        g._record(_Node(out, parents, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def backward(graph: Graph, loss: Tensor):
    """Accumulate adjoints of `loss` into .grad of every requires_grad tensor.

    Traverses the tape in exact reverse execution order. Repeated calls
    accumulate; call zero_grad on the leaves to reset.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph._tape):
        g_out = adjoint.get(id(node.out))
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for p, gp in zip(node.parents, grads):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gp
            else:
                adjoint[key] = gp
                touched[key] = p
    for key, t in touched.items():
        if not t.requires_grad:
            continue
        g = adjoint[key]
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            t.grad = t.grad + g


# -- constructors ----------------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, scale: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


# -- elementwise / arithmetic ops -------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.data)

    def bwd(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), bwd)


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g * np.cos(a.data),)

    return _make(np.sin(a.data), (a,), bwd)


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g * -np.sin(a.data),)

    return _make(np.cos(a.data), (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def inverse_sigmoid(a, eps: float = _EPS_INV_SIGMOID) -> Tensor:
    """Logit with input clamped to [eps, 1-eps]; flat gradient in the clamp."""
    a = _as_tensor(a)
    p = np.clip(a.data, eps, 1.0 - eps)
    out = np.log(p) - np.log1p(-p)
    inside = (a.data > eps) & (a.data < 1.0 - eps)

    def bwd(g):
        return (g * inside / (p * (1.0 - p)),)

    return _make(out, (a,), bwd)


# -- reductions / shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.transpose(axes)

    def bwd(g):
        if axes is None:
            return (g.transpose(),)
        inv = np.argsort(axes)
        return (g.transpose(inv),)

    return _make(out, (a,), bwd)


def take(a, idx) -> Tensor:
    """Basic/fancy indexing; backward scatter-adds into the source."""
    a = _as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), bwd)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        pieces = np.split(g, len(parts), axis=axis)
        return tuple(p.reshape(parts[0].shape) for p in pieces)

    return _make(out, tuple(parts), bwd)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = g @ bd.T if bd.ndim == 2 else None
            gb = np.outer(ad, g)
            return ga, gb
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bwd)


def linear(x, W, b=None) -> Tensor:
    """y = x W + b over the trailing axis of x."""
    x, W = _as_tensor(x), _as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(
            f"linear: trailing dim {x.shape[-1]} does not match W rows {W.shape[0]}")
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(x2, W)
    if b is not None:
        y = add(y, b)
    if x.ndim != 2:
        y = reshape(y, lead + (W.shape[1],))
    return y


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    x = _as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = exp(add(x, -shift))
    return mul(e, power(tsum(e, axis=axis, keepdims=True), -1.0))


def layer_norm(x, gamma, beta, eps: float = _EPS_LAYER_NORM) -> Tensor:
    """Normalize over the trailing axis, then affine."""
    x = _as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    xc = add(x, mul(mu, -1.0))
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


# -- sampling / convolution ---------------------------------------------------

def bilinear_sample(feat, pts) -> Tensor:
    """Sample feat[C,H,W] at pts[N,2] normalized (x, y) locations.

    Pixel centers sit at ((j+0.5)/W, (i+0.5)/H); out-of-range neighbors
    contribute zero. Gradients flow to both feat and pts.
    """
    feat, pts = _as_tensor(feat), _as_tensor(pts)
    if np.isnan(pts.data).any():
        raise ValueError("bilinear_sample: NaN coordinates")
    C, H, W = feat.shape
    u = pts.data[:, 0] * W - 0.5
    v = pts.data[:, 1] * H - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    F = feat.data.reshape(C, -1)

    corners = []  # (weight, d w/d fx, d w/d fy, flat index, validity)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        wx = fx if dx else (1.0 - fx)
        wy = fy if dy else (1.0 - fy)
        dwx = (1.0 if dx else -1.0)
        dwy = (1.0 if dy else -1.0)
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(valid, yi * W + xi, 0)
        corners.append((wx * wy, dwx * wy, wx * dwy, idx, valid))

    out = np.zeros((pts.shape[0], C))
    vals = []
    for w, _, _, idx, valid in corners:
        val = F[:, idx].T * valid[:, None]
        vals.append(val)
        out += w[:, None] * val

    def bwd(g):
        g_feat = np.zeros_like(F)
        g_u = np.zeros(pts.shape[0])
        g_v = np.zeros(pts.shape[0])
        for (w, dwx_wy, wx_dwy, idx, valid), val in zip(corners, vals):
            contrib = (g * (w * valid)[:, None]).T  # [C, N]
            np.add.at(g_feat.T, idx, contrib.T)
            gv = (g * val).sum(axis=1)
            g_u += dwx_wy * gv
            g_v += wx_dwy * gv
        g_pts = np.stack([g_u * W, g_v * H], axis=1)
        return g_feat.reshape(feat.shape), g_pts

    return _make(out, (feat, pts), bwd)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x[Cin,H,W] * w[Cout,Cin,kh,kw] -> [Cout,Ho,Wo]."""
    x, w = _as_tensor(x), _as_tensor(w)
    Cin, H, W = x.shape
    Cout, Cin2, kh, kw = w.shape
    if Cin != Cin2:
        raise ValueError(f"conv2d: channel mismatch {Cin} vs {Cin2}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))

    # im2col gather indices
    i0 = np.repeat(np.arange(kh), kw)
    j0 = np.tile(np.arange(kw), kh)
    i1 = stride * np.repeat(np.arange(Ho), Wo)
    j1 = stride * np.tile(np.arange(Wo), Ho)
    ii = i0[:, None] + i1[None, :]          # [kh*kw, Ho*Wo]
    jj = j0[:, None] + j1[None, :]
    cols = xp[:, ii, jj].reshape(Cin * kh * kw, Ho * Wo)

    wmat = w.data.reshape(Cout, -1)
    out = (wmat @ cols).reshape(Cout, Ho, Wo)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[:, None, None]

    def bwd(g):
        g2 = g.reshape(Cout, -1)
        g_w = (g2 @ cols.T).reshape(w.shape)
        g_cols = (wmat.T @ g2).reshape(Cin, kh * kw, Ho * Wo)
        g_xp = np.zeros_like(xp)
        np.add.at(g_xp, (slice(None), ii, jj), g_cols)
        g_x = g_xp[:, pad:pad + H, pad:pad + W] if pad else g_xp
        g_b = g.sum(axis=(1, 2)) if b is not None else None
        if b is not None:
            return g_x, g_w, g_b
        return g_x, g_w

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bwd)


# -- weight snapshots ---------------------------------------------------------

_MAGIC = b"RTRW"
_VERSION = 1


def save_weights(path, named: dict[str, Tensor]):
    """Flat binary snapshot: magic, version u32, count u32, then per tensor
    name length u32 + UTF-8 name, rank u32, extents u64, little-endian f64."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(named)))
        for name, t in named.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.ndim))
            for ext in t.shape:
                f.write(struct.pack("<Q", ext))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_weights(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a weight snapshot (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = Tensor(data.copy())
    return out


# -- gradient checking --------------------------------------------------------

def gradcheck(fn, inputs, rng: np.random.Generator, h: float = 1e-5,
              n_dirs: int = 2) -> float:
    """Central finite-difference check of fn(*inputs) -> scalar Tensor.

    Compares the analytic directional derivative against
    (f(x+hv) - f(x-hv)) / 2h along `n_dirs` random unit directions spanning
    all inputs. Returns the worst relative error.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        loss = fn(*inputs)
    backward(g, loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
             for t in inputs]

    worst = 0.0
    saved = [t.data.copy() for t in inputs]
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(t.shape) for t in inputs]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))

        for t, base, d in zip(inputs, saved, dirs):
            t.data = base + h * d
        f_plus = float(fn(*inputs).data)
        for t, base, d in zip(inputs, saved, dirs):
            t.data = base - h * d
        f_minus = float(fn(*inputs).data)
        for t, base in zip(inputs, saved):
            t.data = base

        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
