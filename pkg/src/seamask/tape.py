"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation in the library is expressed through the small
op set below. A `Tensor` wraps a numpy value plus the closures needed to push
gradients back to its parents; `Tensor.backward()` runs the tape in reverse
topological order. Layout convention for feature maps is NHWC.
"""

from __future__ import annotations

import numpy as np

_EPS = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-7}


def _prob_eps(dtype) -> float:
    return _EPS.get(np.dtype(dtype), 1e-12)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def backward(self) -> None:
        """Backpropagate from a scalar node through the whole graph."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def zero_grads(tensors) -> None:
    for t in tensors.values() if isinstance(tensors, dict) else tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; plain Python scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.value + b.value, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.value * b.value, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g * b.value, a.shape))
        _acc(b, _unbroadcast(g * a.value, b.shape))

    out._backward = bwd
    return out


_KINK_MONITOR: list | None = None


class kink_monitor:
    """Context manager recording the smallest |pre-activation| seen by relu().

    Central-difference gradient checks are only valid at points in general
    position; this measures how far the forward pass stays from the nearest
    ReLU kink so a check can verify its margin exceeds the FD step.
    """

    def __enter__(self):
        global _KINK_MONITOR
        self._prev = _KINK_MONITOR
        _KINK_MONITOR = [np.inf]
        return self

    def __exit__(self, *exc):
        global _KINK_MONITOR
        self.margin = _KINK_MONITOR[0]
        _KINK_MONITOR = self._prev
        return False


def relu(x) -> Tensor:
    x = as_tensor(x)
    if _KINK_MONITOR is not None and x.value.size:
        _KINK_MONITOR[0] = min(_KINK_MONITOR[0], float(np.abs(x.value).min()))
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0), (x,))

    def bwd(g):
        _acc(x, np.where(mask, g, 0))

    out._backward = bwd
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    p = np.empty_like(v)
    pos = v >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    p[~pos] = e / (1.0 + e)
    out = Tensor(p, (x,))

    def bwd(g):
        _acc(x, g * p * (1.0 - p))

    out._backward = bwd
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (x,))

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _acc(x, p * (g - dot))

    out._backward = bwd
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    out._backward = bwd
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.value.reshape(shape), (x,))

    def bwd(g):
        _acc(x, g.reshape(x.shape))

    out._backward = bwd
    return out


def squeeze_last(x) -> Tensor:
    """Drop a trailing singleton axis."""
    x = as_tensor(x)
    if x.shape[-1] != 1:
        raise ValueError(f"last axis is {x.shape[-1]}, expected 1")
    out = Tensor(x.value[..., 0], (x,))

    def bwd(g):
        _acc(x, g[..., None])

    out._backward = bwd
    return out


def gather_rows(x, idx) -> Tensor:
    """Select rows along axis 0; backward scatters."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.value[idx], (x,))

    def bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        _acc(x, gx)

    out._backward = bwd
    return out


def select_index_axis1(x, idx) -> Tensor:
    """x: (N, K, ...) and idx: (N,) -> (N, ...), picking x[n, idx[n]]."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = Tensor(x.value[rows, idx], (x,))

    def bwd(g):
        gx = np.zeros_like(x.value)
        gx[rows, idx] = g
        _acc(x, gx)

    out._backward = bwd
    return out


def select_channel(x, idx) -> Tensor:
    """x: (N, H, W, C) and idx: (N,) -> (N, H, W), picking each sample's channel."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = Tensor(x.value[rows, :, :, idx], (x,))

    def bwd(g):
        gx = np.zeros_like(x.value)
        gx[rows, :, :, idx] = g
        _acc(x, gx)

    out._backward = bwd
    return out


def tsum(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.asarray(x.value.sum()), (x,))

    def bwd(g):
        _acc(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    out._backward = bwd
    return out


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    out = Tensor(np.asarray(x.value.mean()), (x,))

    def bwd(g):
        _acc(x, np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=False))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# dense layers


def affine(x, w, b) -> Tensor:
    """x: (N, D) @ w: (D, M) + b: (M,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = Tensor(x.value @ w.value + b.value, (x, w, b))

    def bwd(g):
        _acc(x, g @ w.value.T)
        _acc(w, x.value.T @ g)
        _acc(b, g.sum(axis=0))

    out._backward = bwd
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution, NHWC. w: (kh, kw, Cin, Cout), b: (Cout,) or None."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[-1]}, weight {cin}")
    n, h, wd, _ = x.shape
    pad = (kh - 1) // 2 if padding == "same" else 0

    if kh == 1 and kw == 1 and stride == 1:
        wmat = w.value.reshape(cin, cout)
        val = x.value.reshape(-1, cin) @ wmat
        if b is not None:
            val = val + b.value
        out = Tensor(val.reshape(n, h, wd, cout), (x, w) + ((b,) if b is not None else ()))

        def bwd1(g):
            gm = g.reshape(-1, cout)
            _acc(x, (gm @ wmat.T).reshape(x.shape))
            _acc(w, (x.value.reshape(-1, cin).T @ gm).reshape(w.shape))
            if b is not None:
                _acc(b, gm.sum(axis=0))

        out._backward = bwd1
        return out

    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.value
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    col = np.empty((n, oh, ow, kh, kw, cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, :, i, j, :] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    mat = col.reshape(n * oh * ow, kh * kw * cin)
    wmat = w.value.reshape(kh * kw * cin, cout)
    val = mat @ wmat
    if b is not None:
        val = val + b.value
    out = Tensor(val.reshape(n, oh, ow, cout), (x, w) + ((b,) if b is not None else ()))

    def bwd(g):
        gm = g.reshape(n * oh * ow, cout)
        _acc(w, (mat.T @ gm).reshape(w.shape))
        if b is not None:
            _acc(b, gm.sum(axis=0))
        gcol = (gm @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcol[:, :, :, i, j, :]
        _acc(x, gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# spatial resizing


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    v = x.value.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))
    out = Tensor(v, (x,))

    def bwd(g):
        ge = np.broadcast_to(
            g[:, :, None, :, None, :] / (k * k), (n, h // k, k, w // k, k, c)
        )
        _acc(x, ge.reshape(x.shape).astype(x.dtype, copy=False))

    out._backward = bwd
    return out


def subsample2(x) -> Tensor:
    """Stride-2 subsampling (max over a 1x1 window with stride 2)."""
    x = as_tensor(x)
    out = Tensor(x.value[:, ::2, ::2, :], (x,))

    def bwd(g):
        gx = np.zeros_like(x.value)
        gx[:, ::2, ::2, :] = g
        _acc(x, gx)

    out._backward = bwd
    return out


def upsample_nearest2(x) -> Tensor:
    x = as_tensor(x)
    v = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)
    out = Tensor(v, (x,))

    def bwd(g):
        n, h2, w2, c = g.shape
        _acc(x, g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    out._backward = bwd
    return out


def linear_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """1-D bilinear interpolation matrix, half-pixel centers, replicated border."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.intp)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _apply_rows(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(o, h) matrix applied over axis 1 of (N, h, W, C)."""
    n, h, w, c = x.shape
    y = m @ x.transpose(1, 0, 2, 3).reshape(h, -1)
    return y.reshape(m.shape[0], n, w, c).transpose(1, 0, 2, 3)


def _apply_cols(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(o, w) matrix applied over axis 2 of (N, H, w, C)."""
    n, h, w, c = x.shape
    y = m @ x.transpose(2, 0, 1, 3).reshape(w, -1)
    return y.reshape(m.shape[0], n, h, c).transpose(1, 2, 0, 3)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize to (out_h, out_w), align-corners=False."""
    x = as_tensor(x)
    _, h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x
    mh = linear_resize_matrix(h, out_h, dtype=x.dtype)
    mw = linear_resize_matrix(w, out_w, dtype=x.dtype)
    out = Tensor(_apply_cols(mw, _apply_rows(mh, x.value)), (x,))

    def bwd(g):
        _acc(x, _apply_cols(mw.T, _apply_rows(mh.T, g)))

    out._backward = bwd
    return out


def resize_spatial(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear when upsampling, non-overlapping average pooling when downsampling."""
    x = as_tensor(x)
    _, h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x
    if out_h <= h and out_w <= w:
        if h % out_h or w % out_w or h // out_h != w // out_w:
            raise ValueError(f"average-pool resize needs one integer ratio: {h}x{w} -> {out_h}x{out_w}")
        return avg_pool2d(x, h // out_h)
    if out_h >= h and out_w >= w:
        return bilinear_resize(x, out_h, out_w)
    raise ValueError(f"mixed up/down resize unsupported: {h}x{w} -> {out_h}x{out_w}")


# ---------------------------------------------------------------------------
# losses (probability-space; inputs arrive through softmax/sigmoid ops)


def nll_from_probs(probs, labels) -> Tensor:
    """Mean negative log probability of the true class.

    probs: (..., K) probabilities; labels: (...) integer classes.
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    k = probs.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class labels must lie in [0, {k - 1}]")
    flat_p = probs.value.reshape(-1, k)
    flat_l = labels.reshape(-1)
    n = flat_l.size
    eps = _prob_eps(probs.dtype)
    p_true = flat_p[np.arange(n), flat_l]
    out = Tensor(np.asarray(-np.log(np.maximum(p_true, eps)).mean()), (probs,))

    def bwd(g):
        gp = np.zeros_like(flat_p)
        live = p_true > eps
        gp[np.arange(n)[live], flat_l[live]] = -float(g) / (n * p_true[live])
        _acc(probs, gp.reshape(probs.shape))

    out._backward = bwd
    return out


def bce_elementwise(pred, target) -> Tensor:
    """Per-element binary cross-entropy between probabilities and {0,1} targets."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"bce size mismatch: pred {pred.shape}, target {t.shape}")
    eps = _prob_eps(pred.dtype)
    p = np.clip(pred.value, eps, 1.0 - eps)
    out = Tensor(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)), (pred,))

    def bwd(g):
        live = (pred.value > eps) & (pred.value < 1.0 - eps)
        gp = np.where(live, (p - t) / (p * (1.0 - p)) * g, 0.0)
        _acc(pred, gp.astype(pred.dtype, copy=False))

    out._backward = bwd
    return out


def bce_from_probs(pred, target) -> Tensor:
    """Mean binary cross-entropy between probabilities and {0,1} targets."""
    return tmean(bce_elementwise(pred, target))


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) values; reduce separately."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    d = pred.value - t
    small = np.abs(d) < beta
    v = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    out = Tensor(v, (pred,))

    def bwd(g):
        _acc(pred, g * np.where(small, d / beta, np.sign(d)))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# RoI-Align


def roi_align(feature, boxes, stride: float, out_size: int = 14, sampling: int = 2) -> Tensor:
    """Continuous-coordinate RoI-Align of one feature level.

    feature: (H, W, C) or (1, H, W, C); boxes: (N, 4) as (x, y, w, h) in image
    coordinates. Each output bin averages sampling x sampling bilinear samples;
    sample positions are clamped to the feature border (replicate).
    """
    feature = as_tensor(feature)
    fv = feature.value
    squeeze_in = fv.ndim == 4
    if squeeze_in:
        fv = fv[0]
    h, w, c = fv.shape
    boxes = np.asarray(boxes, dtype=fv.dtype)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError("boxes must be (N, 4) xywh")
    if np.any(boxes[:, 2] < 1) or np.any(boxes[:, 3] < 1):
        raise ValueError("degenerate box: w and h must be >= 1")
    n = boxes.shape[0]
    s = sampling

    bx = boxes[:, 0] / stride
    by = boxes[:, 1] / stride
    bw = boxes[:, 2] / stride / out_size
    bh = boxes[:, 3] / stride / out_size
    grid = np.arange(out_size, dtype=fv.dtype)
    sub = (np.arange(s, dtype=fv.dtype) + 0.5) / s
    # (N, out, s) continuous sample coordinates along each axis
    ys = by[:, None, None] + (grid[None, :, None] + sub[None, None, :]) * bh[:, None, None]
    xs = bx[:, None, None] + (grid[None, :, None] + sub[None, None, :]) * bw[:, None, None]

    def split(coords, size):
        p = coords - 0.5
        i0 = np.floor(p).astype(np.intp)
        frac = p - i0
        lo = np.clip(i0, 0, size - 1)
        hi = np.clip(i0 + 1, 0, size - 1)
        return lo, hi, frac

    ylo, yhi, fy = split(ys, h)
    xlo, xhi, fx = split(xs, w)

    # broadcast to (N, out, s, out, s)
    ylo_b = ylo[:, :, :, None, None]
    yhi_b = yhi[:, :, :, None, None]
    fy_b = fy[:, :, :, None, None]
    xlo_b = xlo[:, None, None, :, :]
    xhi_b = xhi[:, None, None, :, :]
    fx_b = fx[:, None, None, :, :]
    shp = (n, out_size, s, out_size, s)
    corners = [
        (np.broadcast_to(ylo_b, shp), np.broadcast_to(xlo_b, shp), (1 - fy_b) * (1 - fx_b)),
        (np.broadcast_to(ylo_b, shp), np.broadcast_to(xhi_b, shp), (1 - fy_b) * fx_b),
        (np.broadcast_to(yhi_b, shp), np.broadcast_to(xlo_b, shp), fy_b * (1 - fx_b)),
        (np.broadcast_to(yhi_b, shp), np.broadcast_to(xhi_b, shp), fy_b * fx_b),
    ]
    acc = np.zeros(shp + (c,), dtype=fv.dtype)
    for yi, xi, wt in corners:
        acc += fv[yi, xi, :] * np.broadcast_to(wt, shp)[..., None]
    val = acc.reshape(n, out_size, s, out_size, s, c).mean(axis=(2, 4))
    out = Tensor(val, (feature,))

    def bwd(g):
        gf = np.zeros_like(fv)
        ge = np.broadcast_to(
            g[:, :, None, :, None, :] / (s * s), shp + (c,)
        )
        for yi, xi, wt in corners:
            contrib = ge * np.broadcast_to(wt, shp)[..., None]
            np.add.at(gf, (yi.ravel(), xi.ravel()), contrib.reshape(-1, c))
        _acc(feature, gf[None] if squeeze_in else gf)

    out._backward = bwd
    return out
