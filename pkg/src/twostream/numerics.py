"""Minimal reverse-mode differentiable tensor operations.

Everything the model needs and nothing more: stride-1 same-padding
convolutions, a handful of elementwise/shape ops, the training losses, and
momentum SGD.  Forward/backward run in float32 in production; ``grad_check``
re-runs ops in float64 against central finite differences.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NumericsError(RuntimeError):
    pass


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode backprop.

    ``_backward`` maps the incoming output gradient to a tuple of gradients
    aligned with ``_parents``.  Leaf tensors created with
    ``requires_grad=True`` accumulate into ``.grad``.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward=None,
                 name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _needs_grad(self):
        return self.requires_grad or any(p._needs_grad() for p in self._parents)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad and not t._parents:
                t.grad = g.copy() if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p._needs_grad():
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # small conveniences used when composing losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _op(data, parents, backward):
    return Tensor(data, parents=parents, backward=backward)


# ---------------------------------------------------------------------------
# shape / arithmetic ops

def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape and x.data.size != 1 and y.data.size != 1:
        raise ShapeError(f"add: incompatible shapes {x.shape} vs {y.shape}")

    def reduce_to(g, shape):
        return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)

    def bwd(g):
        return reduce_to(g, x.data.shape), reduce_to(g, y.data.shape)

    return _op(x.data + y.data, (x, y), bwd)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _op(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x, c):
    """Elementwise product with a constant array (no gradient through c)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    return _op(x.data * c, (x,), lambda g: (g * c,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x, idx):
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _op(x.data[idx], (x,), bwd)


def tsum(x):
    x = as_tensor(x)
    return _op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def tlog(x, floor=1e-30):
    x = as_tensor(x)
    xc = np.maximum(x.data, floor)
    return _op(np.log(xc), (x,), lambda g: (g / xc * (x.data >= floor),))


# ---------------------------------------------------------------------------
# convolutions and resampling

def conv2d(x, w):
    """Same-size 2-d convolution: x (c_in,h,w), w (c_out,c_in,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 3-d input and 4-d kernels, "
                         f"got {x.shape} and {w.shape}")
    co, ci, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if ci != x.shape[0]:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, "
                         f"kernels expect {ci}")

    y = kernels.conv2d_forward(x.data, w.data)
    return _op(y, (x, w), lambda g: kernels.conv2d_backward(
        x.data, w.data, np.ascontiguousarray(g, dtype=x.dtype)))


def conv1d(x, k):
    """Same-length 1-d convolution with an odd-length kernel, zero padded."""
    x, k = as_tensor(x), as_tensor(k)
    if k.data.ndim != 1 or k.shape[0] % 2 == 0:
        raise ShapeError(f"conv1d: kernel must be 1-d with odd length, got {k.shape}")
    y = kernels.conv1d_forward(x.data, k.data)
    return _op(y, (x, k), lambda g: kernels.conv1d_backward(
        x.data, k.data, np.ascontiguousarray(g, dtype=x.dtype)))


def bias_add(x, b):
    """Add a per-channel bias b (c,) to a (c,h,w) map."""
    x, b = as_tensor(x), as_tensor(b)
    if b.shape != (x.shape[0],):
        raise ShapeError(f"bias_add: bias {b.shape} vs {x.shape[0]} channels")
    return _op(x.data + b.data[:, None, None], (x, b),
               lambda g: (g, g.sum(axis=(1, 2))))


def avg_pool2(x):
    """2x2 average pooling (both spatial dims must be even)."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    y = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx.astype(x.dtype),)

    return _op(y, (x,), bwd)


def _upsample_coords(n_out, n_in):
    # align-corners-false: sample centers map to src = (i + 0.5) * scale - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample(x, out_h, out_w):
    """Bilinear upsampling of a (c,h,w) map to (c,out_h,out_w)."""
    x = as_tensor(x)
    c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller "
                         f"than source {h}x{w}")
    y0, y1, fy = _upsample_coords(out_h, h)
    x0, x1, fx = _upsample_coords(out_w, w)
    fy = fy.astype(x.dtype)[None, :, None]
    fx = fx.astype(x.dtype)[None, None, :]

    def gather(yi, xi):
        return x.data[:, yi[:, None], xi[None, :]]

    y = (gather(y0, x0) * (1 - fy) * (1 - fx)
         + gather(y0, x1) * (1 - fy) * fx
         + gather(y1, x0) * fy * (1 - fx)
         + gather(y1, x1) * fy * fx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        ci = np.arange(c)[:, None, None]
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                np.add.at(gx, (ci, yi[None, :, None], xi[None, None, :]), g * wy * wx)
        return (gx,)

    return _op(y, (x,), bwd)


def head_view(m, k):
    """Rearrange a per-anchor head map (per*k, h, w) into (h*w*k, per) rows.

    Channel layout: anchor slot s owns channels [per*s, per*(s+1)); row order
    is (y*w + x)*k + s, matching the anchor grid enumeration.
    """
    m = as_tensor(m)
    ck, h, w = m.shape
    if ck % k:
        raise ShapeError(f"head_view: {ck} channels not divisible by k={k}")
    per = ck // k
    y = m.data.reshape(k, per, h, w).transpose(2, 3, 0, 1).reshape(h * w * k, per)

    def bwd(g):
        return (g.reshape(h, w, k, per).transpose(2, 3, 0, 1).reshape(ck, h, w),)

    return _op(y, (m,), bwd)


# ---------------------------------------------------------------------------
# activations and softmax

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _op(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _op(y, (x,), lambda g: (g * y * (1 - y),))


def softmax_channels(x):
    """Channel softmax of a (2,h,w) fg/bg logit map."""
    x = as_tensor(x)
    if x.data.ndim != 3 or x.shape[0] != 2:
        raise ShapeError(f"softmax_channels: expected (2,h,w), got {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

    return _op(y, (x,), bwd)


# ---------------------------------------------------------------------------
# losses

PROB_EPS = 1e-7


def pixel_cross_entropy(fg_prob, target, weight):
    """Weighted mean binary cross-entropy over pixels with weight > 0.

    ``target`` is a binary map, ``weight`` a nonnegative map (0 = ignored).
    An all-zero weight map yields a zero loss whose ``no_supervision``
    attribute is set.
    """
    fg_prob = as_tensor(fg_prob)
    target = np.asarray(target, dtype=fg_prob.dtype)
    weight = np.asarray(weight, dtype=fg_prob.dtype)
    if not (fg_prob.shape == target.shape == weight.shape):
        raise ShapeError(f"pixel_cross_entropy: shapes differ "
                         f"{fg_prob.shape}/{target.shape}/{weight.shape}")
    if np.any(weight < 0):
        raise ValueError("pixel_cross_entropy: negative weights")
    wsum = float(weight.sum())
    if wsum == 0.0:
        out = _op(np.asarray(0.0, dtype=fg_prob.dtype), (fg_prob,),
                  lambda g: (np.zeros_like(fg_prob.data),))
        out.no_supervision = True
        return out

    p = np.clip(fg_prob.data, PROB_EPS, 1.0 - PROB_EPS)
    inside = (fg_prob.data > PROB_EPS) & (fg_prob.data < 1.0 - PROB_EPS)
    ce = -(target * np.log(p) + (1 - target) * np.log(1 - p))
    loss = np.asarray((weight * ce).sum() / wsum)

    def bwd(g):
        dp = weight * (-target / p + (1 - target) / (1 - p)) / wsum
        return (g * dp * inside,)

    out = _op(loss, (fg_prob,), bwd)
    out.no_supervision = False
    return out


LABEL_NEGATIVE = -1
LABEL_IGNORE = -2


def focal_loss(cls_logits, anchor_labels, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss over per-anchor class logits.

    ``cls_logits``: (A, c).  ``anchor_labels``: length-A ints — class id for
    positives, -1 negative, -2 ignore.  Normalized by positive count (min 1).
    """
    cls_logits = as_tensor(cls_logits)
    labels = np.asarray(anchor_labels, dtype=np.int64)
    a, c = cls_logits.shape
    if labels.shape != (a,):
        raise ShapeError(f"focal_loss: {labels.shape} labels for {a} anchors")

    dtype = cls_logits.dtype
    t = np.zeros((a, c), dtype=dtype)
    pos = labels >= 0
    t[np.nonzero(pos)[0], labels[pos]] = 1.0
    valid = (labels != LABEL_IGNORE)[:, None].astype(dtype)
    norm = max(1, int(pos.sum()))

    p = _sigmoid(cls_logits.data)
    pt = np.where(t == 1, p, 1 - p)
    at = np.where(t == 1, alpha, 1 - alpha).astype(dtype)
    pt = np.clip(pt, PROB_EPS, 1.0)
    per = -at * (1 - pt) ** gamma * np.log(pt)
    loss = np.asarray((per * valid).sum() / norm)

    def bwd(g):
        if gamma == 0.0:
            dpt = -at / pt
        else:
            dpt = at * (gamma * (1 - pt) ** (gamma - 1) * np.log(pt)
                        - (1 - pt) ** gamma / pt)
        dz = dpt * np.where(t == 1, 1.0, -1.0) * p * (1 - p)
        return (g * dz * valid / norm,)

    return _op(loss, (cls_logits,), bwd)


def smooth_l1(pred, target):
    """Summed Huber loss: per-element 0.5 x^2 for |x|<1, else |x|-0.5."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    loss = np.asarray(per.sum())

    def bwd(g):
        return (g * np.where(ad < 1.0, d, np.sign(d)),)

    return _op(loss, (pred,), bwd)


# ---------------------------------------------------------------------------
# parameters and optimization

class ParamStore:
    """Named parameter tensors with momentum buffers for SGD."""

    def __init__(self):
        self.params = {}
        self.momentum = {}

    def add(self, name, data):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self):
        """Checkpointable view: parameters plus momentum buffers."""
        out = {}
        for name in self.names():
            out[name] = self.params[name].data
            out["opt." + name + ".momentum"] = self.momentum[name]
        return out

    def load_state_arrays(self, arrays):
        for name in self.names():
            src = arrays[name]
            if src.shape != self.params[name].data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape "
                                 f"{src.shape} vs expected {self.params[name].data.shape}")
            self.params[name].data = src.astype(np.float32).copy()
            key = "opt." + name + ".momentum"
            if key in arrays:
                self.momentum[name] = arrays[key].astype(np.float32).copy()


def sgd_step(store, lr, momentum=0.9):
    """v <- m*v + g; p <- p - lr*v; gradients zeroed afterwards."""
    for name in store.names():
        t = store.params[name]
        g = t.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        v = store.momentum[name]
        v *= momentum
        v += g
        t.data -= lr * v
    store.zero_grad()
    return store


# ---------------------------------------------------------------------------
# verification

def grad_check(fn, inputs, eps=1e-4, rng=None):
    """Max scale-relative error between analytic and central-difference grads.

    ``fn`` maps the given tensors to an output tensor; non-scalar outputs are
    contracted with a fixed random projection so a single scalar is probed.
    Everything runs in float64 regardless of the inputs' dtype.
    """
    rng = rng or np.random.default_rng(0)
    ins = [Tensor(t.data.astype(np.float64), requires_grad=True)
           for t in inputs]
    out = fn(*ins)
    if out.data.size == 1:
        proj = np.ones_like(out.data)
    else:
        proj = rng.standard_normal(out.data.shape)

    def scalar(ts):
        o = fn(*ts)
        return float((o.data * proj).sum())

    out.backward(proj)
    worst = 0.0
    for t in ins:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fdflat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar(ins)
            flat[i] = orig - eps
            lo = scalar(ins)
            flat[i] = orig
            fdflat[i] = (hi - lo) / (2 * eps)
        denom = max(1.0, float(np.abs(fd).max()))
        worst = max(worst, float(np.abs(analytic - fd).max()) / denom)
    return worst
