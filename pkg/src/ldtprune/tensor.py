"""Dense float32 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; a :class:`Tape` records every differentiable
operation applied while it is active.  :func:`backward` replays the tape in
reverse and accumulates gradients for every reachable tensor.  Tensors are
immutable after creation; a tape is confined to one thread.

The supported op set is deliberately small: conv2d, relu, 2x2 max-pool,
nearest x2 upsample, add/sub/mul, scalar ops, sum/mean, matmul and
masked_spatial_max, plus a few fused loss kernels.
"""

import numpy as np

from .errors import EmptyMaskError, ShapeError, TapeError


class Tensor:
    """Immutable dense array of float32 values, row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def check_finite(self):
        """Debug check: raise if any value is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("tensor contains non-finite values")

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


_TAPE_STACK = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction: every node's inputs precede it.
    """

    def __init__(self):
        self.nodes = []  # (outputs tuple, inputs tuple, backward fn)
        self._attached = set()
        self._watched = []

    def watch(self, t):
        """Mark a tensor (typically a parameter) as differentiable."""
        self._attached.add(id(t))
        self._watched.append(t)

    def is_attached(self, t):
        return id(t) in self._attached

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(outputs, inputs, backward_fn):
    """Record a node on the active tape if any input is attached.

    ``backward_fn`` receives one gradient array per output (zeros where an
    output was unused) and returns one gradient array (or None) per input.
    """
    tape = active_tape()
    if tape is None:
        return
    if not any(isinstance(x, Tensor) and tape.is_attached(x) for x in inputs):
        return
    for o in outputs:
        tape._attached.add(id(o))
    tape.nodes.append((tuple(outputs), tuple(inputs), backward_fn))


class GradStore:
    """Gradient lookup produced by :func:`backward`.

    Tensors never touched by the backward sweep map to zeros.
    """

    def __init__(self, grads, keep):
        self._grads = grads
        self._keep = keep  # keeps tensors alive so id() keys stay valid

    def get(self, t):
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.data.shape, dtype=np.float32)
        return g


def backward(tape, loss):
    """Reverse-accumulate gradients of a scalar loss over the tape."""
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise TapeError("loss must be a scalar tensor")
    if not tape.is_attached(loss):
        raise TapeError("loss was not recorded on this tape")
    grads = {id(loss): np.ones((), dtype=np.float32)}
    keep = [loss]
    for outputs, inputs, fn in reversed(tape.nodes):
        if not any(id(o) in grads for o in outputs):
            continue
        gouts = [
            grads.get(id(o), np.zeros(o.data.shape, dtype=np.float32))
            for o in outputs
        ]
        gins = fn(*gouts)
        for t, g in zip(inputs, gins):
            if g is None or not isinstance(t, Tensor):
                continue
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = np.asarray(g, dtype=np.float32)
            else:
                grads[id(t)] = acc + np.asarray(g, dtype=np.float32)
            keep.append(t)
    return GradStore(grads, keep)


# ---------------------------------------------------------------------------
# elementwise / scalar ops
# ---------------------------------------------------------------------------

def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


def add(a, b):
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    record((out,), (a, b), lambda g: (g, g))
    return out


def sub(a, b):
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    record((out,), (a, b), lambda g: (g, -g))
    return out


def mul(a, b):
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    record((out,), (a, b), lambda g: (g * b.data, g * a.data))
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * np.float32(c))
    record((out,), (a,), lambda g: (g * np.float32(c),))
    return out


def neg(a):
    return scale(a, -1.0)


def mul_const(a, c):
    """Elementwise multiply by a constant array (broadcastable)."""
    cv = np.asarray(c, dtype=np.float32)
    out = Tensor(a.data * cv)
    if out.data.shape != a.data.shape:
        raise ShapeError("mul_const must not change the shape")
    record((out,), (a,), lambda g: (g * cv,))
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    record((out,), (a,), lambda g: (g * mask,))
    return out


def absolute(a):
    out = Tensor(np.abs(a.data))
    sgn = np.sign(a.data)
    record((out,), (a,), lambda g: (g * sgn,))
    return out


def tsum(a):
    out = Tensor(np.float32(a.data.sum(dtype=np.float64)))
    shape = a.data.shape
    record((out,), (a,), lambda g: (np.full(shape, g, dtype=np.float32),))
    return out


def tmean(a):
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def add_n(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    record(
        (out,),
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )
    return out


def transpose(a):
    out = Tensor(a.data.T.copy())
    record((out,), (a,), lambda g: (g.T.copy(),))
    return out


# ---------------------------------------------------------------------------
# indexing / stacking
# ---------------------------------------------------------------------------

def batch_select(x, i):
    """Select item i along axis 0."""
    out = Tensor(x.data[i].copy())

    def bwd(g):
        gx = np.zeros(x.data.shape, dtype=np.float32)
        gx[i] = g
        return (gx,)

    record((out,), (x,), bwd)
    return out


def stack0(tensors):
    """Stack tensors of equal shape along a new leading axis."""
    out = Tensor(np.stack([t.data for t in tensors], axis=0))

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    record((out,), tuple(tensors), bwd)
    return out


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------

def _im2col(xd, kh, kw, stride, pad):
    n, c, h, w = xd.shape
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: input {h}x{w} with k={kh}x{kw} pad={pad} "
            f"stride={stride} does not tile evenly"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # n,c,ho,wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _conv_forward(xd, wd, bd, stride, pad):
    n = xd.shape[0]
    cout, cin, kh, kw = wd.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, pad)
    out = cols @ wd.reshape(cout, -1).T
    if bd is not None:
        out += bd
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, ho, wo


def conv2d(x, w, b, stride=1, pad=0):
    """2-D cross-correlation, NCHW layout.

    Output spatial size is (H + 2*pad - kH)/stride + 1; the division must be
    exact.  Differentiable w.r.t. input, weight and bias.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: expected 4-D input and weight")
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel dims must be odd")
    if pad < 0 or stride < 1:
        raise ShapeError("conv2d: need pad >= 0 and stride >= 1")
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, weight expects {cin}"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")

    out_d, cols, ho, wo = _conv_forward(
        x.data, w.data, None if b is None else b.data, stride, pad
    )
    out = Tensor(out_d)
    n = x.shape[0]
    h, wdim = x.shape[2], x.shape[3]

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = (gmat.T @ cols).reshape(w.data.shape)
        db = None if b is None else gmat.sum(axis=0)
        # dx: full correlation of the (zero-stuffed) output gradient with the
        # spatially flipped, channel-transposed kernel.
        if stride > 1:
            gs = np.zeros(
                (n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                dtype=np.float32,
            )
            gs[:, :, ::stride, ::stride] = g
        else:
            gs = g
        wt = np.ascontiguousarray(
            w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        )
        dx, _, dh, dwid = _conv_forward(gs, wt, None, 1, kh - 1 - pad)
        assert (dh, dwid) == (h, wdim)
        if b is None:
            return (dx, dw)
        return (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, b)
    record((out,), inputs, bwd)
    return out


def maxpool2x2(x):
    """2x2 max pooling with stride 2; ties route gradient to the lowest
    linear index inside the window."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: odd spatial dims {h}x{w}")
    xr = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = xr.argmax(axis=-1)  # argmax returns the first max: lowest index
    out = Tensor(np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = (
            gr.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    record((out,), (x,), bwd)
    return out


def upsample2x(x):
    """Nearest-neighbour x2 spatial upsampling."""
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    record((out,), (x,), bwd)
    return out


def masked_spatial_max(features, mask):
    """Per-channel max over positions where mask is 1.

    ``features`` is [C,H,W]; ``mask`` is an [H,W] 0/1 array (plain numpy).
    Gradient routes to the argmax cell per channel; ties break toward the
    lowest linear index i*W + j.
    """
    if features.ndim != 3:
        raise ShapeError("masked_spatial_max: features must be [C,H,W]")
    c, h, w = features.shape
    m = np.asarray(mask)
    if m.shape != (h, w):
        raise ShapeError(
            f"masked_spatial_max: mask {m.shape} vs features {h}x{w}"
        )
    mb = m != 0
    if not mb.any():
        raise EmptyMaskError("mask selects no cells")
    flat = features.data.reshape(c, h * w)
    masked = np.where(mb.reshape(1, h * w), flat, -np.inf)
    idx = masked.argmax(axis=1)
    out = Tensor(flat[np.arange(c), idx])

    def bwd(g):
        gx = np.zeros((c, h * w), dtype=np.float32)
        gx[np.arange(c), idx] = g
        return (gx.reshape(c, h, w),)

    record((out,), (features,), bwd)
    return out


# ---------------------------------------------------------------------------
# fused loss kernels
# ---------------------------------------------------------------------------

def bce_logits_sum(logits, targets):
    """Sum of binary cross-entropy with logits against constant targets."""
    t = np.asarray(targets, dtype=np.float32)
    if t.shape != logits.data.shape:
        raise ShapeError("bce_logits_sum: target shape mismatch")
    x = logits.data
    val = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.float32(val.sum(dtype=np.float64)))

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
        return ((sig - t).astype(np.float32) * g,)

    record((out,), (logits,), bwd)
    return out


def smooth_l1_sum(pred, targets):
    """Sum of smooth-L1 (Huber, delta=1) residuals against constant targets."""
    t = np.asarray(targets, dtype=np.float32)
    if t.shape != pred.data.shape:
        raise ShapeError("smooth_l1_sum: target shape mismatch")
    d = pred.data - t
    ad = np.abs(d)
    val = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    out = Tensor(np.float32(val.sum(dtype=np.float64)))

    def bwd(g):
        return (np.clip(d, -1.0, 1.0) * g,)

    record((out,), (pred,), bwd)
    return out


def gather_cells(x, index_tuple):
    """Gather x[index_tuple] as a flat tensor; backward scatters into zeros."""
    out = Tensor(x.data[index_tuple].copy())

    def bwd(g):
        gx = np.zeros(x.data.shape, dtype=np.float32)
        np.add.at(gx, index_tuple, g)
        return (gx,)

    record((out,), (x,), bwd)
    return out


def offdiag_abs_sum(m):
    """Sum of absolute off-diagonal entries of a square matrix.

    Subgradient is sign(entry) off the diagonal and 0 at exact zeros.
    """
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("offdiag_abs_sum: need a square matrix")
    c = m.shape[0]
    mask = 1.0 - np.eye(c, dtype=np.float32)
    out = Tensor(np.float32(np.abs(m.data * mask).sum(dtype=np.float64)))
    sgn = np.sign(m.data) * mask
    record((out,), (m,), lambda g: (g * sgn,))
    return out


def weighted_channel_sum(x, weights):
    """Scalar sum over batch/space of per-channel-weighted activations.

    ``x`` is [N,C,H,W]; ``weights`` is a constant length-C vector.
    """
    wv = np.asarray(weights, dtype=np.float32)
    if x.ndim != 4 or wv.shape != (x.shape[1],):
        raise ShapeError("weighted_channel_sum: bad shapes")
    per_c = x.data.sum(axis=(0, 2, 3), dtype=np.float64)
    out = Tensor(np.float32((per_c * wv).sum()))
    shp = x.data.shape

    def bwd(g):
        return (np.broadcast_to(
            (wv * g)[None, :, None, None], shp
        ).astype(np.float32).copy(),)

    record((out,), (x,), bwd)
    return out
