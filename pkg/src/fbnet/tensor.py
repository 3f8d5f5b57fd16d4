"""Dense tensors with reverse-mode automatic differentiation.

Design: every differentiable op computes its forward result eagerly with
numpy (convolutions dispatch to :mod:`fbnet.kernels`), and appends a backward
rule to the active :class:`Tape`.  ``backward(loss)`` replays the tape in
reverse recording order, accumulating gradients additively into every
``requires_grad`` tensor reachable from the loss.

Threading contract: autograd state is thread-local, so exactly one thread owns
a given tape.  Forward-only passes from worker threads must run under
:func:`no_grad`; tensors crossing threads should be ``detach()``-ed first.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, NumericError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64, np.int32)
_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype used when constructing tensors from untyped data."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dt


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.ascontiguousarray(data, dtype=np.dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype.type not in _ALLOWED_DTYPES:
                arr = arr.astype(_DEFAULT_DTYPE)
            arr = np.ascontiguousarray(arr)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            raise ConfigError(f"unsupported dtype {arr.dtype}")
        if requires_grad and arr.dtype.type == np.int32:
            raise ConfigError("integer tensors cannot require gradients")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Copy without tape attachment; safe to hand to another thread."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, context: str = "tensor") -> "Tensor":
        """NaN/Inf detection; forward ops must keep finite inputs finite."""
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Tape:
    """Ordered record of differentiable ops on one thread.

    Each node pairs the op's output tensor with a backward rule; replaying the
    rules in reverse recording order propagates gradients.  Nodes whose output
    never received a gradient (not reachable from the loss) are skipped.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward_rule: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_rule))

    def replay(self) -> None:
        nodes = self._nodes
        self._nodes = []
        for out, rule in reversed(nodes):
            if out.grad is None:
                continue
            rule(out.grad)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_STATE = _ThreadState()


def active_tape() -> Tape:
    return _STATE.tape


@contextmanager
def no_grad():
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


@contextmanager
def new_tape():
    """Run with a fresh tape, restoring the previous one afterwards."""
    prev = _STATE.tape
    _STATE.tape = Tape()
    try:
        yield _STATE.tape
    finally:
        _STATE.tape = prev


def _record(out: Tensor, rule: Callable[[np.ndarray], None]) -> Tensor:
    if _STATE.enabled and out.requires_grad:
        _STATE.tape.record(out, rule)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on.

    Consumes the calling thread's tape.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    _STATE.tape.replay()


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

        def rule(g):
            _accum(a, g)
            _accum(b, g)

        return _record(out, rule)
    out = Tensor(a.data + a.dtype.type(b), requires_grad=a.requires_grad)

    def rule(g):
        _accum(a, g)

    return _record(out, rule)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

        def rule(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _record(out, rule)
    s = a.dtype.type(b)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)

    def rule(g):
        _accum(a, g * s)

    return _record(out, rule)


def tsum(t: Tensor) -> Tensor:
    out = Tensor(np.asarray(t.data.sum(), dtype=t.dtype), requires_grad=t.requires_grad)

    def rule(g):
        _accum(t, np.broadcast_to(g, t.shape).astype(t.dtype, copy=False))

    return _record(out, rule)


def tmean(t: Tensor) -> Tensor:
    return mul(tsum(t), 1.0 / t.size)


def reshape(t: Tensor, shape) -> Tensor:
    out = Tensor(np.ascontiguousarray(t.data.reshape(shape)), requires_grad=t.requires_grad)

    def rule(g):
        _accum(t, g.reshape(t.shape))

    return _record(out, rule)


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(t.data.swapaxes(a, b)), requires_grad=t.requires_grad)

    def rule(g):
        _accum(t, np.ascontiguousarray(g.swapaxes(a, b)))

    return _record(out, rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=any(p.requires_grad for p in parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, np.ascontiguousarray(g[tuple(idx)]))

    return _record(out, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands or identically-batched 3-D operands."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul: expected matching 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _record(out, rule)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def relu(t: Tensor) -> Tensor:
    out = Tensor(np.maximum(t.data, 0), requires_grad=t.requires_grad)
    mask = t.data > 0

    def rule(g):
        _accum(t, g * mask)

    return _record(out, rule)


def softmax(t: Tensor, axis: int) -> Tensor:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {t.shape}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=t.requires_grad)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(t, y * (g - dot))

    return _record(out, rule)


def dropout(t: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0,1), got {p}")
    if not training or p == 0.0:
        return t
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    keep = (rng.random(t.shape) >= p).astype(t.dtype)
    scale = t.dtype.type(1.0 / (1.0 - p))
    out = Tensor(t.data * keep * scale, requires_grad=t.requires_grad)

    def rule(g):
        _accum(t, g * keep * scale)

    return _record(out, rule)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool | None = None) -> Tensor:
    """Per-channel normalization over batch and spatial axes of a B,C,H,W map.

    Training mode normalizes with batch statistics and (unless
    ``update_stats=False``, useful for pure re-evaluation) folds them into the
    running buffers with the given momentum.  Eval mode applies the running
    statistics as a fixed affine map.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects B,C,H,W input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must have one entry per channel")
    axes = (0, 2, 3)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n <= 1:
            raise NumericError("batch_norm: degenerate statistics (a single value per channel)")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats is None or update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    invstd = 1.0 / np.sqrt(var + eps)
    mean_b = mean.reshape(1, c, 1, 1).astype(x.dtype, copy=False)
    invstd_b = invstd.reshape(1, c, 1, 1).astype(x.dtype, copy=False)
    xhat = (x.data - mean_b) * invstd_b
    out = Tensor(gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1),
                 requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)

    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]

        def rule(g):
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            _accum(x, invstd_b / n * (n * gxhat - s1 - xhat * s2))
    else:

        def rule(g):
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            _accum(x, g * gamma.data.reshape(1, c, 1, 1) * invstd_b)

    return _record(out, rule)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over a B,Cin,H,W input with a Cout,Cin,k,k kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    if w.shape[2] < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError("conv2d: kernel, stride and dilation must be >= 1, padding >= 0")
    ho = kernels.conv_out_extent(x.shape[2], w.shape[2], stride, dilation, padding)
    wo = kernels.conv_out_extent(x.shape[3], w.shape[3], stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d: non-positive output extent {ho}x{wo} for input {x.shape}, "
            f"kernel {w.shape[2]}, stride {stride}, dilation {dilation}, padding {padding}")
    y = kernels.conv2d_forward(x.data, w.data, stride, dilation, padding)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({w.shape[0]},)")
        y = y + bias.data.reshape(1, -1, 1, 1)
    req = x.requires_grad or w.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(y, requires_grad=req)

    def rule(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, kernels.conv2d_backward_input(g, w.data, x.shape, stride, dilation, padding))
        if w.requires_grad:
            _accum(w, kernels.conv2d_backward_weight(g, x.data, w.shape, stride, dilation, padding))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _record(out, rule)


def max_pool(x: Tensor, k: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects B,C,H,W input, got {x.shape}")
    if k < 1 or stride < 1:
        raise ConfigError("max_pool: kernel and stride must be >= 1")
    b, c, h, w = x.shape
    if h < k or w < k:
        raise ConfigError(f"max_pool: window {k} exceeds extent ({h},{w})")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.ascontiguousarray(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]),
                 requires_grad=x.requires_grad)

    def rule(g):
        gx = np.zeros_like(x.data)
        bi, ci, oi, oj = np.indices((b, c, ho, wo))
        hi = oi * stride + arg // k
        wi = oj * stride + arg % k
        np.add.at(gx, (bi, ci, hi, wi), g)
        _accum(x, gx)

    return _record(out, rule)


def _lerp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for bilinear upsampling, align-corners=false."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0c), (1.0 - t).astype(dtype))
    np.add.at(m, (np.arange(n_out), i1c), t.astype(dtype))
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample a B,C,H,W map by an integer factor (align-corners=false)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects B,C,H,W input, got {x.shape}")
    if factor < 1:
        raise ConfigError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        out = Tensor(x.data.copy(), requires_grad=x.requires_grad)

        def rule1(g):
            _accum(x, g)

        return _record(out, rule1)
    mh = _lerp_matrix(x.shape[2], factor, x.dtype)
    mw = _lerp_matrix(x.shape[3], factor, x.dtype)
    out = Tensor(np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True),
                 requires_grad=x.requires_grad)

    def rule(g):
        _accum(x, np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True))

    return _record(out, rule)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: Tensor, ignore_index: int = 255) -> Tensor:
    """Mean pixelwise negative log-likelihood over non-ignored positions.

    ``logits``: B,L,H,W float tensor.  ``labels``: B,H,W int32 tensor with
    values in {0..L-1} or ``ignore_index``.
    """
    if logits.ndim != 4 or labels.ndim != 3:
        raise ShapeError(f"cross_entropy: expected B,L,H,W logits and B,H,W labels, "
                         f"got {logits.shape} and {labels.shape}")
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    lab = labels.data
    num_classes = logits.shape[1]
    valid = lab != ignore_index
    bad = valid & ((lab < 0) | (lab >= num_classes))
    if bad.any():
        raise DataError(f"cross_entropy: label values outside 0..{num_classes - 1}: "
                        f"{np.unique(lab[bad])[:8].tolist()}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NumericError("cross_entropy: every pixel carries the ignore index; loss undefined")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, lab, 0)
    bi, hi, wi = np.indices(lab.shape)
    picked = logp[bi, safe, hi, wi]
    loss_val = -(picked * valid).sum() / n_valid
    out = Tensor(np.asarray(loss_val, dtype=logits.dtype), requires_grad=logits.requires_grad)

    def rule(g):
        grad = np.exp(logp)
        grad[bi, safe, hi, wi] -= 1.0
        grad *= (valid / n_valid)[:, None, :, :]
        _accum(logits, grad * g)

    return _record(out, rule)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    Perturbs every coordinate of ``x`` by +/-eps; the relative error is the
    inf-norm of the difference scaled by the larger gradient's inf-norm.
    Meant to run at float64 - central differences drown in float32 rounding.
    """
    x.zero_grad()
    with new_tape():
        loss = f(x)
        backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2.0 * eps)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(fd).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - fd).max() / scale)


__all__ = [
    "Tensor", "Tape", "set_default_dtype", "get_default_dtype", "no_grad",
    "new_tape", "active_tape", "backward", "add", "mul", "tsum", "tmean",
    "reshape", "swapaxes", "concat", "matmul", "relu", "softmax", "dropout",
    "batch_norm", "conv2d", "max_pool", "bilinear_upsample", "cross_entropy",
    "finite_diff_check",
]
