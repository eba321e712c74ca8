"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the operations the detector and the alignment losses need are provided.
Every op records a closure mapping the upstream gradient to gradients of its
inputs; ``Tensor.backward`` replays those closures in exact reverse creation
order.

Example:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> y = (x * x).sum()
    >>> y.backward()
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import itertools
import json
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_EPS = 1e-7

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_id", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ---------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Intermediate nodes are visited in exact reverse creation order and their
        recorded closures are released afterwards.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
            node._backward = None
            node._parents = ()

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the backward closure when any input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and structural ops --------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    if exponent == 0:
        return _make(out, (a,), lambda g: (np.zeros_like(g),))
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def activation(x: Tensor, kind: str, axis: int = 1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) so the expectation is unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def grad_reverse(x: Tensor) -> Tensor:
    """Identity in the forward pass; the backward pass negates the upstream gradient."""
    return _make(x.data, (x,), lambda g: (-g,))


# -- layers ----------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with an OIKK kernel (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ext_h, ext_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if h + 2 * padding < ext_h or w + 2 * padding < ext_w:
        raise ValueError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel extent {ext_h}x{ext_w}"
        )
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        xp = x.data
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (ext_h, ext_w), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
        # channel-major columns (C*K*K, N*Ho*Wo): the output lands in (O, N, Ho, Wo) order
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gx = gcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            else:
                gcols = gcols.reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        r0, c0 = i * dilation, j * dilation
                        gxp[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride] += (
                            gcols[:, i, j].transpose(1, 0, 2, 3)
                        )
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2x expects NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


# -- losses ------------------------------------------------------------------------


def bce_loss(prob: Tensor, target, eps: float = PROB_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [eps, 1-eps]."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), prob.shape)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss targets must be 0 or 1")
    p = clamp(prob, eps, 1.0 - eps)
    terms = -(log(p) * t + log(1.0 - p) * (1.0 - t))
    return terms.mean()


def ce_loss(x: Tensor, target, from_logits: bool = False, eps: float = PROB_EPS) -> Tensor:
    """Mean negative log-likelihood of the true class over rows of an N x C input."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"ce_loss expects an N x C input with C >= 2, got {x.shape}")
    idx = np.asarray(target, dtype=np.int64).reshape(-1)
    if idx.shape[0] != x.shape[0]:
        raise ValueError(f"ce_loss: {idx.shape[0]} targets for {x.shape[0]} rows")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise ValueError(f"ce_loss: class index outside [0, {x.shape[1]})")
    logp = log_softmax(x, axis=1) if from_logits else log(clamp(x, eps, 1.0))
    return -(logp[np.arange(len(idx)), idx].mean())


def smooth_l1_loss(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1, summed."""
    diff = pred.data - np.asarray(target, dtype=np.float64)
    ad = np.abs(diff)
    small = ad < beta
    out = np.where(small, 0.5 * diff**2 / beta, ad - 0.5 * beta).sum()
    return _make(np.asarray(out), (pred,), lambda g: (g * np.where(small, diff / beta, np.sign(diff)),))


# -- optimisation ---------------------------------------------------------------------


class SGD:
    """SGD with step decay at given epochs.

    Defaults give plain SGD (no momentum, no weight decay, no clipping).
    ``momentum`` adds heavy-ball velocity; ``clip_norm`` rescales the global
    gradient norm down to that value before the update; ``lr_scale`` multiplies
    the learning rate of the named parameters.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        decay_epochs: Iterable[int] = (8,),
        decay_factor: float = 0.1,
        momentum: float = 0.0,
        clip_norm: float | None = None,
        lr_scale: Mapping[str, float] | None = None,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.params = dict(params)
        self.lr_scale = dict(lr_scale or {})
        unknown = set(self.lr_scale) - set(self.params)
        if unknown:
            raise ValueError(f"lr_scale names unknown parameters: {sorted(unknown)}")
        if any(v <= 0 for v in self.lr_scale.values()):
            raise ValueError("lr_scale factors must be positive")
        self.base_lr = lr
        self.learning_rate = lr
        self.decay_epochs = sorted(decay_epochs)
        self.decay_factor = decay_factor
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.epoch = 0
        self.last_grad_norm = 0.0

    def set_epoch(self, epoch: int) -> float:
        """Enter ``epoch`` (0-based) and return the learning rate in force."""
        self.epoch = epoch
        passed = sum(1 for e in self.decay_epochs if epoch >= e)
        self.learning_rate = self.base_lr * self.decay_factor**passed
        return self.learning_rate

    def step(self) -> None:
        live = {n: p for n, p in self.params.items() if p.grad is not None}
        for name, p in live.items():
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in live.values())))
            self.last_grad_norm = norm
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in live.items():
            g = p.grad if scale == 1.0 else p.grad * scale
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            p.data -= self.learning_rate * self.lr_scale.get(name, 1.0) * g
            p.grad = None
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- verification ---------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    leaf: Tensor,
    h: float = 1e-6,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients of ``f`` w.r.t. ``leaf``.

    ``f`` is re-evaluated from scratch for every perturbation, so it must be a
    deterministic closure. The relative error of a coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    leaf.grad = None
    f().backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
    leaf.grad = None
    if indices is None:
        indices = list(np.ndindex(*leaf.shape))
    worst = 0.0
    for idx in indices:
        orig = leaf.data[idx]
        leaf.data[idx] = orig + h
        with no_grad():
            fp = f().item()
        leaf.data[idx] = orig - h
        with no_grad():
            fm = f().item()
        leaf.data[idx] = orig
        num = (fp - fm) / (2 * h)
        a = analytic[idx]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


# -- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CDDOD1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], metadata: dict | None = None) -> None:
    """Write parameters in the CDDOD1 container (layout documented in the README)."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(meta), len(params)), meta]
    for name in sorted(params):
        value = params[name]
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CDDOD1 checkpoint")
    version, meta_len, count = struct.unpack_from("<III", buf, 6)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 18
    metadata = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return params, metadata
