"""
Tensors with reverse-mode differentiation for the layer set the models use,
Gaussian parameter initialization, seeded random streams and plain SGD.

Everything runs on numpy arrays in NCHW layout. float32 is the default
precision; switch to float64 with ``default_dtype(np.float64)`` for gradient
verification.
"""

import hashlib
import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from v2ir.utils import NumericalError

LOG_CLAMP = 1e-7
ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid")

_SUPPORTED_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}, use float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype):
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_finite(values, op):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """
    A real-valued array with an optional gradient buffer.

    Leaf tensors are created directly; every other tensor records the parents
    and the backward closure of the operation that produced it, but only when
    at least one parent requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_pass")

    def __init__(self, data, requires_grad=False, dtype=None):
        array = np.array(data, dtype=dtype or get_default_dtype())
        if any(extent <= 0 for extent in array.shape):
            raise ValueError(f"tensor extents must be positive, got {array.shape}")
        _check_finite(array, "tensor")
        self.data = array
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._pass = 0

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._pass = 0
        out.requires_grad = any(parent.requires_grad for parent in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._from_op(self.data, (), None, "detach")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def _same_shape(self, other, op):
        if self.shape != other.shape:
            raise ValueError(f"{op}: shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other):
        a = self
        if isinstance(other, Tensor):
            a._same_shape(other, "add")
            b = other

            def _backward(g):
                if a.requires_grad:
                    a.grad += g
                if b.requires_grad:
                    b.grad += g

            return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")

        value = a.data.dtype.type(other)

        def _backward_scalar(g):
            a.grad += g

        return Tensor._from_op(a.data + value, (a,), _backward_scalar, "add_scalar")

    __radd__ = __add__

    def __mul__(self, other):
        a = self
        if isinstance(other, Tensor):
            a._same_shape(other, "mul")
            b = other

            def _backward(g):
                if a.requires_grad:
                    a.grad += g * b.data
                if b.requires_grad:
                    b.grad += g * a.data

            return Tensor._from_op(a.data * b.data, (a, b), _backward, "mul")

        value = a.data.dtype.type(other)

        def _backward_scalar(g):
            a.grad += g * value

        return Tensor._from_op(a.data * value, (a,), _backward_scalar, "mul_scalar")

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + other

    def abs(self):
        a = self

        def _backward(g):
            a.grad += g * np.sign(a.data)

        return Tensor._from_op(np.abs(a.data), (a,), _backward, "abs")

    def sum(self):
        a = self

        def _backward(g):
            a.grad += g

        out = np.asarray(a.data.sum(), dtype=a.data.dtype)
        return Tensor._from_op(out, (a,), _backward, "sum")

    def mean(self):
        a = self
        scale = a.data.dtype.type(1.0 / a.data.size)

        def _backward(g):
            a.grad += g * scale

        out = np.asarray(a.data.mean(), dtype=a.data.dtype)
        return Tensor._from_op(out, (a,), _backward, "mean")


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t.grad += g[tuple(index)]

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tensors, _backward, "concat")


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, pad):
    return (size - 1) * stride - 2 * pad + kernel


def _pad(array, pad):
    if pad == 0:
        return np.ascontiguousarray(array)
    return np.pad(array, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _crop(array, pad):
    if pad == 0:
        return array
    return array[:, :, pad:-pad, pad:-pad]


def _im2col(padded, kh, kw, stride, ho, wo):
    # (N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo); padded must be C-contiguous
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    patches = as_strided(
        padded,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, padded_shape, kh, kw, stride, ho, wo):
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j
            ]
    return out


def _validate_conv_args(x, weight, bias, stride, pad, op):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"{op}: input and weight must be 4-d, got {x.shape}, {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"{op}: stride must be >= 1 and pad >= 0")
    out_channels = weight.shape[0] if op == "conv2d" else weight.shape[1]
    in_channels = weight.shape[1] if op == "conv2d" else weight.shape[0]
    if x.shape[1] != in_channels:
        raise ValueError(
            f"{op}: input has {x.shape[1]} channels, weight expects {in_channels}"
        )
    if bias.shape != (out_channels,):
        raise ValueError(f"{op}: bias must have shape ({out_channels},), got {bias.shape}")


def conv2d(x, weight, bias, stride=1, pad=0):
    """
    Cross-correlation of an NCHW input with an OIHW weight.

    Output extents are ``(H + 2*pad - KH) // stride + 1`` (same for W).
    """
    _validate_conv_args(x, weight, bias, stride, pad, "conv2d")
    n, _, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output extent ({ho}, {wo})")

    padded = _pad(x.data, pad)
    cols = _im2col(padded, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo) + bias.data[None, :, None, None]

    def _backward(g):
        g2 = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            weight.grad += np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(
                weight.shape
            )
        if bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x.grad += _crop(_col2im(dcols, padded.shape, kh, kw, stride, ho, wo), pad)

    return Tensor._from_op(out, (x, weight, bias), _backward, "conv2d")


def conv_transpose2d(x, weight, bias, stride=1, pad=0):
    """
    Transposed convolution, the adjoint of conv2d in its data argument.

    The weight is laid out (C_in, C_out, KH, KW), so passing a conv2d weight
    maps conv2d outputs back onto conv2d inputs. Output extents are
    ``(H - 1)*stride - 2*pad + KH``.
    """
    _validate_conv_args(x, weight, bias, stride, pad, "conv_transpose2d")
    n, ci, h, w = x.shape
    _, co, kh, kw = weight.shape
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: non-positive output extent ({ho}, {wo})")

    w2 = weight.data.reshape(ci, co * kh * kw)
    x2 = x.data.reshape(n, ci, h * w)
    cols = np.matmul(w2.T, x2)
    full = _col2im(cols, (n, co, hp, wp), kh, kw, stride, h, w)
    out = _crop(full, pad) + bias.data[None, :, None, None]

    def _backward(g):
        gcols = _im2col(_pad(g, pad), kh, kw, stride, h, w)
        if x.requires_grad:
            x.grad += np.matmul(w2, gcols).reshape(x.shape)
        if weight.requires_grad:
            weight.grad += np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(
                weight.shape
            )
        if bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))

    return Tensor._from_op(
        np.ascontiguousarray(out), (x, weight, bias), _backward, "conv_transpose2d"
    )


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel standardization over H and W, then affine."""
    if eps <= 0:
        raise ValueError("instance_norm: eps must be positive")
    if x.ndim != 4:
        raise ValueError(f"instance_norm: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: gamma/beta must have shape ({c},)")

    centered = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    g4 = gamma.data[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]

    def _backward(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            beta.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * g4
            x.grad += inv_std * (
                dxhat
                - dxhat.mean(axis=(2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            )

    return Tensor._from_op(out, (x, gamma, beta), _backward, "instance_norm")


def activation(x, kind, alpha=0.2):
    """Elementwise relu, leaky_relu(alpha), tanh or sigmoid."""
    data = x.data
    dtype = data.dtype.type

    if kind == "relu":
        mask = data > 0
        out = np.where(mask, data, dtype(0))

        def _backward(g):
            x.grad += g * mask

    elif kind == "leaky_relu":
        if not 0 <= alpha < 1:
            raise ValueError(f"leaky_relu alpha must be in [0, 1), got {alpha}")
        slope = np.where(data > 0, dtype(1), dtype(alpha))
        out = data * slope

        def _backward(g):
            x.grad += g * slope

    elif kind == "tanh":
        # clipped one ulp inside (-1, 1)
        bound = np.nextafter(dtype(1), dtype(0))
        out = np.clip(np.tanh(data), -bound, bound)

        def _backward(g):
            x.grad += g * (1 - out * out)

    elif kind == "sigmoid":
        low = np.nextafter(dtype(0), dtype(1))
        high = np.nextafter(dtype(1), dtype(0))
        out = np.clip(expit(data), low, high).astype(data.dtype)

        def _backward(g):
            x.grad += g * out * (1 - out)

    else:
        raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")

    return Tensor._from_op(out, (x,), _backward, kind)


def log_clamped(x, clamp=LOG_CLAMP):
    """Natural log with inputs clamped to [clamp, 1 - clamp]."""
    dtype = x.data.dtype.type
    low, high = dtype(clamp), dtype(1 - clamp)
    clipped = np.clip(x.data, low, high)
    inside = (x.data >= low) & (x.data <= high)

    def _backward(g):
        x.grad += g * inside / clipped

    return Tensor._from_op(np.log(clipped), (x,), _backward, "log")


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


_passes = itertools.count(1)
_latest_pass = 0


def backward(loss):
    """
    Populate ``grad`` of every leaf reachable from a scalar loss.

    Gradients are overwritten, never accumulated across calls. Interior
    gradients are released once propagated. Each call opens a new pass;
    leaf gradients left over from earlier passes are stale and rejected by
    ``sgd_step``.
    """
    global _latest_pass
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    _latest_pass = next(_passes)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None
        else:
            node._pass = _latest_pass


class ParamStore:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self):
        self._entries = {}

    def add(self, name, value):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        value.requires_grad = True
        self._entries[name] = value
        return value

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.items())

    def items(self):
        return list(self._entries.items())

    def names(self):
        return list(self._entries)

    def num_parameters(self):
        return int(sum(t.size for t in self._entries.values()))

    def digest(self):
        h = hashlib.blake2b(digest_size=16)
        for name, value in self._entries.items():
            h.update(name.encode("utf-8"))
            h.update(str(value.shape).encode("ascii"))
            h.update(np.ascontiguousarray(value.data).tobytes())
        return h.hexdigest()

    @contextmanager
    def frozen(self):
        """Exclude these parameters from differentiation inside the block."""
        previous = {name: t.requires_grad for name, t in self._entries.items()}
        for t in self._entries.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for name, t in self._entries.items():
                t.requires_grad = previous[name]


class Rng:
    """
    Named, splittable random stream on numpy's counter-based Philox generator.

    The Philox key is derived from (seed, label), so a stream depends only on
    its name and the calls made on it, never on other streams.
    """

    def __init__(self, seed, label="root"):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.label = str(label)
        digest = hashlib.blake2b(
            f"{self.seed}:{self.label}".encode("utf-8"), digest_size=16
        ).digest()
        self._generator = np.random.Generator(
            np.random.Philox(key=int.from_bytes(digest, "little"))
        )

    def __repr__(self):
        return f"Rng(seed={self.seed}, label={self.label!r})"

    @property
    def generator(self):
        return self._generator

    def child(self, label):
        return Rng(self.seed, f"{self.label}/{label}")

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._generator.integers(low, high, size)

    def permutation(self, n):
        return self._generator.permutation(n)

    def choice(self, n, size, replace=False, p=None):
        return self._generator.choice(n, size=size, replace=replace, p=p)


def gaussian_init(shape, mean, std, rng):
    """i.i.d. normal draws of the given shape, as a trainable tensor."""
    if not (np.isfinite(mean) and np.isfinite(std)):
        raise ValueError("gaussian_init: mean and std must be finite")
    if std < 0:
        raise ValueError("gaussian_init: std must be non-negative")
    shape = tuple(int(extent) for extent in shape)
    return Tensor(rng.normal(mean, std, shape), requires_grad=True)


def current_grad(t):
    """``t.grad`` if the latest ``backward`` produced it, else None."""
    if t.grad is None or t._pass != _latest_pass:
        return None
    return t.grad


def _scalar_value(loss, op):
    if loss.size != 1:
        raise ValueError(f"{op}: function must return a scalar, got {loss.shape}")
    value = float(loss.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericalError(f"{op}: non-finite loss")
    return value


def grad_check(fn, params, eps=1e-5, max_coords=None, rng=None):
    """
    Largest relative error between backward gradients and central differences.

    ``fn(params)`` must return a scalar Tensor. The relative error of one
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. With ``max_coords`` only
    that many coordinates, drawn from ``rng``, are checked.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    loss = fn(params)
    _scalar_value(loss, "grad_check")
    backward(loss)
    analytic = {}
    for name, t in params:
        grad = current_grad(t)
        analytic[name] = grad.copy() if grad is not None else np.zeros_like(t.data)

    coords = [(name, i) for name, t in params for i in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        picker = rng if rng is not None else Rng(0, "grad_check")
        picked = np.sort(picker.choice(len(coords), max_coords, replace=False))
        coords = [coords[i] for i in picked]

    worst = 0.0
    with params.frozen():
        for name, index in coords:
            flat = params[name].data.reshape(-1)
            original = flat[index]
            flat[index] = original + eps
            plus = _scalar_value(fn(params), "grad_check")
            flat[index] = original - eps
            minus = _scalar_value(fn(params), "grad_check")
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            exact = float(analytic[name].reshape(-1)[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    return worst


def sgd_step(params, lr):
    """Plain SGD: ``p <- p - lr * grad(p)`` for every parameter."""
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"sgd_step: learning rate must be finite and >= 0, got {lr}")
    grads = {}
    for name, value in params:
        grads[name] = current_grad(value)
        if grads[name] is None:
            raise ValueError(f"sgd_step: parameter {name!r} has no gradient from the latest backward")
    for name, value in params:
        value.data -= value.data.dtype.type(lr) * grads[name].astype(value.data.dtype)
        _check_finite(value.data, f"sgd_step({name})")
