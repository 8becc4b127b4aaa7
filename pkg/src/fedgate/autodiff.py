"""Reverse-mode autodiff over numpy arrays, limited to the ops the video model needs.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
``backward`` on a scalar walks the graph in reverse topological order.
Intermediate gradients live only for the duration of the walk; leaves that
require grad accumulate into ``.grad``, so two backward passes without
``zero_grad`` leave exactly twice the gradient.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, TrainingError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values (T, H, W), got {v}")
    return v


# ---------------------------------------------------------------- convolution

_AXES = ("T", "H", "W")


def conv_output_size(size, k, stride, pad, axis):
    if stride < 1:
        raise DimensionError(f"stride along {axis} must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"padding along {axis} must be >= 0, got {pad}")
    if k > size + 2 * pad:
        raise DimensionError(f"kernel extent {k} exceeds padded input extent {size + 2 * pad} along axis {axis}")
    return (size + 2 * pad - k) // stride + 1


def conv3d(x, kernel, bias=None, stride=1, padding=0, groups=1):
    """Grouped 3D cross-correlation.

    x: [N, C_in, T, H, W]; kernel: [C_out, C_in // groups, kT, kH, kW];
    bias: [C_out] or None.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    stride, padding = _triple(stride), _triple(padding)
    if x.data.ndim != 5:
        raise DimensionError(f"conv3d input must be 5-D [N,C,T,H,W], got shape {x.shape}")
    if kernel.data.ndim != 5:
        raise DimensionError(f"conv3d kernel must be 5-D, got shape {kernel.shape}")
    n, c_in = x.shape[:2]
    c_out, cg = kernel.shape[:2]
    ksize = kernel.shape[2:]
    if groups < 1 or c_in % groups or c_out % groups:
        raise DimensionError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if cg != c_in // groups:
        raise DimensionError(f"kernel input-channel axis is {cg}, expected C_in/groups = {c_in // groups}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} does not match C_out={c_out}")
    out_sz = tuple(
        conv_output_size(x.shape[2 + a], ksize[a], stride[a], padding[a], _AXES[a]) for a in range(3)
    )
    og = c_out // groups
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pads) if any(padding) else x.data
    kg = kernel.data.reshape(groups, og, cg, *ksize)
    out = np.zeros((n, groups, og) + out_sz, dtype=np.result_type(x.data, kernel.data))

    def window(i, j, k):
        sl = (
            slice(None), slice(None),
            slice(i, i + stride[0] * (out_sz[0] - 1) + 1, stride[0]),
            slice(j, j + stride[1] * (out_sz[1] - 1) + 1, stride[1]),
            slice(k, k + stride[2] * (out_sz[2] - 1) + 1, stride[2]),
        )
        return sl

    offsets = [(i, j, k) for i in range(ksize[0]) for j in range(ksize[1]) for k in range(ksize[2])]
    depthwise = og == 1 and cg == 1
    for i, j, k in offsets:
        xs = xp[window(i, j, k)].reshape(n, groups, cg, *out_sz)
        w = kg[:, :, :, i, j, k]
        if depthwise:
            out[:, :, 0] += xs[:, :, 0] * w[None, :, 0, 0, None, None, None]
        else:
            out += np.einsum("ngcthw,goc->ngothw", xs, w)
    out = out.reshape(n, c_out, *out_sz)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def backward(g):
        gg = g.reshape(n, groups, og, *out_sz)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dk = np.zeros_like(kg) if kernel.requires_grad else None
        for i, j, k in offsets:
            sl = window(i, j, k)
            w = kg[:, :, :, i, j, k]
            if dk is not None:
                xs = xp[sl].reshape(n, groups, cg, *out_sz)
                if depthwise:
                    dk[:, 0, 0, i, j, k] = np.einsum("ngthw,ngthw->g", gg[:, :, 0], xs[:, :, 0])
                else:
                    dk[:, :, :, i, j, k] = np.einsum("ngothw,ngcthw->goc", gg, xs)
            if dxp is not None:
                if depthwise:
                    contrib = gg[:, :, 0] * w[None, :, 0, 0, None, None, None]
                else:
                    contrib = np.einsum("ngothw,goc->ngcthw", gg, w)
                dxp[sl] += contrib.reshape(n, c_in, *out_sz)
        dx = None
        if dxp is not None:
            dx = dxp[(slice(None), slice(None)) + tuple(slice(p, p + x.shape[2 + a]) for a, p in enumerate(padding))]
            dx = np.ascontiguousarray(dx)
        grads = [dx, None if dk is None else dk.reshape(kernel.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    parents = [x, kernel] + ([bias] if bias is not None else [])
    return _result(out, parents, backward)


def depthwise_separable_conv3d(x, spatial_w, spatial_b, temporal_w, temporal_b, point_w, point_b,
                               padding=(1, 1)):
    """Pseudo-3D separable convolution: depthwise 1xkxk, then depthwise kx1x1, then pointwise.

    ``padding`` is ``(temporal, spatial)`` zero padding for the depthwise stages.
    """
    x = as_tensor(x)
    c_in = x.shape[1]
    for nm, w in (("spatial", spatial_w), ("temporal", temporal_w), ("pointwise", point_w)):
        if as_tensor(w).shape[1] != (1 if nm != "pointwise" else c_in):
            raise DimensionError(f"{nm} kernel shape {as_tensor(w).shape} inconsistent with {c_in} input channels")
    pt, ps = padding
    y = conv3d(x, spatial_w, spatial_b, padding=(0, ps, ps), groups=c_in)
    y = conv3d(y, temporal_w, temporal_b, padding=(pt, 0, 0), groups=c_in)
    return conv3d(y, point_w, point_b)


def maxpool3d(x, window, stride=None):
    """Max pooling; ties send the gradient to the first maximum in row-major order."""
    x = as_tensor(x)
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if x.data.ndim != 5:
        raise DimensionError(f"maxpool3d input must be 5-D, got shape {x.shape}")
    for a in range(3):
        if window[a] > x.shape[2 + a]:
            raise DimensionError(f"pool window {window[a]} exceeds input extent {x.shape[2 + a]} along axis {_AXES[a]}")
    n, c = x.shape[:2]
    out_sz = tuple(conv_output_size(x.shape[2 + a], window[a], stride[a], 0, _AXES[a]) for a in range(3))
    win = sliding_window_view(x.data, window, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, :out_sz[0], :out_sz[1], :out_sz[2]]
    flat = win.reshape(n, c, *out_sz, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        wi, wj, wk = np.unravel_index(arg, window)
        ti = np.arange(out_sz[0])[:, None, None] * stride[0] + wi
        hi = np.arange(out_sz[1])[None, :, None] * stride[1] + wj
        wi2 = np.arange(out_sz[2])[None, None, :] * stride[2] + wk
        ni = np.arange(n)[:, None, None, None, None]
        ci = np.arange(c)[None, :, None, None, None]
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ni, ci, ti, hi, wi2), g)
        return [dx]

    return _result(out, [x], backward)


# ----------------------------------------------------------------- dense etc.

def dense(x, weight, bias=None):
    """Affine map: x [N, F_in], weight [F_out, F_in], bias [F_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense input features {x.shape[1]} != weight F_in {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match F_out={weight.shape[0]}")
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, [x, weight] + ([bias] if bias is not None else []), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), [x], lambda g: [g * mask])


def _sigmoid(z):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1 + np.tanh(0.5 * z))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data).astype(x.dtype)
    return _result(s, [x], lambda g: [g * s * (1 - s)])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, [a, b], lambda g: [g * b.data, g * a.data])


elementwise_mul = mul


def dropout(x, p, rng=None, training=True):
    """Inverted dropout; the identity when not training or when p == 0."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return _result(x.data * keep, [x], lambda g: [g * keep])


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    return _result(x.data.reshape(shape), [x], lambda g: [g.reshape(src)])


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def tensor_sum(x):
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), [x], lambda g: [np.broadcast_to(g, x.shape).copy()])


def weighted_sum(x, weights):
    """sum(x * weights) with constant weights; used to project outputs in gradient checks."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    return _result(np.asarray((x.data * w).sum()), [x], lambda g: [g * w])


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy computed from pre-sigmoid logits."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=logits.dtype).reshape(-1)
    z = logits.data.reshape(-1)
    if z.size == 0:
        raise DimensionError("bce_with_logits on an empty batch")
    if y.shape != z.shape:
        raise DimensionError(f"labels shape {y.shape} does not match logits {z.shape}")
    n = z.size
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean(), dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        return [(g * (_sigmoid(z) - y) / n).astype(logits.dtype).reshape(shape)]

    return _result(loss, [logits], backward)


# ------------------------------------------------------------------ optimizer

@dataclass
class SgdState:
    """Momentum buffers. The learning rate is passed to every step, never stored."""

    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def clip_grad_norm(params, max_norm):
    """Rescale every ``.grad`` so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm and total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(max_norm / total)
    return total


def sgd_step(params, state, lr):
    """Heavy-ball SGD: v <- m*v + g; w <- w - lr*v, in place on each tensor's data.

    ``params`` maps names to tensors whose ``.grad`` is set (a missing grad
    counts as zero).
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in layer {name!r} ({bad} of {g.size} entries)")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise DimensionError(f"velocity for {name!r} has shape {v.shape}, parameter has {p.shape}")
        v = p.dtype.type(state.momentum) * v + g
        state.velocity[name] = v
        p.data = p.data - p.dtype.type(lr) * v
