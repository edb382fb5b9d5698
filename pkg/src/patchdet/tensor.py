"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is numpy-backed and double precision so that finite-difference
gradient checks are meaningful. The computation graph is recorded implicitly
through parent links on each result tensor; ``Tensor.backward()`` replays it
in reverse topological order.
"""

import numpy as np

# Additive attention-mask sentinel. Large negative instead of -inf keeps all
# arithmetic finite; masked softmax outputs are zeroed exactly afterwards.
MASK_NEG = -1e30
_MASKED_THRESHOLD = -1e20


class Tensor:
    """A node in the computation graph holding a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"expected scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Populate .grad on every requires_grad tensor reachable from this scalar.

        Deterministic: the traversal order depends only on graph structure, so
        repeated calls produce bitwise-identical gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _topo_order(self)
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _topo_order(root):
    order = []
    visited = set()
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _finish(out, parents, backward):
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum out axes that numpy broadcasting introduced or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    out = Tensor(a.data + b.data)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.data.shape)

    return _finish(out, (a, b), backward)


def sub(a, b):
    out = Tensor(a.data - b.data)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(out.grad, b.data.shape)

    return _finish(out, (a, b), backward)


def mul(a, b):
    out = Tensor(a.data * b.data)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    return _finish(out, (a, b), backward)


def div(a, b):
    out = Tensor(a.data / b.data)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape)

    return _finish(out, (a, b), backward)


def neg(a):
    out = Tensor(-a.data)

    def backward():
        if a.requires_grad:
            a.grad -= out.grad

    return _finish(out, (a,), backward)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    out = Tensor(a.data * s)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * s

    return _finish(out, (a,), backward)


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))

    def backward():
        if a.requires_grad:
            a.grad += out.grad * (a.data > 0.0)

    return _finish(out, (a,), backward)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * y * (1.0 - y)

    return _finish(out, (a,), backward)


def absolute(a):
    out = Tensor(np.abs(a.data))

    def backward():
        if a.requires_grad:
            a.grad += out.grad * np.sign(a.data)

    return _finish(out, (a,), backward)


def maximum(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.maximum(a.data, b.data))

    def backward():
        # ties route the gradient to the first argument
        pick_a = a.data >= b.data
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * pick_a, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * ~pick_a, b.data.shape)

    return _finish(out, (a, b), backward)


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.minimum(a.data, b.data))

    def backward():
        pick_a = a.data <= b.data
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * pick_a, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * ~pick_a, b.data.shape)

    return _finish(out, (a, b), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes do not agree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        if a.requires_grad:
            a.grad += out.grad @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ out.grad

    return _finish(out, (a, b), backward)


def reduce_sum(a, axis=None):
    out = Tensor(a.data.sum(axis=axis))

    def backward():
        if a.requires_grad:
            a.grad += _spread(out.grad, a.data.shape, axis)

    return _finish(out, (a,), backward)


def mean(a, axis=None):
    count = a.data.size if axis is None else _axis_count(a.data.shape, axis)
    out = Tensor(a.data.mean(axis=axis))

    def backward():
        if a.requires_grad:
            a.grad += _spread(out.grad, a.data.shape, axis) / count

    return _finish(out, (a,), backward)


def _axis_count(shape, axis):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = 1
    for ax in axes:
        count *= shape[ax]
    return count


def _spread(grad, shape, axis):
    """Inverse of a sum reduction: re-expand grad to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(grad, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    expanded = grad
    for ax in sorted(axes):
        expanded = np.expand_dims(expanded, ax)
    return np.broadcast_to(expanded, shape)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def backward():
        if a.requires_grad:
            a.grad += out.grad.reshape(a.data.shape)

    return _finish(out, (a,), backward)


def transpose(a, axes=None):
    out = Tensor(np.transpose(a.data, axes))

    def backward():
        if a.requires_grad:
            inverse = None if axes is None else np.argsort(axes)
            a.grad += np.transpose(out.grad, inverse)

    return _finish(out, (a,), backward)


def pad2d(a, pad):
    """Zero-pad the last two axes by pad on every side."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor(np.pad(a.data, width))
    inner = tuple([slice(None)] * (a.data.ndim - 2) + [slice(pad, -pad)] * 2)

    def backward():
        if a.requires_grad:
            a.grad += out.grad[inner]

    return _finish(out, (a,), backward)


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward():
        pieces = np.split(out.grad, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.grad += piece

    return _finish(out, tuple(tensors), backward)


def getitem(a, key):
    out = Tensor(a.data[key])

    def backward():
        if a.requires_grad:
            scatter = np.zeros_like(a.data)
            np.add.at(scatter, key, out.grad)
            a.grad += scatter

    return _finish(out, (a,), backward)


def embedding_lookup(table, indices):
    """Gather rows of a 2-D table; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(table.data[idx])

    def backward():
        if table.requires_grad:
            np.add.at(table.grad, idx, out.grad)

    return _finish(out, (table,), backward)


def take_per_row(a, indices):
    """Pick one entry per row of a 2-D tensor: out[i] = a[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def backward():
        if a.requires_grad:
            scatter = np.zeros_like(a.data)
            scatter[rows, idx] = out.grad
            a.grad += scatter

    return _finish(out, (a,), backward)


def linear(x, weight, bias=None):
    """Affine map over the rows of x: x @ weight + bias."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# normalization and classification primitives


def softmax_masked(logits, mask=None):
    """Softmax over the last axis of (logits + mask), masked positions exactly 0.

    Mask entries must be 0 or the MASK_NEG sentinel; a fully masked row is an
    error rather than a silent NaN.
    """
    z = logits.data
    if mask is not None:
        mask_data = np.broadcast_to(mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64), z.shape)
        blocked = mask_data <= _MASKED_THRESHOLD
        if np.any(np.all(blocked, axis=-1)):
            raise ValueError("softmax_masked: a row has every position masked")
        z = z + mask_data
    else:
        blocked = None
    shifted = z - z.max(axis=-1, keepdims=True)
    expz = np.exp(shifted)
    y = expz / expz.sum(axis=-1, keepdims=True)
    if blocked is not None:
        y = np.where(blocked, 0.0, y)
    out = Tensor(y)

    def backward():
        if logits.requires_grad:
            g = out.grad
            inner = (g * y).sum(axis=-1, keepdims=True)
            logits.grad += y * (g - inner)

    return _finish(out, (logits,), backward)


def log_softmax(logits):
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse)

    def backward():
        if logits.requires_grad:
            g = out.grad
            soft = np.exp(out.data)
            logits.grad += g - soft * g.sum(axis=-1, keepdims=True)

    return _finish(out, (logits,), backward)


def cross_entropy(logits, target):
    """Negative log softmax probability of the target class for 1-D logits."""
    k = logits.data.shape[-1]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    lp = log_softmax(logits)
    return neg(getitem(lp, target))


def layer_norm(x, gain, bias, eps=1e-5):
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain.grad += _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            bias.grad += _unbroadcast(g, bias.data.shape)
        if x.requires_grad:
            gxhat = g * gain.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv_std * (gxhat - m1 - xhat * m2)

    return _finish(out, (x, gain, bias), backward)


def l2_normalize(v, eps=1e-12):
    """v / max(||v||, eps) over the last axis."""
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = v.data / denom
    clamped = norm < eps
    out = Tensor(y)

    def backward():
        if v.requires_grad:
            g = out.grad
            inner = (g * y).sum(axis=-1, keepdims=True)
            free = (g - y * inner) / denom
            v.grad += np.where(clamped, g / denom, free)

    return _finish(out, (v,), backward)


def global_average_pool(f):
    """Per-channel spatial mean of a C x H x W feature map."""
    if f.data.ndim != 3:
        raise ValueError(f"expected a C x H x W map, got shape {f.data.shape}")
    return mean(f, axis=(1, 2))


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(fn, *inputs, h=1e-5):
    """Compare tape gradients of a scalar-valued fn against central differences.

    Returns the max over all coordinates of all requires_grad inputs of
    |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8).
    """
    loss = fn(*inputs)
    loss.backward()
    tape_grads = [t.grad.copy() for t in inputs if t.requires_grad]

    worst = 0.0
    slot = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        g_tape = tape_grads[slot]
        slot += 1
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn(*inputs).item()
            flat[i] = keep - h
            down = fn(*inputs).item()
            flat[i] = keep
            g_fd = (up - down) / (2.0 * h)
            g_t = g_tape.reshape(-1)[i]
            err = abs(g_t - g_fd) / max(abs(g_t), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
