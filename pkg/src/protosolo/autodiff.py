"""Dense float64 tensors with reverse-mode differentiation.

Implements exactly the operation set the classifier and its losses need:
valid-padding convolution, ReLU, bias-free linear maps, stabilized softmax
cross-entropy, squared L2 distances, batched pairwise distances, the
log-ratio similarity, and min/max reductions that route gradients to the
(smallest-index) arg position.  Graphs are built fresh per step and freed
with the tensors; there is no persistent tape.
"""

from __future__ import annotations

import numpy as np

# Finite sentinel used to mask entries out of a min reduction.  Large enough
# never to win the min against real distances, small enough to stay finite.
MASK_VALUE = 1e30


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff.

    The caller-visible value is immutable by convention: ops return new
    tensors and never write into their inputs.  ``grad`` is populated by
    ``backward()`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents if self.requires_grad else ()
        self._backward_fn = _backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate gradients of all reachable inputs by reverse traversal.

        The loss must be scalar-valued.  Each node is visited exactly once,
        in reverse topological order; repeated calls on a fresh graph are
        bit-identical.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- small operator sugar used when assembling losses --------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, g if a.data.shape == g.shape else np.sum(g))
        _accumulate(b, g if b.data.shape == g.shape else np.sum(g))

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backward_fn(g):
        ga = g * b.data
        gb = g * a.data
        _accumulate(a, ga if a.data.shape == ga.shape else np.sum(ga))
        _accumulate(b, gb if b.data.shape == gb.shape else np.sum(gb))

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward_fn)


def relu(x):
    """Elementwise max(0, v); gradient passes only where the input is > 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward_fn(g):
        _accumulate(x, g * mask)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


def log1p_(x):
    """Elementwise ln(1 + v) for v > -1."""
    x = as_tensor(x)
    if np.any(x.data <= -1.0):
        raise ValueError("log1p defined only for values above -1")
    out_data = np.log1p(x.data)

    def backward_fn(g):
        _accumulate(x, g / (1.0 + x.data))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


def abs_(x):
    x = as_tensor(x)
    out_data = np.abs(x.data)

    def backward_fn(g):
        _accumulate(x, g * np.sign(x.data))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


def sum_(x):
    x = as_tensor(x)

    def backward_fn(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return Tensor(x.data.sum(), _parents=(x,), _backward_fn=backward_fn)


def mean(x):
    x = as_tensor(x)
    n = x.data.size

    def backward_fn(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return Tensor(x.data.mean(), _parents=(x,), _backward_fn=backward_fn)


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


def swapaxes(x, a, b):
    x = as_tensor(x)
    out_data = np.swapaxes(x.data, a, b)

    def backward_fn(g):
        _accumulate(x, np.swapaxes(g, a, b))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


def min_last(x):
    """Min over the last axis.  Returns (values, argmin indices).

    Gradient is routed entirely to the smallest attaining index
    (subgradient convention), which numpy's argmin already selects.
    """
    x = as_tensor(x)
    idx = np.argmin(x.data, axis=-1)
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        _accumulate(x, gx)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn), idx


def max_last(x):
    """Max over the last axis; argmax routing with smallest-index tie-break."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=-1)
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        _accumulate(x, gx)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn), idx


def max_with_argmax(values):
    """Maximum of a 1-D tensor and the smallest index attaining it."""
    values = as_tensor(values)
    if values.data.ndim != 1:
        raise ValueError(f"max_with_argmax expects a 1-D tensor, got {values.data.shape}")
    if values.data.size == 0:
        raise ValueError("max_with_argmax rejects empty input")
    out, idx = max_last(values)
    return out, int(idx)


def take_index1(x, labels):
    """Select x[b, labels[b], :] from a (B, K, U) tensor -> (B, U)."""
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    out_data = x.data[rows, labels, :]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, labels, :] = g
        _accumulate(x, gx)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


def mask_index1(x, labels, fill=MASK_VALUE):
    """Overwrite x[b, labels[b], :] with a large finite value.

    Used to exclude a sample's own class from a subsequent min reduction;
    no gradient flows through the masked entries.
    """
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    out_data = x.data.copy()
    out_data[rows, labels, :] = fill

    def backward_fn(g):
        gx = g.copy()
        gx[rows, labels, :] = 0.0
        _accumulate(x, gx)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# linear algebra ops
# ---------------------------------------------------------------------------


def linear(x, weights):
    """Bias-free linear map: out[t] = sum_k weights[t, k] * x[k].

    Accepts a single vector (K,) or a batch (B, K); weights are (T, K).
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.data.ndim != 2:
        raise ValueError(f"linear weights must be 2-D, got {weights.data.shape}")
    if x.data.shape[-1] != weights.data.shape[1]:
        raise ValueError(
            f"linear dimension mismatch: input {x.data.shape} vs weights {weights.data.shape}"
        )
    out_data = x.data @ weights.data.T

    def backward_fn(g):
        _accumulate(x, g @ weights.data)
        if x.data.ndim == 1:
            _accumulate(weights, np.outer(g, x.data))
        else:
            _accumulate(weights, g.T @ x.data)

    return Tensor(out_data, _parents=(x, weights), _backward_fn=backward_fn)


def sq_l2_distance(a, b):
    """Squared L2 distance between two equal-shape tensors (a scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"sq_l2_distance shape mismatch: {a.data.shape} vs {b.data.shape}"
        )
    diff = a.data - b.data
    out_data = np.sum(diff * diff)

    def backward_fn(g):
        _accumulate(a, 2.0 * float(g) * diff)
        _accumulate(b, -2.0 * float(g) * diff)

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward_fn)


def pairwise_sq_dists(features, prototypes):
    """Squared distances d[b, m, n] = ||features[b, n] - prototypes[m]||^2.

    features: (B, N, L), prototypes: (M, L) -> (B, M, N).
    """
    features, prototypes = as_tensor(features), as_tensor(prototypes)
    f, p = features.data, prototypes.data
    if f.ndim != 3 or p.ndim != 2 or f.shape[2] != p.shape[1]:
        raise ValueError(
            f"pairwise_sq_dists shape mismatch: features {f.shape} vs prototypes {p.shape}"
        )
    f2 = np.sum(f * f, axis=2)  # (B, N)
    p2 = np.sum(p * p, axis=1)  # (M,)
    cross = np.einsum("bnl,ml->bmn", f, p)
    out_data = np.maximum(p2[None, :, None] + f2[:, None, :] - 2.0 * cross, 0.0)

    def backward_fn(g):
        # d wrt features[b,n]: 2 * sum_m g[b,m,n] * (f[b,n] - p[m])
        gsum_m = g.sum(axis=1)  # (B, N)
        gf = 2.0 * (f * gsum_m[:, :, None] - np.einsum("bmn,ml->bnl", g, p))
        gsum_bn = g.sum(axis=(0, 2))  # (M,)
        gp = 2.0 * (p * gsum_bn[:, None] - np.einsum("bmn,bnl->ml", g, f))
        _accumulate(features, gf)
        _accumulate(prototypes, gp)

    return Tensor(out_data, _parents=(features, prototypes), _backward_fn=backward_fn)


def log_similarity(dists, eps):
    """Similarity s(d) = ln((d + 1) / (d + eps)), elementwise.

    Strictly decreasing in d, maximal at ln(1/eps) for d = 0, -> 0 as d grows.
    """
    if eps <= 0:
        raise ValueError(f"similarity epsilon must be positive, got {eps}")
    dists = as_tensor(dists)
    d = dists.data
    out_data = np.log(d + 1.0) - np.log(d + eps)

    def backward_fn(g):
        _accumulate(dists, g * (1.0 / (d + 1.0) - 1.0 / (d + eps)))

    return Tensor(out_data, _parents=(dists,), _backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(extent, kernel, stride):
    """Output extent of a valid-padding convolution along one axis."""
    if kernel > extent:
        raise ValueError(f"kernel {kernel} exceeds input extent {extent}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return (extent - kernel) // stride + 1


def _strided_patches(x, kh, kw, stride):
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    shape = (b, ho, wo, c, kh, kw)
    strides = (sb, sh * stride, sw * stride, sc, sh, sw)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)


def conv2d(x, kernels, bias, stride=1):
    """Valid-padding cross-correlation plus per-output-channel bias.

    x: (Cin, H, W) or (B, Cin, H, W); kernels: (Cout, Cin, kh, kw);
    bias: (Cout,).  Output spatial extent is floor((H - kh) / stride) + 1.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    kd = kernels.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ValueError(
            f"conv2d expects 3/4-D input and 4-D kernels, got {x.data.shape} and {kd.shape}"
        )
    if xd.shape[1] != kd.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {xd.shape[1]} channels, "
            f"kernels expect {kd.shape[1]}"
        )
    if bias.data.shape != (kd.shape[0],):
        raise ValueError(
            f"conv2d bias shape {bias.data.shape} does not match Cout={kd.shape[0]}"
        )
    cout, cin, kh, kw = kd.shape
    ho = conv_output_size(xd.shape[2], kh, stride)
    wo = conv_output_size(xd.shape[3], kw, stride)
    patches = _strided_patches(xd, kh, kw, stride)  # (B, Ho, Wo, Cin, kh, kw)
    out = np.tensordot(patches, kd, axes=([3, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, Cout)
    out = out + bias.data
    out_data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if single:
        out_data = out_data[0]

    def backward_fn(g):
        go = g[None] if single else g  # (B, Cout, Ho, Wo)
        got = go.transpose(0, 2, 3, 1)  # (B, Ho, Wo, Cout)
        if kernels.requires_grad:
            gk = np.tensordot(got, patches, axes=([0, 1, 2], [0, 1, 2]))
            _accumulate(kernels, gk)
        if bias.requires_grad:
            _accumulate(bias, go.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            t = np.tensordot(got, kd, axes=([3], [0]))  # (B, Ho, Wo, Cin, kh, kw)
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gx[
                        :,
                        :,
                        i : i + stride * (ho - 1) + 1 : stride,
                        j : j + stride * (wo - 1) + 1 : stride,
                    ] += t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accumulate(x, gx[0] if single else gx)

    return Tensor(out_data, _parents=(x, kernels, bias), _backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy -log softmax(logits)[label], max-stabilized.

    logits: (K,) with an integer label, or (B, K) with labels (B,).
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy shape mismatch: logits {logits.data.shape}, "
            f"labels {np.shape(labels)}"
        )
    k = z.shape[1]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    out_data = np.mean(logsumexp - shifted[rows, y])

    def backward_fn(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[rows, y] -= 1.0
        gz = float(g) * probs / z.shape[0]
        _accumulate(logits, gz[0] if single else gz)

    return Tensor(out_data, _parents=(logits,), _backward_fn=backward_fn)
