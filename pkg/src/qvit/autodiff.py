"""Minimal dense-tensor reverse-mode differentiation.

Just enough for the transformer pipeline: 2-D float64 arrays, a tape built
implicitly through parent links, and one backward pass per forward graph.
The quantum projections join the graph through quantum_apply, which caches
per-row Jacobians on the way forward and turns them into ordinary chain-rule
products on the way back.

Everything is double precision; graphs are built per forward pass and torn
down by backward().
"""

from contextlib import contextmanager

import numpy as np

from . import qnn

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction; forward values are unaffected."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def backward(self, seed=None):
        """Reverse-topological sweep from this node; accumulates into .grad.

        seed defaults to 1.0 and must be given explicitly for non-scalar
        outputs. Parent links are dropped afterwards, so each graph supports
        exactly one backward pass.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward on a non-scalar needs an explicit seed")
            seed = 1.0
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), self.data.shape)

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = seed.copy() if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, pull in node._parents:
                g = pull(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g
            if node._parents:
                node._parents = ()
                if node is not self:
                    node.grad = None


def parameter(data):
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    return Tensor(data)


def _track(data, *links):
    """links are (tensor, pull_fn); kept only for parents that need grads."""
    if _grad_enabled:
        parents = tuple((t, fn) for t, fn in links if t.requires_grad)
        if parents:
            return Tensor(data, requires_grad=True, parents=parents)
    return Tensor(data)


def matmul(a, b):
    ad, bd = a.data, b.data
    return _track(ad @ bd,
                  (a, lambda g: g @ bd.T),
                  (b, lambda g: ad.T @ g))


def transpose(a):
    return _track(a.data.T, (a, lambda g: g.T))


def add(a, b):
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return _track(ad + bd, (a, lambda g: g), (b, lambda g: g))
    if bd.shape == ad.shape[-1:] or bd.shape == (1,) + ad.shape[-1:]:
        # bias row broadcast over the leading axis
        return _track(ad + bd,
                      (a, lambda g: g),
                      (b, lambda g: g.sum(axis=0).reshape(bd.shape)))
    raise ValueError(f"incompatible shapes for add: {ad.shape} vs {bd.shape}")


def scale(a, s):
    s = float(s)
    return _track(a.data * s, (a, lambda g: g * s))


def relu(a):
    mask = a.data > 0
    return _track(np.where(mask, a.data, 0.0), (a, lambda g: g * mask))


def softmax_rows(a):
    """Row-wise softmax with max subtraction for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _track(y, (a, lambda g: y * (g - (g * y).sum(axis=-1, keepdims=True))))


def layer_norm_rows(a, eps=1e-5):
    """Per-row standardization, no affine terms."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def pull(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gy)

    return _track(y, (a, pull))


def mean_rows(a):
    """(t, d) -> (1, d) token pooling."""
    t = a.data.shape[0]
    return _track(a.data.mean(axis=0, keepdims=True),
                  (a, lambda g: np.broadcast_to(g / t, a.data.shape).copy()))


def mse_loss(pred, target):
    """Mean squared error against a constant target; scalar output."""
    diff = pred.data - np.asarray(target, dtype=np.float64)
    out = np.array(np.mean(diff * diff))
    return _track(out, (pred, lambda g: (2.0 / diff.size) * diff * g))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows, fused with log-softmax.

    logits: (m, C); labels: int array (m,).
    """
    z = logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    m = z.shape[0]
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    picked = z[np.arange(m), labels]
    out = np.array(np.mean(logsumexp.ravel() - picked))

    def pull(g):
        soft = np.exp(z - logsumexp)
        soft[np.arange(m), labels] -= 1.0
        return soft * (g / m)

    return _track(out, (logits, pull))


def quantum_apply(rows, params, pairs, threads=1):
    """Push every row of `rows` through one quantum projection.

    rows: Tensor (tokens, n); params: Tensor (2 * len(pairs),) shared across
    rows. The forward adjoint sweep caches per-row Jacobians; backward routes
    the upstream gradient into the rows and, summed over tokens, into the
    circuit parameters.
    """
    spec = qnn.QnnSpec(rows.data.shape[1], pairs, params.data)
    if _grad_enabled and (rows.requires_grad or params.requires_grad):
        y, jx, jt = qnn.qnn_jacobians_batch(rows.data, spec, threads=threads)
        return _track(y,
                      (rows, lambda g: np.einsum("tji,tj->ti", jx, g)),
                      (params, lambda g: np.einsum("tjk,tj->k", jt, g)))
    return Tensor(qnn.qnn_forward_batch(rows.data, spec, threads=threads))
