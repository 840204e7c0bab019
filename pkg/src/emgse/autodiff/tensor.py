"""Dense tensor with a reverse-mode tape.

A Tensor wraps one numpy array plus an optional gradient slot. Primitive
operations (see ops.py) record a tape node on each output: the parent
tensors and a closure that maps the output cotangent to per-parent
cotangents. ``backward`` replays the tape in reverse topological order,
visiting each node exactly once and accumulating into ``grad``.

Two precisions are supported globally: float64 for gradient checking and
float32 for training runs. ``set_default_dtype`` / ``using_dtype`` switch
the dtype used for newly created tensors.
"""

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Set the dtype for tensors created from raw data (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled():
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class TapeNode:
    """One recorded primitive: parent tensors plus the cotangent rule.

    ``backward_fn(grad_out)`` returns one numpy array (or None) per parent.
    """

    __slots__ = ("parents", "backward_fn", "name")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional float array with an optional reverse-mode gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not Tensors")
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying array (not a copy); treat as read-only."""
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- tape ---------------------------------------------------------------

    def _attach(self, parents, backward_fn, name):
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self.node = TapeNode(tuple(parents), backward_fn, name)
        return self

    def backward(self, grad=None):
        """Populate ``grad`` on every reachable requires_grad tensor.

        The loss must be scalar unless an explicit output cotangent is given.
        Repeated calls accumulate (grads are summed, not reset).
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit cotangent needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"cotangent shape {grad.shape} != tensor shape {self.shape}")

        # Depth-first topological order; each node visited exactly once.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in seen:
                continue
            if expanded:
                seen.add(id(t))
                order.append(t)
                continue
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                # Leaf: this is where gradients are kept. Intermediates only
                # pass cotangents through, so big graphs stay single-copy.
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if pg.shape != p.data.shape:
                    raise ShapeError(
                        f"backward of {t.node.name}: gradient shape {pg.shape} "
                        f"!= parent shape {p.data.shape}"
                    )
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar (implemented in ops.py, bound at import) -------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def as_tensor(x, dtype=None):
    """Pass Tensors through; wrap arrays/scalars as constants."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)
