"""Reverse-mode automatic differentiation over dense numpy tensors.

A ``Graph`` is a tape: every differentiable operation appends its output
node in construction order, and ``backward`` replays the tape in exact
reverse order. Tensors hold 64-bit float values by default (32-bit can be
selected with :func:`set_default_dtype` for faster training runs; tests
always use 64-bit). Broadcasting is supported only for the patterns the
models need: a leading batch dimension against per-feature vectors,
e.g. ``(n, h) op (h,)`` or ``(n, h) op (n, 1)``.

Also provides the Adam optimizer and the linear-algebra helpers required
by the losses: unnormalized batch covariance, positive-definite
log-determinant, row-wise L2 normalization and batch normalization.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericalFailure

_DEFAULT_DTYPE = np.float64
_DEBUG = False


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractViolation(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def set_debug(flag: bool) -> None:
    """Enable per-operation NaN/Inf checks (forward and backward)."""
    global _DEBUG
    _DEBUG = bool(flag)


class Graph:
    """Ordered tape of operation records.

    Nodes are appended at construction time, so iterating the list in
    reverse visits the computation in exact reverse construction order.
    Use as a context manager to make it the recording target:

        with Graph() as g:
            loss = ...
        grads = g.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def clear(self):
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        return backward(self, loss)


_GRAPH_STACK: list[Graph] = [Graph()]


def _active_graph() -> Graph:
    return _GRAPH_STACK[-1]


def default_graph() -> Graph:
    """The ambient tape used when no ``with Graph()`` block is active."""
    return _GRAPH_STACK[0]


class Tensor:
    """Dense array with an optional gradient slot.

    ``grad`` is lazily allocated: it stays ``None`` until a backward pass
    deposits into it, which also encodes "gradient of an unreached tensor
    is zero".
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "_graph", "_op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=_DEFAULT_DTYPE)
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NumericalFailure("non-finite values in tensor literal")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._graph = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_leaf(self):
        return self._vjp is None

    def detach(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, owned: bool = False):
        # ``owned`` marks arrays freshly allocated by the caller, which can
        # be adopted directly instead of copied on the first deposit.
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=self.values.dtype)
        else:
            self.grad += g

    def backward(self) -> dict["Tensor", np.ndarray]:
        if self._graph is None:
            raise ContractViolation("backward() on a leaf tensor; differentiate through a graph")
        return backward(self._graph, self)

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def item(self) -> float:
        return float(self.values)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(values: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    """Record one operation on the active tape (skipped for constant results)."""
    if _DEBUG and not np.all(np.isfinite(values)):
        raise NumericalFailure(f"non-finite forward values in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
        g = _active_graph()
        out._graph = g
        g.nodes.append(out)
    else:
        out._parents = ()
        out._vjp = None
        out._graph = None
    return out


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape in reverse construction order.

    Returns a map from every reached requires_grad leaf to its gradient
    array. Gradients accumulate into ``.grad``; call ``zero_grads`` between
    independent backward passes.
    """
    if loss.values.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.values.shape}")
    if not np.all(np.isfinite(loss.values)):
        raise NumericalFailure("loss is not finite")
    if loss._graph is not None and loss._graph is not graph:
        raise ContractViolation("loss was not recorded on the given graph")
    loss._accumulate(np.ones_like(loss.values), owned=True)
    reached: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        if node.grad is None or node._vjp is None:
            continue
        if _DEBUG and not np.all(np.isfinite(node.grad)):
            raise NumericalFailure(f"non-finite gradient in op '{node._op}'")
        node._vjp(node.grad)
        node.grad = None  # intermediate grads are consumed; leaves accumulate
        for p in node._parents:
            if p.requires_grad and p.is_leaf and p.grad is not None:
                reached[p] = p.grad
    if loss.is_leaf and loss.requires_grad:
        reached[loss] = loss.grad
    return reached


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- broadcasting helper -------------------------------------------------------


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitive operations ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values + b.values

    def vjp(g):
        if a.requires_grad:
            ga = _sum_to_shape(g, a.values.shape)
            a._accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _sum_to_shape(g, b.values.shape)
            b._accumulate(gb, owned=gb is not g)

    return _node(out_values, (a, b), vjp, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        a._accumulate(-g, owned=True)

    return _node(-a.values, (a,), vjp, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values * b.values

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.values, a.values.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.values, b.values.shape), owned=True)

    return _node(out_values, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values / b.values

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g / b.values, a.values.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g * a.values / (b.values * b.values), b.values.shape), owned=True)

    return _node(out_values, (a, b), vjp, "div")


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out_values = a.values**e

    def vjp(g):
        a._accumulate(g * (e * a.values ** (e - 1.0)), owned=True)

    return _node(out_values, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def vjp(g):
        a._accumulate(g * out_values, owned=True)

    return _node(out_values, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.log(a.values)

    def vjp(g):
        a._accumulate(g / a.values, owned=True)

    return _node(out_values, (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.sqrt(a.values)

    def vjp(g):
        a._accumulate(g * (0.5 / out_values), owned=True)

    return _node(out_values, (a,), vjp, "sqrt")


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero on the clipped entries."""
    a = as_tensor(a)
    mask = a.values > floor

    def vjp(g):
        a._accumulate(g * mask, owned=True)

    return _node(np.maximum(a.values, floor), (a,), vjp, "clip_min")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = (a.values > 0) * (1.0 - slope)
    scale += slope

    def vjp(g):
        a._accumulate(g * scale, owned=True)

    return _node(a.values * scale, (a,), vjp, "leaky_relu")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values @ b.values

    def vjp(g):
        if a.values.ndim == 2 and b.values.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ b.values.T, owned=True)
            if b.requires_grad:
                b._accumulate(a.values.T @ g, owned=True)
        elif a.values.ndim == 2 and b.values.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, b.values), owned=True)
            if b.requires_grad:
                b._accumulate(a.values.T @ g, owned=True)
        elif a.values.ndim == 1 and b.values.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ b.values.T, owned=True)
            if b.requires_grad:
                b._accumulate(np.outer(a.values, g), owned=True)
        elif a.values.ndim == 1 and b.values.ndim == 1:
            if a.requires_grad:
                a._accumulate(g * b.values, owned=True)
            if b.requires_grad:
                b._accumulate(g * a.values, owned=True)
        else:
            raise ContractViolation("matmul supports 1-D and 2-D operands only")

    return _node(out_values, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ContractViolation("transpose expects a 2-D tensor")

    def vjp(g):
        a._accumulate(g.T)

    return _node(a.values.T, (a,), vjp, "transpose")


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_values = a.values[key]

    def vjp(g):
        full = np.zeros_like(a.values)
        np.add.at(full, key, g)
        a._accumulate(full, owned=True)

    return _node(np.array(out_values, copy=True), (a,), vjp, "getitem")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.values.shape).copy(), owned=True)

    return _node(out_values, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else a.values.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis: int = 1, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(a))) along one axis."""
    a = as_tensor(a)
    m = a.values.max(axis=axis, keepdims=True)
    shifted = np.exp(a.values - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_values = m + np.log(total)
    soft = shifted / total

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(g * soft, owned=True)

    return _node(out_values if keepdims else np.squeeze(out_values, axis=axis), (a,), vjp, "logsumexp")


def log_softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


def softmax(a, axis: int = 1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def trace(a) -> Tensor:
    a = as_tensor(a)
    n, m = a.values.shape
    if n != m:
        raise ContractViolation("trace expects a square matrix")
    eye = np.eye(n, dtype=a.values.dtype)

    def vjp(g):
        a._accumulate(g * eye, owned=True)

    return _node(np.trace(a.values), (a,), vjp, "trace")


# -- linear-algebra helpers for the losses -------------------------------------


def batch_covariance(w: Tensor, beta: float) -> Tensor:
    """Unnormalized sample covariance of the rows of ``w`` plus ``beta * I``.

    Sigma = sum_i (w_i - w_bar)(w_i - w_bar)^T + beta I, symmetric
    positive-definite for beta > 0, differentiable with respect to ``w``.
    """
    if beta <= 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    w = as_tensor(w)
    if w.values.ndim != 2 or w.values.shape[0] < 1:
        raise ContractViolation("batch_covariance expects an (n, h) matrix with n >= 1")
    centered = w - mean(w, axis=0, keepdims=True)
    h = w.values.shape[1]
    return transpose(centered) @ centered + Tensor(beta * np.eye(h))


def logdet_psd(sigma: Tensor) -> Tensor:
    """log-determinant of a symmetric positive-definite matrix.

    Computed from a Cholesky factorization; failure to factor raises
    NumericalFailure rather than silently regularizing. The gradient is
    the matrix inverse.
    """
    sigma = as_tensor(sigma)
    try:
        chol = np.linalg.cholesky(sigma.values)
    except np.linalg.LinAlgError as err:
        raise NumericalFailure(f"logdet_psd: matrix is not positive-definite ({err})") from err
    out_value = 2.0 * np.sum(np.log(np.diag(chol)))
    eye = np.eye(sigma.values.shape[0], dtype=sigma.values.dtype)
    inv = None

    def vjp(g):
        nonlocal inv
        if inv is None:
            from scipy.linalg import cho_solve

            inv = cho_solve((chol, True), eye)
        sigma._accumulate(g * inv, owned=True)

    return _node(np.asarray(out_value), (sigma,), vjp, "logdet_psd")


def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors (or matrix rows) to unit Euclidean norm."""
    v = as_tensor(v)
    norms = np.linalg.norm(v.values, axis=axis)
    if np.any(norms < 1e-300):
        raise NumericalFailure("l2_normalize: zero-norm input")
    sq = sum_(v * v, axis=axis, keepdims=True)
    return v / sqrt(sq)


# -- batch normalization --------------------------------------------------------

BN_EPS = 1e-5


class BatchNorm:
    """Per-feature batch normalization with running statistics.

    Training mode normalizes with the batch mean/variance (variance floored
    by ``BN_EPS``); evaluation mode uses the running statistics. gamma and
    beta are the learnable affine parameters.
    """

    def __init__(self, num_features: int, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=_DEFAULT_DTYPE)
        self.running_var = np.ones(num_features, dtype=_DEFAULT_DTYPE)
        self.momentum = momentum

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, training, state=self)


def batch_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, training: bool, state: BatchNorm | None = None) -> Tensor:
    """Normalize each feature column; see :class:`BatchNorm` for modes."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ContractViolation("batch_norm expects an (n, h) batch")
    if training:
        n = x.values.shape[0]
        if n < 2:
            raise ContractViolation("batch_norm training mode needs batch size >= 2")
        mu = mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=0, keepdims=True)
        x_hat = centered / sqrt(var + BN_EPS)
        if state is not None:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * x.values.mean(axis=0)
            state.running_var = (1 - m) * state.running_var + m * x.values.var(axis=0)
    else:
        if state is None:
            raise ContractViolation("evaluation mode requires running statistics")
        x_hat = (x - Tensor(state.running_mean)) / Tensor(np.sqrt(state.running_var + BN_EPS))
    return x_hat * gamma + beta_shift


# -- Adam ------------------------------------------------------------------------


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> None:
    """One Adam update, in place. ``None`` gradients count as zero."""
    if len(params) != len(state.m):
        raise ContractViolation("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match parameter shape {p.values.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class frozen:
    """Temporarily clear requires_grad on a set of tensors.

    Used by the samplers, which need gradients with respect to their input
    points but must not deposit gradients into the model parameters.
    """

    def __init__(self, tensors):
        self.tensors = list(tensors)
        self.saved: list[bool] = []

    def __enter__(self):
        self.saved = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self.tensors, self.saved):
            t.requires_grad = flag
        return False
