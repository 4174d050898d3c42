"""Minimal reverse-mode differentiation core with Adam and a checkpoint format.

Every tensor holds double-precision values; gradients are allocated on demand and
accumulated by the backward closures of the ops that produced a tensor. There is no
module-level state: two models built in the same process share nothing.
"""
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from src.errors import CheckpointError, MissingGradientError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "UTTS-CKPT v1"


class Tensor:
    """Array value plus (optional) gradient and the closure that back-propagates it."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        values = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"Non-finite values in tensor {name or '<op output>'} of shape {values.shape}")
        self.values = values
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this tensor (scalar unless an explicit seed is given)."""
        if grad is None:
            if self.values.size != 1:
                raise ShapeError(f"backward() without seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        _accumulate(self, np.asarray(grad, dtype=np.float64))

        # iterative topological order (graphs of recurrent models are deep)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    """Tensor that never receives gradients."""
    return Tensor(values, requires_grad=False)


def parameter(values, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.values.shape:
        raise ShapeError(f"Gradient shape {g.shape} does not match tensor shape {t.values.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _node(values: np.ndarray, parents: tuple, backward: Callable[[np.ndarray], None]) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        values,
        requires_grad=requires,
        _parents=parents if requires else (),
        _backward=backward if requires else None,
    )


def custom_op(values: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Graph node for an op whose backward closure is written by the caller.

    The closure receives the upstream gradient and must call `accumulate(parent, grad)`.
    """
    return _node(values, tuple(parents), backward)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    _accumulate(t, g)


def _check_2d(t: Tensor, what: str) -> None:
    if t.values.ndim != 2:
        raise ShapeError(f"{what} expects a 2-D tensor, got shape {t.shape}")


# ============================================================================
# Elementwise and reduction ops
# ============================================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a bias vector (D,) or a single row (1, D) broadcast over rows of a."""
    if a.shape == b.shape:
        reduce_b = None
    elif b.values.ndim == 1 and a.values.ndim == 2 and a.shape[1] == b.shape[0]:
        reduce_b = "vector"
    elif b.values.ndim == 2 and a.values.ndim == 2 and b.shape[0] == 1 and a.shape[1] == b.shape[1]:
        reduce_b = "row"
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        if reduce_b is None:
            _accumulate(b, g)
        elif reduce_b == "vector":
            _accumulate(b, g.sum(axis=0))
        else:
            _accumulate(b, g.sum(axis=0, keepdims=True))

    return _node(a.values + b.values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.values)
        _accumulate(b, g * a.values)

    return _node(a.values * b.values, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(x, g * c)

    return _node(x.values * c, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = (x.values > 0).astype(np.float64)

    def backward(g):
        _accumulate(x, g * mask)

    return _node(x.values * mask, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(x.values > 0, 1.0, slope)

    def backward(g):
        _accumulate(x, g * mask)

    return _node(x.values * mask, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.values)

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)

    def backward(g):
        _accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NonFiniteError("log of a non-positive value")

    def backward(g):
        _accumulate(x, g / x.values)

    return _node(np.log(x.values), (x,), backward)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.values)

    def backward(g):
        _accumulate(x, g * sign)

    return _node(np.abs(x.values), (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax (over the last axis)."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    out = x.values - logsumexp(x.values, axis=-1, keepdims=True)
    s = np.exp(out)

    def backward(g):
        _accumulate(x, g - s * g.sum(axis=-1, keepdims=True))

    return _node(out, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against constant targets."""
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.shape)
    z = logits.values
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        _accumulate(logits, g * (expit(z) - y))

    return _node(out, (logits,), backward)


def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum of all entries (scalar) or along an axis (kept as size-1 dimension)."""
    if axis is None:
        def backward(g):
            _accumulate(x, np.full(x.shape, float(g)))

        return _node(np.array(x.values.sum()), (x,), backward)

    def backward_axis(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(x.values.sum(axis=axis, keepdims=True), (x,), backward_axis)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.values.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


# ============================================================================
# Shape ops
# ============================================================================

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            _accumulate(t, piece)

    return _node(values, tuple(tensors), backward)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """x[start:stop] along the first axis."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"rows: bad range [{start}, {stop}) for {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.values)
        full[start:stop] = g
        _accumulate(x, full)

    return _node(x.values[start:stop], (x,), backward)


def transpose(x: Tensor) -> Tensor:
    _check_2d(x, "transpose")

    def backward(g):
        _accumulate(x, g.T)

    return _node(x.values.T, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.values.reshape(shape), (x,), backward)


# ============================================================================
# Linear algebra, convolution, embedding, recurrent cell
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _node(a.values @ b.values, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N x I) @ weight (I x O) + bias (O,)."""
    _check_2d(x, "linear")
    if weight.values.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.values @ weight.values
    if bias is not None:
        out = out + bias.values
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        _accumulate(x, g @ weight.values.T)
        _accumulate(weight, x.values.T @ g)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _node(out, parents, backward)


def _im2col(xp: np.ndarray, width: int) -> np.ndarray:
    """(Tp, C) -> (Tp - width + 1, width * C), column index = k * C + c."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=0)  # (To, C, K)
    return windows.transpose(0, 2, 1).reshape(windows.shape[0], width * xp.shape[1])


def _col2im(cols: np.ndarray, width: int, padded_len: int, channels: int) -> np.ndarray:
    out = np.zeros((padded_len, channels))
    n_out = cols.shape[0]
    blocks = cols.reshape(n_out, width, channels)
    for k in range(width):
        out[k:k + n_out] += blocks[:, k, :]
    return out


def _conv_geometry(length: int, weight: Tensor, padding: tuple[int, int]) -> tuple[int, int]:
    if weight.values.ndim != 3:
        raise ShapeError(f"conv1d weight must be (K, Cin, Cout), got {weight.shape}")
    padded = length + padding[0] + padding[1]
    n_out = padded - weight.shape[0] + 1
    if n_out < 1:
        raise ShapeError(f"conv1d: kernel {weight.shape[0]} longer than padded input {padded}")
    return padded, n_out


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Stride-1 1-D convolution of x (T x Cin) with weight (K x Cin x Cout), explicit padding."""
    _check_2d(x, "conv1d")
    width, c_in, c_out = weight.shape if weight.values.ndim == 3 else (0, 0, 0)
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[1]} vs weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} vs {c_out} output channels")
    padded, _ = _conv_geometry(x.shape[0], weight, padding)
    xp = np.pad(x.values, ((padding[0], padding[1]), (0, 0)))
    cols = _im2col(xp, width)
    w2 = weight.values.reshape(width * c_in, c_out)
    out = cols @ w2
    if bias is not None:
        out = out + bias.values
    parents = (x, weight) if bias is None else (x, weight, bias)
    length = x.shape[0]

    def backward(g):
        _accumulate(weight, (cols.T @ g).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            dxp = _col2im(g @ w2.T, width, padded, c_in)
            _accumulate(x, dxp[padding[0]:padding[0] + length])

    return _node(out, parents, backward)


def conv1d_input_grad(upstream: Tensor, weight: Tensor, length: int, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Gradient of a conv1d with respect to its input, as a differentiable function.

    Given the gradient `upstream` (T_out x Cout) at the output of conv1d(x, weight, padding)
    for an input of `length` rows, returns dL/dx (length x Cin). The result is linear in
    both `upstream` and `weight` and is differentiated exactly, which lets penalties on
    input gradients be optimized without a second backward pass.
    """
    _check_2d(upstream, "conv1d_input_grad")
    width, c_in, c_out = weight.shape
    padded, n_out = _conv_geometry(length, weight, padding)
    if upstream.shape != (n_out, c_out):
        raise ShapeError(f"conv1d_input_grad: upstream {upstream.shape} vs expected {(n_out, c_out)}")
    w2 = weight.values.reshape(width * c_in, c_out)
    gp = _col2im(upstream.values @ w2.T, width, padded, c_in)
    out = gp[padding[0]:padding[0] + length]

    def backward(g):
        g_pad = np.pad(g, ((padding[0], padding[1]), (0, 0)))
        cols = _im2col(g_pad, width)
        _accumulate(upstream, cols @ w2)
        _accumulate(weight, (cols.T @ upstream.values).reshape(weight.shape))

    return _node(out, (upstream, weight), backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of `table` selected by integer ids."""
    _check_2d(table, "embedding")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _node(table.values[idx], (table,), backward)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step; gate layout of the 3H columns is [reset, update, new]."""
    _check_2d(x, "gru_cell")
    _check_2d(h, "gru_cell")
    hidden = h.shape[1]
    if w_ih.shape != (x.shape[1], 3 * hidden) or w_hh.shape != (hidden, 3 * hidden):
        raise ShapeError(f"gru_cell: weights {w_ih.shape}, {w_hh.shape} for input {x.shape}, hidden {h.shape}")
    if b_ih.shape != (3 * hidden,) or b_hh.shape != (3 * hidden,):
        raise ShapeError("gru_cell: bias shapes must be (3H,)")

    gi = x.values @ w_ih.values + b_ih.values
    gh = h.values @ w_hh.values + b_hh.values
    r = expit(gi[:, :hidden] + gh[:, :hidden])
    z = expit(gi[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    gh_n = gh[:, 2 * hidden:]
    n = np.tanh(gi[:, 2 * hidden:] + r * gh_n)
    out = (1.0 - z) * n + z * h.values

    def backward(g):
        dn = g * (1.0 - z)
        dz = g * (h.values - n)
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * gh_n
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        _accumulate(x, dgi @ w_ih.values.T)
        _accumulate(h, dgh @ w_hh.values.T + g * z)
        _accumulate(w_ih, x.values.T @ dgi)
        _accumulate(w_hh, h.values.T @ dgh)
        _accumulate(b_ih, dgi.sum(axis=0))
        _accumulate(b_hh, dgh.sum(axis=0))

    return _node(out, (x, h, w_ih, w_hh, b_ih, b_hh), backward)


# ============================================================================
# Parameters, optimizer, gradient checking
# ============================================================================

class ParameterSet:
    """Named parameter tensors with stable (insertion) iteration order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ShapeError(f"Duplicate parameter name: {name}")
        t = parameter(values, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise CheckpointError(f"Missing parameter in checkpoint: {name}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.shape:
                raise CheckpointError(f"Shape mismatch for {name}: {value.shape} vs {t.shape}")
            t.values = value.copy()

    def n_values(self) -> int:
        return int(sum(t.values.size for t in self._params.values()))


@dataclass
class AdamState:
    """Adam moments per parameter name; beta/eps defaults follow the usual convention."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """Bias-corrected Adam update of every parameter; gradients are zeroed afterwards."""
    for name, t in params.items():
        if t.grad is None:
            raise MissingGradientError(f"Parameter {name} has no gradient")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.values)
            v = np.zeros_like(t.values)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        t.values = t.values - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = None


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most max_norm; returns the norm before."""
    norm = float(np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params.items() if t.grad is not None)))
    if norm > max_norm > 0:
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= max_norm / norm
    return norm


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both gradients vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar f at x with central differences."""
    x = np.array(x, dtype=np.float64)
    xt = parameter(x)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f(constant(x)).item()
        flat[i] = orig - h
        minus = f(constant(x)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return relative_error(analytic, numeric)


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet,
    names: Optional[Sequence[str]] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    h: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter relative error of the analytic gradient of loss_fn() vs central differences.

    With max_coords, only that many randomly chosen coordinates per parameter are checked.
    """
    params.zero_grad()
    loss_fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values)) for name, t in params.items()}
    params.zero_grad()

    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    for name in names or list(params):
        t = params[name]
        flat = t.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = analytic[name].reshape(-1)[coords]
        n = np.zeros(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn().item()
            flat[i] = orig - h
            minus = loss_fn().item()
            flat[i] = orig
            n[j] = (plus - minus) / (2.0 * h)
        params.zero_grad()
        errors[name] = relative_error(a, n)
    return errors


# ============================================================================
# Checkpoint format: little-endian doubles + text index with shape headers
# ============================================================================

def save_checkpoint(path: str, arrays: Mapping[str, np.ndarray], meta: Optional[Mapping[str, object]] = None) -> None:
    """Write `path` (raw '<f8' data) and `path.index` (name, offset, shape per line)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    index_lines = [CHECKPOINT_MAGIC]
    for key, value in sorted((meta or {}).items()):
        index_lines.append(f"#meta\t{key}\t{json.dumps(value, sort_keys=True)}")
    offset = 0
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        header = len(CHECKPOINT_MAGIC) + 1
        for name, value in arrays.items():
            if "\t" in name or "\n" in name:
                raise CheckpointError(f"Invalid parameter name: {name!r}")
            data = np.ascontiguousarray(value, dtype="<f8")
            f.write(data.tobytes())
            shape = ",".join(str(d) for d in data.shape)
            index_lines.append(f"{name}\t{header + offset}\t{shape}")
            offset += data.nbytes
    with open(path + ".index", "w", encoding="utf-8") as f:
        f.write("\n".join(index_lines) + "\n")


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    """Read a checkpoint written by save_checkpoint; returns (arrays, meta)."""
    index_path = path + ".index"
    if not os.path.isfile(path) or not os.path.isfile(index_path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(index_path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad checkpoint index magic in {index_path}")
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith((CHECKPOINT_MAGIC + "\n").encode("ascii")):
        raise CheckpointError(f"Bad checkpoint magic in {path}")

    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, object] = {}
    for line in lines[1:]:
        parts = line.split("\t")
        if parts[0] == "#meta":
            meta[parts[1]] = json.loads(parts[2])
            continue
        name, offset, shape_text = parts
        shape = tuple(int(d) for d in shape_text.split(",") if d != "")
        count = int(np.prod(shape)) if shape else 1
        start = int(offset)
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[name] = data.reshape(shape).astype(np.float64)
    return arrays, meta
