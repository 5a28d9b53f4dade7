"""Small reverse-mode autodiff kernel on float64 numpy arrays.

Every value is a 2-D array (rows = batch). Parameters live in a
:class:`ParamStore` as :class:`ParamSlot` objects; each forward pass wraps the
slots it reads in fresh leaf :class:`Var` nodes, and :meth:`Var.backward`
accumulates into ``slot.grad``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as _k
from .errors import ConfigurationError, DataError

DTYPE = np.float64
_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


# ---------------------------------------------------------------------------
# PRNG


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 generator. Array draws are vectorized but consume the
    stream exactly as the equivalent number of scalar draws would."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            out = _mix64_array(states)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits."""
        return (self.u64_array(n) >> np.uint64(11)).astype(DTYPE) * 2.0**-53

    def uniform_open(self, n: int) -> np.ndarray:
        """Uniform doubles in (0, 1]."""
        return ((self.u64_array(n) >> np.uint64(11)).astype(DTYPE) + 1.0) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller; each pair of uniforms yields a (cos, sin) pair."""
        m = (n + 1) // 2
        u = self.uniform_open(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty(2 * m, dtype=DTYPE)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def next_normal(self) -> float:
        return float(self.normal(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        keys = self.u64_array(n)
        return np.argsort(keys, kind="stable")

    def fork(self) -> "Rng":
        return Rng(self.next_u64())


def rng_next(r: Rng) -> int:
    return r.next_u64()


def rng_normal(r: Rng) -> float:
    return r.next_normal()


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ParamSlot:
    id: str
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    init: str = "zeros"
    touched: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


def _init_array(kind: str, shape: tuple[int, int], rng: Rng) -> np.ndarray:
    rows, cols = shape
    size = rows * cols
    if kind == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if kind == "ones":
        return np.ones(shape, dtype=DTYPE)
    u = rng.uniform(size).reshape(shape) * 2.0 - 1.0
    # weights are stored (fan_out, fan_in)
    fan_out, fan_in = rows, cols
    if kind == "he":
        return u * math.sqrt(6.0 / fan_in)
    if kind == "xavier":
        return u * math.sqrt(6.0 / (fan_in + fan_out))
    if kind.startswith("scaled:"):
        # uniform with standard deviation gain / sqrt(fan_in)
        gain = float(kind.split(":", 1)[1])
        return u * (gain * math.sqrt(3.0 / fan_in))
    if kind.startswith("normal:"):
        std = float(kind.split(":", 1)[1])
        return rng.normal(size).reshape(shape) * std
    raise ConfigurationError(f"unknown initializer {kind!r}")


class ParamStore:
    """Registry of every parameter and piece of persistent state in a model."""

    def __init__(self):
        self.slots: dict[str, ParamSlot] = {}

    def declare(self, pid: str, shape: tuple[int, int], init: str = "zeros", trainable: bool = True) -> ParamSlot:
        if pid in self.slots:
            raise ConfigurationError(f"duplicate parameter id {pid!r}")
        shape = (int(shape[0]), int(shape[1]))
        slot = ParamSlot(pid, np.zeros(shape, DTYPE), np.zeros(shape, DTYPE), trainable, init)
        if init == "ones":
            slot.value[...] = 1.0
        self.slots[pid] = slot
        return slot

    def initialize(self, rng: Rng) -> None:
        for pid in sorted(self.slots):
            slot = self.slots[pid]
            slot.value[...] = _init_array(slot.init, slot.shape, rng)

    def __getitem__(self, pid: str) -> ParamSlot:
        return self.slots[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self.slots

    def __iter__(self):
        return (self.slots[k] for k in sorted(self.slots))

    def __len__(self) -> int:
        return len(self.slots)

    def trainable(self) -> list[ParamSlot]:
        return [s for s in self if s.trainable]

    def zero_grad(self) -> None:
        for slot in self.slots.values():
            slot.grad[...] = 0.0
            slot.touched = False

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.slots.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self.slots:
                raise ConfigurationError(f"unknown parameter id {k!r}")
            if v.shape != self.slots[k].shape:
                raise ConfigurationError(f"shape mismatch for {k!r}: {v.shape} vs {self.slots[k].shape}")
            self.slots[k].value[...] = v

    def count(self, prefix: str = "", exclude: Sequence[str] = (), trainable_only: bool = True) -> int:
        total = 0
        for slot in self.slots.values():
            if trainable_only and not slot.trainable:
                continue
            if not slot.id.startswith(prefix):
                continue
            if any(tag in slot.id for tag in exclude):
                continue
            total += slot.value.size
        return total


# ---------------------------------------------------------------------------
# Autodiff graph


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "slot", "needs_grad")

    def __init__(self, data, parents: tuple = (), backward_fn=None, slot: ParamSlot | None = None, needs_grad=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.slot = slot
        if needs_grad is None:
            needs_grad = slot is not None or any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.needs_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.needs_grad:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            if node.slot is not None:
                node.slot.grad += g
                node.slot.touched = True
            if node.backward_fn is not None:
                pgrads = node.backward_fn(g)
                for p, pg in zip(node.parents, pgrads):
                    if pg is None or not p.needs_grad:
                        continue
                    p.grad = pg if p.grad is None else p.grad + pg
            if node.backward_fn is not None and node is not self:
                node.grad = None


def param(slot: ParamSlot) -> Var:
    return Var(slot.value, slot=slot if slot.trainable else None, needs_grad=slot.trainable)


def const(x, needs_grad: bool = False) -> Var:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Var(arr, needs_grad=needs_grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite values produced by {what}")


# --- affine / elementwise -------------------------------------------------


def linear(x: Var, W: Var, b: Var | None = None) -> Var:
    """y = x W^T + b for row vectors x (n, d_in); W is (d_out, d_in)."""
    if x.data.shape[1] != W.data.shape[1]:
        raise ConfigurationError(f"linear: input dim {x.data.shape[1]} != weight fan-in {W.data.shape[1]}")
    if b is not None and b.data.shape != (1, W.data.shape[0]):
        raise ConfigurationError(f"linear: bias shape {b.data.shape} != (1, {W.data.shape[0]})")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data

    def back(g):
        gx = g @ W.data if x.needs_grad else None
        gW = g.T @ x.data if W.needs_grad else None
        if b is None:
            return gx, gW
        gb = g.sum(axis=0, keepdims=True) if b.needs_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return Var(y, parents, back)


def matmul_const(x: Var, M: np.ndarray) -> Var:
    """x @ M for a constant matrix M."""
    return Var(x.data @ M, (x,), lambda g: (g @ M.T,))


def add(a: Var, b: Var) -> Var:
    return Var(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Var, b: Var) -> Var:
    return Var(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)))


def mul(a: Var, b: Var) -> Var:
    return Var(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape) if a.needs_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.needs_grad else None,
        ),
    )


def scale(a: Var, c: float) -> Var:
    return Var(a.data * c, (a,), lambda g: (g * c,))


def add_n(items: Sequence[Var]) -> Var:
    data = items[0].data
    for v in items[1:]:
        data = data + v.data
    return Var(data, tuple(items), lambda g: tuple(_unbroadcast(g, v.data.shape) for v in items))


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    y = np.maximum(x.data, slope * x.data) if 0.0 <= slope <= 1.0 else np.where(x.data >= 0, x.data, slope * x.data)

    def back(g):
        return (np.where(x.data >= 0, g, slope * g),)

    return Var(y, (x,), back)


def relu(x: Var) -> Var:
    pos = x.data > 0
    return Var(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def _sigmoid_np(s):
    s = np.asarray(s, dtype=DTYPE)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_scalar(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def sigmoid(x: Var) -> Var:
    y = _sigmoid_np(x.data)
    return Var(y, (x,), lambda g: (g * y * (1.0 - y),))


def _softplus_np(s):
    return np.logaddexp(0.0, s)


def log_sigmoid(x: Var) -> Var:
    """ln sigmoid(x) = -softplus(-x), stable for large |x|."""
    y = -_softplus_np(-x.data)
    sig_neg = _sigmoid_np(-x.data)
    return Var(y, (x,), lambda g: (g * sig_neg,))


def log1mexp(a: Var, cap: float = math.log1p(-1e-7)) -> Var:
    """ln(1 - exp(a)) for a < 0; a is capped at ``cap`` (zero gradient above)."""
    capped = a.data > cap
    ac = np.minimum(a.data, cap)
    y = np.where(ac > -math.log(2.0), np.log(-np.expm1(ac)), np.log1p(-np.exp(ac)))
    dydx = -1.0 / np.expm1(-ac)

    def back(g):
        return (np.where(capped, 0.0, g * dydx),)

    return Var(y, (a,), back)


def clamp(x: Var, lo: float, hi: float) -> Var:
    inside = (x.data >= lo) & (x.data <= hi)
    return Var(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


# --- normalization ----------------------------------------------------------


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Row-wise layer norm with population variance."""
    d = x.data.shape[1]
    if d < 2:
        raise ConfigurationError("layer_norm needs at least 2 features")
    y, xhat, inv = _k.layer_norm_forward(np.ascontiguousarray(x.data), gamma.data, beta.data, eps)

    def back(g):
        gx, ggamma, gbeta = _k.layer_norm_backward(np.ascontiguousarray(g), xhat, inv, gamma.data)
        return gx, ggamma, gbeta

    return Var(y, (x, gamma, beta), back)


@dataclass
class BatchNormState:
    """Running statistics for one group of examples; columns are features."""

    mean: ParamSlot
    var: ParamSlot


def batch_norm(
    x: Var,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Var:
    """Column-wise batch norm (no affine). ``mode`` is "train" or "infer"."""
    if mode == "train":
        n = x.data.shape[0]
        if n < 2:
            raise DataError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        state.mean.value[...] = (1.0 - momentum) * state.mean.value + momentum * mu
        state.var.value[...] = (1.0 - momentum) * state.var.value + momentum * var

        def back(g):
            return (inv * (g - g.mean(axis=0, keepdims=True) - xhat * (g * xhat).mean(axis=0, keepdims=True)),)

        return Var(xhat, (x,), back)
    if mode != "infer":
        raise ConfigurationError(f"unknown batch-norm mode {mode!r}")
    inv = 1.0 / np.sqrt(state.var.value + eps)
    y = (x.data - state.mean.value) * inv
    return Var(y, (x,), lambda g: (g * inv,))


def softmax(x: Var) -> Var:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Var(y, (x,), back)


# --- structural -------------------------------------------------------------


def concat(items: Sequence[Var]) -> Var:
    if len(items) == 1:
        return items[0]
    widths = [v.data.shape[1] for v in items]
    bounds = np.cumsum([0] + widths)
    y = np.concatenate([v.data for v in items], axis=1)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(items)))

    return Var(y, tuple(items), back)


def take_cols(x: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    width = x.data.shape[1]

    def back(g):
        out = np.zeros((g.shape[0], width), dtype=DTYPE)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return Var(x.data[:, idx], (x,), back)


def take_rows(x: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]), dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return Var(x.data[idx], (x,), back)


def assemble_rows(parts: Sequence[Var], idxs: Sequence[np.ndarray], n: int) -> Var:
    """Inverse of splitting a batch into row groups: row idxs[k][j] <- parts[k][j]."""
    width = parts[0].data.shape[1]
    y = np.zeros((n, width), dtype=DTYPE)
    for p, idx in zip(parts, idxs):
        if p.data.shape[1] != width:
            raise ConfigurationError("assemble_rows: parts have different widths")
        y[idx] = p.data

    def back(g):
        return tuple(g[idx] for idx in idxs)

    return Var(y, tuple(parts), back)


def embedding(table: Var, ids: np.ndarray) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = ids[(ids < 0) | (ids >= rows)][0]
        raise DataError(f"categorical id {int(bad)} outside [0, {rows})")

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return Var(table.data[ids], (table,), back)


def rowdot(a: Var, b: Var) -> Var:
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"rowdot: shape mismatch {a.data.shape} vs {b.data.shape}")
    y = (a.data * b.data).sum(axis=1, keepdims=True)
    return Var(y, (a, b), lambda g: (g * b.data, g * a.data))


def total(x: Var) -> Var:
    shape = x.data.shape
    return Var(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def weighted_total(x: Var, w: np.ndarray) -> Var:
    """sum(w * x) for a constant array w."""
    return Var(np.array([[(x.data * w).sum()]]), (x,), lambda g: (g[0, 0] * w,))


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Bias-corrected Adam. Slots that received no gradient this step are
    skipped entirely (their moments and step count stay put), so an expert
    that was not on any forward path is left bitwise unchanged."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, store: ParamStore) -> None:
        for slot in store:
            if not slot.trainable or not slot.touched:
                continue
            t = self.t.get(slot.id, 0) + 1
            self.t[slot.id] = t
            m = self.m.get(slot.id)
            if m is None:
                m = self.m[slot.id] = np.zeros_like(slot.value)
                self.v[slot.id] = np.zeros_like(slot.value)
            _k.adam_update(
                slot.value, slot.grad, m, self.v[slot.id],
                self.lr, self.beta1, self.beta2, self.eps,
                1.0 - self.beta1**t, 1.0 - self.beta2**t,
            )
            slot.touched = False
        for slot in store.slots.values():
            if slot.touched:
                slot.grad[...] = 0.0
                slot.touched = False


def adam_step(store: ParamStore, opt: Adam) -> None:
    opt.step(store)


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle


def rel_error(ga: np.ndarray, gn: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(ga - gn) / np.maximum(floor, np.abs(ga) + np.abs(gn))


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int
    per_array: dict[str, float] = field(default_factory=dict)


def _analytic_grads(fn, params, inputs):
    """Backward once; return trainable params, C-ordered inputs, the analytic
    gradient of every array and a closure that re-evaluates ``fn``."""
    params = [p for p in params if p.trainable]
    # C order, so reshape(-1) is a view that perturbs the real input
    inputs = [np.array(x, dtype=DTYPE, order="C") for x in inputs]
    for p in params:
        p.grad[...] = 0.0
    in_vars = [Var(x, needs_grad=True) for x in inputs]
    out = fn(*in_vars)
    if out.data.size != 1:
        raise ConfigurationError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = {f"param:{p.id}": p.grad.copy() for p in params}
    for i, v in enumerate(in_vars):
        analytic[f"input:{i}"] = np.zeros_like(v.data) if v.grad is None else v.grad.copy()
    _clear(params)

    def evaluate() -> float:
        return float(fn(*[Var(x, needs_grad=False) for x in inputs]).data.reshape(-1)[0])

    arrays = [(f"param:{p.id}", p.value) for p in params] + [(f"input:{i}", x) for i, x in enumerate(inputs)]
    return params, arrays, analytic, evaluate


def _clear(params) -> None:
    for p in params:
        p.grad[...] = 0.0
        p.touched = False


def grad_check(
    fn: Callable[..., Var],
    params: Iterable[ParamSlot],
    inputs: Sequence[np.ndarray] = (),
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``fn(*input_vars)`` with central
    differences for every parameter and input coordinate.

    With ``max_coords`` set, each array is checked on at most that many
    coordinates drawn with a seeded generator. ``floor`` bounds the
    denominator of the relative error: a central difference of an O(1)
    function at step h carries roughly 1e-16 / h of rounding noise, so
    gradients far below that scale cannot be resolved relatively.
    """
    params, arrays, analytic, evaluate = _analytic_grads(fn, params, inputs)
    rng = Rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_array: dict[str, float] = {}
    for name, arr in arrays:
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.permutation(flat.size)[:max_coords])
        ga = analytic[name].reshape(-1)
        arr_worst = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            fp = evaluate()
            flat[c] = old - h
            fm = evaluate()
            flat[c] = old
            gn = (fp - fm) / (2.0 * h)
            err = float(rel_error(np.array(ga[c]), np.array(gn), floor))
            checked += 1
            if err > arr_worst:
                arr_worst = err
            if err > worst:
                worst, worst_name = err, f"{name}[{c}]"
        per_array[name] = arr_worst
    _clear(params)
    return GradCheckResult(worst, worst_name, checked, per_array)


def directional_grad_check(
    fn: Callable[..., Var],
    params: Iterable[ParamSlot],
    inputs: Sequence[np.ndarray] = (),
    n_dirs: int = 2,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Check the directional derivative along random unit directions that
    move every parameter and input coordinate at once.

    Two evaluations per direction instead of two per coordinate, so whole
    models stay cheap; a wrong gradient anywhere shows up with probability
    one along a random direction.
    """
    params, arrays, analytic, evaluate = _analytic_grads(fn, params, inputs)
    rng = Rng(seed)
    worst, worst_name = 0.0, ""
    per_array: dict[str, float] = {}
    for k in range(n_dirs):
        dirs = [rng.normal(arr.size).reshape(arr.shape) for _, arr in arrays]
        norm = math.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        ga = sum(float(np.sum(analytic[name] * d)) for (name, _), d in zip(arrays, dirs))
        saved = [arr.copy() for _, arr in arrays]
        for (_, arr), d in zip(arrays, dirs):
            arr += h * d
        fp = evaluate()
        for (_, arr), d, old in zip(arrays, dirs, saved):
            arr[...] = old - h * d
        fm = evaluate()
        for (_, arr), old in zip(arrays, saved):
            arr[...] = old
        err = float(rel_error(np.array(ga), np.array((fp - fm) / (2.0 * h)), floor))
        per_array[f"direction:{k}"] = err
        if err > worst:
            worst, worst_name = err, f"direction:{k}"
    _clear(params)
    return GradCheckResult(worst, worst_name, n_dirs, per_array)


def projected_sum(out: Var, seed: int = 12345) -> Var:
    """Random linear functional of a block output, for gradient checks."""
    w = Rng(seed).normal(out.data.size).reshape(out.data.shape)
    return weighted_total(out, w)
