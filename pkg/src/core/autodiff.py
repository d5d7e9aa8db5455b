# autodiff.py
"""
Minimal reverse-mode differentiable stack over numpy (float64).

Tensors are N×C×H×W feature maps (reductions produce 0-d scalars). Every op
records its parents and a closure that pushes the output gradient back; the
`backward` pass walks a topological order built from the root, so gradients
are accumulated in the same order on every run.

Convolution conventions
    conv2d is cross-correlation with stride 1 and zero "same" padding
    p = (k − 1) / 2:
        y[n,o,h,w] = b[o] + Σ_{c,i,j} W[o,c,i,j] · xpad[n,c,h+i,w+j]
    with W shaped (out, in, k, k).
    tconv2d is the adjoint of conv2d for the same weight array: a transposed
    layer with in_channels = a, out_channels = b stores W shaped (a, b, k, k)
    and satisfies ⟨conv2d(x, W), y⟩ = ⟨x, tconv2d(y, W)⟩ for zero bias.
    Both preserve spatial dimensions.

Initialisation
    He-uniform: W ~ U(−bound, bound), bound = sqrt(6 / fan_in),
    fan_in = in_channels · k · k; biases start at 0. Draws come from the
    generator passed in, layer by layer.

Adam
    t ← t + 1
    m ← β1·m + (1 − β1)·g
    v ← β2·v + (1 − β2)·g²
    m̂ = m / (1 − β1^t),  v̂ = v / (1 − β2^t)
    θ ← θ − lr · m̂ / (sqrt(v̂) + ε)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import InvalidArgumentError

GradFn = Callable[[np.ndarray], None]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[GradFn] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: GradFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------- ELEMENTWISE ----------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def grad_fn(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), grad_fn)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "subtract")

    def grad_fn(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(g * c)

    return _result(x.data * c, (x,), grad_fn)


def square(x: Tensor) -> Tensor:
    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(2.0 * x.data * g)

    return _result(np.square(x.data), (x,), grad_fn)


# ---------------- REDUCTIONS ----------------
def reduce_sum(x: Tensor) -> Tensor:
    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(np.full(x.shape, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), grad_fn)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(np.full(x.shape, float(g) / n))

    return _result(np.asarray(x.data.mean()), (x,), grad_fn)


def add_scalars(*terms: Tensor) -> Tensor:
    for t in terms:
        if t.size != 1:
            raise InvalidArgumentError(f"add_scalars expects scalars, got shape {t.shape}")

    def grad_fn(g: np.ndarray) -> None:
        for t in terms:
            t._accumulate(np.asarray(g).reshape(t.shape))

    total = np.asarray(sum(float(t.data) for t in terms))
    return _result(total, tuple(terms), grad_fn)


# ---------------- CONVOLUTION KERNELS ----------------
def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(N,C,H,W) ⋆ (O,C,k,k) → (N,O,H,W), zero same-padding."""
    n, _, h, wd = x.shape
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    acc = np.zeros((n, h, wd, w.shape[0]))
    for i in range(k):
        for j in range(k):
            acc += np.tensordot(xp[:, :, i:i + h, j:j + wd], w[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _correlate_adjoint(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of `_correlate` in its input: (N,O,H,W), (O,C,k,k) → (N,C,H,W)."""
    n, _, h, wd = y.shape
    k = w.shape[2]
    p = k // 2
    acc = np.zeros((n, h + 2 * p, wd + 2 * p, w.shape[1]))
    y_last = y.transpose(0, 2, 3, 1)
    for i in range(k):
        for j in range(k):
            acc[:, i:i + h, j:j + wd, :] += np.tensordot(y_last, w[:, :, i, j], axes=([3], [0]))
    return np.ascontiguousarray(acc[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2))


def _correlate_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d⟨g, x ⋆ W⟩/dW: (N,C,H,W), (N,O,H,W) → (O,C,k,k)."""
    _, c, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    gw = np.zeros((g.shape[1], c, k, k))
    for i in range(k):
        for j in range(k):
            gw[:, :, i, j] = np.tensordot(g, xp[:, :, i:i + h, j:j + wd], axes=([0, 2, 3], [0, 2, 3]))
    return gw


# ---------------- LAYERS ----------------
@dataclass
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    weight: Tensor
    bias: Tensor
    transposed: bool = False
    name: str = ""

    stride = 1
    padding = "same"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidArgumentError(f"{self.name}: kernel size must be odd, got {self.kernel}")
        expected = self.weight_shape(self.in_channels, self.out_channels, self.kernel, self.transposed)
        if self.weight.shape != expected:
            raise InvalidArgumentError(f"{self.name}: weight shape {self.weight.shape}, expected {expected}")
        if self.bias.shape != (self.out_channels,):
            raise InvalidArgumentError(f"{self.name}: bias shape {self.bias.shape}, expected ({self.out_channels},)")

    @staticmethod
    def weight_shape(in_channels: int, out_channels: int, kernel: int, transposed: bool) -> Tuple[int, int, int, int]:
        if transposed:
            return in_channels, out_channels, kernel, kernel
        return out_channels, in_channels, kernel, kernel

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        transposed: bool = False,
        name: str = "",
    ) -> "ConvLayerSpec":
        shape = cls.weight_shape(in_channels, out_channels, kernel, transposed)
        bound = math.sqrt(6.0 / (in_channels * kernel * kernel))
        weight = rng.uniform(-bound, bound, size=shape)
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=kernel,
            weight=parameter(weight, f"{name}.weight"),
            bias=parameter(np.zeros(out_channels), f"{name}.bias"),
            transposed=transposed,
            name=name,
        )

    @property
    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    @property
    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        return tconv2d(x, self) if self.transposed else conv2d(x, self)


def _check_input(x: Tensor, spec: ConvLayerSpec) -> None:
    if x.data.ndim != 4:
        raise InvalidArgumentError(f"{spec.name}: expected N×C×H×W input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise InvalidArgumentError(
            f"{spec.name}: input has {x.shape[1]} channels, layer expects {spec.in_channels}"
        )


def conv2d(x: Tensor, spec: ConvLayerSpec) -> Tensor:
    if spec.transposed:
        raise InvalidArgumentError(f"{spec.name}: conv2d called with a transposed layer")
    _check_input(x, spec)
    w, b = spec.weight, spec.bias
    out = _correlate(x.data, w.data) + b.data[None, :, None, None]

    def grad_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(_correlate_adjoint(g, w.data))
        w._accumulate(_correlate_weight_grad(x.data, g, spec.kernel))
        b._accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out, (x, w, b), grad_fn)


def tconv2d(x: Tensor, spec: ConvLayerSpec) -> Tensor:
    if not spec.transposed:
        raise InvalidArgumentError(f"{spec.name}: tconv2d called with a regular layer")
    _check_input(x, spec)
    w, b = spec.weight, spec.bias
    out = _correlate_adjoint(x.data, w.data) + b.data[None, :, None, None]

    def grad_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(_correlate(g, w.data))
        # y = adjoint(x, W) ⇒ dW[a,b,i,j] = Σ x[n,a,h,w] · gpad[n,b,h+i,w+j]
        w._accumulate(_correlate_weight_grad(g, x.data, spec.kernel))
        b._accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out, (x, w, b), grad_fn)


# ---------------- BACKWARD ----------------
def topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Fill `.grad` of every tensor reachable from a scalar root."""
    if root.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(topological_order(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------- ADAM ----------------
@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if state.step < 0:
        raise InvalidArgumentError(f"Adam step must be >= 0, got {state.step}")
    if set(params) != set(grads):
        raise InvalidArgumentError("params and grads must have the same keys")

    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for key, value in params.items():
        g = grads[key]
        if g.shape != value.shape:
            raise InvalidArgumentError(f"{key}: gradient shape {g.shape} != parameter shape {value.shape}")
        m = state.m.get(key, np.zeros_like(value))
        v = state.v.get(key, np.zeros_like(value))
        if m.shape != value.shape or v.shape != value.shape:
            raise InvalidArgumentError(f"{key}: moment shape does not match parameter shape {value.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_params[key] = value - update
        new_m[key], new_v[key] = m, v

    new_state = AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon,
        step=t, m=new_m, v=new_v,
    )
    return new_params, new_state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names) or not all(names):
            raise InvalidArgumentError("Adam needs uniquely named parameters")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        values = {p.name: p.data for p in self.params}
        grads = {p.name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in self.params}
        updated, self.state = adam_step(values, grads, self.state)
        for p in self.params:
            p.data[...] = updated[p.name]


# ---------------- GRADIENT CHECK ----------------
@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    entries: List[GradCheckEntry]

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    @property
    def passed(self) -> bool:
        return not self.failures


def check_gradients(
    builder: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-3,
    max_checks: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central differences.

    For every tensor in `inputs` the relative error is
        max|analytic − numeric| / max(max|analytic|, max|numeric|, floor)
    over the checked elements. `max_checks` samples that many elements per
    tensor (seeded) instead of perturbing all of them.
    """
    zero_grad(inputs)
    root = builder()
    backward(root)
    analytic = {id(t): (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in inputs}

    rng = np.random.default_rng(seed)
    entries = []
    for idx_t, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            positions = np.sort(rng.choice(flat.size, size=max_checks, replace=False))

        numeric = np.empty(positions.size)
        for n, pos in enumerate(positions):
            original = flat[pos]
            flat[pos] = original + step
            f_plus = builder().item()
            flat[pos] = original - step
            f_minus = builder().item()
            flat[pos] = original
            numeric[n] = (f_plus - f_minus) / (2.0 * step)

        exact = analytic[id(t)].reshape(-1)[positions]
        abs_err = float(np.max(np.abs(exact - numeric))) if positions.size else 0.0
        denom = max(float(np.max(np.abs(exact), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
        rel_err = abs_err / denom
        entries.append(GradCheckEntry(
            name=t.name or f"input{idx_t}",
            checked=int(positions.size),
            max_abs_error=abs_err,
            max_rel_error=rel_err,
            passed=rel_err < tolerance,
        ))
    return GradCheckReport(tolerance=tolerance, step=step, entries=entries)
