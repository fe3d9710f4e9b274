"""Minimal dense differentiable models.

Fixed layer vocabulary (linear / relu / sigmoid / softmax), float64
throughout. Supports gradients with respect to both parameters and inputs,
which is all the attack and analysis code needs; there is no general
autodiff graph.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("linear", "relu", "sigmoid", "softmax")

CHECKPOINT_VERSION = 1


def as_matrix(data, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries.

    1-D input becomes a single row. ``cols`` optionally enforces the column
    count.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D data, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite (no NaN/Inf)")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {arr.shape[1]}")
    return np.ascontiguousarray(arr)


def as_vector(data, size: int | None = None) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector entries must be finite (no NaN/Inf)")
    if size is not None and arr.size != size:
        raise ValueError(f"expected length {size}, got {arr.size}")
    return arr


@dataclass
class LayerSpec:
    """One layer: a linear map with parameters, or a parameter-free activation."""

    kind: str
    in_dim: int
    out_dim: int
    weights: np.ndarray | None = None  # (out_dim, in_dim), linear only
    bias: np.ndarray | None = None     # (out_dim,), linear only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.kind == "linear":
            if self.weights is None:
                raise ValueError("linear layer requires weights")
            self.weights = as_matrix(self.weights)
            if self.weights.shape != (self.out_dim, self.in_dim):
                raise ValueError(
                    f"linear weights must be {(self.out_dim, self.in_dim)}, "
                    f"got {self.weights.shape}")
            if self.bias is None:
                self.bias = np.zeros(self.out_dim)
            self.bias = as_vector(self.bias, self.out_dim)
        else:
            if self.in_dim != self.out_dim:
                raise ValueError(f"{self.kind} layer must preserve dimension")
            if self.weights is not None or self.bias is not None:
                raise ValueError(f"{self.kind} layer takes no parameters")


@dataclass
class LocalModel:
    """Ordered layer stack owned by one party."""

    layers: list[LayerSpec]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class ForwardTrace:
    """Per-layer input activations recorded during one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "linear":
        return x @ layer.weights.T + layer.bias
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "sigmoid":
        return _sigmoid(x)
    return _softmax(x)


def forward(model: LocalModel, x) -> tuple[np.ndarray, ForwardTrace]:
    """Run the layer stack on a batch of rows; returns (output, trace)."""
    x = as_matrix(x, cols=model.input_dim)
    trace = ForwardTrace()
    for layer in model.layers:
        trace.inputs.append(x)
        x = _layer_forward(layer, x)
    trace.output = x
    return x, trace


def _layer_backward(layer: LayerSpec, x: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_in, param_grads or None) for one layer."""
    if layer.kind == "linear":
        grad_in = grad_out @ layer.weights
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        return grad_in, (grad_w, grad_b)
    if layer.kind == "relu":
        return grad_out * (x > 0), None
    if layer.kind == "sigmoid":
        y = _sigmoid(x)
        return grad_out * y * (1.0 - y), None
    y = _softmax(x)
    dot = (grad_out * y).sum(axis=1, keepdims=True)
    return y * (grad_out - dot), None


def backward(model: LocalModel, trace: ForwardTrace, grad_output,
             n_skip_top: int = 0):
    """Backpropagate an output gradient through the stack.

    Returns (param_grads, input_grad) where param_grads is a per-layer list
    of (grad_w, grad_b) tuples (None for activation layers). ``n_skip_top``
    starts propagation below the top-most layers, which lets callers take
    gradients of pre-activation logits.
    """
    grad = as_matrix(grad_output)
    start = len(model.layers) - 1 - n_skip_top
    expected = model.layers[start].out_dim
    if grad.shape != (trace.inputs[0].shape[0], expected):
        raise ValueError(
            f"gradient shape {grad.shape} does not match "
            f"({trace.inputs[0].shape[0]}, {expected})")
    param_grads: list = [None] * len(model.layers)
    for i in range(start, -1, -1):
        grad, pg = _layer_backward(model.layers[i], trace.inputs[i], grad)
        param_grads[i] = pg
    return param_grads, grad


class SgdMomentum:
    """Momentum SGD with per-parameter velocity state."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[tuple[int, int, str], np.ndarray] = {}

    def step(self, model: LocalModel, param_grads, model_id: int = 0):
        """Apply one update in place: v <- m*v + g; p <- p - lr*v."""
        for i, (layer, pg) in enumerate(zip(model.layers, param_grads)):
            if pg is None:
                continue
            grad_w, grad_b = pg
            if grad_w.shape != layer.weights.shape or grad_b.shape != layer.bias.shape:
                raise ValueError("gradient shapes do not match parameters")
            for name, param, grad in (("w", layer.weights, grad_w),
                                      ("b", layer.bias, grad_b)):
                key = (model_id, i, name)
                vel = self._velocity.get(key)
                if vel is None:
                    vel = np.zeros_like(param)
                vel = self.momentum * vel + grad
                self._velocity[key] = vel
                param -= self.lr * vel


def sgd_step(model: LocalModel, param_grads, lr: float, momentum: float = 0.0,
             state: SgdMomentum | None = None) -> SgdMomentum:
    """One-shot convenience around SgdMomentum; returns the optimizer state."""
    if state is None:
        state = SgdMomentum(lr, momentum)
    state.step(model, param_grads)
    return state


@dataclass
class GradCheckReport:
    max_rel_err_input: float
    max_rel_err_params: float
    n_checked: int
    n_indeterminate: int
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.max_rel_err_input, self.max_rel_err_params) <= self.tol


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / scale


def _relu_sign_flip(model: LocalModel, t_plus: ForwardTrace,
                    t_minus: ForwardTrace) -> bool:
    """True when a perturbation moved any ReLU pre-activation across zero."""
    for layer, xp, xm in zip(model.layers, t_plus.inputs, t_minus.inputs):
        if layer.kind == "relu" and np.any((xp > 0) != (xm > 0)):
            return True
    return False


def grad_check(model: LocalModel, x, step: float = 1e-5,
               tol: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Coordinates whose perturbation crosses a ReLU kink are reported as
    indeterminate and excluded from the error maxima.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_matrix(x, cols=model.input_dim)
    out, trace = forward(model, x)
    # Scalar probe: sum of outputs, so FD of the probe checks the full grad.
    probe_grad = np.ones_like(out)
    param_grads, input_grad = backward(model, trace, probe_grad)

    max_in = 0.0
    n_checked = 0
    n_indet = 0
    for idx in np.ndindex(x.shape):
        xp = x.copy(); xp[idx] += step
        xm = x.copy(); xm[idx] -= step
        op, tp = forward(model, xp)
        om, tm = forward(model, xm)
        if _relu_sign_flip(model, tp, tm):
            n_indet += 1
            continue
        fd = (op.sum() - om.sum()) / (2 * step)
        max_in = max(max_in, _rel_err(fd, input_grad[idx]))
        n_checked += 1

    max_par = 0.0
    for li, layer in enumerate(model.layers):
        if layer.kind != "linear":
            continue
        grad_w, grad_b = param_grads[li]
        for name, param, analytic in (("w", layer.weights, grad_w),
                                      ("b", layer.bias, grad_b)):
            for idx in np.ndindex(param.shape):
                orig = param[idx]
                param[idx] = orig + step
                op, tp = forward(model, x)
                param[idx] = orig - step
                om, tm = forward(model, x)
                param[idx] = orig
                if _relu_sign_flip(model, tp, tm):
                    n_indet += 1
                    continue
                fd = (op.sum() - om.sum()) / (2 * step)
                max_par = max(max_par, _rel_err(fd, analytic[idx]))
                n_checked += 1

    return GradCheckReport(max_in, max_par, n_checked, n_indet, tol)


def init_model(dims: list[int], activation: str = "relu",
               head: str | None = None, seed: int = 0) -> LocalModel:
    """Build an MLP with uniform +/- sqrt(6/(in+out)) initial weights.

    ``dims`` lists layer widths, e.g. [784, 128, 10]. ``activation`` is
    inserted between linear layers; ``head`` optionally caps the stack
    (sigmoid or softmax).
    """
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (din + dout))
        w = rng.uniform(-limit, limit, size=(dout, din))
        layers.append(LayerSpec("linear", din, dout, w, np.zeros(dout)))
        if i < len(dims) - 2:
            layers.append(LayerSpec(activation, dout, dout))
    if head is not None:
        layers.append(LayerSpec(head, dims[-1], dims[-1]))
    return LocalModel(layers)


def identity_model(dim: int) -> LocalModel:
    return LocalModel([LayerSpec("linear", dim, dim, np.eye(dim), np.zeros(dim))])


def model_to_dict(model: LocalModel, protocol: str = "local") -> dict:
    layers = []
    for layer in model.layers:
        entry: dict = {"kind": layer.kind, "in": layer.in_dim, "out": layer.out_dim}
        if layer.kind == "linear":
            entry["weights"] = layer.weights.tolist()
            entry["bias"] = layer.bias.tolist()
        layers.append(entry)
    return {"version": CHECKPOINT_VERSION, "protocol": protocol, "layers": layers}


def model_from_dict(doc: dict) -> LocalModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    layers = []
    for entry in doc["layers"]:
        layers.append(LayerSpec(entry["kind"], entry["in"], entry["out"],
                                entry.get("weights"), entry.get("bias")))
    return LocalModel(layers)


def save_model(model: LocalModel, path, protocol: str = "local"):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, protocol), fh, sort_keys=True)


def load_model(path) -> LocalModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
