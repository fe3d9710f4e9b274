"""Gradient-based synthesis of dominating inputs.

An adversary controlling one participant perturbs its own feature block so
the joint prediction locks onto a chosen label for (nearly) every input the
benign participants might supply. The perturbation is found by iterating a
small sample of benign rows and descending a weighted objective: the benign
side's saliency (its leverage on the output) plus the targeted prediction
loss, optionally with a norm penalty and a per-feature mutation bound.

Whitebox mode differentiates through the full system; blackbox mode
estimates every gradient from joint-inference outputs alone by forward
finite differences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import as_matrix, as_vector, forward
from .protocol import (VFLSystem, joint_backward, joint_forward,
                       predicted_labels, _sigmoid)

BOUND_FLOOR = 1e-6


@dataclass
class SynthesisConfig:
    strategy: str = "random"          # "random" | "bounded"
    mode: str = "whitebox"            # "whitebox" | "blackbox"
    alpha: float = 1.0                # saliency-term weight
    beta: float = 1.0                 # target-loss weight
    gamma: float = 0.1                # mutation-norm weight (bounded only)
    momentum: float = 0.9
    bound: np.ndarray | None = None   # per-feature mutation bound (bounded only)
    max_rounds: int = 400
    threshold: float = 0.95           # dominating threshold, fraction of rows
    inner_steps: int = 10
    inner_lr: float | None = None     # default 0.05 random / 0.01 bounded
    fdm_step: float = 1e-3            # blackbox finite-difference step
    hvp_step: float = 1e-5            # step for saliency-gradient estimation

    def __post_init__(self):
        if self.strategy not in ("random", "bounded"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.mode not in ("whitebox", "blackbox"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("objective weights must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.fdm_step <= 0 or self.hvp_step <= 0:
            raise ValueError("difference steps must be positive")
        if self.bound is not None:
            self.bound = as_vector(self.bound)
            if np.any(self.bound <= 0):
                raise ValueError("mutation bound must be positive per feature")
        if self.strategy == "bounded" and self.bound is None:
            raise ValueError("bounded strategy requires a mutation bound")

    @property
    def step_size(self) -> float:
        if self.inner_lr is not None:
            return self.inner_lr
        return 0.05 if self.strategy == "random" else 0.01


@dataclass
class AdiCandidate:
    base: np.ndarray                  # adversary's original feature row
    perturbation: np.ndarray          # accumulated mutation
    target: int
    accuracy: float                   # share of the sample it dominates
    rounds: int
    strategy: str
    mode: str
    provenance: str = "gradient"

    @property
    def input(self) -> np.ndarray:
        return self.base + self.perturbation

    def to_json(self) -> str:
        return json.dumps({
            "base": self.base.tolist(), "v": self.perturbation.tolist(),
            "target": int(self.target), "r": self.accuracy,
            "rounds": self.rounds, "strategy": self.strategy,
            "mode": self.mode, "provenance": self.provenance,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AdiCandidate":
        doc = json.loads(line)
        return cls(np.asarray(doc["base"]), np.asarray(doc["v"]),
                   doc["target"], doc["r"], doc["rounds"], doc["strategy"],
                   doc["mode"], doc.get("provenance", "gradient"))


def write_candidates(candidates, path):
    with open(path, "w", encoding="utf-8") as fh:
        for cand in candidates:
            fh.write(cand.to_json() + "\n")


def read_candidates(path) -> list[AdiCandidate]:
    with open(path, encoding="utf-8") as fh:
        return [AdiCandidate.from_json(line) for line in fh if line.strip()]


def output_spread(output) -> float:
    """Spread of one joint output: component variance, or the scalar itself
    for one-dimensional outputs."""
    out = np.asarray(output, dtype=np.float64).ravel()
    if out.size == 0:
        raise ValueError("empty output")
    if out.size == 1:
        return float(out[0])
    return float(np.var(out))


def _spread_rows(probs: np.ndarray) -> np.ndarray:
    if probs.shape[1] == 1:
        return probs[:, 0]
    return np.var(probs, axis=1)


def _spread_grad_on_probs(probs_row: np.ndarray) -> np.ndarray:
    c = probs_row.shape[0]
    if c == 1:
        return np.ones(1)
    return (2.0 / c) * (probs_row - probs_row.mean())


def split_benign(system: VFLSystem, rows, adv_index: int = 0) -> list[np.ndarray]:
    """Split aggregated benign rows into per-benign-participant views."""
    rows = as_matrix(rows)
    widths = [len(p.columns) for i, p in enumerate(system.participants)
              if i != adv_index]
    if rows.shape[1] != sum(widths):
        raise ValueError(
            f"benign rows have {rows.shape[1]} columns, expected {sum(widths)}")
    views = []
    offset = 0
    for w in widths:
        views.append(rows[:, offset:offset + w])
        offset += w
    return views


def _as_benign_views(system: VFLSystem, benign,
                     adv_index: int = 0) -> list[np.ndarray]:
    if hasattr(benign, "rows"):        # TinyDataset
        benign = benign.rows
    if isinstance(benign, np.ndarray) or not isinstance(benign, (list, tuple)):
        return split_benign(system, benign, adv_index)
    return [as_matrix(v) for v in benign]


class JointEvaluator:
    """Joint inference of one varying row against fixed rows of the others.

    The fixed sides' local outputs are computed once, so repeated queries
    against the same benign set cost only the varying party's forward plus
    the top stage. ``adv_index`` selects which participant varies (default:
    the first, the adversary-side party).
    """

    def __init__(self, system: VFLSystem, benign_views, adv_index: int = 0):
        self.system = system
        self.adv_index = adv_index
        self.benign_views = _as_benign_views(system, benign_views, adv_index)
        if len(self.benign_views) != len(system.participants) - 1:
            raise ValueError("one view per benign participant required")
        self.n = self.benign_views[0].shape[0] if self.benign_views else 1
        others = [p for i, p in enumerate(system.participants) if i != adv_index]
        locals_ = [forward(p.model, v)[0] for p, v in
                   zip(others, self.benign_views)]
        if system.protocol == "heterolr":
            self._benign_score = sum(locals_)
        else:
            self._fixed_locals = locals_

    def probs_for(self, x_adv) -> np.ndarray:
        part = self.system.participants[self.adv_index]
        x_adv = as_vector(x_adv, len(part.columns))
        local_a = forward(part.model, x_adv[None, :])[0]
        if self.system.protocol == "heterolr":
            score = local_a + self._benign_score + self.system.coordinator.bias
            if self.system.output_dim == 1:
                return _sigmoid(score)
            return _stable_softmax(score)
        blocks = []
        fixed = iter(self._fixed_locals)
        for i in range(len(self.system.participants)):
            if i == self.adv_index:
                blocks.append(np.repeat(local_a, self.n, axis=0))
            else:
                blocks.append(next(fixed))
        concat = np.concatenate(blocks, axis=1)
        return forward(self.system.coordinator.top_model, concat)[0]

    def labels_for(self, x_adv) -> np.ndarray:
        return predicted_labels(self.probs_for(x_adv))

    def attack_accuracy(self, x_adv, l_target: int) -> float:
        return float(np.mean(self.labels_for(x_adv) == l_target))

    def majority_label(self, x_adv) -> tuple[int, float]:
        labels = self.labels_for(x_adv)
        counts = np.bincount(labels, minlength=self.system.n_classes)
        label = int(counts.argmax())
        return label, float(counts[label] / labels.size)


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def attack_accuracy(x_adv, system: VFLSystem, l_target: int,
                    benign_views) -> float:
    """Share of benign test rows forced to l_target when paired with x_adv."""
    return JointEvaluator(system, benign_views).attack_accuracy(x_adv, l_target)


def default_bound(train_view_adv, multiplier: float = 1.0) -> np.ndarray:
    """Per-feature mutation bound: the feature's variance in training data."""
    view = as_matrix(train_view_adv)
    if view.shape[0] < 2:
        raise ValueError("need at least two rows")
    if multiplier <= 0:
        raise ValueError("multiplier must be positive")
    var = view.var(axis=0)
    return np.maximum(var, BOUND_FLOOR) * multiplier


def _joint_row(system: VFLSystem, x_adv: np.ndarray,
               benign_rows: list[np.ndarray]):
    views = [x_adv[None, :]] + [row[None, :] for row in benign_rows]
    return joint_forward(system, views)


def saliency_est(x_adv, system: VFLSystem, benign_rows) -> float:
    """L1 norm of the joint-output spread's gradient against the benign
    features (analytic, full-system backward)."""
    x_adv = as_vector(x_adv)
    benign_rows = [as_vector(r) for r in _rows_of(benign_rows)]
    jt = _joint_row(system, x_adv, benign_rows)
    gp = _spread_grad_on_probs(jt.probs[0])[None, :]
    grads, _, _ = joint_backward(system, jt, gp)
    return float(sum(np.abs(g).sum() for g in grads[1:]))


def _rows_of(benign_rows) -> list[np.ndarray]:
    if isinstance(benign_rows, np.ndarray) and benign_rows.ndim == 1:
        return [benign_rows]
    return list(benign_rows)


def fdm_gradient(fn_batch, x: np.ndarray, delta: float) -> np.ndarray:
    """Forward-difference gradient of a scalar function over rows.

    fn_batch maps a (m, d) batch to m scalars; the estimate costs d+1
    evaluations: the base point plus one unit-direction perturbation per
    dimension.
    """
    d = x.shape[0]
    batch = np.repeat(x[None, :], d + 1, axis=0)
    batch[1:][np.diag_indices(d)] += delta
    vals = np.asarray(fn_batch(batch), dtype=np.float64).ravel()
    return (vals[1:] - vals[0]) / delta


def saliency_est_fdm(x_adv, system: VFLSystem, benign_rows,
                     delta: float) -> float:
    """Blackbox version of saliency_est: forward differences over the benign
    dimensions, d2 + 1 joint inferences total."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    x_adv = as_vector(x_adv)
    benign_rows = [as_vector(r) for r in _rows_of(benign_rows)]
    flat = np.concatenate(benign_rows)
    widths = [r.shape[0] for r in benign_rows]

    def spread_batch(rows):
        m = rows.shape[0]
        views = [np.repeat(x_adv[None, :], m, axis=0)]
        offset = 0
        for w in widths:
            views.append(rows[:, offset:offset + w])
            offset += w
        return _spread_rows(joint_forward(system, views).probs)

    grad = fdm_gradient(spread_batch, flat, delta)
    return float(np.abs(grad).sum())


# Probability floor for cross-entropy values. Kept at the float64 underflow
# edge: a larger floor flattens the loss in saturated regions, which would
# silently zero the finite-difference gradients the blackbox mode relies on.
_CE_FLOOR = 1e-300


def _loss_and_logit_grad(probs_row: np.ndarray, l_target: int):
    """Targeted loss value and its gradient on the pre-activation scores."""
    if probs_row.shape[0] == 1:
        p = float(np.clip(probs_row[0], _CE_FLOOR, 1 - 1e-16))
        y = float(l_target)
        loss = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        return loss, np.asarray([[p - y]])
    p = np.clip(probs_row[l_target], _CE_FLOOR, 1.0)
    grad = probs_row.copy()
    grad[l_target] -= 1.0
    return float(-np.log(p)), grad[None, :]


def _loss_rows(probs: np.ndarray, l_target: int) -> np.ndarray:
    if probs.shape[1] == 1:
        p = np.clip(probs[:, 0], _CE_FLOOR, 1 - 1e-16)
        y = float(l_target)
        return -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return -np.log(np.clip(probs[:, l_target], _CE_FLOOR, 1.0))


class _Whitebox:
    """Analytic objective gradients for one benign row."""

    def __init__(self, system: VFLSystem, benign_rows, l_target: int,
                 cfg: SynthesisConfig):
        self.system = system
        self.rows = [as_vector(r) for r in _rows_of(benign_rows)]
        self.l_target = l_target
        self.cfg = cfg

    def _spread_input_grads(self, x_adv, rows):
        jt = _joint_row(self.system, x_adv, rows)
        gp = _spread_grad_on_probs(jt.probs[0])[None, :]
        grads, _, _ = joint_backward(self.system, jt, gp)
        return [g[0] for g in grads]

    def loss_grad(self, x_adv):
        jt = _joint_row(self.system, x_adv, self.rows)
        _, glogit = _loss_and_logit_grad(jt.probs[0], self.l_target)
        grads, _, _ = joint_backward(self.system, jt, glogit, from_logits=True)
        return grads[0][0]

    def saliency_grad(self, x_adv):
        grads = self._spread_input_grads(x_adv, self.rows)
        dirs = [np.sign(g) for g in grads[1:]]
        if all(np.all(d == 0) for d in dirs):
            return np.zeros_like(x_adv)
        h = self.cfg.hvp_step
        plus = [r + h * d for r, d in zip(self.rows, dirs)]
        minus = [r - h * d for r, d in zip(self.rows, dirs)]
        gp = self._spread_input_grads(x_adv, plus)[0]
        gm = self._spread_input_grads(x_adv, minus)[0]
        return (gp - gm) / (2.0 * h)


class _Blackbox:
    """Finite-difference objective gradients from joint inferences only."""

    def __init__(self, system: VFLSystem, benign_rows, l_target: int,
                 cfg: SynthesisConfig):
        self.system = system
        self.rows = [as_vector(r) for r in _rows_of(benign_rows)]
        self.l_target = l_target
        self.cfg = cfg
        self._widths = [r.shape[0] for r in self.rows]

    def _probs_adv_batch(self, adv_batch, rows):
        m = adv_batch.shape[0]
        views = [adv_batch]
        for row in rows:
            views.append(np.repeat(row[None, :], m, axis=0))
        return joint_forward(self.system, views).probs

    def loss_grad(self, x_adv):
        def fn(batch):
            return _loss_rows(self._probs_adv_batch(batch, self.rows),
                              self.l_target)
        return fdm_gradient(fn, x_adv, self.cfg.fdm_step)

    def _benign_spread_grad(self, x_adv):
        flat = np.concatenate(self.rows)

        def fn(batch):
            m = batch.shape[0]
            views = [np.repeat(x_adv[None, :], m, axis=0)]
            offset = 0
            for w in self._widths:
                views.append(batch[:, offset:offset + w])
                offset += w
            return _spread_rows(joint_forward(self.system, views).probs)

        return fdm_gradient(fn, flat, self.cfg.fdm_step)

    def _adv_spread_grad(self, x_adv, rows):
        def fn(batch):
            return _spread_rows(self._probs_adv_batch(batch, rows))
        return fdm_gradient(fn, x_adv, self.cfg.fdm_step)

    def saliency_grad(self, x_adv):
        flat_dir = np.sign(self._benign_spread_grad(x_adv))
        if np.all(flat_dir == 0):
            return np.zeros_like(x_adv)
        h = self.cfg.hvp_step
        offset = 0
        plus, minus = [], []
        for row, w in zip(self.rows, self._widths):
            d = flat_dir[offset:offset + w]
            plus.append(row + h * d)
            minus.append(row - h * d)
            offset += w
        gp = self._adv_spread_grad(x_adv, plus)
        gm = self._adv_spread_grad(x_adv, minus)
        return (gp - gm) / (2.0 * h)


def _objective_grads(system, benign_rows, l_target, cfg):
    klass = _Whitebox if cfg.mode == "whitebox" else _Blackbox
    return klass(system, benign_rows, l_target, cfg)


def _inner_minimize(grads, base: np.ndarray, v: np.ndarray,
                    cfg: SynthesisConfig) -> np.ndarray:
    """Descend the round objective in the mutation delta, projected onto the
    bound box when the strategy is bounded."""
    delta = np.zeros_like(base)
    lr = cfg.step_size
    for _ in range(cfg.inner_steps):
        x = base + v + delta
        grad = np.zeros_like(delta)
        if cfg.alpha > 0:
            grad += cfg.alpha * grads.saliency_grad(x)
        if cfg.beta > 0:
            grad += cfg.beta * grads.loss_grad(x)
        if cfg.strategy == "bounded" and cfg.gamma > 0:
            norm = np.linalg.norm(delta)
            if norm > 0:
                grad += cfg.gamma * delta / norm
        delta = delta - lr * grad
        if cfg.strategy == "bounded":
            delta = np.clip(v + delta, -cfg.bound, cfg.bound) - v
    return delta


def adi_generate(x_adv_star, system: VFLSystem, l_target: int,
                 cfg: SynthesisConfig, tiny_benign,
                 stop_benign=None) -> AdiCandidate:
    """Synthesize a dominating input from one adversarial base row.

    Sweeps the benign sample, each round descending the weighted objective
    for one benign row, blending consecutive mutations with momentum, and
    (bounded strategy) clamping the accumulated mutation to the per-feature
    bound. After each sweep the attack accuracy is re-measured and the loop
    stops once it exceeds the configured threshold or the round budget runs
    out. ``stop_benign`` supplies the rows the accuracy is measured on (the
    practical-assessment set); it defaults to the tiny sample itself.
    """
    base = as_vector(x_adv_star, len(system.participants[0].columns))
    benign_views = _as_benign_views(system, tiny_benign)
    if benign_views[0].shape[0] < 1:
        raise ValueError("benign sample must be nonempty")
    if not 0 <= l_target < system.n_classes:
        raise ValueError(f"target label {l_target} out of range")
    if cfg.strategy == "bounded" and cfg.bound.shape[0] != base.shape[0]:
        raise ValueError("bound length must match the adversary's columns")

    if stop_benign is None:
        stop_eval = JointEvaluator(system, benign_views)
    elif isinstance(stop_benign, JointEvaluator):
        stop_eval = stop_benign
    else:
        stop_eval = JointEvaluator(system, stop_benign)
    v = np.zeros_like(base)
    delta_prev = np.zeros_like(base)
    n_sample = benign_views[0].shape[0]
    t = 1
    r = stop_eval.attack_accuracy(base, l_target)
    while r <= cfg.threshold and t <= cfg.max_rounds:
        for j in range(n_sample):
            if t > cfg.max_rounds:
                break
            rows = [view[j] for view in benign_views]
            grads = _objective_grads(system, rows, l_target, cfg)
            delta = _inner_minimize(grads, base, v, cfg)
            delta = cfg.momentum * delta_prev + delta
            if cfg.strategy == "bounded":
                delta = np.clip(v + delta, -cfg.bound, cfg.bound) - v
            v = v + delta
            delta_prev = delta
            t += 1
        r = stop_eval.attack_accuracy(base + v, l_target)
    if cfg.strategy == "bounded":
        assert np.all(np.abs(v) <= cfg.bound + 1e-12), "mutation bound violated"
    return AdiCandidate(base, v, int(l_target), float(r), t - 1,
                        cfg.strategy, cfg.mode)
