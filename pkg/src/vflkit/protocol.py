"""Two-to-m-participant VFL simulation: training, joint inference, tracing.

Two protocols are modeled. In the logistic protocol each participant holds a
linear score model and the coordinator applies a sigmoid (binary) or softmax
(multi-class head, used for multi-class tabular tasks) to the summed scores.
In the split protocol each participant runs a local network and the
coordinator's top model consumes the concatenated local outputs.

Intermediate payloads travel as plaintext here; the privacy contract is
enforced by an audit over traced messages instead of encryption.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import PartitionSpec
from .model import (LocalModel, SgdMomentum, as_matrix, backward, forward,
                    init_model, model_from_dict, model_to_dict, _sigmoid,
                    _softmax)

SYSTEM_CHECKPOINT_VERSION = 1


class AuditError(RuntimeError):
    """Raised when a traced payload leaks raw benign features."""


@dataclass
class Participant:
    id: str
    columns: list[int]
    model: LocalModel

    def __post_init__(self):
        if self.model.input_dim != len(self.columns):
            raise ValueError(
                f"participant {self.id}: model input dim {self.model.input_dim} "
                f"!= column count {len(self.columns)}")


@dataclass
class Coordinator:
    kind: str                       # "heterolr" | "splitnn"
    bias: np.ndarray | None = None  # heterolr: trained intercept over scores
    top_model: LocalModel | None = None

    def __post_init__(self):
        if self.kind == "heterolr":
            if self.bias is None:
                raise ValueError("logistic coordinator needs a bias vector")
            self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        elif self.kind == "splitnn":
            if self.top_model is None:
                raise ValueError("split coordinator needs a top model")
        else:
            raise ValueError(f"unknown protocol kind {self.kind!r}")


@dataclass
class ProtocolMessage:
    step: str
    sender: str
    receiver: str
    payload_kind: str
    payload_size: int
    payload: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "sender": self.sender, "receiver": self.receiver,
            "payload_kind": self.payload_kind, "payload_size": self.payload_size,
        }, sort_keys=True)


@dataclass
class VFLSystem:
    participants: list[Participant]
    coordinator: Coordinator
    n_classes: int

    def __post_init__(self):
        # Column lists of all participants must form a valid partition.
        self.spec = PartitionSpec([list(p.columns) for p in self.participants])
        dims = [p.model.output_dim for p in self.participants]
        if self.coordinator.kind == "heterolr":
            width = 1 if self.n_classes == 2 else self.n_classes
            if any(d != width for d in dims):
                raise ValueError("logistic participants must emit equal-width scores")
        else:
            if self.coordinator.top_model.input_dim != sum(dims):
                raise ValueError(
                    f"top model input {self.coordinator.top_model.input_dim} != "
                    f"sum of local output dims {sum(dims)}")

    @property
    def protocol(self) -> str:
        return self.coordinator.kind

    @property
    def output_dim(self) -> int:
        if self.coordinator.kind == "heterolr":
            return 1 if self.n_classes == 2 else self.n_classes
        return self.coordinator.top_model.output_dim


def _check_views(system: VFLSystem, views) -> list[np.ndarray]:
    if len(views) != len(system.participants):
        raise ValueError(f"expected {len(system.participants)} views")
    out = []
    n = None
    for part, view in zip(system.participants, views):
        v = as_matrix(view, cols=len(part.columns))
        if n is None:
            n = v.shape[0]
        elif v.shape[0] != n:
            raise ValueError("views disagree on row count")
        out.append(v)
    return out


@dataclass
class _JointTrace:
    local_traces: list
    local_outputs: list[np.ndarray]
    coord_trace: object          # ForwardTrace (splitnn) or summed scores
    probs: np.ndarray


def _coordinator_forward(system: VFLSystem, locals_: list[np.ndarray]):
    coord = system.coordinator
    if coord.kind == "heterolr":
        score = sum(locals_) + coord.bias
        probs = _sigmoid(score) if system.output_dim == 1 else _softmax(score)
        return probs, score
    concat = np.concatenate(locals_, axis=1)
    probs, trace = forward(coord.top_model, concat)
    return probs, trace


def joint_forward(system: VFLSystem, views) -> _JointTrace:
    views = _check_views(system, views)
    local_traces = []
    local_outputs = []
    for part, view in zip(system.participants, views):
        out, trace = forward(part.model, view)
        local_traces.append(trace)
        local_outputs.append(out)
    probs, coord_trace = _coordinator_forward(system, local_outputs)
    return _JointTrace(local_traces, local_outputs, coord_trace, probs)


def joint_inference(system: VFLSystem, views) -> np.ndarray:
    """Class probabilities: (n, 1) sigmoid output or (n, C) softmax rows."""
    return joint_forward(system, views).probs


def local_output(participant: Participant, view) -> np.ndarray:
    return forward(participant.model, view)[0]


def predicted_labels(probs: np.ndarray) -> np.ndarray:
    probs = as_matrix(probs)
    if probs.shape[1] == 1:
        return (probs[:, 0] >= 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def _activation_backward(probs: np.ndarray, grad_probs: np.ndarray,
                         scalar: bool) -> np.ndarray:
    if scalar:
        return grad_probs * probs * (1.0 - probs)
    dot = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - dot)


def coordinator_backward(system: VFLSystem, jt: _JointTrace, grad_probs,
                         from_logits: bool = False):
    """Gradient at the local-output boundary: what the coordinator can send
    back to each participant without touching local models.

    Returns (branch_grads, coord_grad) where coord_grad is the bias gradient
    (logistic) or the top-model param grads (split). ``from_logits`` treats
    grad_probs as a gradient on pre-activation scores.
    """
    grad = as_matrix(grad_probs)
    coord = system.coordinator
    if coord.kind == "heterolr":
        grad_score = grad if from_logits else _activation_backward(
            jt.probs, grad, scalar=system.output_dim == 1)
        coord_grad = grad_score.sum(axis=0)
        branch_grads = [grad_score] * len(system.participants)
        return branch_grads, coord_grad
    skip = 1 if from_logits and coord.top_model.layers[-1].kind in (
        "softmax", "sigmoid") else 0
    top_params, grad_concat = backward(coord.top_model, jt.coord_trace,
                                       grad, n_skip_top=skip)
    branch_grads = []
    offset = 0
    for part in system.participants:
        width = part.model.output_dim
        branch_grads.append(grad_concat[:, offset:offset + width])
        offset += width
    return branch_grads, top_params


def joint_backward(system: VFLSystem, jt: _JointTrace, grad_probs,
                   with_params: bool = False, from_logits: bool = False):
    """Backpropagate from the joint output to every participant's input.

    Returns (input_grads, local_param_grads, coord_grad); see
    coordinator_backward for the coordinator-side split.
    """
    branch_grads, coord_grad = coordinator_backward(system, jt, grad_probs,
                                                    from_logits)
    input_grads = []
    local_param_grads = []
    for part, trace, bg in zip(system.participants, jt.local_traces, branch_grads):
        pg, ig = backward(part.model, trace, bg)
        input_grads.append(ig)
        local_param_grads.append(pg if with_params else None)
    return input_grads, local_param_grads, coord_grad


def input_gradients(system: VFLSystem, views, grad_probs,
                    from_logits: bool = False) -> list[np.ndarray]:
    jt = joint_forward(system, views)
    grads, _, _ = joint_backward(system, jt, grad_probs, from_logits=from_logits)
    return grads


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _epoch_batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def _train_linear(views, labels, n_classes: int, epochs: int, lr: float,
                  batch: int, seed: int, momentum: float):
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if lr < 0:
        raise ValueError("lr must be non-negative")
    out_dim = 1 if n_classes == 2 else n_classes
    rng = np.random.default_rng(seed)
    participants = []
    offset = 0
    for i, view in enumerate(views):
        view = as_matrix(view)
        model = init_model([view.shape[1], out_dim], seed=seed + 1000 * (i + 1))
        name = "A" if i == 0 else f"B{i}"
        participants.append(Participant(
            name, list(range(offset, offset + view.shape[1])), model))
        offset += view.shape[1]
    coord = Coordinator("heterolr", bias=np.zeros(out_dim))
    system = VFLSystem(participants, coord, n_classes)

    views = _check_views(system, views)
    n = views[0].shape[0]
    opts = [SgdMomentum(lr, momentum) for _ in participants] if lr > 0 else None
    history = []
    eps = 1e-12
    for _ in range(epochs):
        epoch_loss = 0.0
        for idx in _epoch_batches(n, batch, rng):
            batch_views = [v[idx] for v in views]
            y = labels[idx]
            jt = joint_forward(system, batch_views)
            p = jt.probs
            m = len(idx)
            if out_dim == 1:
                pc = np.clip(p[:, 0], eps, 1 - eps)
                epoch_loss -= float(np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
                grad_score = ((p[:, 0] - y) / m)[:, None]
            else:
                pc = np.clip(p[np.arange(m), y], eps, 1.0)
                epoch_loss -= float(np.sum(np.log(pc)))
                grad_score = (p - _one_hot(y, out_dim)) / m
            if opts is None:
                continue
            _, param_grads, coord_grad = joint_backward(
                system, jt, grad_score, with_params=True, from_logits=True)
            for part, pg, opt in zip(system.participants, param_grads, opts):
                opt.step(part.model, pg)
            coord.bias -= lr * coord_grad
        history.append(epoch_loss / n)
    return system, history


def train_heterolr(views, labels, epochs: int = 30, lr: float = 0.05,
                   batch: int = 64, seed: int = 0, momentum: float = 0.9):
    """Binary vertical logistic regression over two or more feature views."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("logistic protocol requires binary {0,1} labels")
    if len(views) < 2:
        raise ValueError("need at least two participant views")
    return _train_linear(views, labels, 2, epochs, lr, batch, seed, momentum)


def train_linear_joint(views, labels, n_classes: int, epochs: int = 30,
                       lr: float = 0.05, batch: int = 64, seed: int = 0,
                       momentum: float = 0.9):
    """Multi-class variant: summed linear scores under a softmax head."""
    if n_classes < 3:
        raise ValueError("use train_heterolr for binary tasks")
    if len(views) < 2:
        raise ValueError("need at least two participant views")
    return _train_linear(views, labels, n_classes, epochs, lr, batch, seed,
                         momentum)


def train_splitnn(views, labels, local_dims: list[list[int]],
                  top_dims: list[int], epochs: int = 10, lr: float = 0.01,
                  batch: int = 64, seed: int = 0, momentum: float = 0.9):
    """Split network: local MLPs feed a coordinator top model ending in softmax."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n_classes = int(labels.max()) + 1
    if len(views) != len(local_dims):
        raise ValueError("one architecture per participant view required")
    participants = []
    offset = 0
    for i, (view, dims) in enumerate(zip(views, local_dims)):
        view = as_matrix(view)
        if dims[0] != view.shape[1]:
            raise ValueError(f"local model {i} input dim {dims[0]} != view width "
                             f"{view.shape[1]}")
        model = init_model(dims, "relu", seed=seed + 1000 * (i + 1))
        name = "A" if i == 0 else f"B{i}"
        participants.append(Participant(
            name, list(range(offset, offset + view.shape[1])), model))
        offset += view.shape[1]
    if top_dims[0] != sum(d[-1] for d in local_dims):
        raise ValueError("top model input must equal summed local output dims")
    if top_dims[-1] != n_classes:
        raise ValueError("top model output must equal the class count")
    top = init_model(top_dims, "relu", head="softmax", seed=seed + 7)
    system = VFLSystem(participants, Coordinator("splitnn", top_model=top),
                       n_classes)

    views = _check_views(system, views)
    n = views[0].shape[0]
    if lr < 0:
        raise ValueError("lr must be non-negative")
    rng = np.random.default_rng(seed)
    opts = [SgdMomentum(lr, momentum) for _ in participants] if lr > 0 else None
    top_opt = SgdMomentum(lr, momentum) if lr > 0 else None
    history = []
    eps = 1e-12
    for _ in range(epochs):
        epoch_loss = 0.0
        for idx in _epoch_batches(n, batch, rng):
            batch_views = [v[idx] for v in views]
            y = labels[idx]
            jt = joint_forward(system, batch_views)
            m = len(idx)
            pc = np.clip(jt.probs[np.arange(m), y], eps, 1.0)
            epoch_loss -= float(np.sum(np.log(pc)))
            if opts is None:
                continue
            # Softmax + CE collapse: gradient on the final logits.
            grad_logits = (jt.probs - _one_hot(y, n_classes)) / m
            _, param_grads, top_params = joint_backward(
                system, jt, grad_logits, with_params=True, from_logits=True)
            top_opt.step(system.coordinator.top_model, top_params)
            for part, pg, opt in zip(system.participants, param_grads, opts):
                opt.step(part.model, pg)
        history.append(epoch_loss / n)
    return system, history


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC (ties get average ranks)."""
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(np.asarray(scores).ravel())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(system: VFLSystem, views, labels) -> dict:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size == 0:
        raise ValueError("empty test set")
    probs = joint_inference(system, views)
    preds = predicted_labels(probs)
    metrics = {"accuracy": float(np.mean(preds == labels))}
    if probs.shape[1] == 1 and set(np.unique(labels)) <= {0, 1}:
        metrics["auc_roc"] = auc_roc(probs[:, 0], labels)
    return metrics


def audit_trace(messages: list[ProtocolMessage],
                raw_features: dict[str, np.ndarray]) -> list[str]:
    """Raw-feature leak check over a message trace.

    ``raw_features`` maps participant id to that participant's raw feature
    rows. A violation is a payload delivered to a *participant* that carries
    a raw row of some other participant, or an explicitly raw-feature-tagged
    payload anywhere. Derived values flowing to the coordinator are exempt
    from content matching: degenerate local models (identity maps) can emit
    outputs numerically equal to their own inputs without leaking anything
    across a participant boundary.
    """
    row_sets = {
        pid: {row.tobytes() for row in as_matrix(rows)}
        for pid, rows in raw_features.items()
    }
    violations = []
    for i, msg in enumerate(messages):
        if msg.payload_kind == "raw_features":
            violations.append(f"message {i}: explicit raw feature payload "
                              f"{msg.sender}->{msg.receiver}")
            continue
        if msg.payload is None or msg.receiver not in row_sets:
            continue
        payload = np.asarray(msg.payload, dtype=np.float64)
        if payload.ndim == 1:
            payload = payload[None, :]
        if payload.ndim != 2:
            continue
        for pid, rows in row_sets.items():
            if pid == msg.receiver or not rows:
                continue
            width = len(next(iter(rows))) // 8
            if payload.shape[1] != width:
                continue
            for row in payload:
                if row.tobytes() in rows:
                    violations.append(
                        f"message {i}: raw features of {pid} in "
                        f"{msg.sender}->{msg.receiver} payload ({msg.payload_kind})")
                    break
    return violations


def run_with_trace(system: VFLSystem, views, audit: bool = True):
    """Joint inference with an explicit message trace (extract/aggregate/return).

    The trace is audited against the very views used, so raw benign features
    crossing a participant boundary raise AuditError.
    """
    views = _check_views(system, views)
    n = views[0].shape[0]
    messages = []
    for part in system.participants:
        messages.append(ProtocolMessage("4", "C", part.id, "row_index", n))
    jt = joint_forward(system, views)
    for part, out in zip(system.participants, jt.local_outputs):
        messages.append(ProtocolMessage("5", part.id, "C", "local_output",
                                        out.size, out))
    for part in system.participants:
        messages.append(ProtocolMessage("6", "C", part.id, "joint_prediction",
                                        jt.probs.size, jt.probs))
    if audit:
        raw = {part.id: view for part, view in zip(system.participants, views)}
        violations = audit_trace(messages, raw)
        if violations:
            raise AuditError("; ".join(violations))
    return jt.probs, messages


def write_trace_log(messages: list[ProtocolMessage], path):
    with open(path, "w", encoding="utf-8") as fh:
        for msg in messages:
            fh.write(msg.to_json() + "\n")


def system_to_dict(system: VFLSystem) -> dict:
    coord = system.coordinator
    doc = {
        "version": SYSTEM_CHECKPOINT_VERSION,
        "protocol": system.protocol,
        "classes": system.n_classes,
        "partition": [list(p.columns) for p in system.participants],
        "participants": [
            {"id": p.id, "model": model_to_dict(p.model, system.protocol)}
            for p in system.participants
        ],
    }
    if coord.kind == "heterolr":
        doc["coordinator"] = {"kind": coord.kind, "bias": coord.bias.tolist()}
    else:
        doc["coordinator"] = {"kind": coord.kind,
                              "top_model": model_to_dict(coord.top_model,
                                                         system.protocol)}
    return doc


def system_from_dict(doc: dict) -> VFLSystem:
    if doc.get("version") != SYSTEM_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    participants = [
        Participant(entry["id"], list(cols), model_from_dict(entry["model"]))
        for entry, cols in zip(doc["participants"], doc["partition"])
    ]
    cd = doc["coordinator"]
    if cd["kind"] == "heterolr":
        coord = Coordinator("heterolr", bias=np.asarray(cd["bias"]))
    else:
        coord = Coordinator("splitnn", top_model=model_from_dict(cd["top_model"]))
    return VFLSystem(participants, coord, doc["classes"])


def save_system(system: VFLSystem, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(system_to_dict(system), fh, sort_keys=True)


def load_system(path) -> VFLSystem:
    with open(path, encoding="utf-8") as fh:
        return system_from_dict(json.load(fh))
