"""Quantitative studies: dominance baselines, synthesis campaigns, reward
shares, the perturbation-subspace analysis, and partition/participant sweeps.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import image_column_partition, mnist_column_split, partition_vertical, \
    ratio_split, sample_tiny
from .model import as_matrix, as_vector
from .protocol import VFLSystem, evaluate, input_gradients, train_splitnn
from .synthesis import (AdiCandidate, JointEvaluator, SynthesisConfig,
                        adi_generate, default_bound, _as_benign_views,
                        _spread_grad_on_probs)


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    seed: int = 0
    wallclock_secs: float = 0.0

    @property
    def artifact_hash(self) -> str:
        blob = json.dumps({"kind": self.kind, "config": self.config,
                           "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self):
        for row in self.rows:
            for col in self.columns:
                value = row.get(col)
                if isinstance(value, float) and not np.isfinite(value):
                    raise ValueError(f"non-finite metric {col!r} in {self.kind}")

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind, "config": self.config, "columns": self.columns,
            "rows": self.rows, "seed": self.seed,
            "artifact_hash": self.artifact_hash,
            "wallclock_secs": self.wallclock_secs,
        }, sort_keys=True)

    def write_json(self, path):
        self.validate()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def write_csv(self, path):
        self.validate()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row.get(c) for c in self.columns})


def report_filename(kind: str, seed: int, ext: str = "json") -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return f"{kind}-{seed}-{stamp}.{ext}"


def majority_labels(evaluator: JointEvaluator, rows: np.ndarray):
    """Per-row majority joint label and its share across the benign view."""
    labels = np.empty(rows.shape[0], dtype=np.int64)
    shares = np.empty(rows.shape[0])
    for i, row in enumerate(rows):
        labels[i], shares[i] = evaluator.majority_label(row)
    return labels, shares


def dominating_rate(system: VFLSystem, adv_rows, benign_views,
                    threshold: float = 0.95, adv_index: int = 0) -> float:
    """Share of unperturbed rows already pinning their own majority label on
    at least ``threshold`` of the benign view."""
    if threshold not in (0.95, 0.99):
        raise ValueError("dominating thresholds are 0.95 and 0.99")
    adv_rows = as_matrix(adv_rows)
    evaluator = JointEvaluator(system, benign_views, adv_index=adv_index)
    _, shares = majority_labels(evaluator, adv_rows)
    return float(np.mean(shares >= threshold))


def success_rate(system: VFLSystem, adv_rows, cfg: SynthesisConfig,
                 tiny_benign, test_benign_views,
                 threshold: float = 0.95) -> tuple[float, list[AdiCandidate]]:
    """Share of sampled adversary rows perturbable into dominating inputs.

    Each row targets its own majority joint label; success is the practical
    assessment on the full benign test view. With a zero round budget this
    degenerates to the baseline dominating rate.
    """
    adv_rows = as_matrix(adv_rows)
    if adv_rows.shape[0] < 1:
        raise ValueError("need at least one sampled row")
    full_eval = JointEvaluator(system, test_benign_views)
    candidates = []
    hits = 0
    for row in adv_rows:
        l_target, _ = full_eval.majority_label(row)
        cand = adi_generate(row, system, l_target, cfg, tiny_benign,
                            stop_benign=full_eval)
        candidates.append(cand)
        hits += cand.accuracy >= threshold
    return hits / adv_rows.shape[0], candidates


def reward_shares(system: VFLSystem, views) -> tuple[np.ndarray, bool]:
    """Per-participant contribution shares for a batch of joint inferences.

    The per-participant saliency map is the gradient of the output spread
    weighted by the input itself (|grad . input| elementwise); its L1 norm,
    normalized across participants, is the per-inference share. Returns the
    mean share vector and a flag set when every map was zero (uniform
    fallback).
    """
    views = [as_matrix(v) for v in views]
    from .protocol import joint_forward, joint_backward
    jt = joint_forward(system, views)
    if jt.probs.shape[1] == 1:
        gp = np.ones_like(jt.probs)
    else:
        c = jt.probs.shape[1]
        gp = (2.0 / c) * (jt.probs - jt.probs.mean(axis=1, keepdims=True))
    grads, _, _ = joint_backward(system, jt, gp)
    norms = np.stack([np.abs(g * v).sum(axis=1)
                      for g, v in zip(grads, views)], axis=1)
    totals = norms.sum(axis=1, keepdims=True)
    degenerate = bool(np.any(totals[:, 0] == 0.0))
    m = len(views)
    shares = np.where(totals > 0, norms / np.maximum(totals, 1e-300), 1.0 / m)
    mean = shares.mean(axis=0)
    return mean / mean.sum(), degenerate


@dataclass
class PerturbationStudy:
    matrix: np.ndarray            # (d, h) unit-normalized perturbation columns
    mean_perturbation: np.ndarray
    base: np.ndarray
    target: int
    dropped: int = 0


def build_perturbation_matrix(system: VFLSystem, benign_rows, x_adv_star,
                              cfg: SynthesisConfig,
                              l_target: int | None = None) -> PerturbationStudy:
    """One single-benign-row synthesis pass per column, unit-normalized.

    Column i is the mutation found against benign row i alone; zero columns
    are dropped (counted in the result).
    """
    benign_views = _as_benign_views(system, benign_rows)
    h = benign_views[0].shape[0]
    if h < 2:
        raise ValueError("need at least two benign rows")
    base = as_vector(x_adv_star)
    if l_target is None:
        probe = JointEvaluator(system, benign_views)
        l_target, _ = probe.majority_label(base)
    cols = []
    raw = []
    dropped = 0
    for i in range(h):
        rows = [view[i:i + 1] for view in benign_views]
        cand = adi_generate(base, system, l_target, cfg, rows)
        norm = np.linalg.norm(cand.perturbation)
        if norm == 0.0:
            dropped += 1
            continue
        cols.append(cand.perturbation / norm)
        raw.append(cand.perturbation)
    if not cols:
        raise ValueError("every synthesis pass returned a zero perturbation")
    matrix = np.stack(cols, axis=1)
    mean_v = np.mean(raw, axis=0)
    return PerturbationStudy(matrix, mean_v, base, int(l_target), dropped)


def singular_spectrum(matrix) -> np.ndarray:
    matrix = as_matrix(matrix)
    return np.linalg.svd(matrix, compute_uv=False)


def random_unit_columns(d: int, h: int, seed: int = 0) -> np.ndarray:
    """Baseline matrix with columns uniform on the unit sphere."""
    rng = np.random.default_rng(seed)
    cols = rng.standard_normal((d, h))
    return cols / np.linalg.norm(cols, axis=0, keepdims=True)


def reconstruct_and_rate(study: PerturbationStudy, k: int, system: VFLSystem,
                         test_benign_views) -> float:
    """Dominating accuracy after projecting the mean mutation onto the top-k
    left singular directions of the perturbation matrix."""
    u, _, _ = np.linalg.svd(study.matrix, full_matrices=False)
    if not 1 <= k <= u.shape[1]:
        raise ValueError(f"k must lie in [1, {u.shape[1]}]")
    basis = u[:, :k]
    projected = basis @ (basis.T @ study.mean_perturbation)
    evaluator = JointEvaluator(system, test_benign_views)
    return evaluator.attack_accuracy(study.base + projected, study.target)


def partition_ratio_sweep(features, labels, ratios, image_side: int | None,
                          train_cfg: dict, synth_cfg: SynthesisConfig,
                          n_dominance: int = 300, n_synth: int = 40,
                          test_fraction: float = 0.2, seed: int = 0,
                          thresholds=(0.95,)) -> ExperimentReport:
    """Accuracy, per-side dominance, and synthesis success across feature
    partition ratios. ``image_side`` switches to pixel-column partitioning."""
    t0 = time.time()
    features = as_matrix(features)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    rng = np.random.default_rng(seed)
    n = features.shape[0]
    n_test = int(round(n * test_fraction))
    order = rng.permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    report = ExperimentReport(
        "partition-ratio-sweep",
        {"ratios": list(ratios), "train": train_cfg,
         "synth": {"strategy": synth_cfg.strategy, "mode": synth_cfg.mode},
         "n_dominance": n_dominance, "n_synth": n_synth},
        ["ratio", "accuracy", "dominating_rate_adv", "dominating_rate_benign",
         "synthesis_success"],
        seed=seed)
    for ratio in ratios:
        if image_side is not None:
            n_a = int(round(image_side * ratio / (1.0 + ratio)))
            spec = image_column_partition([n_a, image_side - n_a], image_side)
        else:
            spec = ratio_split(features.shape[1], ratio)
        views = partition_vertical(features, spec)
        train_views = [v[train_idx] for v in views]
        test_views = [v[test_idx] for v in views]
        dims = [[v.shape[1]] + train_cfg["local_hidden"] for v in train_views]
        top = [sum(d[-1] for d in dims)] + train_cfg["top_hidden"] + [
            int(labels.max()) + 1]
        system, _ = train_splitnn(train_views, labels[train_idx], dims, top,
                                  epochs=train_cfg.get("epochs", 10),
                                  lr=train_cfg.get("lr", 0.05),
                                  batch=train_cfg.get("batch", 64),
                                  seed=seed + int(ratio * 100))
        metrics = evaluate(system, test_views, labels[test_idx])
        n_dom = min(n_dominance, n_test)
        dom_a = dominating_rate(system, test_views[0][:n_dom],
                                [test_views[1]], thresholds[0], adv_index=0)
        dom_b = dominating_rate(system, test_views[1][:n_dom],
                                [test_views[0]], thresholds[0], adv_index=1)
        cfg = synth_cfg
        if cfg.strategy == "bounded":
            cfg = SynthesisConfig(**{**cfg.__dict__,
                                     "bound": default_bound(train_views[0])})
        sample = test_views[0][rng.choice(n_test, size=min(n_synth, n_test),
                                          replace=False)]
        tiny = sample_tiny(test_views[1], min(20, n_test), seed=seed + 1)
        succ, _ = success_rate(system, sample, cfg, tiny, [test_views[1]],
                               thresholds[0])
        report.rows.append({
            "ratio": float(ratio), "accuracy": metrics["accuracy"],
            "dominating_rate_adv": dom_a, "dominating_rate_benign": dom_b,
            "synthesis_success": succ,
        })
    report.wallclock_secs = time.time() - t0
    report.validate()
    return report


def participants_sweep(features, labels, counts, train_cfg: dict,
                       synth_random: SynthesisConfig,
                       synth_bounded: SynthesisConfig | None = None,
                       n_dominance: int = 300, n_synth: int = 40,
                       test_fraction: float = 0.2, seed: int = 0,
                       threshold: float = 0.95) -> ExperimentReport:
    """Accuracy, dominance, and synthesis success for 2/3/5-party splits of
    28x28 image data."""
    t0 = time.time()
    features = as_matrix(features)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    rng = np.random.default_rng(seed)
    n = features.shape[0]
    n_test = int(round(n * test_fraction))
    order = rng.permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    columns = ["participants", "accuracy", "dominating_rate",
               "success_random"]
    if synth_bounded is not None:
        columns.append("success_bounded")
    report = ExperimentReport(
        "participants-sweep",
        {"counts": list(counts), "train": train_cfg,
         "n_dominance": n_dominance, "n_synth": n_synth},
        columns, seed=seed)
    for m in counts:
        spec = mnist_column_split(m)
        views = partition_vertical(features, spec)
        train_views = [v[train_idx] for v in views]
        test_views = [v[test_idx] for v in views]
        dims = [[v.shape[1]] + train_cfg["local_hidden"] for v in train_views]
        top = [sum(d[-1] for d in dims)] + train_cfg["top_hidden"] + [
            int(labels.max()) + 1]
        system, _ = train_splitnn(train_views, labels[train_idx], dims, top,
                                  epochs=train_cfg.get("epochs", 10),
                                  lr=train_cfg.get("lr", 0.05),
                                  batch=train_cfg.get("batch", 64),
                                  seed=seed + m)
        metrics = evaluate(system, test_views, labels[test_idx])
        benign_test = test_views[1:]
        n_dom = min(n_dominance, n_test)
        dom = dominating_rate(system, test_views[0][:n_dom], benign_test,
                              threshold)
        sample = test_views[0][rng.choice(n_test, size=min(n_synth, n_test),
                                          replace=False)]
        tiny_rows = np.concatenate(
            [v for v in benign_test], axis=1)
        tiny = sample_tiny(tiny_rows, min(20, n_test), seed=seed + 2)
        succ_r, _ = success_rate(system, sample, synth_random, tiny,
                                 benign_test, threshold)
        row = {"participants": int(m), "accuracy": metrics["accuracy"],
               "dominating_rate": dom, "success_random": succ_r}
        if synth_bounded is not None:
            cfg_b = SynthesisConfig(**{**synth_bounded.__dict__,
                                       "bound": default_bound(train_views[0])})
            succ_b, _ = success_rate(system, sample, cfg_b, tiny,
                                     benign_test, threshold)
            row["success_bounded"] = succ_b
        report.rows.append(row)
    report.wallclock_secs = time.time() - t0
    report.validate()
    return report
