"""Saliency-guided greybox fuzzing over the adversary's input space.

Instead of code coverage, the feedback signal is the benign side's saliency
score: a [0, 1] scalar each participant derives from the L1 norm of its own
input-saliency map and is willing to share. Mutated inputs that strictly
shrink the benign score are kept for further mutation; inputs that pin the
joint prediction across the hidden benign sample are emitted as dominating
inputs and re-verified against the full benign test view.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import as_matrix, as_vector, backward as model_backward, \
    forward as model_forward
from .protocol import (ProtocolMessage, VFLSystem, audit_trace, AuditError,
                       coordinator_backward, joint_backward, joint_forward,
                       predicted_labels, _coordinator_forward, _JointTrace)
from .synthesis import AdiCandidate, JointEvaluator, _as_benign_views


@dataclass
class FuzzSeed:
    input: np.ndarray
    target: int
    best_score: float          # lowest mean benign saliency seen so far
    lineage_id: int
    origin: np.ndarray         # corpus row this seed descended from

    def __post_init__(self):
        self.input = as_vector(self.input)
        self.origin = as_vector(self.origin)


@dataclass
class CampaignConfig:
    max_iter: int = 5000
    energy: int = 20
    mask_weight: float = 0.2
    stable_fraction: float = 1.0
    bound: np.ndarray | None = None
    noise_std_factor: float = 0.1   # noise std = factor * sqrt(bound)
    thresholds: tuple[float, float] = (0.95, 0.99)
    budget_secs: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1 or self.energy < 1:
            raise ValueError("iteration and energy counts must be >= 1")
        if not 0.0 <= self.mask_weight <= 1.0:
            raise ValueError("mask weight must lie in [0, 1]")
        if not 0.0 < self.stable_fraction <= 1.0:
            raise ValueError("stable fraction must lie in (0, 1]")
        if self.bound is not None:
            self.bound = as_vector(self.bound)
            if np.any(self.bound <= 0):
                raise ValueError("mutation bound must be positive per feature")


@dataclass
class SaliencyCalibration:
    """Per-participant scale: the 99th percentile of saliency L1 norms over
    that participant's training rows."""

    scales: dict[str, float]


def participant_saliency_l1(system: VFLSystem, views) -> np.ndarray:
    """Row-wise saliency L1 per participant: (n, m) array."""
    jt = joint_forward(system, views)
    if jt.probs.shape[1] == 1:
        gp = np.ones_like(jt.probs)
    else:
        c = jt.probs.shape[1]
        gp = (2.0 / c) * (jt.probs - jt.probs.mean(axis=1, keepdims=True))
    grads, _, _ = joint_backward(system, jt, gp)
    return np.stack([np.abs(g).sum(axis=1) for g in grads], axis=1)


def calibrate_saliency(system: VFLSystem, train_views,
                       percentile: float = 99.0) -> SaliencyCalibration:
    norms = participant_saliency_l1(system, train_views)
    scales = {}
    for part, col in zip(system.participants, norms.T):
        scale = float(np.percentile(col, percentile))
        scales[part.id] = max(scale, 1e-12)
    return SaliencyCalibration(scales)


def saliency_score(system: VFLSystem, views, participant_id: str,
                   calibration: SaliencyCalibration | None) -> np.ndarray:
    """Clamped [0, 1] saliency scores for one participant, one per row."""
    if calibration is None or participant_id not in calibration.scales:
        raise ValueError(
            "missing saliency calibration; run calibrate_saliency on the "
            "training views first")
    idx = [p.id for p in system.participants].index(participant_id)
    norms = participant_saliency_l1(system, views)[:, idx]
    return np.clip(norms / calibration.scales[participant_id], 0.0, 1.0)


def compute_mask(system: VFLSystem, views, participant_id: str,
                 label: int) -> np.ndarray:
    """Saliency mask in [0, 1] for one participant's single input row:
    absolute gradient of the predicted label's logit, rescaled by its max."""
    idx = [p.id for p in system.participants].index(participant_id)
    jt = joint_forward(system, views)
    width = jt.probs.shape[1]
    if width == 1:
        glogit = np.ones((jt.probs.shape[0], 1))
    else:
        glogit = np.zeros_like(jt.probs)
        glogit[:, label] = 1.0
    grads, _, _ = joint_backward(system, jt, glogit, from_logits=True)
    mask = np.abs(grads[idx][0])
    peak = mask.max()
    return mask / peak if peak > 0 else mask


def is_adi(x_adv, s_views, l_target: int, system: VFLSystem,
           stable_fraction: float = 1.0) -> bool:
    """True when at least stable_fraction of the benign sample is forced to
    the target label."""
    evaluator = JointEvaluator(system, s_views)
    return evaluator.attack_accuracy(x_adv, l_target) >= stable_fraction


def _benign_mean_score(system: VFLSystem, x_adv, s_views,
                       calibration: SaliencyCalibration) -> float:
    n = s_views[0].shape[0]
    views = [np.repeat(as_vector(x_adv)[None, :], n, axis=0)] + list(s_views)
    idx = range(1, len(system.participants))
    norms = participant_saliency_l1(system, views)
    scores = []
    for i, part in zip(idx, system.participants[1:]):
        scale = calibration.scales[part.id]
        scores.append(np.clip(norms[:, i] / scale, 0.0, 1.0))
    return float(np.mean(scores))


def mutate_saliency_aware(seed: FuzzSeed, s_views, system: VFLSystem,
                          mask_weight: float, bound: np.ndarray,
                          rng: np.random.Generator,
                          noise_std_factor: float = 0.1) -> np.ndarray:
    """One mutation: bounded noise, then per-benign-row mask feedback.

    Pairings that already predict the target reinforce the current mask;
    pairings that do not weaken features the new mask stresses but the
    original input's mask ignores. The result stays within the bound box
    around the seed's lineage origin.
    """
    bound = as_vector(bound, seed.input.shape[0])
    scale = np.sqrt(bound)
    x = seed.input + rng.standard_normal(seed.input.shape[0]) * (
        noise_std_factor * scale)
    adv_id = system.participants[0].id
    for rows in zip(*(view for view in s_views)):
        views_new = [x[None, :]] + [r[None, :] for r in rows]
        probs = joint_forward(system, views_new).probs
        l_pred = int(predicted_labels(probs)[0])
        mask_new = compute_mask(system, views_new, adv_id, seed.target)
        if l_pred == seed.target:
            x = x + mask_weight * mask_new * scale
        else:
            views_orig = [seed.origin[None, :]] + [r[None, :] for r in rows]
            mask_orig = compute_mask(system, views_orig, adv_id, seed.target)
            overshoot = np.maximum(mask_new - mask_orig, 0.0)
            x = x - mask_weight * overshoot * scale
    return seed.origin + np.clip(x - seed.origin, -bound, bound)


def reduce_saliency(seed: FuzzSeed, x_new, system: VFLSystem, s_views,
                    calibration: SaliencyCalibration) -> tuple[bool, float]:
    """Whether the mutated input strictly lowered the benign side's mean
    saliency score versus the seed's recorded best."""
    score = _benign_mean_score(system, x_new, s_views, calibration)
    return score < seed.best_score, score


@dataclass
class FuzzResult:
    adis: list[AdiCandidate]
    log: list[dict] = field(default_factory=list)
    n_mutations: int = 0
    n_iterations: int = 0


def fuzz_campaign(corpus, system: VFLSystem, s_benign, cfg: CampaignConfig,
                  test_benign_views,
                  calibration: SaliencyCalibration | None = None) -> FuzzResult:
    """Queue-driven campaign over a corpus of adversary rows.

    Each popped seed gets a fixed energy of mutations. Mutants that pin the
    hidden benign sample to the seed's target are verified against the full
    benign test view at both dominating thresholds and recorded; mutants
    that merely reduce the benign saliency score re-enter the queue.
    Deterministic given (corpus, system, sample, config).
    """
    corpus = as_matrix(corpus)
    if corpus.shape[0] < 1:
        raise ValueError("corpus must be nonempty")
    if cfg.bound is None:
        raise ValueError("campaign requires a mutation bound")
    s_views = _as_benign_views(system, s_benign)
    if calibration is None:
        raise ValueError("campaign requires a saliency calibration")
    rng = np.random.default_rng(cfg.seed)
    sample_eval = JointEvaluator(system, s_views)
    full_eval = JointEvaluator(system, test_benign_views)
    t_start = time.monotonic()

    queue: deque[FuzzSeed] = deque()
    for lineage, row in enumerate(corpus):
        label, _ = sample_eval.majority_label(row)
        score = _benign_mean_score(system, row, s_views, calibration)
        queue.append(FuzzSeed(row.copy(), label, score, lineage, row.copy()))

    low, high = cfg.thresholds
    result = FuzzResult(adis=[])
    for iteration in range(cfg.max_iter):
        if not queue:
            break
        if cfg.budget_secs is not None and time.monotonic() - t_start > cfg.budget_secs:
            break
        seed = queue.popleft()
        outcome = "exhausted"
        for _ in range(cfg.energy):
            x_new = mutate_saliency_aware(seed, s_views, system,
                                          cfg.mask_weight, cfg.bound, rng,
                                          cfg.noise_std_factor)
            result.n_mutations += 1
            seed = FuzzSeed(x_new, seed.target, seed.best_score,
                            seed.lineage_id, seed.origin)
            if is_adi(x_new, s_views, seed.target, system, cfg.stable_fraction):
                r_full = full_eval.attack_accuracy(x_new, seed.target)
                if r_full >= low:
                    cand = AdiCandidate(seed.origin.copy(),
                                        x_new - seed.origin, seed.target,
                                        float(r_full), iteration + 1,
                                        "bounded", "greybox",
                                        provenance="fuzz")
                    result.adis.append(cand)
                    outcome = "adi"
            else:
                better, score = reduce_saliency(seed, x_new, system, s_views,
                                                calibration)
                if better:
                    requeued = FuzzSeed(x_new.copy(), seed.target, score,
                                        seed.lineage_id, seed.origin)
                    assert np.all(np.abs(requeued.input - requeued.origin)
                                  <= cfg.bound + 1e-12)
                    queue.append(requeued)
                    seed = FuzzSeed(x_new, seed.target, score,
                                    seed.lineage_id, seed.origin)
                    outcome = "requeued"
        result.log.append({
            "iteration": iteration, "lineage": seed.lineage_id,
            "score": seed.best_score, "outcome": outcome,
        })
        result.n_iterations = iteration + 1
    # Campaign-level bookkeeping for the meets-99% threshold view.
    for cand in result.adis:
        cand.provenance = "fuzz"
    return result


def adis_at_threshold(result: FuzzResult, threshold: float) -> list[AdiCandidate]:
    return [c for c in result.adis if c.accuracy >= threshold]


# Cooperative multi-party fuzzing: the benign sample never leaves the benign
# side; only local outputs, gradients at the cut layer, saliency scores, and
# aggregate ratios cross party boundaries.

@dataclass
class CooperationConfig:
    n_noise: int = 8            # noised variants per round (step 2)
    n_inner: int = 5            # repeats of steps 3-10 per candidate
    n_outer: int = 50           # repeats of step 2 (candidate picks)
    mask_weight: float = 0.2
    bound: np.ndarray | None = None
    noise_std_factor: float = 0.1
    threshold: float = 0.95
    seed: int = 0


@dataclass
class CooperationResult:
    found: list[AdiCandidate]
    messages: list[ProtocolMessage]
    ratio_log: list[dict]


def _benign_local_outputs(system: VFLSystem, s_views):
    return [model_forward(part.model, view)[0]
            for part, view in zip(system.participants[1:], s_views)]


def _coop_joint(system: VFLSystem, adv_local: np.ndarray, benign_locals):
    """Joint probabilities for every (adv row x benign row) pair, plus the
    branch gradients of the output spread at the cut layer."""
    n_adv = adv_local.shape[0]
    n_ben = benign_locals[0].shape[0]
    adv_rep = np.repeat(adv_local, n_ben, axis=0)
    ben_rep = [np.tile(b, (n_adv, 1)) for b in benign_locals]
    locals_ = [adv_rep] + ben_rep
    probs, coord_trace = _coordinator_forward(system, locals_)
    jt = _JointTrace([], locals_, coord_trace, probs)
    if probs.shape[1] == 1:
        gp = np.ones_like(probs)
    else:
        c = probs.shape[1]
        gp = (2.0 / c) * (probs - probs.mean(axis=1, keepdims=True))
    branch_grads, _ = coordinator_backward(system, jt, gp)
    return probs.reshape(n_adv, n_ben, -1), [
        g.reshape(n_adv, n_ben, -1) for g in branch_grads]


def run_cooperative_session(system: VFLSystem, corpus, s_benign,
                            cfg: CooperationConfig) -> CooperationResult:
    """Fuzz with explicit participant/coordinator message passing.

    Follows the cooperation protocol steps 1-12: the adversary-side party
    submits noised local outputs, the coordinator returns joint outputs,
    cut-layer gradients, and attack-success rates, both sides report
    saliency scores, and the coordinator's score ratios decide which masked
    retry is kept. The full trace is audited for raw-feature leaks.
    """
    corpus = as_matrix(corpus)
    s_views = _as_benign_views(system, s_benign)
    if cfg.bound is None:
        raise ValueError("cooperative session requires a mutation bound")
    bound = as_vector(cfg.bound)
    rng = np.random.default_rng(cfg.seed)
    adv = system.participants[0]
    messages: list[ProtocolMessage] = []
    ratio_log: list[dict] = []
    found: list[AdiCandidate] = []

    def send(step, sender, receiver, kind, payload):
        arr = None if payload is None else np.asarray(payload, dtype=np.float64)
        size = 0 if arr is None else arr.size
        messages.append(ProtocolMessage(step, sender, receiver, kind, size, arr))

    # Step 1: adversary picks index seeds; benign side ships local outputs.
    pending = list(range(corpus.shape[0]))
    store = {i: corpus[i].copy() for i in pending}
    benign_locals = _benign_local_outputs(system, s_views)
    for part, out in zip(system.participants[1:], benign_locals):
        send("1", part.id, "C", "local_output", out)
    n_s = benign_locals[0].shape[0]

    def asr(adv_local_row, target):
        probs, _ = _coop_joint(system, adv_local_row, benign_locals)
        labels = predicted_labels(probs[0])
        return float(np.mean(labels == target))

    def majority(adv_local_row):
        probs, _ = _coop_joint(system, adv_local_row, benign_locals)
        counts = np.bincount(predicted_labels(probs[0]),
                             minlength=system.n_classes)
        return int(counts.argmax())

    def benign_scores(index_b, branch_grad_row):
        scores = []
        for part, view, g in zip(system.participants[1:], s_views,
                                 branch_grad_row):
            _, trace = model_forward(part.model, view[index_b:index_b + 1])
            _, ig = model_backward(part.model, trace, g[None, :])
            scores.append((part.id, float(np.abs(ig).sum())))
        return scores

    outer = 0
    cursor = 0
    while pending and outer < cfg.n_outer:
        outer += 1
        # Step 2: choose next index, noise it, submit noised local outputs.
        index_a = pending[cursor % len(pending)]
        cursor += 1
        x_current = store[index_a]
        origin = corpus[index_a]
        l_target = majority(model_forward(adv.model, origin[None, :])[0])
        noise = rng.standard_normal((cfg.n_noise, x_current.shape[0])) * (
            cfg.noise_std_factor * np.sqrt(bound))
        noised = origin + np.clip(x_current + noise - origin, -bound, bound)
        noised_locals, noised_traces = [], []
        for row in noised:
            out, trace = model_forward(adv.model, row[None, :])
            noised_locals.append(out)
            noised_traces.append(trace)
        send("2", adv.id, "C", "local_output", np.vstack(noised_locals))

        solved = False
        for _ in range(cfg.n_inner):
            # Step 3: coordinator picks one benign row, returns outputs and
            # cut-layer gradients for every noised variant.
            index_b = int(rng.integers(n_s))
            one_benign = [b[index_b:index_b + 1] for b in benign_locals]
            probs, branch = _coop_joint(system, np.vstack(noised_locals),
                                        one_benign)
            send("3", "C", adv.id, "joint_output", probs[:, 0, :])
            send("3", "C", adv.id, "gradient_wrt_local_output", branch[0][:, 0, :])
            for part, g in zip(system.participants[1:], branch[1:]):
                send("3", "C", part.id, "gradient_wrt_local_output", g[:, 0, :])

            # Step 4: adversary reports its highest saliency score; benign
            # side reports its original scores.
            adv_scores = []
            for trace, g in zip(noised_traces, branch[0][:, 0, :]):
                _, ig = model_backward(adv.model, trace, g[None, :])
                adv_scores.append(float(np.abs(ig).sum()))
            best_idx = int(np.argmax(adv_scores))
            score_orig_a = adv_scores[best_idx]
            send("4", adv.id, "C", "saliency_score", [score_orig_a])
            per_benign = benign_scores(index_b, [g[best_idx, 0] for g in branch[1:]])
            for pid, score in per_benign:
                send("4", pid, "C", "saliency_score", [score])
            score_orig_b = sum(s for _, s in per_benign)

            # Step 5: coordinator computes the attack-success rate.
            orig_acc = asr(noised_locals[best_idx], l_target)
            send("5", "C", adv.id, "attack_success_rate", [orig_acc])

            # Step 6: adversary masks its best variant and resubmits.
            best_row = noised[best_idx]
            _, ig = model_backward(adv.model, noised_traces[best_idx],
                                   branch[0][best_idx, 0][None, :])
            mask = np.abs(ig[0])
            peak = mask.max()
            if peak > 0:
                mask = mask / peak
            masked = best_row + cfg.mask_weight * mask * np.sqrt(bound)
            masked = origin + np.clip(masked - origin, -bound, bound)
            masked_local, masked_trace = model_forward(adv.model, masked[None, :])
            send("6", adv.id, "C", "local_output", masked_local)

            # Step 7: coordinator returns output, gradients, masked ASR.
            _, branch_m = _coop_joint(system, masked_local, one_benign)
            masked_acc = asr(masked_local, l_target)
            send("7", "C", adv.id, "attack_success_rate", [masked_acc])
            send("7", "C", adv.id, "gradient_wrt_local_output",
                 branch_m[0][:, 0, :])
            for part, g in zip(system.participants[1:], branch_m[1:]):
                send("7", "C", part.id, "gradient_wrt_local_output", g[:, 0, :])

            # Step 8: both sides report masked saliency scores.
            _, ig = model_backward(adv.model, masked_trace, branch_m[0][0, 0][None, :])
            score_masked_a = float(np.abs(ig).sum())
            send("8", adv.id, "C", "saliency_score", [score_masked_a])
            per_benign_m = benign_scores(index_b, [g[0, 0] for g in branch_m[1:]])
            for pid, score in per_benign_m:
                send("8", pid, "C", "saliency_score", [score])
            score_masked_b = sum(s for _, s in per_benign_m)

            # Step 9: coordinator publishes the masked/original score ratios.
            ratio_a = score_masked_a / max(score_orig_a, 1e-12)
            ratio_b = score_masked_b / max(score_orig_b, 1e-12)
            send("9", "C", adv.id, "saliency_ratio", [ratio_a, ratio_b])
            ratio_log.append({
                "outer": outer, "index_a": index_a,
                "score_orig_a": score_orig_a, "score_masked_a": score_masked_a,
                "score_orig_b": score_orig_b, "score_masked_b": score_masked_b,
                "ratio_a": ratio_a, "ratio_b": ratio_b,
            })

            # Step 10: keep the masked retry when it helps; emit on success.
            if masked_acc > orig_acc and ratio_a > ratio_b:
                store[index_a] = masked
            if masked_acc > cfg.threshold:
                found.append(AdiCandidate(origin.copy(), masked - origin,
                                          l_target, float(masked_acc), outer,
                                          "bounded", "greybox",
                                          provenance="cooperative-fuzz"))
                pending.remove(index_a)
                solved = True
                break
            # Step 11: repeat from step 3.
        if solved:
            continue
        # Step 12: move on to the next candidate (repeat from step 2).

    raw = {part.id: view for part, view in
           zip(system.participants[1:], s_views)}
    raw[adv.id] = corpus
    violations = audit_trace(messages, raw)
    if violations:
        raise AuditError("; ".join(violations))
    return CooperationResult(found, messages, ratio_log)
