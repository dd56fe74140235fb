"""The dynamic multi-width loss and combinable forgetting-mitigation strategies.

The training loss sums one cross-entropy term per width index; strategy
terms (a quadratic importance penalty or distillation against a frozen
teacher) attach only to the full-width term. Exemplar replay concatenates
stored samples into each batch, routing their labels to the heads of the
tasks they came from.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError
from .tensor import Tensor, no_grad, soft_cross_entropy, softmax_cross_entropy, take

log = logging.getLogger(__name__)


# -- batch routing -----------------------------------------------------------

@dataclass
class BatchGroup:
    """Samples that share a task head: inputs plus head-local labels."""

    task_id: int
    inputs: np.ndarray
    labels: np.ndarray


def _grouped_cross_entropy(model, feats, groups, width):
    """Batch-mean cross-entropy with per-group head routing.

    Groups were concatenated for the body pass, so normalization batch
    statistics cover current samples and replayed exemplars alike.
    """
    total = sum(len(g.inputs) for g in groups)
    if len(groups) == 1:
        logits = model.head_logits(feats, groups[0].task_id, width)
        return softmax_cross_entropy(logits, groups[0].labels)
    term = None
    start = 0
    for g in groups:
        rows = np.arange(start, start + len(g.inputs), dtype=np.intp)
        logits = model.head_logits(take(feats, rows, axis=0), g.task_id, width)
        part = softmax_cross_entropy(logits, g.labels) * (len(g.inputs) / total)
        term = part if term is None else term + part
        start += len(g.inputs)
    return term


def dynamic_loss(model, groups, extra_full_width_terms=(), training=True):
    """Sum of per-width cross-entropies, plus strategy terms on the last width.

    ``groups`` is a list of BatchGroup; ``extra_full_width_terms`` holds
    callables ``(features, inputs) -> Tensor`` evaluated on the full-width
    body features. Returns ``(loss, details)`` where details carries the
    per-width and per-extra scalar values for logging. Terms accumulate in
    ascending width order, so splitting the full-width term out and summing
    the rest reproduces the total bitwise.
    """
    if isinstance(groups, BatchGroup):
        groups = [groups]
    if not groups or any(len(g.inputs) == 0 for g in groups):
        raise InputError("empty batch")
    inputs = groups[0].inputs if len(groups) == 1 else np.concatenate(
        [g.inputs for g in groups], axis=0)
    total = None
    width_terms, extra_terms = [], []
    for n in range(1, model.num_splits + 1):
        feats = model.features(inputs, n, training=training)
        term = _grouped_cross_entropy(model, feats, groups, n)
        width_terms.append(term.item())
        if n == model.num_splits:
            for extra in extra_full_width_terms:
                piece = extra(feats, inputs)
                extra_terms.append(piece.item())
                term = term + piece
        total = term if total is None else total + term
    return total, {"width_terms": width_terms, "extra_terms": extra_terms}


# -- quadratic importance penalties (EWC / MAS) -------------------------------

@dataclass
class FisherState:
    """Diagonal Fisher values, the parameter snapshot they anchor, and lambda."""

    importance: dict
    snapshot: dict
    lamb: float = 5000.0


@dataclass
class MasImportanceState:
    """Mean absolute sensitivity of the squared output norm, plus snapshot."""

    importance: dict
    snapshot: dict
    lamb: float = 1.0


def _per_sample_grad_accumulate(model, inputs, loss_fn, sample_cap):
    """Run single-sample backward passes and return mean-aggregated stats.

    ``loss_fn(i)`` builds the scalar loss for sample i. Returns the number of
    samples visited and a dict of accumulated |grad| and grad^2 per parameter.
    """
    n = len(inputs)
    if n == 0:
        raise InputError("empty dataset")
    count = min(n, sample_cap) if sample_cap else n
    sq = {name: np.zeros_like(p.data) for name, p in model.parameters().items()}
    ab = {name: np.zeros_like(p.data) for name, p in model.parameters().items()}
    for i in range(count):
        model.zero_grad()
        loss = loss_fn(i)
        loss.backward()
        for name, p in model.parameters().items():
            if p.grad is not None:
                sq[name] += p.grad ** 2
                ab[name] += np.abs(p.grad)
    for name in sq:
        sq[name] /= count
        ab[name] /= count
    model.zero_grad()
    return sq, ab


def ewc_fisher(model, inputs, labels, task_id, sample_cap=2048, lamb=5000.0):
    """Empirical diagonal Fisher at full width, using the true-label gradient.

    Evaluation-mode normalization statistics are used (single-sample batch
    statistics would be degenerate); running buffers are not updated.
    """
    width = model.num_splits

    def loss_fn(i):
        logits = model.forward(inputs[i:i + 1], width, tasks=[task_id],
                               training=False)[task_id]
        return softmax_cross_entropy(logits, labels[i:i + 1])

    sq, _ = _per_sample_grad_accumulate(model, inputs, loss_fn, sample_cap)
    snapshot = {name: p.data.copy() for name, p in model.parameters().items()}
    return FisherState(importance=sq, snapshot=snapshot, lamb=lamb)


def mas_importance(model, inputs, task_ids, sample_cap=2048, lamb=1.0):
    """Mean |d ||f(x)||^2 / d theta| over samples; labels are never used.

    ``task_ids`` selects the heads whose concatenated logits form f(x),
    normally every head seen so far.
    """
    width = model.num_splits

    def loss_fn(i):
        logits = model.forward(inputs[i:i + 1], width, tasks=task_ids,
                               training=False)
        total = None
        for t in task_ids:
            sq_norm = (logits[t] * logits[t]).sum()
            total = sq_norm if total is None else total + sq_norm
        return total

    _, ab = _per_sample_grad_accumulate(model, inputs, loss_fn, sample_cap)
    snapshot = {name: p.data.copy() for name, p in model.parameters().items()}
    return MasImportanceState(importance=ab, snapshot=snapshot, lamb=lamb)


def quadratic_penalty(model, importance, snapshot, lamb):
    """(lamb/2) * sum_i importance_i * (theta_i - snapshot_i)^2 over all coordinates."""
    total = None
    for name in sorted(importance):
        p = model.parameters().get(name)
        if p is None or p.shape != importance[name].shape:
            raise ContractError(f"penalty state does not match parameter {name!r}")
        d = p - Tensor(snapshot[name])
        term = (d * d * Tensor(importance[name])).sum()
        total = term if total is None else total + term
    return total * (lamb / 2.0)


def ewc_penalty(model, state):
    return quadratic_penalty(model, state.importance, state.snapshot, state.lamb)


def mas_penalty(model, state):
    return quadratic_penalty(model, state.importance, state.snapshot, state.lamb)


def consolidate(old_state, new_state):
    """Sum importances across tasks and anchor at the newest snapshot."""
    if old_state is None:
        return new_state
    for name, arr in old_state.importance.items():
        new_state.importance[name] = new_state.importance[name] + arr
    return new_state


# -- distillation against a frozen teacher (LwF) ------------------------------

@dataclass
class TeacherSnapshot:
    """Frozen full model after the previous task, plus its trained task ids."""

    model: object
    tasks: tuple
    temperature: float = 2.0


def lwf_loss(model, teacher, inputs, lamb=1.0, temperature=None, features=None):
    """Distillation of the teacher's old-head outputs into the current model.

    Temperature-softened distributions on both sides, summed over the
    teacher's heads, mean over the batch, scaled by lamb. ``features`` may
    pass in precomputed full-width body activations so the term shares the
    forward pass of the full-width cross-entropy.
    """
    if teacher is None or not teacher.tasks:
        raise ContractError("distillation requires a frozen teacher with old heads")
    tau = teacher.temperature if temperature is None else temperature
    width = model.num_splits
    if features is None:
        features = model.features(inputs, width, training=False)
    with no_grad():
        teacher_logits = teacher.model.forward(inputs, width, tasks=teacher.tasks,
                                               training=False)
    total = None
    for t in teacher.tasks:
        z = teacher_logits[t].data / tau
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        target = ez / ez.sum(axis=1, keepdims=True)
        student = model.head_logits(features, t, width) * (1.0 / tau)
        term = soft_cross_entropy(student, target)
        total = term if total is None else total + term
    return total * lamb


# -- herded exemplar memory ----------------------------------------------------

def herding_select(features, budget):
    """Greedy herding order: each pick keeps the running mean nearest the class mean.

    Returns the first min(budget, count) indices in selection order. Ties
    break toward the lowest sample index.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise InputError("herding needs a nonempty 2-D feature array")
    if budget < 1:
        raise InputError(f"herding budget must be >= 1, got {budget}")
    mu = f.mean(axis=0)
    chosen = []
    selected_sum = np.zeros(f.shape[1])
    available = np.ones(len(f), dtype=bool)
    for k in range(1, min(budget, len(f)) + 1):
        cand = (selected_sum + f) / k
        dist = ((cand - mu) ** 2).sum(axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        selected_sum += f[i]
        available[i] = False
    return chosen


@dataclass
class ClassExemplars:
    global_class: int
    task_id: int
    local_label: int
    inputs: np.ndarray  # stored in herding order


@dataclass
class ExemplarMemory:
    """Fixed-budget store of old-task samples, per class, in herding order."""

    budget: int
    classes: dict = field(default_factory=dict)

    def total_stored(self):
        return sum(len(c.inputs) for c in self.classes.values())

    def is_empty(self):
        return self.total_stored() == 0


def rebalance_memory(memory, new_class_data, feature_fn):
    """Recompute per-class quotas and fold new classes into the memory.

    ``new_class_data`` is a list of (global_class, task_id, local_label,
    inputs) with the full class data available for selection; ``feature_fn``
    maps an input array to per-sample feature vectors. Existing classes are
    truncated to the new quota (herding order is a prefix ordering), new
    classes are selected by herding. If the budget cannot give every class
    one exemplar, the highest-numbered classes are dropped and logged.
    """
    for gc, task_id, local_label, inputs in new_class_data:
        if gc in memory.classes:
            raise ContractError(f"class {gc} already stored")
        order = herding_select(feature_fn(inputs), len(inputs))
        memory.classes[gc] = ClassExemplars(gc, task_id, local_label, inputs[order])
    n_classes = len(memory.classes)
    if n_classes == 0:
        return memory
    quota = memory.budget // n_classes
    if quota == 0:
        quota = 1
        keep = sorted(memory.classes)[:memory.budget]
        dropped = sorted(set(memory.classes) - set(keep))
        if dropped:
            log.warning("exemplar budget %d < %d classes; dropping classes %s",
                        memory.budget, n_classes, dropped)
        memory.classes = {gc: memory.classes[gc] for gc in keep}
    for c in memory.classes.values():
        c.inputs = c.inputs[:quota]
    return memory


def replay_batch(task_batch, memory, mix_ratio, rng):
    """Concatenate uniformly drawn exemplars onto the current-task batch.

    The exemplar count is floor(mix_ratio * batch size); draws are uniform
    with replacement over every stored exemplar. Returns a list of
    BatchGroup with the current-task group first and exemplar groups sorted
    by task id. With an empty memory or a zero draw the batch is unchanged.
    """
    current = task_batch if isinstance(task_batch, BatchGroup) else BatchGroup(*task_batch)
    k = int(mix_ratio * len(current.inputs))
    if memory is None or memory.is_empty() or k == 0:
        return [current]
    flat = []
    for gc in sorted(memory.classes):
        c = memory.classes[gc]
        for row in range(len(c.inputs)):
            flat.append((c.task_id, c.local_label, gc, row))
    picks = rng.integers(0, len(flat), size=k)
    by_task = {}
    for p in picks:
        task_id, local, gc, row = flat[p]
        by_task.setdefault(task_id, []).append((gc, row, local))
    groups = [current]
    for task_id in sorted(by_task):
        rows = by_task[task_id]
        inputs = np.stack([memory.classes[gc].inputs[row] for gc, row, _ in rows])
        labels = np.array([local for _, _, local in rows], dtype=np.int64)
        groups.append(BatchGroup(task_id, inputs, labels))
    return groups
