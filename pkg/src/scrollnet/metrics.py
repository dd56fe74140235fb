"""Task-aware and task-agnostic accuracy over a task stream.

All reported metrics run the model at full width in evaluation mode
(running normalization statistics, no updates). Argmax ties break toward
the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError
from .tensor import no_grad

CSV_HEADER = "# scrollnet-metrics-v1"
_EVAL_BATCH = 512

PROTOCOLS = ("task_aware", "task_agnostic")


def _head_logits_np(model, task, inputs, task_ids):
    """Full-width eval-mode logits per head, as plain arrays, in batches."""
    out = {t: [] for t in task_ids}
    with no_grad():
        for start in range(0, len(inputs), _EVAL_BATCH):
            chunk = inputs[start:start + _EVAL_BATCH]
            logits = model.forward(chunk, model.num_splits, tasks=task_ids,
                                   training=False)
            for t in task_ids:
                out[t].append(logits[t].data)
    return {t: np.concatenate(v, axis=0) for t, v in out.items()}


def evaluate_task_aware(model, stream, upto_task):
    """Accuracy per task when the task identity is given at test time."""
    if upto_task > len(model.head_sizes):
        raise ContractError(f"missing heads for {upto_task} tasks")
    accs = []
    for j in range(upto_task):
        test = stream.tasks[j].test
        logits = _head_logits_np(model, j, test.samples, [j])[j]
        preds = logits.argmax(axis=1)
        accs.append(float((preds == test.labels).mean()))
    return accs


def evaluate_task_agnostic(model, stream, upto_task):
    """Accuracy per task over the concatenated label space of all seen heads.

    A prediction counts only when both the task and the within-task class
    are right.
    """
    if upto_task > len(model.head_sizes):
        raise ContractError(f"missing heads for {upto_task} tasks")
    head_ids = list(range(upto_task))
    sizes = [stream.tasks[t].test.num_classes for t in head_ids]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    accs = []
    for j in range(upto_task):
        test = stream.tasks[j].test
        logits = _head_logits_np(model, j, test.samples, head_ids)
        stacked = np.concatenate([logits[t] for t in head_ids], axis=1)
        flat = stacked.argmax(axis=1)
        pred_task = np.searchsorted(offsets, flat, side="right") - 1
        pred_local = flat - offsets[pred_task]
        correct = (pred_task == j) & (pred_local == test.labels)
        accs.append(float(correct.mean()))
    return accs


def evaluate_all(model, stream, upto_task):
    return (evaluate_task_aware(model, stream, upto_task),
            evaluate_task_agnostic(model, stream, upto_task))


def evaluate_subnetwork_accuracies(model, stream, upto_task):
    """Task-aware accuracy at every width index, keyed by width.

    Diagnostic only: reported metrics always run the full model, narrower
    sub-networks are worth watching but never enter the report.
    """
    out = {}
    for width in range(1, model.num_splits + 1):
        accs = []
        for j in range(upto_task):
            test = stream.tasks[j].test
            preds = []
            with no_grad():
                for start in range(0, len(test.samples), _EVAL_BATCH):
                    chunk = test.samples[start:start + _EVAL_BATCH]
                    logits = model.forward(chunk, width, tasks=[j],
                                           training=False)[j]
                    preds.append(logits.data.argmax(axis=1))
            accs.append(float((np.concatenate(preds) == test.labels).mean()))
        out[width] = accs
    return out


@dataclass
class MetricsReport:
    """Accuracy matrices A[t_eval][t_task] per protocol, filled task by task."""

    task_aware: list = field(default_factory=list)
    task_agnostic: list = field(default_factory=list)

    def record(self, taw_row, tag_row):
        if len(taw_row) != len(self.task_aware) + 1 or len(tag_row) != len(taw_row):
            raise ContractError("rows must grow by one task per evaluation")
        self.task_aware.append([float(a) for a in taw_row])
        self.task_agnostic.append([float(a) for a in tag_row])

    def matrix(self, protocol):
        if protocol not in PROTOCOLS:
            raise InputError(f"unknown protocol {protocol!r}")
        return self.task_aware if protocol == "task_aware" else self.task_agnostic

    def num_tasks(self):
        return len(self.task_aware)

    def average(self, protocol, after_task):
        """Unweighted mean of per-task accuracies after the given 1-based task."""
        rows = self.matrix(protocol)
        if not 1 <= after_task <= len(rows):
            raise InputError(f"after_task {after_task} outside [1, {len(rows)}]")
        row = rows[after_task - 1]
        return float(np.mean(row))

    def averages(self, protocol):
        return [self.average(protocol, t + 1) for t in range(self.num_tasks())]

    def final_average(self, protocol):
        return self.average(protocol, self.num_tasks())

    def forgetting(self, protocol):
        """Per-task drop from its best earlier accuracy to the final one."""
        rows = self.matrix(protocol)
        last = rows[-1]
        out = []
        for j in range(len(last)):
            seen = [rows[t][j] for t in range(j, len(rows))]
            out.append(float(max(seen) - last[j]))
        return out

    def to_csv(self):
        lines = [CSV_HEADER, "protocol,after_task,task,accuracy"]
        for protocol in PROTOCOLS:
            for t_eval, row in enumerate(self.matrix(protocol), start=1):
                for t_task, acc in enumerate(row, start=1):
                    lines.append(
                        f"{protocol},{t_eval},{t_task},{format(acc, '.12g')}")
        return "\n".join(lines) + "\n"

    def to_summary(self):
        return {
            "num_tasks": self.num_tasks(),
            "task_aware": self.task_aware,
            "task_agnostic": self.task_agnostic,
            "avg_task_aware": self.averages("task_aware"),
            "avg_task_agnostic": self.averages("task_agnostic"),
            "final_avg_task_aware": self.final_average("task_aware"),
            "final_avg_task_agnostic": self.final_average("task_agnostic"),
            "forgetting_task_aware": self.forgetting("task_aware"),
            "forgetting_task_agnostic": self.forgetting("task_agnostic"),
        }

    @classmethod
    def from_summary(cls, d):
        report = cls()
        for taw_row, tag_row in zip(d["task_aware"], d["task_agnostic"]):
            report.record(taw_row, tag_row)
        return report


def average_accuracy(report, protocol, after_task):
    return report.average(protocol, after_task)
