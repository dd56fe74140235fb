"""Sequential-task optimization with scrolling, strategy hooks and checkpoints.

One task is trained at a time: the scroll state is advanced strictly before
the first gradient step, every batch accumulates the multi-width loss (with
strategy terms attached to the full-width term only), and strategy
post-hooks (importance estimation, teacher freezing, memory rebalancing)
run after the final epoch. Only the current task's data is touched during
training; older samples enter exclusively through the exemplar memory.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, TrainingDiverged
from .metrics import MetricsReport, evaluate_all, evaluate_subnetwork_accuracies
from .scrolling import ScrollState, ranking, state_for_task
from .slimmable import SlimmableModel, model_from_meta
from .strategies import (
    BatchGroup,
    ExemplarMemory,
    ClassExemplars,
    FisherState,
    MasImportanceState,
    TeacherSnapshot,
    consolidate,
    dynamic_loss,
    ewc_fisher,
    ewc_penalty,
    lwf_loss,
    mas_importance,
    mas_penalty,
    rebalance_memory,
    replay_batch,
)
from .tensor import SGD, no_grad

STRATEGIES = ("ft", "ewc", "mas", "lwf")
_DEFAULT_LAMBDA = {"ewc": 5000.0, "mas": 1.0, "lwf": 1.0}


@dataclass
class StrategyConfig:
    name: str = "ft"
    lamb: float | None = None      # None = per-method default
    temperature: float = 2.0
    sample_cap: int = 2048
    replay_budget: int = 0
    replay_mix: float = 0.5

    def resolved_lambda(self):
        if self.lamb is not None:
            return self.lamb
        return _DEFAULT_LAMBDA.get(self.name, 1.0)


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.1
    lr_decay: float = 0.1
    milestones: tuple = (24, 36)
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    num_splits: int = 1
    scroll_step: int = 1
    strategy: StrategyConfig = field(default_factory=StrategyConfig)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="train.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1", key="train.batch_size")
        if self.lr <= 0:
            raise ConfigError("lr must be positive", key="train.lr")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]", key="train.lr_decay")
        if any(m >= self.epochs or m < 0 for m in self.milestones):
            raise ConfigError("milestones must lie inside [0, epochs)",
                              key="train.milestones")
        if self.num_splits < 1 or self.scroll_step < 1:
            raise ConfigError("num_splits and scroll_step must be >= 1",
                              key="num_splits")
        if self.strategy.name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy.name!r}",
                              key="strategy.name")
        if self.strategy.replay_budget < 0 or not 0 <= self.strategy.replay_mix <= 4:
            raise ConfigError("invalid replay settings", key="strategy.replay_budget")


def lr_at_epoch(config, epoch):
    """base * decay^(milestones passed), with 0-based epoch indices."""
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_decay ** passed


@dataclass
class RunState:
    """Everything needed to continue a run: model, scroll, strategy knowledge, RNG."""

    model: SlimmableModel
    scroll: ScrollState
    rng: np.random.Generator
    report: MetricsReport = field(default_factory=MetricsReport)
    penalty: object = None          # FisherState | MasImportanceState | None
    teacher: TeacherSnapshot | None = None
    memory: ExemplarMemory | None = None
    tasks_trained: int = 0
    epoch_cursor: int = 0
    optimizer: SGD | None = None
    log_records: list = field(default_factory=list)


def new_run(model, config):
    config.validate()
    if model.num_splits != config.num_splits:
        raise ContractError(
            f"model has {model.num_splits} splits, config expects {config.num_splits}"
        )
    memory = (ExemplarMemory(budget=config.strategy.replay_budget)
              if config.strategy.replay_budget > 0 else None)
    return RunState(
        model=model,
        scroll=state_for_task(1, config.num_splits, config.scroll_step),
        rng=np.random.default_rng(config.seed),
        memory=memory,
    )


def _emit(run, log_fh, record):
    run.log_records.append(record)
    if log_fh is not None:
        log_fh.write(json.dumps(record) + "\n")
        log_fh.flush()


def _strategy_extras(run, config):
    """Full-width loss terms contributed by the active strategy, as callables."""
    extras = []
    strat = config.strategy
    if strat.name == "ewc" and run.penalty is not None:
        extras.append(lambda feats, inputs: ewc_penalty(run.model, run.penalty))
    elif strat.name == "mas" and run.penalty is not None:
        extras.append(lambda feats, inputs: mas_penalty(run.model, run.penalty))
    elif strat.name == "lwf" and run.teacher is not None:
        lamb = strat.resolved_lambda()
        extras.append(lambda feats, inputs: lwf_loss(
            run.model, run.teacher, inputs, lamb=lamb, features=feats))
    return extras


def _feature_fn(model):
    def f(inputs):
        chunks = []
        with no_grad():
            for start in range(0, len(inputs), 512):
                chunks.append(model.features(inputs[start:start + 512],
                                             model.num_splits,
                                             training=False).data)
        return np.concatenate(chunks, axis=0)
    return f


def _post_task_hooks(run, task, config):
    strat = config.strategy
    task_id = run.tasks_trained
    if strat.name == "ewc":
        state = ewc_fisher(run.model, task.train.samples, task.train.labels,
                           task_id, sample_cap=strat.sample_cap,
                           lamb=strat.resolved_lambda())
        run.penalty = consolidate(run.penalty, state)
    elif strat.name == "mas":
        state = mas_importance(run.model, task.train.samples,
                               task_ids=list(range(task_id + 1)),
                               sample_cap=strat.sample_cap,
                               lamb=strat.resolved_lambda())
        run.penalty = consolidate(run.penalty, state)
    elif strat.name == "lwf":
        run.teacher = TeacherSnapshot(model=run.model.copy(),
                                      tasks=tuple(range(task_id + 1)),
                                      temperature=strat.temperature)
    if run.memory is not None:
        new_classes = []
        for local in range(task.train.num_classes):
            rows = np.flatnonzero(task.train.labels == local)
            new_classes.append((task.classes[local], task_id, local,
                                task.train.samples[rows]))
        rebalance_memory(run.memory, new_classes, _feature_fn(run.model))


def train_task(run, task, config, epoch_callback=None, log_fh=None):
    """Train the current task per the sequential-optimization procedure.

    Requires the scroll state to be advanced for this task already. Resumes
    from ``run.epoch_cursor`` when it is nonzero (mid-task checkpoint), and
    runs the strategy post-hooks only after the final epoch.
    """
    if len(task.train) == 0:
        raise ContractError("task has no training data")
    if run.scroll.task_index != run.tasks_trained + 1:
        raise ContractError(
            f"scroll state at task {run.scroll.task_index}, "
            f"expected {run.tasks_trained + 1}; advance before training"
        )
    task_id = run.tasks_trained
    if config.strategy.name == "lwf" and task_id >= 1 and run.teacher is None:
        raise ContractError("distillation strategy needs a teacher from task >= 2")
    run.model.set_offset(run.scroll.offset)
    if run.optimizer is None:
        run.optimizer = SGD(run.model.parameters(), config.lr,
                            momentum=config.momentum,
                            weight_decay=config.weight_decay)
    extras = _strategy_extras(run, config)
    n = len(task.train)

    for epoch in range(run.epoch_cursor, config.epochs):
        lr = lr_at_epoch(config, epoch)
        perm = run.rng.permutation(n)
        sums = None
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            current = BatchGroup(task_id, task.train.samples[idx],
                                 task.train.labels[idx])
            if run.memory is not None and not run.memory.is_empty():
                groups = replay_batch(current, run.memory,
                                      config.strategy.replay_mix, run.rng)
            else:
                groups = [current]
            loss, detail = dynamic_loss(run.model, groups, extras)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at task {task_id + 1}, epoch {epoch}, "
                    f"batch {batches}",
                    diagnostics={
                        "task": task_id + 1, "epoch": epoch, "batch": batches,
                        "loss": value, "lr": lr, "offset": run.scroll.offset,
                        "width_terms": detail["width_terms"],
                        "extra_terms": detail["extra_terms"],
                    },
                )
            run.optimizer.zero_grad()
            loss.backward()
            run.optimizer.step(lr)
            terms = detail["width_terms"] + detail["extra_terms"]
            sums = ([0.0] * (len(terms) + 1)) if sums is None else sums
            sums[0] += value
            for i, t in enumerate(terms):
                sums[i + 1] += t
            batches += 1
        run.epoch_cursor = epoch + 1
        k = len(detail["width_terms"])
        _emit(run, log_fh, {
            "event": "epoch", "task": task_id + 1, "epoch": epoch,
            "offset": run.scroll.offset, "lr": lr,
            "loss": sums[0] / batches,
            "width_terms": [s / batches for s in sums[1:k + 1]],
            "extra_terms": [s / batches for s in sums[k + 1:]],
        })
        if epoch_callback is not None:
            if epoch_callback(run, epoch):
                return run

    _post_task_hooks(run, task, config)
    run.tasks_trained += 1
    run.epoch_cursor = 0
    run.optimizer = None
    return run


def run_sequence(run, stream, config, out_dir=None, log_fh=None,
                 epoch_callback=None):
    """Advance scroll, train and evaluate every remaining task of the stream.

    Resumable: tasks already recorded in the run state are skipped, and a
    mid-task epoch cursor continues that task in place.
    """
    t = run.tasks_trained
    while t < len(stream.tasks):
        if run.epoch_cursor == 0:
            run.scroll = state_for_task(t + 1, config.num_splits,
                                        config.scroll_step)
            _emit(run, log_fh, {
                "event": "task_start", "task": t + 1,
                "offset": run.scroll.offset,
                "ranking": ranking(run.scroll),
            })
        train_task(run, stream.tasks[t], config,
                   epoch_callback=epoch_callback, log_fh=log_fh)
        if run.epoch_cursor != 0:
            return run.report  # paused mid-task by the callback
        taw, tag = evaluate_all(run.model, stream, t + 1)
        run.report.record(taw, tag)
        _emit(run, log_fh, {
            "event": "eval", "task": t + 1,
            "task_aware": taw, "task_agnostic": tag,
        })
        if run.model.num_splits > 1:
            # diagnostics only; reported metrics are full-width
            _emit(run, log_fh, {
                "event": "subnet_diagnostics", "task": t + 1,
                "task_aware_by_width": {
                    str(w): accs for w, accs in
                    evaluate_subnetwork_accuracies(run.model, stream,
                                                   t + 1).items()
                },
            })
        if out_dir is not None:
            save_checkpoint(run, f"{out_dir}/ckpt_task_{t + 1:02d}.npz")
        t = run.tasks_trained
    return run.report


# -- checkpointing -------------------------------------------------------------

def save_checkpoint(run, path):
    """Serialize the full run state; restoring reproduces the trajectory bitwise."""
    arrays = {}
    for k, v in run.model.state_arrays().items():
        arrays[f"model/{k}"] = v
    meta = {
        "version": 1,
        "model": run.model.meta(),
        "scroll": asdict(run.scroll),
        "rng_state": run.rng.bit_generator.state,
        "report": run.report.to_summary() if run.report.num_tasks() else None,
        "tasks_trained": run.tasks_trained,
        "epoch_cursor": run.epoch_cursor,
        "penalty": None,
        "teacher": None,
        "memory": None,
        "optimizer": None,
    }
    if run.penalty is not None:
        kind = "ewc" if isinstance(run.penalty, FisherState) else "mas"
        meta["penalty"] = {"kind": kind, "lamb": run.penalty.lamb}
        for k, v in run.penalty.importance.items():
            arrays[f"penalty/imp/{k}"] = v
        for k, v in run.penalty.snapshot.items():
            arrays[f"penalty/snap/{k}"] = v
    if run.teacher is not None:
        meta["teacher"] = {
            "tasks": list(run.teacher.tasks),
            "temperature": run.teacher.temperature,
            "model": run.teacher.model.meta(),
        }
        for k, v in run.teacher.model.state_arrays().items():
            arrays[f"teacher/{k}"] = v
    if run.memory is not None:
        classes = []
        for gc in sorted(run.memory.classes):
            c = run.memory.classes[gc]
            classes.append({"global_class": c.global_class, "task_id": c.task_id,
                            "local_label": c.local_label})
            arrays[f"memory/{gc}"] = c.inputs
        meta["memory"] = {"budget": run.memory.budget, "classes": classes}
    if run.optimizer is not None:
        meta["optimizer"] = {"names": sorted(run.optimizer.velocities)}
        for k, v in run.optimizer.velocities.items():
            arrays[f"vel/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, config):
    """Rebuild a RunState from a checkpoint written by ``save_checkpoint``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    model = model_from_meta(meta["model"])
    model.load_state_arrays({k[len("model/"):]: v for k, v in arrays.items()
                             if k.startswith("model/")})
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    run = RunState(
        model=model,
        scroll=ScrollState(**meta["scroll"]),
        rng=rng,
        tasks_trained=meta["tasks_trained"],
        epoch_cursor=meta["epoch_cursor"],
    )
    if meta["report"] is not None:
        run.report = MetricsReport.from_summary(meta["report"])
    if meta["penalty"] is not None:
        importance = {k[len("penalty/imp/"):]: v for k, v in arrays.items()
                      if k.startswith("penalty/imp/")}
        snapshot = {k[len("penalty/snap/"):]: v for k, v in arrays.items()
                    if k.startswith("penalty/snap/")}
        cls = FisherState if meta["penalty"]["kind"] == "ewc" else MasImportanceState
        run.penalty = cls(importance=importance, snapshot=snapshot,
                          lamb=meta["penalty"]["lamb"])
    if meta["teacher"] is not None:
        teacher_model = model_from_meta(meta["teacher"]["model"])
        teacher_model.load_state_arrays(
            {k[len("teacher/"):]: v for k, v in arrays.items()
             if k.startswith("teacher/")})
        run.teacher = TeacherSnapshot(model=teacher_model,
                                      tasks=tuple(meta["teacher"]["tasks"]),
                                      temperature=meta["teacher"]["temperature"])
    if meta["memory"] is not None:
        memory = ExemplarMemory(budget=meta["memory"]["budget"])
        for info in meta["memory"]["classes"]:
            gc = info["global_class"]
            memory.classes[gc] = ClassExemplars(
                global_class=gc, task_id=info["task_id"],
                local_label=info["local_label"], inputs=arrays[f"memory/{gc}"])
        run.memory = memory
    if meta["optimizer"] is not None:
        run.optimizer = SGD(model.parameters(), config.lr,
                            momentum=config.momentum,
                            weight_decay=config.weight_decay)
        run.optimizer.velocities = {k: arrays[f"vel/{k}"].copy()
                                    for k in meta["optimizer"]["names"]}
    return run
