"""Cyclic reassignment of the weight-importance ranking across tasks.

The parameter store is split into ``num_splits`` channel blocks. Block
``offset`` anchors the smallest (most important) sub-network for the
current task; each new task shifts the anchor by ``step_size`` blocks,
wrapping around, so previously least-important blocks become the most
important ones.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError


@dataclass(frozen=True)
class ScrollState:
    num_splits: int
    step_size: int = 1
    task_index: int = 1
    offset: int = 0


def offset_for_task(task_index, num_splits, step_size=1):
    """Anchor block for a 1-based task index: ((t-1)*S) mod N.

    Task 1 keeps the initial block assignment, so a run of N tasks with
    step size 1 visits every block exactly once before wrapping.
    """
    if task_index < 1:
        raise InputError(f"task index must be >= 1, got {task_index}")
    if num_splits < 1 or step_size < 1:
        raise InputError("num_splits and step_size must be >= 1")
    return ((task_index - 1) * step_size) % num_splits


def state_for_task(task_index, num_splits, step_size=1):
    return ScrollState(
        num_splits=num_splits,
        step_size=step_size,
        task_index=task_index,
        offset=offset_for_task(task_index, num_splits, step_size),
    )


def initial_state(num_splits, step_size=1):
    return state_for_task(1, num_splits, step_size)


def advance(state):
    """State for the next task; consumers must re-slice before training on it."""
    return state_for_task(state.task_index + 1, state.num_splits, state.step_size)


def ranking(state):
    """Block labels from most to least important for the current task.

    Position j holds importance rank j+1, i.e. the label (offset + j) mod N.
    Labels are 0-based block indices; label b covers the b-th channel block
    of every scrolled layer.
    """
    n = state.num_splits
    return [(state.offset + j) % n for j in range(n)]
