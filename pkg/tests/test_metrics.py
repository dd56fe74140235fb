"""Evaluation protocols and the accuracy report."""

import numpy as np
import pytest

from scrollnet import (
    InputError,
    LabeledDataset,
    MetricsReport,
    Task,
    TaskStream,
    average_accuracy,
    build_model,
    evaluate_task_agnostic,
    evaluate_task_aware,
    mlp_arch,
)


def make_stream(task_specs):
    """task_specs: list of (samples, labels, num_classes)."""
    tasks = []
    offset = 0
    for t, (x, y, k) in enumerate(task_specs):
        ds = LabeledDataset(np.asarray(x, dtype=np.float64),
                            np.asarray(y, dtype=np.int64), k)
        tasks.append(Task(task_id=t, train=ds, test=ds,
                          classes=tuple(range(offset, offset + k))))
        offset += k
    return TaskStream(tasks=tasks, class_order=np.arange(offset),
                      num_classes_total=offset)


def passthrough_model(dim, heads, n=2):
    """Identity body (weights I, bias 0) so head logits = head.W @ input."""
    model = build_model(mlp_arch(dim, [dim], norm=False), n, heads, seed=0)
    model.params["layer0.weight"].data = np.eye(dim)
    model.params["layer0.bias"].data[:] = 0.0
    return model


class TestTaskAware:
    def test_memorizing_heads_reach_one(self):
        # two single-sample tasks; each head's bias pins the right class
        model = passthrough_model(2, [2, 2])
        model.params["head0.weight"].data[:] = 0.0
        model.params["head0.bias"].data = np.array([10.0, -10.0])  # class 0
        model.params["head1.weight"].data[:] = 0.0
        model.params["head1.bias"].data = np.array([-10.0, 10.0])  # class 1
        stream = make_stream([([[0.3, 0.4]], [0], 2), ([[0.1, 0.9]], [1], 2)])
        assert evaluate_task_aware(model, stream, 2) == [1.0, 1.0]

    def test_constant_logits_tie_break_low_index(self):
        model = passthrough_model(2, [2])
        model.params["head0.weight"].data[:] = 0.0
        model.params["head0.bias"].data[:] = 0.0
        x = np.random.default_rng(0).standard_normal((10, 2))
        y = np.array([0, 1] * 5)
        stream = make_stream([(x, y, 2)])
        # every prediction is class 0, so balanced labels give exactly 0.5
        assert evaluate_task_aware(model, stream, 1) == [0.5]

    def test_single_sample_correct(self):
        model = passthrough_model(2, [2])
        model.params["head0.weight"].data = np.array([[1.0, 0.0], [0.0, 1.0]])
        model.params["head0.bias"].data[:] = 0.0
        stream = make_stream([([[5.0, 1.0]], [0], 2)])
        assert evaluate_task_aware(model, stream, 1) == [1.0]


class TestTaskAgnostic:
    def test_single_head_matches_task_aware(self):
        rng = np.random.default_rng(1)
        model = build_model(mlp_arch(4, [6], norm=False), 2, [3], seed=1)
        x = rng.standard_normal((12, 4))
        y = rng.integers(0, 3, size=12)
        stream = make_stream([(x, y, 3)])
        assert evaluate_task_agnostic(model, stream, 1) == \
            evaluate_task_aware(model, stream, 1)

    def test_dominance_on_random_models(self):
        rng = np.random.default_rng(2)
        for trial in range(5):
            model = build_model(mlp_arch(4, [8], norm=False), 2, [2, 3, 2],
                                seed=trial)
            specs = [(rng.standard_normal((9, 4)), rng.integers(0, k, size=9), k)
                     for k in (2, 3, 2)]
            stream = make_stream(specs)
            taw = evaluate_task_aware(model, stream, 3)
            tag = evaluate_task_agnostic(model, stream, 3)
            assert all(g <= a for g, a in zip(tag, taw))

    def test_hand_built_two_head_fixture(self):
        model = passthrough_model(2, [2, 2])
        model.params["head0.weight"].data = np.array([[1.0, 0.0], [0.0, 1.0]])
        model.params["head0.bias"].data[:] = 0.0
        model.params["head1.weight"].data = np.array([[2.0, 0.0], [0.0, 2.0]])
        model.params["head1.bias"].data[:] = 0.0
        # task 0 sample [3,1]: head0 logits (3,1), head1 (6,2) -> global argmax
        # lands in head1 => task-agnostic wrong, task-aware right
        # task 1 sample [1,4]: head1 logits (2,8) -> global argmax class 1 of
        # head1 => both right
        stream = make_stream([([[3.0, 1.0]], [0], 2), ([[1.0, 4.0]], [1], 2)])
        assert evaluate_task_aware(model, stream, 2) == [1.0, 1.0]
        assert evaluate_task_agnostic(model, stream, 2) == [0.0, 1.0]

    def test_model_state_untouched_by_evaluation(self):
        rng = np.random.default_rng(3)
        model = build_model(mlp_arch(4, [8], norm=True), 2, [2, 2], seed=4)
        specs = [(rng.standard_normal((6, 4)), rng.integers(0, 2, size=6), 2)
                 for _ in range(2)]
        stream = make_stream(specs)
        digest = model.state_digest()
        evaluate_task_aware(model, stream, 2)
        evaluate_task_agnostic(model, stream, 2)
        assert model.state_digest() == digest

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        model = build_model(mlp_arch(4, [8], norm=False), 2, [2, 2], seed=5)
        specs = [(rng.standard_normal((6, 4)), rng.integers(0, 2, size=6), 2)
                 for _ in range(2)]
        stream = make_stream(specs)
        assert evaluate_task_agnostic(model, stream, 2) == \
            evaluate_task_agnostic(model, stream, 2)


class TestReport:
    def test_average_single_task(self):
        report = MetricsReport()
        report.record([0.8], [0.7])
        assert average_accuracy(report, "task_aware", 1) == 0.8

    def test_average_two_values(self):
        report = MetricsReport()
        report.record([0.9], [0.9])
        report.record([0.8, 0.6], [0.7, 0.5])
        assert abs(average_accuracy(report, "task_aware", 2) - 0.7) < 1e-15
        assert abs(average_accuracy(report, "task_agnostic", 2) - 0.6) < 1e-15

    def test_average_matches_matrix_recomputation(self):
        rng = np.random.default_rng(5)
        report = MetricsReport()
        rows = []
        for t in range(1, 5):
            row = rng.uniform(0, 1, t).tolist()
            rows.append(row)
            report.record(row, [v / 2 for v in row])
        for t in range(1, 5):
            assert average_accuracy(report, "task_aware", t) == \
                pytest.approx(np.mean(rows[t - 1]), abs=1e-15)

    def test_forgetting(self):
        report = MetricsReport()
        report.record([0.9], [0.9])
        report.record([0.6, 0.8], [0.5, 0.8])
        forg = report.forgetting("task_aware")
        assert forg == pytest.approx([0.3, 0.0], abs=1e-15)

    def test_row_shape_enforced(self):
        report = MetricsReport()
        report.record([0.5], [0.5])
        with pytest.raises(Exception):
            report.record([0.5], [0.5])  # second row must have two entries

    def test_csv_round_trip_values(self):
        report = MetricsReport()
        report.record([0.875], [0.75])
        report.record([0.5, 1.0], [0.25, 0.875])
        text = report.to_csv()
        assert text.startswith("# scrollnet-metrics-v1")
        assert "task_aware,2,1,0.5" in text
        assert "task_agnostic,2,2,0.875" in text
        summary = report.to_summary()
        rebuilt = MetricsReport.from_summary(summary)
        assert rebuilt.task_aware == report.task_aware
        assert rebuilt.task_agnostic == report.task_agnostic

    def test_unknown_protocol(self):
        report = MetricsReport()
        report.record([1.0], [1.0])
        with pytest.raises(InputError):
            report.average("argmax", 1)
