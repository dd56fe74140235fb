"""Built-in verification suites behind the ``selftest`` CLI command.

Four fast checks: finite-difference gradient verification of every layer
op, sub-network nesting, scroll-permutation structure, and the bitwise
loss decomposition. ``inject_fault`` perturbs one analytic gradient so the
harness itself can be shown to catch regressions.
"""

from __future__ import annotations

import time

import numpy as np

from .scrolling import offset_for_task, ranking, state_for_task
from .slimmable import build_model, mlp_arch
from .strategies import BatchGroup, dynamic_loss
from .tensor import (
    Tensor,
    batch_norm,
    conv2d,
    linear,
    maxpool2d,
    relu,
    softmax_cross_entropy,
)

_TOL = 1e-4
_EPS = 1e-6


def _fd_grad(loss_fn, arrays, which, eps=_EPS):
    base = arrays[which]
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss_fn(arrays)
        flat[i] = keep - eps
        down = loss_fn(arrays)
        flat[i] = keep
        gf[i] = (up - down) / (2 * eps)
    return g


def _max_rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-6)
    return np.abs(analytic - numeric).max() / scale


def _check_gradients(fault=False):
    rng = np.random.default_rng(7)
    failures = []

    def fd_case(name, loss_fn, arrays, grads):
        for k in range(len(arrays)):
            numeric = _fd_grad(loss_fn, [a.copy() for a in arrays], k)
            analytic = grads[k].copy()
            if fault and not failures:
                analytic = analytic + 0.05
            err = _max_rel_err(analytic, numeric)
            if err >= _TOL:
                failures.append(f"{name}[arg {k}] rel err {err:.2e}")

    for _ in range(3):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)

        def loss(arrs):
            out = linear(Tensor(arrs[0]), Tensor(arrs[1]), Tensor(arrs[2]))
            return (out * out).sum().item()

        tx, tw, tb = Tensor(x, True), Tensor(w, True), Tensor(b, True)
        out = linear(tx, tw, tb)
        (out * out).sum().backward()
        fd_case("linear", loss, [x, w, b], [tx.grad, tw.grad, tb.grad])

    for _ in range(3):
        x = rng.standard_normal((2, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def loss(arrs):
            out = conv2d(Tensor(arrs[0]), Tensor(arrs[1]), Tensor(arrs[2]),
                         stride=1, padding=1)
            return (out * out).sum().item()

        tx, tk, tb = Tensor(x, True), Tensor(k, True), Tensor(b, True)
        out = conv2d(tx, tk, tb, stride=1, padding=1)
        (out * out).sum().backward()
        fd_case("conv2d", loss, [x, k, b], [tx.grad, tk.grad, tb.grad])

    for _ in range(3):
        x = rng.standard_normal((4, 6)) + 0.05  # keep away from the relu kink

        def loss(arrs):
            return relu(Tensor(arrs[0])).sum().item()

        tx = Tensor(x, True)
        relu(tx).sum().backward()
        fd_case("relu", loss, [x], [tx.grad])

    for _ in range(3):
        x = rng.standard_normal((3, 4))
        gamma = rng.standard_normal(4) + 1.5
        beta = rng.standard_normal(4)

        def loss(arrs):
            out = batch_norm(Tensor(arrs[0]), Tensor(arrs[1]), Tensor(arrs[2]),
                             np.zeros(4), np.ones(4), training=True)
            return (out * out).sum().item()

        tx, tg, tbe = Tensor(x, True), Tensor(gamma, True), Tensor(beta, True)
        out = batch_norm(tx, tg, tbe, np.zeros(4), np.ones(4), training=True)
        (out * out).sum().backward()
        fd_case("batch_norm", loss, [x, gamma, beta], [tx.grad, tg.grad, tbe.grad])

    for _ in range(3):
        x = rng.standard_normal((3, 5))
        y = rng.integers(0, 5, size=3)

        def loss(arrs):
            return softmax_cross_entropy(Tensor(arrs[0]), y).item()

        tx = Tensor(x, True)
        softmax_cross_entropy(tx, y).backward()
        fd_case("softmax_ce", loss, [x], [tx.grad])

    for _ in range(3):
        x = rng.standard_normal((2, 2, 4, 4))

        def loss(arrs):
            out = maxpool2d(Tensor(arrs[0]), 2)
            return (out * out).sum().item()

        tx = Tensor(x, True)
        out = maxpool2d(tx, 2)
        (out * out).sum().backward()
        fd_case("maxpool2d", loss, [x], [tx.grad])

    return failures


def _check_nesting(fault=False):
    rng = np.random.default_rng(11)
    failures = []
    for trial in range(20):
        n = int(rng.integers(1, 5))
        hidden = [int(rng.integers(1, 4)) * n for _ in range(int(rng.integers(1, 3)))]
        model = build_model(mlp_arch(5, hidden, norm=False), n, [3], seed=trial)
        offset = int(rng.integers(0, n))
        prev = None
        for width in range(1, n + 1):
            masks = model.param_masks(width, offset)
            if prev is not None:
                for name in masks:
                    if (prev[name] & ~masks[name]).any():
                        failures.append(f"trial {trial}: width {width} not nested")
            prev = masks
        if not all(m.all() for m in prev.values()):
            failures.append(f"trial {trial}: full width misses coordinates")
    return failures


def _check_scrolling(fault=False):
    import math

    failures = []
    for n in range(1, 5):
        for s in range(1, 4):
            seq = [offset_for_task(t, n, s) for t in range(1, 4 * n + 1)]
            period = n // math.gcd(n, s)
            if any(seq[i] != seq[i + period] for i in range(len(seq) - period)):
                failures.append(f"N={n} S={s}: sequence not {period}-periodic")
            if seq[0] != 0:
                failures.append(f"N={n} S={s}: first task offset {seq[0]} != 0")
            for t in range(1, n + 1):
                order = ranking(state_for_task(t, n, s))
                if sorted(order) != list(range(n)):
                    failures.append(f"N={n} S={s} t={t}: ranking not a bijection")
    return failures


def _check_loss_decomposition(fault=False):
    rng = np.random.default_rng(23)
    failures = []
    model = build_model(mlp_arch(6, [8, 8], norm=False), 4, [3, 3], seed=5)
    for trial in range(5):
        model.set_offset(trial % 4)
        x = rng.standard_normal((6, 6))
        y = rng.integers(0, 3, size=6)
        group = BatchGroup(0, x, y)
        total, detail = dynamic_loss(model, [group])
        terms = []
        for n in range(1, model.num_splits + 1):
            feats = model.features(x, n, training=True)
            logits = model.head_logits(feats, 0, n)
            terms.append(softmax_cross_entropy(logits, y).item())
        rest = terms[0]
        for t in terms[1:-1]:
            rest = rest + t
        recomposed = rest + terms[-1]
        if recomposed != total.item():
            failures.append(f"trial {trial}: decomposition differs by "
                            f"{recomposed - total.item():.3e}")
    return failures


CHECKS = (
    ("gradient-check", _check_gradients),
    ("nesting", _check_nesting),
    ("scroll-permutation", _check_scrolling),
    ("loss-decomposition", _check_loss_decomposition),
)


def run_selftest(inject_fault=None, out=print):
    """Run every suite; returns 0 when all pass, 1 naming the failed check."""
    start = time.perf_counter()
    status = 0
    for name, check in CHECKS:
        failures = check(fault=(inject_fault == name))
        if failures:
            status = 1
            out(f"[FAIL] {name}: {failures[0]}"
                + (f" (+{len(failures) - 1} more)" if len(failures) > 1 else ""))
        else:
            out(f"[ok]   {name}")
    out(f"selftest {'failed' if status else 'passed'} "
        f"in {time.perf_counter() - start:.1f}s")
    return status
