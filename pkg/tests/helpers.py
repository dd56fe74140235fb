"""Shared oracles and gradient-check utilities, independent of the library paths."""

import numpy as np


def numeric_grad(loss_fn, arrays, which, eps=1e-6):
    """Central finite differences of loss_fn w.r.t. arrays[which]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[which]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss_fn(arrays)
        flat[i] = keep - eps
        down = loss_fn(arrays)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-6)
    return float(np.abs(analytic - numeric).max() / scale)


def linear_oracle(x, w, b):
    """Naive triple loop for out[b,o] = sum_i x[b,i] w[o,i] + b[o]."""
    n, i_dim = x.shape
    o_dim = w.shape[0]
    out = np.zeros((n, o_dim))
    for bi in range(n):
        for o in range(o_dim):
            acc = b[o]
            for i in range(i_dim):
                acc += x[bi, i] * w[o, i]
            out[bi, o] = acc
    return out


def conv_oracle(x, k, b, stride, padding):
    """Naive seven-loop cross-correlation."""
    bs, c, h, w = x.shape
    f, _, ks, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - ks) // stride + 1
    out_w = (w + 2 * padding - ks) // stride + 1
    out = np.zeros((bs, f, out_h, out_w))
    for bi in range(bs):
        for fi in range(f):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = b[fi]
                    for ci in range(c):
                        for u in range(ks):
                            for v in range(ks):
                                acc += xp[bi, ci, oh * stride + u, ow * stride + v] \
                                    * k[fi, ci, u, v]
                    out[bi, fi, oh, ow] = acc
    return out


def herding_oracle(features, budget):
    """Exhaustive greedy herding: recompute the candidate mean from scratch."""
    f = np.asarray(features, dtype=np.float64)
    mu = f.mean(axis=0)
    chosen = []
    for _ in range(min(budget, len(f))):
        best, best_d = None, None
        for i in range(len(f)):
            if i in chosen:
                continue
            cand = np.mean(np.vstack([f[j] for j in chosen] + [f[i]]), axis=0)
            d = float(((cand - mu) ** 2).sum())
            if best is None or d < best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def collect_grads(model):
    return {name: (None if p.grad is None else p.grad.copy())
            for name, p in model.parameters().items()}


def reference_plain_ft(init_arrays, arch, stream, config):
    """Plain multi-head fine-tuning written from scratch in numpy.

    Mirrors the training procedure for a norm-free MLP: per-epoch shuffles
    from a generator seeded with config.seed, momentum SGD with weight decay
    applied to the parameters that received gradients, one fresh velocity
    dict per task. Serves as the independent oracle for the single-split
    degeneracy check.
    """
    params = {k: v.copy() for k, v in init_arrays.items()}
    linear_layers = [i for i, spec in enumerate(arch) if spec.kind == "linear"]
    rng = np.random.default_rng(config.seed)
    for t, task in enumerate(stream.tasks):
        vel = {}
        x_all = task.train.samples
        y_all = task.train.labels
        for epoch in range(config.epochs):
            lr = config.lr * config.lr_decay ** sum(
                epoch >= m for m in config.milestones)
            perm = rng.permutation(len(x_all))
            for start in range(0, len(x_all), config.batch_size):
                idx = perm[start:start + config.batch_size]
                x, y = x_all[idx], y_all[idx]
                acts, zs = [x], []
                h = x
                for li in linear_layers:
                    z = h @ params[f"layer{li}.weight"].T + params[f"layer{li}.bias"]
                    h = np.maximum(z, 0.0)
                    zs.append(z)
                    acts.append(h)
                logits = h @ params[f"head{t}.weight"].T + params[f"head{t}.bias"]
                ez = np.exp(logits - logits.max(axis=1, keepdims=True))
                p = ez / ez.sum(axis=1, keepdims=True)
                n = len(x)
                dlogits = p
                dlogits[np.arange(n), y] -= 1.0
                dlogits *= 1.0 / n
                grads = {
                    f"head{t}.weight": dlogits.T @ h,
                    f"head{t}.bias": dlogits.sum(axis=0),
                }
                dh = dlogits @ params[f"head{t}.weight"]
                for pos in range(len(linear_layers) - 1, -1, -1):
                    li = linear_layers[pos]
                    dz = dh * (zs[pos] > 0.0)
                    grads[f"layer{li}.weight"] = dz.T @ acts[pos]
                    grads[f"layer{li}.bias"] = dz.sum(axis=0)
                    dh = dz @ params[f"layer{li}.weight"]
                for k, g in grads.items():
                    g = g + config.weight_decay * params[k]
                    v = vel.get(k)
                    v = g.copy() if v is None else config.momentum * v + g
                    vel[k] = v
                    params[k] -= lr * v
    return params
