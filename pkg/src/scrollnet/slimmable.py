"""Slimmable layers over a shared full-width parameter store.

A model owns one parameter set at full width. A forward pass at width
index n (1..N) gathers the cyclic channel block selected by
``active_indices`` out of every hidden extent and computes on those slices
only, which makes narrow sub-networks strict parameter subsets of wide
ones. Boundary layers are special: the first sliceable layer keeps all of
its input features, and task heads keep all of their class outputs while
slimming input features.

Scrolling never moves parameters. The offset is consulted at slicing time,
so the permutation of importance blocks stays auditable by reading index
sets alone.

Switchable normalization keeps an independent scale/shift pair and running
statistics per width. Width-n statistics are indexed by position inside the
active block (they do not scroll); width-N statistics bind to absolute
channel order, which keeps full-width inference independent of the offset.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    SGD,
    Tensor,
    avgpool2d,
    batch_norm,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
    take,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str               # conv | linear | norm | relu | pool
    in_extent: int = 0
    out_extent: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool_mode: str = ""     # max | avg | gavg
    pool_size: int = 2


def conv_spec(in_channels, out_channels, kernel=3, stride=1, padding=1):
    return LayerSpec("conv", in_channels, out_channels, kernel, stride, padding)


def linear_spec(in_features, out_features):
    return LayerSpec("linear", in_features, out_features)


def norm_spec():
    return LayerSpec("norm")


def relu_spec():
    return LayerSpec("relu")


def pool_spec(mode="max", size=2, stride=None):
    return LayerSpec("pool", pool_mode=mode, pool_size=size,
                     stride=size if stride is None else stride)


def mlp_arch(input_dim, hidden, norm=True):
    """Stack of linear(+norm)+relu blocks; the last hidden extent feeds the heads."""
    arch, cur = [], input_dim
    for width in hidden:
        arch.append(linear_spec(cur, width))
        if norm:
            arch.append(norm_spec())
        arch.append(relu_spec())
        cur = width
    return arch


def convnet_arch(in_channels, channels, kernel=3, norm=True, pool_every=1):
    """Conv(+norm)+relu blocks with periodic max pooling and a global-average head."""
    arch, cur = [], in_channels
    for i, width in enumerate(channels):
        arch.append(conv_spec(cur, width, kernel=kernel, stride=1, padding=kernel // 2))
        if norm:
            arch.append(norm_spec())
        arch.append(relu_spec())
        if pool_every and (i + 1) % pool_every == 0:
            arch.append(pool_spec("max", 2))
        cur = width
    arch.append(pool_spec("gavg"))
    return arch


def active_indices(full_extent, num_splits, width_index, offset):
    """Channels active at a width index, in gather order.

    For width n < N this is the cyclic block
    ``{(offset*C/N + j) mod C : 0 <= j < n*C/N}``. Full width returns all
    channels in absolute order for every offset, which ties width-N
    normalization statistics to absolute channels and makes full-width
    outputs offset-invariant.
    """
    if full_extent % num_splits != 0:
        raise ConfigError(
            f"extent {full_extent} not divisible by num_splits {num_splits}"
        )
    if not 1 <= width_index <= num_splits:
        raise ContractError(f"width index {width_index} outside [1, {num_splits}]")
    if not 0 <= offset < num_splits:
        raise ContractError(f"offset {offset} outside [0, {num_splits})")
    if width_index == num_splits:
        return np.arange(full_extent, dtype=np.intp)
    base = full_extent // num_splits
    return (offset * base + np.arange(width_index * base, dtype=np.intp)) % full_extent


class _NormState:
    """Per-width scale/shift tensors and running statistics for one layer."""

    def __init__(self, extent, num_splits, momentum=0.1, eps=1e-5):
        base = extent // num_splits
        self.extent = extent
        self.momentum = momentum
        self.eps = eps
        self.gamma = [Tensor(np.ones(base * n), requires_grad=True)
                      for n in range(1, num_splits + 1)]
        self.beta = [Tensor(np.zeros(base * n), requires_grad=True)
                     for n in range(1, num_splits + 1)]
        self.running_mean = [np.zeros(base * n) for n in range(1, num_splits + 1)]
        self.running_var = [np.ones(base * n) for n in range(1, num_splits + 1)]


class SlimmableModel:
    """Layered network executable at N nested widths with a scroll offset."""

    def __init__(self, arch, num_splits, head_sizes, seed=0):
        if num_splits < 1:
            raise ConfigError(f"num_splits must be >= 1, got {num_splits}")
        if not head_sizes:
            raise ConfigError("at least one task head is required")
        self.arch = list(arch)
        self.num_splits = num_splits
        self.head_sizes = [int(k) for k in head_sizes]
        self.offset = 0
        self.params = {}
        self.norms = {}
        self._scrolled = []

        rng = np.random.default_rng(seed)
        extent = None
        spatial = None  # becomes False once the tensor is flat
        for i, spec in enumerate(self.arch):
            name = f"layer{i}"
            if spec.kind == "conv":
                if extent is not None and spec.in_extent != extent:
                    raise ConfigError(
                        f"layer {i} (conv): in_extent {spec.in_extent} != previous extent {extent}"
                    )
                if spec.out_extent % num_splits != 0:
                    raise ConfigError(
                        f"layer {i} (conv): out_extent {spec.out_extent} "
                        f"not divisible by num_splits {num_splits}"
                    )
                fan_in = spec.in_extent * spec.kernel * spec.kernel
                limit = np.sqrt(6.0 / fan_in)
                shape = (spec.out_extent, spec.in_extent, spec.kernel, spec.kernel)
                self._add_param(f"{name}.weight", rng.uniform(-limit, limit, shape), scrolled=True)
                self._add_param(f"{name}.bias", np.zeros(spec.out_extent), scrolled=True)
                extent = spec.out_extent
                spatial = True
            elif spec.kind == "linear":
                if extent is not None and spec.in_extent != extent:
                    raise ConfigError(
                        f"layer {i} (linear): in_extent {spec.in_extent} != previous extent {extent}"
                    )
                if spec.out_extent % num_splits != 0:
                    raise ConfigError(
                        f"layer {i} (linear): out_extent {spec.out_extent} "
                        f"not divisible by num_splits {num_splits}"
                    )
                limit = np.sqrt(6.0 / spec.in_extent)
                shape = (spec.out_extent, spec.in_extent)
                self._add_param(f"{name}.weight", rng.uniform(-limit, limit, shape), scrolled=True)
                self._add_param(f"{name}.bias", np.zeros(spec.out_extent), scrolled=True)
                extent = spec.out_extent
                spatial = False
            elif spec.kind == "norm":
                if extent is None:
                    raise ConfigError(f"layer {i} (norm): no preceding conv/linear layer")
                st = _NormState(extent, num_splits)
                self.norms[i] = st
                for n in range(1, num_splits + 1):
                    self.params[f"{name}.w{n}.gamma"] = st.gamma[n - 1]
                    self.params[f"{name}.w{n}.beta"] = st.beta[n - 1]
            elif spec.kind == "relu":
                if extent is None:
                    raise ConfigError(f"layer {i} (relu): no preceding conv/linear layer")
            elif spec.kind == "pool":
                if spec.pool_mode not in ("max", "avg", "gavg"):
                    raise ConfigError(f"layer {i} (pool): unknown mode {spec.pool_mode!r}")
                if spec.pool_mode == "gavg":
                    spatial = False
            else:
                raise ConfigError(f"layer {i}: unknown kind {spec.kind!r}")
        if extent is None:
            raise ConfigError("architecture has no parameterized layers")
        if spatial:
            raise ConfigError("architecture must end flat (use a gavg pool before heads)")
        self.feature_dim = extent

        for t, k in enumerate(self.head_sizes):
            limit = np.sqrt(6.0 / self.feature_dim)
            self._add_param(f"head{t}.weight",
                            rng.uniform(-limit, limit, (k, self.feature_dim)), scrolled=True)
            self._add_param(f"head{t}.bias", np.zeros(k), scrolled=True)

    def _add_param(self, name, data, scrolled=False):
        self.params[name] = Tensor(data, requires_grad=True)
        if scrolled:
            self._scrolled.append(name)

    # -- execution ---------------------------------------------------------

    def set_offset(self, offset):
        if not 0 <= offset < self.num_splits:
            raise ContractError(f"offset {offset} outside [0, {self.num_splits})")
        self.offset = int(offset)

    def features(self, x, width, training=False):
        """Body activations at the given width index; shape (B, active features)."""
        if not 1 <= width <= self.num_splits:
            raise ContractError(f"width index {width} outside [1, {self.num_splits}]")
        t = x if isinstance(x, Tensor) else Tensor(x)
        cols = None  # None = keep all input channels (first sliceable layer)
        for i, spec in enumerate(self.arch):
            name = f"layer{i}"
            if spec.kind in ("conv", "linear"):
                rows = active_indices(spec.out_extent, self.num_splits, width, self.offset)
                w = take(self.params[f"{name}.weight"], rows, axis=0)
                if cols is not None:
                    w = take(w, cols, axis=1)
                b = take(self.params[f"{name}.bias"], rows, axis=0)
                if spec.kind == "conv":
                    t = conv2d(t, w, b, stride=spec.stride, padding=spec.padding)
                else:
                    t = linear(t, w, b)
                cols = rows
            elif spec.kind == "norm":
                st = self.norms[i]
                t = batch_norm(
                    t, st.gamma[width - 1], st.beta[width - 1],
                    st.running_mean[width - 1], st.running_var[width - 1],
                    training=training, momentum=st.momentum, eps=st.eps,
                )
            elif spec.kind == "relu":
                t = relu(t)
            elif spec.pool_mode == "max":
                t = maxpool2d(t, spec.pool_size, spec.stride)
            elif spec.pool_mode == "avg":
                t = avgpool2d(t, spec.pool_size, spec.stride)
            else:
                t = global_avg_pool(t)
        return t

    def head_logits(self, feats, task_id, width):
        """Logits of one task head on body features; all class outputs kept."""
        if not 0 <= task_id < len(self.head_sizes):
            raise ContractError(f"missing head for task {task_id}")
        cols = active_indices(self.feature_dim, self.num_splits, width, self.offset)
        w = take(self.params[f"head{task_id}.weight"], cols, axis=1)
        return linear(feats, w, self.params[f"head{task_id}.bias"])

    def forward(self, x, width, tasks=None, training=False):
        """Logits per requested head at one width; returns {task_id: Tensor}."""
        feats = self.features(x, width, training=training)
        if tasks is None:
            tasks = range(len(self.head_sizes))
        return {t: self.head_logits(feats, t, width) for t in tasks}

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self):
        """All trainable tensors by name (scrolled store plus norm scale/shift)."""
        return self.params

    def scrolled_names(self):
        return list(self._scrolled)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def param_masks(self, width, offset=None):
        """Boolean masks over the scrolled store marking theta^width coordinates."""
        o = self.offset if offset is None else offset
        masks = {}
        cols = None
        for i, spec in enumerate(self.arch):
            if spec.kind not in ("conv", "linear"):
                continue
            name = f"layer{i}"
            rows = active_indices(spec.out_extent, self.num_splits, width, o)
            wshape = self.params[f"{name}.weight"].shape
            wm = np.zeros(wshape, dtype=bool)
            if cols is None:
                wm[rows] = True
            else:
                wm[np.ix_(rows, cols)] = True
            bm = np.zeros(wshape[0], dtype=bool)
            bm[rows] = True
            masks[f"{name}.weight"] = wm
            masks[f"{name}.bias"] = bm
            cols = rows
        fcols = active_indices(self.feature_dim, self.num_splits, width, o)
        for t, k in enumerate(self.head_sizes):
            wm = np.zeros((k, self.feature_dim), dtype=bool)
            wm[:, fcols] = True
            masks[f"head{t}.weight"] = wm
            masks[f"head{t}.bias"] = np.ones(k, dtype=bool)
        return masks

    def param_ids(self, width, offset=None):
        """Exact coordinate set of theta^width as (name, flat index) pairs."""
        ids = set()
        for name, mask in self.param_masks(width, offset).items():
            for j in np.flatnonzero(mask):
                ids.add((name, int(j)))
        return ids

    # -- state transfer ------------------------------------------------------

    def state_arrays(self):
        """Copies of every parameter and running statistic, by name."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        for i, st in self.norms.items():
            for n in range(1, self.num_splits + 1):
                out[f"layer{i}.w{n}.running_mean"] = st.running_mean[n - 1].copy()
                out[f"layer{i}.w{n}.running_var"] = st.running_var[n - 1].copy()
        return out

    def load_state_arrays(self, arrays):
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = expected - set(arrays)
            extra = set(arrays) - expected
            raise ContractError(f"state keys mismatch: missing={missing}, extra={extra}")
        for name, p in self.params.items():
            if arrays[name].shape != p.data.shape:
                raise ContractError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
            p.data = arrays[name].astype(np.float64).copy()
        for i, st in self.norms.items():
            for n in range(1, self.num_splits + 1):
                st.running_mean[n - 1][:] = arrays[f"layer{i}.w{n}.running_mean"]
                st.running_var[n - 1][:] = arrays[f"layer{i}.w{n}.running_var"]

    def copy(self):
        dup = SlimmableModel(self.arch, self.num_splits, self.head_sizes, seed=0)
        dup.load_state_arrays(self.state_arrays())
        dup.offset = self.offset
        return dup

    def state_digest(self):
        h = hashlib.sha256()
        arrays = self.state_arrays()
        for name in sorted(arrays):
            h.update(name.encode())
            h.update(arrays[name].tobytes())
        return h.hexdigest()

    def meta(self):
        return {
            "version": CHECKPOINT_VERSION,
            "arch": [dataclasses.asdict(s) for s in self.arch],
            "num_splits": self.num_splits,
            "offset": self.offset,
            "head_sizes": self.head_sizes,
        }


def build_model(arch, num_splits, head_sizes, seed=0):
    """Construct a slimmable model with He-uniform conv/linear initialization."""
    return SlimmableModel(arch, num_splits, head_sizes, seed=seed)


def model_from_meta(meta):
    arch = [LayerSpec(**d) for d in meta["arch"]]
    model = SlimmableModel(arch, meta["num_splits"], meta["head_sizes"], seed=0)
    model.offset = meta["offset"]
    return model


def save_model(model, path):
    """Versioned binary dump of arch, splits, offset, parameters and norm state."""
    arrays = {f"state/{k}": v for k, v in model.state_arrays().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(
        json.dumps(model.meta()).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
        model = model_from_meta(meta)
        model.load_state_arrays(
            {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
        )
    return model


def new_optimizer(model, lr, momentum=0.0, weight_decay=0.0):
    return SGD(model.parameters(), lr, momentum=momentum, weight_decay=weight_decay)
