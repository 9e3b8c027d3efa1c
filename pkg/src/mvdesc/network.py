"""Descriptor network: per-view CNN, view pooling, linear reduction, contrastive training.

Everything is plain numpy with hand-written backward passes. Layers are kept
deliberately small; larger networks are reachable through ``NetworkConfig``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .viewselect import ZeroVisibilityError

MODEL_MAGIC = b"MVDESCMODEL1"
DESCRIPTOR_MAGIC = b"MVDESC32"


class NumericalError(FloatingPointError):
    """A non-finite value appeared; ``layer`` names where."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite values in layer {layer}")
        self.layer = layer


class ModelFormatError(ValueError):
    def __init__(self, section: str, detail: str):
        super().__init__(f"model file section '{section}': {detail}")
        self.section = section


# ---------------------------------------------------------------------- config

@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pool_window: int = 2
    pool_stride: int = 2


@dataclass(frozen=True)
class NetworkConfig:
    input_resolution: int = 64
    convs: Tuple[ConvSpec, ...] = (ConvSpec(8, 5), ConvSpec(16, 5))
    view_descriptor_dim: int = 256
    output_dim: int = 128
    pooling_mode: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(*c) for c in self.convs))
        if self.pooling_mode not in ("max", "average"):
            raise ValueError(f"unknown pooling mode {self.pooling_mode!r}")
        if not 16 <= self.output_dim <= 512:
            raise ValueError("output_dim must be in [16, 512]")
        self.feature_shape()  # validates chaining

    def feature_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) entering the fully-connected layer."""
        c, h = 1, self.input_resolution
        for i, spec in enumerate(self.convs):
            h = (h - spec.kernel) // spec.stride + 1
            if h < 1:
                raise ValueError(f"conv{i} kernel larger than its input")
            h = (h - spec.pool_window) // spec.pool_stride + 1
            if h < 1:
                raise ValueError(f"pool{i} window larger than its input")
            c = spec.out_channels
        return c, h, h

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        c = 1
        for i, spec in enumerate(self.convs):
            shapes.append((f"conv{i}.weight", (spec.out_channels, c, spec.kernel, spec.kernel)))
            shapes.append((f"conv{i}.bias", (spec.out_channels,)))
            c = spec.out_channels
        fan_in = int(np.prod(self.feature_shape()))
        shapes.append(("fc.weight", (self.view_descriptor_dim, fan_in)))
        shapes.append(("fc.bias", (self.view_descriptor_dim,)))
        shapes.append(("reduce.weight", (self.output_dim, self.view_descriptor_dim)))
        return shapes

    def to_text(self) -> str:
        convs = ";".join(f"{c.out_channels},{c.kernel},{c.stride},{c.pool_window},{c.pool_stride}"
                         for c in self.convs)
        return (f"input_resolution = {self.input_resolution}\nconvs = {convs}\n"
                f"view_descriptor_dim = {self.view_descriptor_dim}\n"
                f"output_dim = {self.output_dim}\npooling_mode = {self.pooling_mode}\n")

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        convs = tuple(ConvSpec(*[int(x) for x in part.split(",")])
                      for part in kv["convs"].split(";") if part)
        return cls(int(kv["input_resolution"]), convs, int(kv["view_descriptor_dim"]),
                   int(kv["output_dim"]), kv["pooling_mode"])


FULL_SCALE = dict(view_descriptor_dim=4096, output_dim=128, input_resolution=227)


@dataclass
class DescriptorModel:
    config: NetworkConfig
    params: Dict[str, np.ndarray]

    @classmethod
    def initialize(cls, config: NetworkConfig, seed: int = 0) -> "DescriptorModel":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.parameter_shapes():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                gain = 1.0 if name == "reduce.weight" else 2.0
                params[name] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        return cls(config, params)

    def copy(self) -> "DescriptorModel":
        return DescriptorModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def astype(self, dtype) -> "DescriptorModel":
        """Copy whose parameters (and hence all activations) use ``dtype``."""
        return DescriptorModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def l2(self) -> float:
        return float(sum((v * v).sum() for v in self.params.values()))


@dataclass
class PointDescriptor:
    vector: np.ndarray
    point_id: int
    shape_id: str = ""


# ---------------------------------------------------------------------- layers

def _conv_forward(x, w, b, stride):
    """Cross-correlation via an explicit im2col matrix (kept for the backward pass)."""
    n, c = x.shape[:2]
    o, k = w.shape[0], w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], cols


def _conv_backward(dout, x_shape, cols, w, stride, need_dx=True):
    n, o, ho, wo = dout.shape
    c, k = w.shape[1], w.shape[-1]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dmat @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dx, dw, db


def _pool_forward(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape, window, stride):
    n, c, ho, wo = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if stride == window:  # non-overlapping windows: scatter without collisions
        d = np.zeros((n, c, ho, wo, window * window), dtype=dout.dtype)
        np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
        d = d.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, :ho * window, :wo * window] = d.reshape(n, c, ho * window, wo * window)
        return dx
    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn_ = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(dx, (nn_, cc, rows, cols), dout)
    return dx


def _check(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(layer)
    return arr


def forward_views(images: np.ndarray, model: DescriptorModel, keep_cache: bool = False):
    """View descriptors for a batch of square grayscale images, (V, H, W) -> (V, D_view)."""
    cfg = model.config
    x = np.asarray(images, dtype=model.dtype)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.input_resolution, cfg.input_resolution):
        raise ValueError(f"image shape {x.shape[1:]} does not match input resolution "
                         f"{cfg.input_resolution}")
    x = x[:, None]
    cache = []
    p = model.params
    for i, spec in enumerate(cfg.convs):
        z, cols = _conv_forward(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], spec.stride)
        _check(z, f"conv{i}")
        a = np.maximum(z, 0.0)
        pooled, arg = _pool_forward(a, spec.pool_window, spec.pool_stride)
        if keep_cache:
            cache.append((x.shape, cols, z, a.shape, arg))
        x = pooled
    flat = x.reshape(len(x), -1)
    zf = _check(flat @ p["fc.weight"].T + p["fc.bias"], "fc")
    y = np.maximum(zf, 0.0)
    if keep_cache:
        return y, (cache, flat, zf)
    return y


def backward_views(dy: np.ndarray, cache, model: DescriptorModel, grads: Dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients given dL/dY for each view."""
    convs_cache, flat, zf = cache
    p = model.params
    dz = dy * (zf > 0)
    grads["fc.weight"] += dz.T @ flat
    grads["fc.bias"] += dz.sum(axis=0)
    dx = (dz @ p["fc.weight"]).reshape((len(dz),) + model.config.feature_shape())
    for i in reversed(range(len(model.config.convs))):
        spec = model.config.convs[i]
        x_shape, cols, z, a_shape, arg = convs_cache[i]
        da = _pool_backward(dx, arg, a_shape, spec.pool_window, spec.pool_stride)
        dzc = da * (z > 0)
        dx, dw, db = _conv_backward(dzc, x_shape, cols, p[f"conv{i}.weight"], spec.stride, need_dx=i > 0)
        grads[f"conv{i}.weight"] += dw
        grads[f"conv{i}.bias"] += db


def forward_view(image: np.ndarray, model: DescriptorModel) -> np.ndarray:
    return forward_views(np.asarray(image)[None], model)[0]


def canonical_view_order(images: np.ndarray) -> np.ndarray:
    """Content-defined order of a view set, so results ignore input order."""
    imgs = np.ascontiguousarray(images, dtype=np.float64)
    keys = [imgs[i].tobytes() for i in range(len(imgs))]
    return np.array(sorted(range(len(imgs)), key=lambda i: keys[i]), dtype=np.int64)


def view_pool(view_descriptors: np.ndarray, mode: str = "max") -> Tuple[np.ndarray, np.ndarray]:
    """Element-wise max (or mean) over views. Returns (pooled, argmax view per coordinate)."""
    y = np.asarray(view_descriptors, dtype=np.float64)
    if y.ndim != 2 or len(y) == 0:
        raise ValueError("view_pool needs a non-empty (V, D) array")
    if mode == "max":
        arg = y.argmax(axis=0)
        return y[arg, np.arange(y.shape[1])], arg
    if mode == "average":
        return y.mean(axis=0), np.full(y.shape[1], -1)
    raise ValueError(f"unknown pooling mode {mode!r}")


def view_pool_backward(d_pooled: np.ndarray, arg: np.ndarray, n_views: int, mode: str) -> np.ndarray:
    dy = np.zeros((n_views, len(d_pooled)))
    if mode == "max":
        dy[arg, np.arange(len(d_pooled))] = d_pooled
    else:
        dy[:] = d_pooled / n_views
    return dy


def reduce(pooled: np.ndarray, model: DescriptorModel) -> np.ndarray:
    return model.params["reduce.weight"] @ pooled


def embed_views(images: np.ndarray, model: DescriptorModel) -> np.ndarray:
    """Descriptor X_p for one point's view stack."""
    images = np.asarray(images, dtype=model.dtype)
    images = images[canonical_view_order(images)]
    y = forward_views(images, model)
    pooled, _ = view_pool(y, model.config.pooling_mode)
    return reduce(pooled, model)


def embed_many(stacks: Sequence[np.ndarray], model: DescriptorModel, chunk: int = 8) -> np.ndarray:
    out = []
    for s in range(0, len(stacks), chunk):
        group = [np.asarray(st, dtype=model.dtype) for st in stacks[s:s + chunk]]
        group = [g[canonical_view_order(g)] for g in group]
        y = forward_views(np.concatenate(group), model)
        off = 0
        for g in group:
            pooled, _ = view_pool(y[off:off + len(g)], model.config.pooling_mode)
            out.append(reduce(pooled, model))
            off += len(g)
    return np.array(out).reshape(len(stacks), model.config.output_dim)


# ------------------------------------------------------------------------ loss

def descriptor_distance(xa: np.ndarray, xb: np.ndarray) -> float:
    return float(np.sqrt(((np.asarray(xa) - np.asarray(xb)) ** 2).sum()))


def contrastive_loss(xa: np.ndarray, xb: np.ndarray, is_corresponding: bool, margin: float = 1.0):
    """Squared distance for corresponding pairs, squared hinge on the margin otherwise.

    Returns (loss, dL/dxa, dL/dxb). At zero distance a non-corresponding pair
    gets a zero gradient.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    diff = xa - xb
    d2 = float((diff * diff).sum())
    if is_corresponding:
        return d2, 2 * diff, -2 * diff
    d = np.sqrt(d2)
    gap = margin - d
    if gap <= 0:
        return 0.0, np.zeros_like(xa), np.zeros_like(xb)
    if d == 0:
        return gap * gap, np.zeros_like(xa), np.zeros_like(xb)
    g = -2 * gap / d * diff
    return gap * gap, g, -g


# --------------------------------------------------------------------- batches

@dataclass
class TrainingBatch:
    """Pairs of view stacks; ``stacks`` holds each distinct point once."""
    stacks: List[np.ndarray]
    pairs: List[Tuple[int, int, bool]]  # (stack index a, stack index b, corresponding?)

    def __post_init__(self):
        pos = {(a, b) for a, b, c in self.pairs if c} | {(b, a) for a, b, c in self.pairs if c}
        for a, b, c in self.pairs:
            if not c and (a, b) in pos:
                raise ValueError(f"pair ({a}, {b}) is both positive and negative")


def batch_loss(batch: TrainingBatch, model: DescriptorModel, weight_decay: float = 5e-4,
               margin: float = 1.0, descriptors: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """(total objective, data part) for a batch."""
    if descriptors is None:
        descriptors = embed_many(batch.stacks, model) if batch.stacks else np.zeros((0, 0))
    data = 0.0
    for a, b, c in batch.pairs:
        data += contrastive_loss(descriptors[a], descriptors[b], c, margin)[0]
    return data + weight_decay * model.l2(), data


def _cache_bytes(model: DescriptorModel, n_images: int) -> int:
    """Rough size of the activations kept for backprop."""
    c, h = 1, model.config.input_resolution
    total = 0
    for spec in model.config.convs:
        h = (h - spec.kernel) // spec.stride + 1
        total += 3 * spec.out_channels * h * h
        h = (h - spec.pool_window) // spec.pool_stride + 1
        c = spec.out_channels
    return 8 * n_images * (total + c * h * h + 2 * model.config.view_descriptor_dim)


def backward(batch: TrainingBatch, model: DescriptorModel, weight_decay: float = 5e-4,
             margin: float = 1.0, chunk: int = 8, memory_budget: int = 1 << 30):
    """Exact gradient of sum of pair losses + weight_decay * ||w||^2.

    Returns (grads, total loss, data loss). Activations are kept per chunk of
    points when they fit in ``memory_budget`` bytes; otherwise each chunk is
    re-run for backprop.
    """
    grads = {k: 2 * weight_decay * v for k, v in model.params.items()}
    n = len(batch.stacks)
    if n == 0:
        return grads, weight_decay * model.l2(), 0.0
    stacks = [np.asarray(s, dtype=model.dtype) for s in batch.stacks]
    stacks = [s[canonical_view_order(s)] for s in stacks]
    keep = _cache_bytes(model, sum(len(s) for s in stacks)) <= memory_budget
    mode = model.config.pooling_mode
    chunks = [list(range(s, min(n, s + chunk))) for s in range(0, n, chunk)]
    desc = np.zeros((n, model.config.output_dim))
    saved = []
    for group in chunks:
        imgs = np.concatenate([stacks[i] for i in group])
        if keep:
            y, cache = forward_views(imgs, model, keep_cache=True)
        else:
            y, cache = forward_views(imgs, model), None
        off, args = 0, []
        for i in group:
            v = len(stacks[i])
            pooled, arg = view_pool(y[off:off + v], mode)
            desc[i] = reduce(pooled, model)
            args.append((pooled, arg))
            off += v
        saved.append((y, cache, args) if keep else None)

    dx = np.zeros_like(desc)
    data = 0.0
    for a, b, c in batch.pairs:
        loss, ga, gb = contrastive_loss(desc[a], desc[b], c, margin)
        data += loss
        dx[a] += ga
        dx[b] += gb

    wr = model.params["reduce.weight"]
    for ci, group in enumerate(chunks):
        if not np.any(dx[group]):
            continue
        if keep:
            y, cache, args = saved[ci]
        else:
            imgs = np.concatenate([stacks[i] for i in group])
            y, cache = forward_views(imgs, model, keep_cache=True)
            args, off = [], 0
            for i in group:
                v = len(stacks[i])
                args.append(view_pool(y[off:off + v], mode))
                off += v
        dy = np.zeros_like(y)
        off = 0
        for i, (pooled, arg) in zip(group, args):
            v = len(stacks[i])
            grads["reduce.weight"] += np.outer(dx[i], pooled)
            dy[off:off + v] = view_pool_backward(wr.T @ dx[i], arg, v, mode)
            off += v
        backward_views(dy, cache, model, grads)
        if keep:
            saved[ci] = None
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(k)
    return grads, data + weight_decay * model.l2(), data


# ------------------------------------------------------------------------ adam

@dataclass
class TrainState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    margin: float = 1.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: TrainState, model: DescriptorModel, grads: Dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``model`` and ``state``."""
    state.step += 1
    t = state.step
    for k, p in model.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = state.m[k] / (1 - state.beta1 ** t)
        v_hat = state.v[k] / (1 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ------------------------------------------------------------------- training

def embed_point(mesh, point, model: DescriptorModel, view_config=None, sphere=None,
                point_id: int = 0, shape_id: str = "") -> PointDescriptor:
    """Render the point's view stack and run it through the network."""
    from .viewselect import ViewConfig, render_view_stack
    cfg = view_config or ViewConfig(resolution=model.config.input_resolution)
    if cfg.resolution != model.config.input_resolution:
        raise ValueError("view resolution must equal the network input resolution")
    stack = render_view_stack(mesh, point, cfg, sphere=sphere, point_id=point_id)
    return PointDescriptor(embed_views(stack.images, model), point_id, shape_id)


class StackCache:
    """Lazily rendered view stacks for the sample points of several shapes."""

    def __init__(self, views: Dict[str, object], dtype=np.float64):
        self.views = views  # shape id -> viewselect.ShapeViews
        self.dtype = dtype
        self._cache: Dict[Tuple[str, int], np.ndarray] = {}

    def positions(self, shape_id: str) -> np.ndarray:
        return self.views[shape_id].scene.positions

    def get(self, shape_id: str, idx: int) -> np.ndarray:
        key = (shape_id, int(idx))
        if key not in self._cache:
            self._cache[key] = self.views[shape_id].stack(int(idx)).images.astype(self.dtype)
        return self._cache[key]


class PairSampler:
    """Draws positive pairs from a correspondence set and negatives from the same
    shape pairs, skipping candidates within ``exclusion`` (fraction of the target
    shape's bounding-box diagonal) of any true match."""

    def __init__(self, corr, positions: Dict[str, np.ndarray], exclusion: float = 0.05):
        if len(corr) == 0:
            raise ValueError("empty correspondence set")
        self.corr = corr
        self.positions = positions
        self.exclusion = exclusion
        self.by_pair: Dict[Tuple[str, str], np.ndarray] = {}
        rows = {}
        for r, (sa, sb) in enumerate(zip(corr.shape_a, corr.shape_b)):
            rows.setdefault((sa, sb), []).append(r)
        for key, rr in rows.items():
            rr = np.array(rr)
            self.by_pair[key] = np.stack([corr.idx_a[rr], corr.idx_b[rr]], axis=1)
        self.keys = sorted(self.by_pair)
        self._matches: Dict[Tuple[str, str], Dict[int, np.ndarray]] = {}
        self._diag = {k: float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
                      for k, v in positions.items()}
        self.unusable: set = set()  # (shape id, index) pairs with no visible view

    def _usable(self, d) -> bool:
        return (d[0], d[1]) not in self.unusable and (d[2], d[3]) not in self.unusable

    def _match_map(self, key):
        if key not in self._matches:
            m: Dict[int, list] = {}
            for a, b in self.by_pair[key]:
                m.setdefault(int(a), []).append(int(b))
            self._matches[key] = {a: np.array(bs) for a, bs in m.items()}
        return self._matches[key]

    def positive(self, rng, max_tries: int = 1000) -> Tuple[str, int, str, int]:
        for _ in range(max_tries):
            key = self.keys[rng.integers(len(self.keys))]
            pairs = self.by_pair[key]
            a, b = pairs[rng.integers(len(pairs))]
            d = (key[0], int(a), key[1], int(b))
            if self._usable(d):
                return d
        raise RuntimeError("could not draw a usable corresponding pair")

    def negative(self, rng, max_tries: int = 100) -> Tuple[str, int, str, int]:
        for _ in range(max_tries):
            key = self.keys[rng.integers(len(self.keys))]
            pa, pb = self.positions[key[0]], self.positions[key[1]]
            a = int(rng.integers(len(pa)))
            c = int(rng.integers(len(pb)))
            matched = self._match_map(key).get(a)
            if matched is not None:
                d = np.linalg.norm(pb[matched] - pb[c], axis=1).min()
                if d < self.exclusion * self._diag[key[1]]:
                    continue
            if self._usable((key[0], a, key[1], c)):
                return key[0], a, key[1], c
        raise RuntimeError("could not draw a non-corresponding pair")


def sample_batch(sampler: PairSampler, stacks: StackCache, rng, n_pos: int = 32,
                 n_neg: int = 32) -> TrainingBatch:
    """Points without any visible view are marked unusable and their pair redrawn."""
    index: Dict[Tuple[str, int], int] = {}
    images = []
    pairs = []
    for flag in [True] * n_pos + [False] * n_neg:
        while True:
            sa, a, sb, b = sampler.positive(rng) if flag else sampler.negative(rng)
            try:
                stack_a = stacks.get(sa, a)
            except ZeroVisibilityError:
                sampler.unusable.add((sa, a))
                continue
            try:
                stack_b = stacks.get(sb, b)
            except ZeroVisibilityError:
                sampler.unusable.add((sb, b))
                continue
            break
        ids = []
        for key, st in (((sa, a), stack_a), ((sb, b), stack_b)):
            if key not in index:
                index[key] = len(images)
                images.append(st)
            ids.append(index[key])
        pairs.append((ids[0], ids[1], flag))
    return TrainingBatch(images, pairs)


def train(model: DescriptorModel, sampler: PairSampler, stacks: StackCache, iterations: int,
          seed: int = 0, state: Optional[TrainState] = None, n_pos: int = 32, n_neg: int = 32,
          callback=None) -> Tuple[DescriptorModel, List[float]]:
    """Adam on the contrastive objective. Returns the trained model and the
    per-iteration objective (pair losses + weight decay term)."""
    state = state or TrainState()
    rng = np.random.default_rng(seed)
    log = []
    for it in range(iterations):
        batch = sample_batch(sampler, stacks, rng, n_pos, n_neg)
        grads, loss, _ = backward(batch, model, state.weight_decay, state.margin)
        adam_step(state, model, grads)
        log.append(loss)
        if callback is not None:
            callback(it, loss)
    return model, log


def write_loss_log(path, losses: Sequence[float]) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{float(v)!r}\n")


# -------------------------------------------------------------------------- io

def save_model(path, model: DescriptorModel) -> None:
    cfg = model.config.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        for name, shape in model.config.parameter_shapes():
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_model(path) -> DescriptorModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("magic", "not a descriptor model file")
    pos = len(MODEL_MAGIC)
    if len(raw) < pos + 4:
        raise ModelFormatError("config", "truncated")
    (clen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        config = NetworkConfig.from_text(raw[pos:pos + clen].decode("utf-8"))
    except (KeyError, ValueError, UnicodeDecodeError, TypeError) as exc:
        raise ModelFormatError("config", str(exc)) from None
    pos += clen
    params = {}
    for name, shape in config.parameter_shapes():
        count = int(np.prod(shape))
        if len(raw) < pos + 8 * count:
            raise ModelFormatError(f"parameters:{name}", "truncated")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        if not np.all(np.isfinite(params[name])):
            raise ModelFormatError(f"parameters:{name}", "non-finite values")
        pos += 8 * count
    if pos != len(raw):
        raise ModelFormatError("trailer", f"{len(raw) - pos} unexpected bytes")
    return DescriptorModel(config, params)


def save_descriptors(path, descriptors: np.ndarray) -> None:
    d = np.ascontiguousarray(descriptors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<II", d.shape[0], d.shape[1]))
        fh.write(d.tobytes())


def load_descriptors(path) -> np.ndarray:
    raw = open(path, "rb").read()
    if raw[:len(DESCRIPTOR_MAGIC)] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    count, dim = struct.unpack_from("<II", raw, len(DESCRIPTOR_MAGIC))
    off = len(DESCRIPTOR_MAGIC) + 8
    return np.frombuffer(raw, dtype="<f4", count=count * dim, offset=off).reshape(count, dim).astype(np.float64)
