"""Multi-stage belief-map network with hand-written backpropagation.

Architecture::

    x (3 channels) -> 3 x [conv3x3 + ReLU] -> f (C channels)
    stage 1:  f            -> conv C->C, ReLU -> conv C->C, ReLU -> conv C->J
    stage i:  concat(f, b) -> conv C+J->C, ReLU -> conv C->C, ReLU -> conv C->J

All convolutions are 3x3, stride 1, zero padding 1, so every tensor keeps
the input resolution. Public functions take channel-first arrays
(``(3, H, W)`` images, ``(J, H, W)`` beliefs, optionally with a leading batch
axis); internally activations are stored channels-last in a padded flat
buffer so each convolution is nine matrix products without patch copies.

The dtype of the parameters drives the computation: float32 for training,
float64 ("shadow mode") for gradient checks.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import blas

CHECKPOINT_MAGIC = b"RKPC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    pass


# -------------------------------------------------------------------- layers
#
# Activations live in a "padded flat" buffer: the (B, H+2, W+2, C) zero-padded
# tensor flattened to rows, with ``margin`` extra zero rows at both ends. A 3x3
# tap is then a constant row offset, so a convolution is nine matrix products
# over contiguous slices, with no im2col copy. The padding ring must stay zero.


class Grid:
    """Row geometry of a padded flat buffer for a ``(B, H, W)`` batch."""

    def __init__(self, batch: int, height: int, width: int):
        self.batch, self.height, self.width = batch, height, width
        self.pw = width + 2
        self.rows = batch * (height + 2) * self.pw
        self.margin = width + 3
        self.offsets = [(dy - 1) * self.pw + (dx - 1) for dy in range(3) for dx in range(3)]
        ring = np.ones((batch, height + 2, self.pw), dtype=bool)
        ring[:, 1:-1, 1:-1] = False
        self.ring = np.flatnonzero(ring.reshape(-1))

    def empty(self, channels: int, dtype) -> np.ndarray:
        buf = np.empty((self.rows + 2 * self.margin, channels), dtype=dtype)
        buf[: self.margin] = 0
        buf[self.margin + self.rows :] = 0
        return buf

    def body(self, buf: np.ndarray) -> np.ndarray:
        return buf[self.margin : self.margin + self.rows]

    def clear_ring(self, buf: np.ndarray) -> None:
        self.body(buf)[self.ring] = 0

    def pack(self, x: np.ndarray) -> np.ndarray:
        """NHWC tensor -> padded flat buffer."""
        B, H, W, C = x.shape
        buf = np.zeros((self.rows + 2 * self.margin, C), dtype=x.dtype)
        self.body(buf).reshape(B, H + 2, W + 2, C)[:, 1:-1, 1:-1] = x
        return buf

    def unpack(self, buf: np.ndarray) -> np.ndarray:
        """Padded flat buffer -> NHWC view of the interior."""
        C = buf.shape[1]
        return self.body(buf).reshape(self.batch, self.height + 2, self.pw, C)[:, 1:-1, 1:-1]


def _shifted_products(grid: Grid, src: np.ndarray, mats: Sequence[np.ndarray], sign: int, out: np.ndarray) -> None:
    """``out.body += sum_k src[body rows shifted by sign*offset_k] @ mats[k]``.

    Calls GEMM with beta=1 on transposed (Fortran-ordered) views so every tap
    accumulates in place.
    """
    body = grid.body(out)
    gemm = blas.get_blas_funcs("gemm", dtype=body.dtype)
    m0 = grid.margin
    for k, o in enumerate(grid.offsets):
        s = m0 + sign * o
        gemm(1.0, mats[k].T, src[s : s + grid.rows].T, beta=1.0, c=body.T, overwrite_c=1)


def conv_padded(grid: Grid, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 same convolution on a padded flat buffer; ``w`` is ``(3, 3, Cin, Cout)``."""
    cin, cout = w.shape[2], w.shape[3]
    if x.shape[1] != cin:
        raise ValueError(f"weight shape {w.shape} does not match {x.shape[1]} input channels")
    out = grid.empty(cout, x.dtype)
    grid.body(out)[:] = b
    _shifted_products(grid, x, w.reshape(9, cin, cout), +1, out)
    grid.clear_ring(out)
    return out


def conv_padded_backward(
    grid: Grid, dy: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients ``(dx, dw, db)``; ``dy`` must have a zero ring."""
    cin, cout = w.shape[2], w.shape[3]
    dyb = grid.body(dy)
    m0 = grid.margin
    dw = np.empty((9, cin, cout), dtype=w.dtype)
    for k, o in enumerate(grid.offsets):
        np.matmul(x[m0 + o : m0 + o + grid.rows].T, dyb, out=dw[k])
    db = dyb.sum(axis=0)
    dx = None
    if need_dx:
        dx = grid.empty(cin, dy.dtype)
        grid.body(dx)[:] = 0
        wt = w.reshape(9, cin, cout).transpose(0, 2, 1)
        _shifted_products(grid, dy, wt, -1, dx)
        grid.clear_ring(dx)
    return dx, dw.reshape(w.shape), db


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution of an NHWC tensor."""
    B, H, W, C = x.shape
    if w.shape[:3] != (3, 3, C):
        raise ValueError(f"weight shape {w.shape} does not match {C} input channels")
    g = Grid(B, H, W)
    return np.ascontiguousarray(g.unpack(conv_padded(g, g.pack(x), w, b)))


def conv_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients ``(dx, dw, db)`` of :func:`conv_forward` for NHWC tensors."""
    B, H, W, _ = x.shape
    g = Grid(B, H, W)
    dx, dw, db = conv_padded_backward(g, g.pack(dy), g.pack(x), w, need_dx)
    return (None if dx is None else np.ascontiguousarray(g.unpack(dx))), dw, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


def concat_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b], axis=-1)


def concat_backward(dy: np.ndarray, split: int) -> tuple[np.ndarray, np.ndarray]:
    return dy[..., :split], dy[..., split:]


def mse_per_sample(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean squared error over all non-batch axes."""
    diff = pred - target
    return np.mean(diff * diff, axis=tuple(range(1, diff.ndim)))


# -------------------------------------------------------------------- params


@dataclass
class ModelParams:
    joints: int
    channels: int
    stages: int
    weights: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")
        for name, shape in _layer_shapes(self.joints, self.channels, self.stages).items():
            if self.weights[name + ".w"].shape != shape:
                raise ValueError(f"{name}.w has shape {self.weights[name + '.w'].shape}, expected {shape}")
            if self.weights[name + ".b"].shape != shape[-1:]:
                raise ValueError(f"{name}.b has the wrong shape")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.weights.values())).dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.joints,
            self.channels,
            self.stages,
            {k: v.astype(dtype, copy=True) for k, v in self.weights.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.weights[name + ".w"], self.weights[name + ".b"]

    def parameter_count(self) -> int:
        return sum(v.size for v in self.weights.values())


def _layer_shapes(joints: int, channels: int, stages: int) -> dict[str, tuple[int, ...]]:
    C, J = channels, joints
    shapes = {"ext0": (3, 3, 3, C), "ext1": (3, 3, C, C), "ext2": (3, 3, C, C)}
    for s in range(stages):
        cin = C if s == 0 else C + J
        shapes[f"stage{s}.conv0"] = (3, 3, cin, C)
        shapes[f"stage{s}.conv1"] = (3, 3, C, C)
        shapes[f"stage{s}.conv2"] = (3, 3, C, J)
    return shapes


def init_params(
    joints: int = 6,
    channels: int = 32,
    stages: int = 2,
    seed: int = 0,
    dtype=np.float32,
    input_offset: float = 0.5,
    output_gain: float = 0.1,
) -> ModelParams:
    """He-uniform (fan-in) weights.

    ``input_offset`` sets the first layer's bias to ``-offset * sum(w)`` per
    filter, so at init it sees images centered around ``offset``.
    ``output_gain`` scales the last conv of every stage; a small first
    prediction keeps the sparse belief targets from driving the heads into
    dead ReLUs early on. Other biases start at zero.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x4E4554])))
    weights = {}
    for name, shape in _layer_shapes(joints, channels, stages).items():
        fan_in = shape[0] * shape[1] * shape[2]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, shape)
        b = np.zeros(shape[-1])
        if name == "ext0":
            b = -input_offset * w.sum(axis=(0, 1, 2))
        elif name.endswith("conv2"):
            w = w * output_gain
        weights[name + ".w"] = w.astype(dtype)
        weights[name + ".b"] = b.astype(dtype)
    return ModelParams(joints, channels, stages, weights)


# ------------------------------------------------------------------- forward


def _to_nhwc(x: np.ndarray, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(x, dtype=dtype), -3, -1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def _relu_(buf: np.ndarray) -> np.ndarray:
    np.maximum(buf, 0, out=buf)
    return buf


def _features(grid: Grid, x: np.ndarray, params: ModelParams, cache: list | None) -> np.ndarray:
    h = x
    for i in range(3):
        if cache is not None:
            cache.append(h)
        h = _relu_(conv_padded(grid, h, *params.layer(f"ext{i}")))
    if cache is not None:
        cache.append(h)
    return h


def _stage(grid: Grid, f: np.ndarray, b_prev: np.ndarray | None, params: ModelParams, s: int, cache: list | None) -> np.ndarray:
    if (s == 0) != (b_prev is None):
        raise ValueError(
            "the first stage takes features only; later stages need the previous belief map"
        )
    h = f if b_prev is None else concat_forward(f, b_prev)
    for i in range(3):
        if cache is not None:
            cache.append(h)
        h = conv_padded(grid, h, *params.layer(f"stage{s}.conv{i}"))
        if i < 2:
            _relu_(h)
    return h


def _check_image(x: np.ndarray, expected: tuple[int, int] | None = None):
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ValueError(f"expected (3, H, W) image(s), got shape {x.shape}")
    if expected is not None and tuple(x.shape[-2:]) != tuple(expected):
        raise ValueError(f"image size {tuple(x.shape[-2:])} does not match {tuple(expected)}")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def extract_features(x: np.ndarray, params: ModelParams, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Feature tensor ``(C, H, W)`` (or batched) for image(s) ``x``.

    ``image_size`` is ``(H, W)``; when given, the input must match it.
    """
    _check_image(np.asarray(x), image_size)
    xb, single = _batched(x)
    grid = Grid(*xb.shape[:1], *xb.shape[2:])
    f = _features(grid, grid.pack(_to_nhwc(xb, params.dtype)), params, None)
    out = _to_nchw(grid.unpack(f))
    return out[0] if single else out


def stage_forward(f: np.ndarray, b_prev: np.ndarray | None, params: ModelParams, stage: int) -> np.ndarray:
    """One refinement stage; ``stage`` is zero-based."""
    fb, single = _batched(f)
    grid = Grid(fb.shape[0], *fb.shape[2:])
    bp = None
    if b_prev is not None:
        bb, _ = _batched(b_prev)
        bp = grid.pack(_to_nhwc(bb, params.dtype))
    out = _to_nchw(grid.unpack(_stage(grid, grid.pack(_to_nhwc(fb, params.dtype)), bp, params, stage, None)))
    return out[0] if single else out


def _forward(grid: Grid, x: np.ndarray, params: ModelParams, cache: dict | None) -> list[np.ndarray]:
    fcache = [] if cache is not None else None
    f = _features(grid, x, params, fcache)
    outs = []
    b = None
    scaches = []
    for s in range(params.stages):
        sc = [] if cache is not None else None
        b = _stage(grid, f, b, params, s, sc)
        outs.append(b)
        scaches.append(sc)
    if cache is not None:
        cache["features"] = fcache
        cache["stages"] = scaches
    return outs


def model_forward(x: np.ndarray, params: ModelParams) -> list[np.ndarray]:
    """Belief maps of every stage; the last one is the prediction."""
    _check_image(np.asarray(x))
    xb, single = _batched(x)
    grid = Grid(xb.shape[0], *xb.shape[2:])
    outs = _forward(grid, grid.pack(_to_nhwc(xb, params.dtype)), params, None)
    outs = [_to_nchw(grid.unpack(o)) for o in outs]
    return [o[0] for o in outs] if single else outs


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 16) -> list[np.ndarray]:
    """Batched inference returning per-stage belief maps ``(B, J, H, W)``."""
    chunks = [model_forward(images[i : i + batch_size], params) for i in range(0, len(images), batch_size)]
    return [np.concatenate([c[s] for c in chunks]) for s in range(params.stages)]


# ---------------------------------------------------------------------- loss


def stage_loss(b_i: np.ndarray, b_star: np.ndarray) -> float:
    """Pixel-wise mean squared error."""
    b_i = np.asarray(b_i)
    b_star = np.asarray(b_star)
    if b_i.shape != b_star.shape:
        raise ValueError(f"shape mismatch {b_i.shape} vs {b_star.shape}")
    d = b_i.astype(np.float64) - b_star
    return float(np.mean(d * d))


def total_loss(stage_losses: Iterable[float]) -> float:
    losses = list(stage_losses)
    if not losses:
        raise ValueError("no stage losses")
    return float(sum(losses) / len(losses))


def sample_losses(outputs: Sequence[np.ndarray], targets: np.ndarray) -> np.ndarray:
    """Per-sample total loss for batched stage outputs ``(B, J, H, W)``."""
    per_stage = [mse_per_sample(o.astype(np.float64), targets) for o in outputs]
    return np.mean(per_stage, axis=0)


# ------------------------------------------------------------------ backward


def loss_and_grads(
    params: ModelParams, images: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Batch-mean total loss, per-sample losses and parameter gradients."""
    dtype = params.dtype
    images = np.asarray(images)
    targets = np.asarray(targets)
    if images.shape[0] != targets.shape[0] or images.shape[2:] != targets.shape[2:]:
        raise ValueError("images and targets disagree on batch or spatial size")
    B, _, H, W = images.shape
    grid = Grid(B, H, W)
    x = grid.pack(_to_nhwc(images, dtype))
    t = grid.pack(_to_nhwc(targets, dtype))
    cache: dict = {}
    outs = _forward(grid, x, params, cache)

    n_el = targets[0].size
    per_stage = []
    for o in outs:
        d = grid.body(o).astype(np.float64) - grid.body(t)
        per_stage.append((d * d).reshape(B, -1).sum(axis=1) / n_el)
    per_sample = np.mean(per_stage, axis=0)

    scale = dtype.type(2.0 / (params.stages * B * n_el))
    grads: dict[str, np.ndarray] = {}
    C = params.channels
    df = None
    db_next = None
    for s in reversed(range(params.stages)):
        d = scale * (outs[s] - t)
        if db_next is not None:
            d += db_next
        acts = cache["stages"][s]
        for i in reversed(range(3)):
            name = f"stage{s}.conv{i}"
            w, _ = params.layer(name)
            if i < 2:
                d = relu_backward(d, acts[i + 1])
            d, grads[name + ".w"], grads[name + ".b"] = conv_padded_backward(grid, d, acts[i], w)
        if s > 0:
            d_f, db_next = concat_backward(d, C)
        else:
            d_f = d
        df = d_f.copy() if df is None else df + d_f
    facts = cache["features"]
    d = df
    for i in reversed(range(3)):
        name = f"ext{i}"
        w, _ = params.layer(name)
        d = relu_backward(d, facts[i + 1])
        d, grads[name + ".w"], grads[name + ".b"] = conv_padded_backward(grid, d, facts[i], w, need_dx=i > 0)
    return float(per_sample.mean()), per_sample, grads


@dataclass
class SGDMomentum:
    lr: float = 1e-3
    momentum: float = 0.9
    # rescale the whole gradient when its global L2 norm exceeds this
    clip_norm: float | None = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    step_count: int = 0

    def apply(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        scale = _clip_scale(grads, self.clip_norm)
        for name, g in grads.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(g)
            v *= self.momentum
            v += g if scale == 1.0 else g * g.dtype.type(scale)
            params.weights[name] -= params.dtype.type(self.lr) * v
        self.step_count += 1


@dataclass
class Adam:
    """Adam with bias correction. Insensitive to the overall gradient scale."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    step_count: int = 0

    def apply(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        scale = _clip_scale(grads, self.clip_norm)
        t = self.step_count + 1
        step = self.lr * np.sqrt(1.0 - self.beta2**t) / (1.0 - self.beta1**t)
        for name, g in grads.items():
            g = g if scale == 1.0 else g * g.dtype.type(scale)
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            params.weights[name] -= (step * m / (np.sqrt(v) + self.eps)).astype(params.dtype, copy=False)
        self.step_count = t


def _clip_scale(grads: dict[str, np.ndarray], clip_norm: float | None) -> float:
    if clip_norm is None:
        return 1.0
    norm = float(np.sqrt(sum(np.vdot(g, g) for g in grads.values())))
    return clip_norm / norm if norm > clip_norm else 1.0


def backward_and_step(
    batch,
    params: ModelParams,
    optimizer: SGDMomentum | Adam,
    micro_batch: int | None = None,
) -> tuple[ModelParams, np.ndarray]:
    """One optimizer update on the batch-mean total loss.

    ``batch`` is either a sequence of :class:`TrainingTuple` or an
    ``(images, targets)`` pair of arrays. ``micro_batch`` splits the forward
    and backward passes into chunks (the gradient is unchanged) to bound
    memory at large resolutions. Returns the params (updated in place) and
    the per-sample losses.
    """
    images, targets = _batch_arrays(batch)
    n = len(images)
    if n == 0:
        raise ValueError("empty batch")
    step = micro_batch or n
    grads: dict[str, np.ndarray] | None = None
    losses = []
    for i in range(0, n, step):
        _, per, g = loss_and_grads(params, images[i : i + step], targets[i : i + step])
        w = (min(i + step, n) - i) / n
        losses.append(per)
        if grads is None:
            grads = {k: v * params.dtype.type(w) for k, v in g.items()}
        else:
            for k, v in g.items():
                grads[k] += v * params.dtype.type(w)
    per_sample = np.concatenate(losses)
    mean = float(per_sample.mean())
    if not np.isfinite(mean) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDivergedError(optimizer.step_count, mean)
    optimizer.apply(params, grads)
    return params, per_sample


@dataclass
class TrainingTuple:
    x: np.ndarray
    b_star: np.ndarray
    h: object = None

    def __post_init__(self):
        if np.shape(self.x)[-2:] != np.shape(self.b_star)[-2:]:
            raise ValueError("image and belief maps disagree on spatial size")


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        images, targets = batch
    else:
        items = list(batch)
        if not items:
            raise ValueError("empty batch")
        shapes = {(t.x.shape, t.b_star.shape) for t in items}
        if len(shapes) != 1:
            raise ValueError("batch items have different shapes")
        images = np.stack([t.x for t in items])
        targets = np.stack([t.b_star for t in items])
    return images, targets


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    """Write ``params`` in the RKPC format (see README for the layout)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HHHHI", CHECKPOINT_VERSION, params.joints, params.channels, params.stages, len(params.weights)))
    for name in sorted(params.weights):
        arr = np.ascontiguousarray(params.weights[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not an RKPC checkpoint")
    version, joints, channels, stages, count = struct.unpack("<HHHHI", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    weights = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = bytes(take(klen)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        weights[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes")
    return ModelParams(joints, channels, stages, weights)
