"""Small convolutional classifier, implemented directly on numpy.

Architecture: pairs of 3x3 stride-1 zero-padded convolutions, each pair
followed by 2x2 max pooling (floor semantics, odd remainders dropped), then a
rectified dense layer and a single logistic output node emitting the weed
probability. Hidden activations are rectified-linear. Training is plain SGD
on mean binary cross-entropy with an inverse-time learning-rate schedule
lr_e = lr0 / (1 + decay * e).

Convolutions run as im2col + BLAS matmul; the backward pass is the exact
analytic gradient (verified against central finite differences, see
``gradient_check``). Everything is deterministic for a fixed seed: batch
shuffles come from a dedicated generator and gradient reductions have a fixed
order, so float64 runs reproduce bit-identically.
"""

import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._rng import make_rng

EPS = 1e-7  # probability clamp inside the loss


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Static architecture description; filter counts double per pool stage."""
    input_h: int = 300
    input_w: int = 300
    input_c: int = 3
    conv_filters: tuple = (32, 32, 64, 64, 128, 128)
    dense_units: tuple = (64, 1)

    def __post_init__(self):
        if self.input_h < 1 or self.input_w < 1 or self.input_c < 1:
            raise ShapeError(f"bad input dims {self.input_h}x{self.input_w}x{self.input_c}")
        if len(self.conv_filters) % 2 != 0 or not self.conv_filters:
            raise ShapeError("conv filters come in pairs (one pool per pair)")
        if any(f < 1 for f in self.conv_filters):
            raise ShapeError("conv filter counts must be positive")
        if len(self.dense_units) < 1 or self.dense_units[-1] != 1:
            raise ShapeError("head must end in a single output unit")
        h, w = self.feature_hw()
        if h < 1 or w < 1:
            raise ShapeError("input too small for the pooling stack")

    def feature_hw(self) -> tuple[int, int]:
        h, w = self.input_h, self.input_w
        for _ in range(len(self.conv_filters) // 2):
            h, w = h // 2, w // 2
        return h, w

    def flat_features(self) -> int:
        h, w = self.feature_hw()
        return h * w * self.conv_filters[-1]

    def param_shapes(self) -> list[tuple[str, tuple]]:
        shapes = []
        c_in = self.input_c
        for i, f in enumerate(self.conv_filters):
            shapes.append((f"conv{i}_w", (3, 3, c_in, f)))
            shapes.append((f"conv{i}_b", (f,)))
            c_in = f
        d_in = self.flat_features()
        for i, d in enumerate(self.dense_units):
            shapes.append((f"dense{i}_w", (d_in, d)))
            shapes.append((f"dense{i}_b", (d,)))
            d_in = d
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


REDUCED_SPEC = NetworkSpec(input_h=24, input_w=24, input_c=3,
                           conv_filters=(2, 2, 4, 4, 8, 8), dense_units=(8, 1))


@dataclass
class ModelParams:
    spec: NetworkSpec
    conv_w: list
    conv_b: list
    dense_w: list
    dense_b: list

    @property
    def dtype(self):
        return self.conv_w[0].dtype

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out += [w, b]
        for w, b in zip(self.dense_w, self.dense_b):
            out += [w, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [w.copy() for w in self.conv_w],
                           [b.copy() for b in self.conv_b],
                           [w.copy() for w in self.dense_w],
                           [b.copy() for b in self.dense_b])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, [w.astype(dtype) for w in self.conv_w],
                           [b.astype(dtype) for b in self.conv_b],
                           [w.astype(dtype) for w in self.dense_w],
                           [b.astype(dtype) for b in self.dense_b])


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-style init: N(0, sqrt(2/fan_in)) weights, zero biases."""
    rng = make_rng(seed, "init")
    conv_w, conv_b, dense_w, dense_b = [], [], [], []
    c_in = spec.input_c
    for f in spec.conv_filters:
        fan_in = 9 * c_in
        conv_w.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, c_in, f)).astype(dtype))
        conv_b.append(np.zeros(f, dtype=dtype))
        c_in = f
    d_in = spec.flat_features()
    for d in spec.dense_units:
        dense_w.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d)).astype(dtype))
        dense_b.append(np.zeros(d, dtype=dtype))
        d_in = d
    return ModelParams(spec, conv_w, conv_b, dense_w, dense_b)


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(params.spec, [np.zeros_like(w) for w in params.conv_w],
                       [np.zeros_like(b) for b in params.conv_b],
                       [np.zeros_like(w) for w in params.dense_w],
                       [np.zeros_like(b) for b in params.dense_b])


# ------------------------------------------------------------------ layers

def _im2col(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di:di + h, dj:dj + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    cols = _im2col(x)
    z = cols @ w.reshape(9 * c, -1)
    z += b
    return z.reshape(n, h, wd, -1), cols


def _conv_backward(dz, cols, w, x_shape):
    n, h, wd, c = x_shape
    f = w.shape[-1]
    dz2 = dz.reshape(-1, f)
    dw = (cols.T @ dz2).reshape(w.shape)
    db = dz2.sum(axis=0)
    dcols = (dz2 @ w.reshape(9 * c, f).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dz.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + wd, :] += dcols[:, :, :, di, dj, :]
    return dw, db, dxp[:, 1:h + 1, 1:wd + 1, :]


def _pool_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    win = (x[:, :h2 * 2, :w2 * 2, :]
           .reshape(n, h2, 2, w2, 2, c)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(n, h2, w2, 4, c))
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape)


def _pool_backward(dy, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((n, h2, w2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :h2 * 2, :w2 * 2, :] = (dwin.reshape(n, h2, w2, 2, 2, c)
                                  .transpose(0, 1, 3, 2, 4, 5)
                                  .reshape(n, h2 * 2, w2 * 2, c))
    return dx


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_batch(spec: NetworkSpec, x: np.ndarray):
    if x.ndim != 4 or x.shape[1:] != (spec.input_h, spec.input_w, spec.input_c):
        raise ShapeError(f"batch shape {x.shape} does not match spec "
                         f"(N, {spec.input_h}, {spec.input_w}, {spec.input_c})")


def _forward_impl(params: ModelParams, x: np.ndarray, keep_cache: bool):
    spec = params.spec
    _check_batch(spec, x)
    a = x
    caches = []
    for i, (w, b) in enumerate(zip(params.conv_w, params.conv_b)):
        x_shape = a.shape
        z, cols = _conv_forward(a, w, b)
        mask = z > 0
        a = z * mask
        caches.append(("conv", cols if keep_cache else None, mask, x_shape))
        if i % 2 == 1:
            a, pool_cache = _pool_forward(a)
            caches.append(("pool", pool_cache))
    n = a.shape[0]
    flat_shape = a.shape
    a = a.reshape(n, -1)
    for i, (w, b) in enumerate(zip(params.dense_w, params.dense_b)):
        z = a @ w + b
        if i < len(params.dense_w) - 1:
            mask = z > 0
            caches.append(("dense", a, mask))
            a = z * mask
        else:
            caches.append(("dense_out", a))
    p = _sigmoid(z[:, 0])
    return p, caches, flat_shape


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Weed probabilities in (0, 1) for a batch scaled to [0, 1]."""
    p, _, _ = _forward_impl(params, batch, keep_cache=False)
    return p


def loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = np.clip(probabilities, EPS, 1.0 - EPS)
    y = np.asarray(labels)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def backward(params: ModelParams, batch: np.ndarray, labels: np.ndarray) -> ModelParams:
    """Analytic gradient of ``loss(forward(params, batch), labels)``."""
    p, caches, flat_shape = _forward_impl(params, batch, keep_cache=True)
    return _backward_from_cache(params, p, labels, caches, flat_shape)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """theta <- theta - lr * g, elementwise; returns new params."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    return ModelParams(
        params.spec,
        [w - lr * g for w, g in zip(params.conv_w, grads.conv_w)],
        [b - lr * g for b, g in zip(params.conv_b, grads.conv_b)],
        [w - lr * g for w, g in zip(params.dense_w, grads.dense_w)],
        [b - lr * g for b, g in zip(params.dense_b, grads.dense_b)],
    )


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    decay: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.decay < 0:
            raise ValueError("decay must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def lr_at(self, epoch_index: int) -> float:
        return self.learning_rate / (1.0 + self.decay * epoch_index)


def _as_float_batch(x: np.ndarray, dtype) -> np.ndarray:
    if x.dtype == np.uint8:
        return x.astype(dtype) / 255.0
    return x.astype(dtype, copy=False)


def predict_probs(params: ModelParams, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward in chunks; uint8 input is scaled by 1/255 first."""
    out = np.empty(len(pixels), dtype=params.dtype)
    for start in range(0, len(pixels), batch_size):
        xb = _as_float_batch(pixels[start:start + batch_size], params.dtype)
        out[start:start + batch_size] = forward(params, xb)
    return out


def _eval_split(params, pixels, labels, batch_size=256):
    p = predict_probs(params, pixels, batch_size)
    return loss(p, labels), float(np.mean((p >= 0.5) == (np.asarray(labels) == 1)))


def train(train_set, val_set, config: TrainingConfig,
          spec: Optional[NetworkSpec] = None,
          initial: Optional[ModelParams] = None):
    """SGD over the training tiles; returns (best-epoch params, history).

    ``train_set``/``val_set`` are (pixels, labels) pairs, pixels uint8 or
    float. Model selection keeps the epoch with the highest validation
    accuracy at threshold 0.5 (earliest epoch wins ties). The history has one
    entry per epoch with train/val loss and accuracy.
    """
    x_train, y_train = train_set
    x_val, y_val = val_set
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    y_train = np.asarray(y_train)
    y_val = np.asarray(y_val)
    if not (set(np.unique(y_train)) <= {0, 1}):
        raise ValueError("labels must be binary")

    dtype = config.dtype
    if initial is not None:
        params = initial.astype(dtype)
        spec = params.spec
    else:
        if spec is None:
            spec = NetworkSpec(input_h=x_train.shape[1], input_w=x_train.shape[2])
        params = init_params(spec, seed=config.seed, dtype=dtype)

    rng = make_rng(config.seed, "epoch-shuffle")
    n = len(x_train)
    history = []
    best_acc = -1.0
    best_params = params.copy()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = _as_float_batch(x_train[idx], dtype)
            yb = y_train[idx]
            p, caches, flat_shape = _forward_impl(params, xb, keep_cache=True)
            batch_loss = loss(p, yb)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}")
            total_loss += batch_loss * len(idx)
            total_correct += int(np.sum((p >= 0.5) == (yb == 1)))
            grads = _backward_from_cache(params, p, yb, caches, flat_shape)
            params = sgd_step(params, grads, lr)
        val_loss, val_acc = _eval_split(params, x_val, y_val)
        history.append({
            "epoch": epoch + 1,
            "train_loss": total_loss / n,
            "train_acc": total_correct / n,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": lr,
        })
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
    return best_params, history


def _backward_from_cache(params, p, y, caches, flat_shape):
    # Shares the forward pass already run by the train loop.
    y = np.asarray(y, dtype=p.dtype)
    n = len(y)
    inside = (p > EPS) & (p < 1.0 - EPS)
    dz = ((p - y) * inside / n).astype(p.dtype)[:, None]
    grads = zeros_like_params(params)
    for i in range(len(params.dense_w) - 1, -1, -1):
        cache = caches.pop()
        a_prev = cache[1]
        grads.dense_w[i][:] = a_prev.T @ dz
        grads.dense_b[i][:] = dz.sum(axis=0)
        da = dz @ params.dense_w[i].T
        if i > 0:
            prev = caches[-1]
            dz = da * prev[2] if prev[0] == "dense" else da
        else:
            dz = da
    da = dz.reshape(flat_shape)
    for i in range(len(params.conv_w) - 1, -1, -1):
        if i % 2 == 1:
            kind, pool_cache = caches.pop()
            da = _pool_backward(da, pool_cache)
        kind, cols, mask, x_shape = caches.pop()
        dzc = da * mask
        dw, db, da = _conv_backward(dzc, cols, params.conv_w[i], x_shape)
        grads.conv_w[i][:] = dw
        grads.conv_b[i][:] = db
    return grads


# ------------------------------------------------------------------ gradient check

def _min_kink_distance(params: ModelParams, x: np.ndarray) -> float:
    """Smallest |pre-activation| across every rectified layer."""
    closest = np.inf
    a = x
    for i, (w, b) in enumerate(zip(params.conv_w, params.conv_b)):
        z, _ = _conv_forward(a, w, b)
        closest = min(closest, float(np.abs(z).min()))
        a = z * (z > 0)
        if i % 2 == 1:
            a, _ = _pool_forward(a)
    a = a.reshape(len(x), -1)
    for i, (w, b) in enumerate(zip(params.dense_w, params.dense_b)):
        z = a @ w + b
        if i < len(params.dense_w) - 1:
            closest = min(closest, float(np.abs(z).min()))
            a = z * (z > 0)
    return closest


def gradient_check(spec: NetworkSpec = REDUCED_SPEC, batch: int = 3, seed: int = 0,
                   h: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central finite-difference gradients.

    Runs in float64 over every scalar parameter; returns per-group maxima
    keyed by parameter name.
    """
    rng = make_rng(seed, "gradcheck")
    params = init_params(spec, seed=seed, dtype=np.float64)
    # Central differences are only valid at a differentiable point: no ReLU
    # pre-activation may sit within the perturbation of its kink. Zero init
    # biases park dead channels exactly at zero, so draw small biases, then
    # redraw the batch until the whole network clears the kink margin.
    for b in params.conv_b + params.dense_b:
        b[:] = rng.normal(0.0, 0.05, size=b.shape)
    margin = 10.0 * h
    for _ in range(64):
        x = rng.uniform(0.0, 1.0, size=(batch, spec.input_h, spec.input_w, spec.input_c))
        if _min_kink_distance(params, x) > margin:
            break
    else:
        raise RuntimeError("no kink-free evaluation point found; widen the spec or reseed")
    y = rng.integers(0, 2, size=batch).astype(np.float64)

    analytic = backward(params, x, y)
    names = [n for n, _ in spec.param_shapes()]
    errors = {}
    for name, grad, target in zip(names, analytic.arrays(), params.arrays()):
        max_rel = 0.0
        flat_g = grad.ravel()
        flat_t = target.ravel()
        for k in range(flat_t.size):
            orig = flat_t[k]
            flat_t[k] = orig + h
            up = loss(forward(params, x), y)
            flat_t[k] = orig - h
            down = loss(forward(params, x), y)
            flat_t[k] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(flat_g[k]), abs(numeric), 1e-6)
            max_rel = max(max_rel, abs(flat_g[k] - numeric) / denom)
        errors[name] = max_rel
    return errors


# ------------------------------------------------------------------ checkpoints

MAGIC = b"WDCX"
VERSION = 1


def save_checkpoint(params: ModelParams) -> bytes:
    """Portable encoding: WDCX header, spec as LE u32s, params as LE f32."""
    spec = params.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    header = [spec.input_h, spec.input_w, spec.input_c,
              len(spec.conv_filters), *spec.conv_filters,
              len(spec.dense_units), *spec.dense_units]
    buf.write(struct.pack(f"<{len(header)}I", *header))
    for arr in params.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> ModelParams:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = struct.unpack("<B", buf.read(1))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def read_u32(count):
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError("truncated checkpoint header")
        return struct.unpack(f"<{count}I", raw)

    input_h, input_w, input_c, n_conv = read_u32(4)
    conv_filters = read_u32(n_conv) if n_conv else ()
    (n_dense,) = read_u32(1)
    dense_units = read_u32(n_dense) if n_dense else ()
    try:
        spec = NetworkSpec(input_h=input_h, input_w=input_w, input_c=input_c,
                           conv_filters=tuple(conv_filters), dense_units=tuple(dense_units))
    except ShapeError as exc:
        raise CheckpointError(f"inconsistent architecture in header: {exc}") from exc

    arrays = []
    for name, shape in spec.param_shapes():
        count = int(np.prod(shape))
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError(f"truncated parameter data at {name}")
        arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    if buf.read(1):
        raise CheckpointError("trailing bytes after parameter data")

    conv_w = arrays[0:2 * len(conv_filters):2]
    conv_b = arrays[1:2 * len(conv_filters):2]
    rest = arrays[2 * len(conv_filters):]
    dense_w = rest[0::2]
    dense_b = rest[1::2]
    return ModelParams(spec, conv_w, conv_b, dense_w, dense_b)


def checkpoint_header_length(spec: NetworkSpec) -> int:
    return 4 + 1 + 4 * (3 + 1 + len(spec.conv_filters) + 1 + len(spec.dense_units))
