"""Layers with hand-written gradients and the three-lead inception network.

Arrays are numpy float64, channels last: a batch of feature maps has shape
(B, L, C). Every ``*_forward`` returns ``(out, cache)`` and the matching
``*_backward`` takes ``(dout, cache)``.

Network: each of the leads II, III and aVF passes through its own inception
block of seven parallel paths (conv -> batch norm -> ReLU -> max pool), the 21
path outputs are concatenated channel-wise, globally averaged to 84 features
and classified by a 2-unit dense layer with softmax.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

WINDOWS = (3, 5, 7, 9, 16, 32, 64)
LEADS = ("ii", "iii", "avf")


class ShapeMismatch(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    window: int
    n_filters: int = 4
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.stride != 1 or self.padding != "same":
            raise ValueError("only stride 1 with same zero padding is supported")

    @property
    def pads(self) -> tuple[int, int]:
        total = self.window - 1
        return total // 2, total - total // 2


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.ones(channels), **kw)


# ---------------------------------------------------------------------------
# layers

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (L, C) or (B, L, C), got {x.shape}")
    return x, False


def conv1d_forward(x, spec: ConvSpec | int, w, b):
    """Stride-1 'same' convolution (cross-correlation).

    ``x`` is (L, C_in) or (B, L, C_in), ``w`` is (window, C_in, F), ``b`` is (F,).
    ``out[t, f] = b[f] + sum_{k, c} w[k, c, f] * x_pad[t + k, c]``, with
    ``window - 1`` zeros of padding, the odd one on the right.
    """
    if not isinstance(spec, ConvSpec):
        spec = ConvSpec(int(spec), n_filters=np.shape(w)[-1])
    xb, squeeze = _as_batch(x)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    K, C, F = w.shape
    if K != spec.window or xb.shape[2] != C or b.shape != (F,):
        raise ShapeMismatch(f"x {xb.shape}, w {w.shape}, b {b.shape}, window {spec.window}")
    if xb.shape[1] < 1:
        raise ShapeMismatch("empty input")
    left, right = spec.pads
    xpad = np.pad(xb, ((0, 0), (left, right), (0, 0)))
    cols = sliding_window_view(xpad, K, axis=1)          # (B, L, C, K)
    out = np.tensordot(cols, w, axes=([2, 3], [1, 0])) + b
    cache = (xb.shape, cols, w, spec, squeeze)
    return (out[0] if squeeze else out), cache


def conv1d_backward(dout, cache, need_dx: bool = True):
    in_shape, cols, w, spec, squeeze = cache
    dout = np.asarray(dout, dtype=np.float64)
    if squeeze:
        dout = dout[None]
    B, L, C = in_shape
    K, _, F = w.shape
    if dout.shape != (B, L, F):
        raise ShapeMismatch(f"dout {dout.shape} does not match output {(B, L, F)}")
    db = dout.sum(axis=(0, 1))
    dw = np.tensordot(cols, dout, axes=([0, 1], [0, 1])).transpose(1, 0, 2)
    dx = None
    if need_dx:
        left, _ = spec.pads
        dpad = np.zeros((B, L + K - 1, C))
        for k in range(K):
            dpad[:, k:k + L, :] += dout @ w[k].T
        dx = dpad[:, left:left + L, :]
        if squeeze:
            dx = dx[0]
    return dx, dw, db


def batchnorm_forward(x, state: BatchNormState, mode: str = "train"):
    """Per-channel batch normalization over all batch and time positions.

    In train mode the running statistics in ``state`` are updated in place.
    """
    xb, squeeze = _as_batch(x)
    C = xb.shape[-1]
    if state.gamma.shape != (C,):
        raise ShapeMismatch(f"state has {state.gamma.shape[0]} channels, input {C}")
    flat = xb.reshape(-1, C)
    if mode == "train":
        if flat.shape[0] < 2:
            raise DegenerateBatch("train-mode batch norm needs >= 2 values per channel")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        m = state.momentum
        state.running_mean *= m
        state.running_mean += (1 - m) * mean
        state.running_var *= m
        state.running_var += (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (xb - mean) * inv
    out = state.gamma * xhat + state.beta
    cache = (mode, xhat, inv, state.gamma.copy(), squeeze)
    return (out[0] if squeeze else out), cache


def batchnorm_backward(dout, cache):
    mode, xhat, inv, gamma, squeeze = cache
    dout = np.asarray(dout, dtype=np.float64)
    if squeeze:
        dout = dout[None]
    if dout.shape != xhat.shape:
        raise ShapeMismatch(f"dout {dout.shape} vs input {xhat.shape}")
    C = xhat.shape[-1]
    g2 = dout.reshape(-1, C)
    h2 = xhat.reshape(-1, C)
    dbeta = g2.sum(axis=0)
    dgamma = (g2 * h2).sum(axis=0)
    dxhat = dout * gamma
    if mode == "train":
        n = g2.shape[0]
        dxh2 = dxhat.reshape(-1, C)
        dx = (inv / n) * (n * dxhat - dxh2.sum(axis=0) - xhat * (dxh2 * h2).sum(axis=0))
    else:
        dx = dxhat * inv
    if squeeze:
        dx = dx[0]
    return dx, dgamma, dbeta


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return np.where(mask, dout, 0.0)


def maxpool_forward(x, window: int = 2, stride: int = 2):
    """Non-overlapping max pooling over time; a short trailing window is dropped."""
    if window != stride:
        raise ValueError("only window == stride is supported")
    xb, squeeze = _as_batch(x)
    B, L, C = xb.shape
    Lp = L // window
    blocks = xb[:, :Lp * window].reshape(B, Lp, window, C)
    idx = blocks.argmax(axis=2)                          # first maximum wins ties
    out = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]
    cache = (xb.shape, idx, window, squeeze)
    return (out[0] if squeeze else out), cache


def maxpool_backward(dout, cache):
    shape, idx, window, squeeze = cache
    dout = np.asarray(dout, dtype=np.float64)
    if squeeze:
        dout = dout[None]
    B, L, C = shape
    Lp = idx.shape[1]
    dblocks = np.zeros((B, Lp, window, C))
    np.put_along_axis(dblocks, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros(shape)
    dx[:, :Lp * window] = dblocks.reshape(B, Lp * window, C)
    return dx[0] if squeeze else dx


def gap_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=-2), x.shape


def gap_backward(dout, shape):
    L = shape[-2]
    return np.broadcast_to(np.expand_dims(dout, -2) / L, shape).copy()


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax_forward(features, w, b):
    """``softmax(features @ w + b)``; ``w`` is (n_features, n_classes)."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"features {f.shape}, w {w.shape}, b {b.shape}")
    probs = softmax(f @ w + b)
    return probs, (f, w, probs)


def dense_softmax_backward(dprobs, cache):
    f, w, probs = cache
    dprobs = np.asarray(dprobs, dtype=np.float64)
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    f2 = f.reshape(-1, f.shape[-1])
    d2 = dlogits.reshape(-1, dlogits.shape[-1])
    return dlogits @ w.T, f2.T @ d2, d2.sum(axis=0)


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class Architecture:
    leads: tuple[str, ...] = LEADS
    windows: tuple[int, ...] = WINDOWS
    n_filters: int = 4
    n_classes: int = 2
    pool: int = 2
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    @property
    def n_features(self) -> int:
        return len(self.leads) * len(self.windows) * self.n_filters


def _names(arch: Architecture):
    """Tensor names in checkpoint order, flagged trainable or not."""
    for lead in arch.leads:
        for k in arch.windows:
            yield f"{lead}/conv{k}/kernel", True
            yield f"{lead}/conv{k}/bias", True
            yield f"{lead}/bn{k}/gamma", True
            yield f"{lead}/bn{k}/beta", True
            yield f"{lead}/bn{k}/running_mean", False
            yield f"{lead}/bn{k}/running_var", False
    yield "dense/kernel", True
    yield "dense/bias", True


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]
    trainable: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.trainable:
            self.trainable = tuple(n for n, t in _names(self.arch) if t)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def trainables(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in self.trainable}

    def n_trainable(self) -> int:
        return int(sum(self.tensors[n].size for n in self.trainable))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                           self.trainable)

    def bn_state(self, lead: str, window: int) -> BatchNormState:
        p = f"{lead}/bn{window}/"
        return BatchNormState(self.tensors[p + "gamma"], self.tensors[p + "beta"],
                              self.tensors[p + "running_mean"], self.tensors[p + "running_var"],
                              self.arch.bn_momentum, self.arch.bn_epsilon)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(seed: int | np.random.Generator = 0,
                arch: Architecture = Architecture()) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    F = arch.n_filters
    t: dict[str, np.ndarray] = {}
    for lead in arch.leads:
        for k in arch.windows:
            t[f"{lead}/conv{k}/kernel"] = glorot_uniform(rng, (k, 1, F), k * 1, k * F)
            t[f"{lead}/conv{k}/bias"] = np.zeros(F)
            t[f"{lead}/bn{k}/gamma"] = np.ones(F)
            t[f"{lead}/bn{k}/beta"] = np.zeros(F)
            t[f"{lead}/bn{k}/running_mean"] = np.zeros(F)
            t[f"{lead}/bn{k}/running_var"] = np.ones(F)
    nf, nc = arch.n_features, arch.n_classes
    t["dense/kernel"] = glorot_uniform(rng, (nf, nc), nf, nc)
    t["dense/bias"] = np.zeros(nc)
    return ModelParams(arch, t)


def model_forward(batch, params: ModelParams, mode: str = "infer"):
    """Run the network on ``batch`` of shape (B, n_leads, L).

    Returns ``(probs, gap_features, cache)`` with probs (B, n_classes) and
    features (B, n_features). Train mode updates the batch-norm running
    statistics held in ``params``.
    """
    arch = params.arch
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != len(arch.leads):
        raise ShapeMismatch(f"expected (B, {len(arch.leads)}, L), got {x.shape}")
    paths = []
    caches = []
    for i, lead in enumerate(arch.leads):
        xi = x[:, i, :, None]
        for k in arch.windows:
            h, c_conv = conv1d_forward(xi, ConvSpec(k, arch.n_filters),
                                       params[f"{lead}/conv{k}/kernel"],
                                       params[f"{lead}/conv{k}/bias"])
            h, c_bn = batchnorm_forward(h, params.bn_state(lead, k), mode)
            h, c_relu = relu_forward(h)
            h, c_pool = maxpool_forward(h, arch.pool, arch.pool)
            paths.append(h)
            caches.append((lead, k, c_conv, c_bn, c_relu, c_pool))
    concat = np.concatenate(paths, axis=-1)
    feats, c_gap = gap_forward(concat)
    probs, c_dense = dense_softmax_forward(feats, params["dense/kernel"], params["dense/bias"])
    return probs, feats, (caches, c_gap, c_dense, arch)


def model_backward(dprobs, cache, need_input_grad: bool = False) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor given the upstream gradient on the probabilities."""
    caches, c_gap, c_dense, arch = cache
    dfeat, dw, db = dense_softmax_backward(dprobs, c_dense)
    grads = {"dense/kernel": dw, "dense/bias": db}
    dconcat = gap_backward(dfeat, c_gap)
    F = arch.n_filters
    dinput = []
    for j, (lead, k, c_conv, c_bn, c_relu, c_pool) in enumerate(caches):
        d = maxpool_backward(dconcat[..., j * F:(j + 1) * F], c_pool)
        d = relu_backward(d, c_relu)
        d, grads[f"{lead}/bn{k}/gamma"], grads[f"{lead}/bn{k}/beta"] = batchnorm_backward(d, c_bn)
        dx, grads[f"{lead}/conv{k}/kernel"], grads[f"{lead}/conv{k}/bias"] = \
            conv1d_backward(d, c_conv, need_dx=need_input_grad)
        if need_input_grad:
            dinput.append(dx[..., 0])
    if need_input_grad:
        n_paths = len(arch.windows)
        grads["input"] = np.stack([sum(dinput[i * n_paths:(i + 1) * n_paths])
                                   for i in range(len(arch.leads))], axis=1)
    return grads


def predict_proba(x, params: ModelParams, batch_size: int = 256):
    """Infer-mode probabilities and GAP features, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float64)
    probs, feats = [], []
    for s in range(0, len(x), batch_size):
        p, f, _ = model_forward(x[s:s + batch_size], params, "infer")
        probs.append(p)
        feats.append(f)
    if not probs:
        nf = params.arch.n_features
        return np.zeros((0, params.arch.n_classes)), np.zeros((0, nf))
    return np.concatenate(probs), np.concatenate(feats)


# ---------------------------------------------------------------------------
# checkpoints: JSON header + flat little-endian float32 blob

def save_checkpoint(path: str | Path, params: ModelParams, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    blob_path = path.with_suffix(".f32")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, trainable in _names(params.arch):
            arr = params[name]
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                            "trainable": trainable})
            offset += arr.size
    header = {
        "format": "imicnn-checkpoint",
        "version": 1,
        "architecture": asdict(params.arch),
        "trainable_count": params.n_trainable(),
        "seed": seed,
        "dtype": "float32-le",
        "blob": blob_path.name,
        "tensors": entries,
        "extra": extra or {},
    }
    path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    header = json.loads(path.read_text())
    a = header["architecture"]
    arch = Architecture(leads=tuple(a["leads"]), windows=tuple(a["windows"]),
                        n_filters=a["n_filters"], n_classes=a["n_classes"], pool=a["pool"],
                        bn_momentum=a["bn_momentum"], bn_epsilon=a["bn_epsilon"])
    blob = np.fromfile(path.parent / header["blob"], dtype="<f4")
    tensors = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        chunk = blob[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise ShapeMismatch(f"checkpoint blob too short for {e['name']}")
        tensors[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)
    expected = [n for n, _ in _names(arch)]
    if list(tensors) != expected:
        raise ShapeMismatch("checkpoint tensor list does not match its architecture")
    return ModelParams(arch, tensors), header
