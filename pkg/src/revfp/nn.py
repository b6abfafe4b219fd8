"""Numpy CNN regressor: layers with hand-written backward passes, Adam, checkpoints.

Activations are channels-last, ``(batch, bands, frames, channels)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, InvalidInputError, NumericalError

CHUNK_ROWS = 40_000

TARGET_MODES = ("volume", "rt60", "joint")
TARGET_KEYS = {"volume": ("log10_volume",), "rt60": ("log_rt60",), "joint": ("log10_volume", "log_rt60")}

DEFAULT_ARCH = {
    "time_kernel": 10,
    "time_pool": 2,
    "band_kernel": 3,
    "band_pool": 2,
    "widths": [8, 8, 16, 16, 32, 32],
    "time_layers": 4,
    "dropout": 0.5,
}


class Layer:
    params: tuple = ()

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class Conv2D(Layer):
    """Valid (unpadded) cross-correlation with bias."""

    def __init__(self, c_in: int, c_out: int, kernel, dtype=np.float32):
        self.kernel = tuple(int(k) for k in kernel)
        self.c_in, self.c_out = c_in, c_out
        kh, kw = self.kernel
        self.W = np.zeros((kh, kw, c_in, c_out), dtype=dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.params = (self.W, self.b)
        self.input_grad = True

    def spec(self):
        return {"kind": "conv2d", "kernel": list(self.kernel), "channels_in": self.c_in,
                "channels_out": self.c_out}

    def init(self, rng):
        fan_in = self.c_in * self.kernel[0] * self.kernel[1]
        lim = math.sqrt(6.0 / fan_in)
        self.W[...] = rng.uniform(-lim, lim, self.W.shape)
        self.b[...] = 0

    def output_shape(self, shape):
        h, w, c = shape
        return (h - self.kernel[0] + 1, w - self.kernel[1] + 1, self.c_out)

    def _cols(self, x):
        kh, kw = self.kernel
        p = sliding_window_view(x, (kh, kw), axis=(1, 2))  # B,H',W',C,kh,kw
        p = p.transpose(0, 1, 2, 4, 5, 3)  # B,H',W',kh,kw,C
        return p.reshape(-1, kh * kw * p.shape[-1]), p.shape[:3]

    def _chunk(self, x) -> int:
        # Keep im2col matrices cache-sized; large batched copies are memory bound.
        rows = max(1, (x.shape[1] - self.kernel[0] + 1) * (x.shape[2] - self.kernel[1] + 1))
        return max(1, CHUNK_ROWS // rows)

    def forward(self, x, train, rng):
        w2d = self.W.reshape(-1, self.c_out)
        step = self._chunk(x)
        parts = []
        for s in range(0, x.shape[0], step):
            cols, shape = self._cols(x[s:s + step])
            parts.append((cols @ w2d + self.b).reshape(*shape, self.c_out))
        return (parts[0] if len(parts) == 1 else np.concatenate(parts)), x

    def backward(self, dy, x):
        kh, kw = self.kernel
        dW = np.zeros((kh * kw * self.c_in, self.c_out), dtype=dy.dtype)
        db = dy.reshape(-1, self.c_out).sum(axis=0)
        dx = np.empty_like(x) if self.input_grad else None
        # Input gradient: full correlation of dy with the flipped, transposed kernel.
        w_flip = self.W[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, self.c_in)
        step = self._chunk(x)
        for s in range(0, x.shape[0], step):
            cols, _ = self._cols(x[s:s + step])
            d = dy[s:s + step]
            dW += cols.T @ d.reshape(-1, self.c_out)
            if dx is not None:
                padded = np.pad(d, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                qcols, shape = self._cols(padded)
                dx[s:s + step] = (qcols @ w_flip).reshape(*shape, self.c_in)
        return dx, (dW.reshape(self.W.shape), db)


class ReLU(Layer):
    def spec(self):
        return {"kind": "relu"}

    def forward(self, x, train, rng):
        return np.maximum(x, 0), x > 0

    def backward(self, dy, mask):
        return dy * mask, ()


class AvgPool(Layer):
    """Non-overlapping average pooling; incomplete trailing windows are dropped."""

    def __init__(self, pool):
        self.pool = tuple(int(p) for p in pool)

    def spec(self):
        return {"kind": "avg_pool", "pool": list(self.pool)}

    def output_shape(self, shape):
        h, w, c = shape
        return (h // self.pool[0], w // self.pool[1], c)

    def forward(self, x, train, rng):
        ph, pw = self.pool
        h2, w2 = x.shape[1] // ph, x.shape[2] // pw
        y = None
        for i in range(ph):
            for j in range(pw):
                part = x[:, i:h2 * ph:ph, j:w2 * pw:pw, :]
                y = part.copy() if y is None else y + part
        y *= 1.0 / (ph * pw)
        return y, x.shape

    def backward(self, dy, shape):
        ph, pw = self.pool
        h2, w2 = dy.shape[1], dy.shape[2]
        dx = np.zeros(shape, dtype=dy.dtype)
        g = dy * (1.0 / (ph * pw))
        for i in range(ph):
            for j in range(pw):
                dx[:, i:h2 * ph:ph, j:w2 * pw:pw, :] = g
        return dx, ()


class Flatten(Layer):
    def spec(self):
        return {"kind": "flatten"}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), ()


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) during training."""

    def __init__(self, rate: float):
        if not 0 <= rate < 1:
            raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def spec(self):
        return {"kind": "dropout", "rate": self.rate}

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, dy, keep):
        return (dy if keep is None else dy * keep), ()


class Dense(Layer):
    """Fully connected layer. ``init_scale`` multiplies the Glorot limit; the
    regression head uses 0 so early updates start from the bias alone."""

    def __init__(self, n_in: int, n_out: int, dtype=np.float32, init_scale: float = 1.0):
        self.n_in, self.n_out = n_in, n_out
        self.init_scale = init_scale
        self.W = np.zeros((n_in, n_out), dtype=dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.params = (self.W, self.b)

    def spec(self):
        return {"kind": "dense", "inputs": self.n_in, "outputs": self.n_out}

    def init(self, rng):
        lim = self.init_scale * math.sqrt(6.0 / (self.n_in + self.n_out))
        self.W[...] = rng.uniform(-lim, lim, self.W.shape)
        self.b[...] = 0

    def output_shape(self, shape):
        return (self.n_out,)

    def forward(self, x, train, rng):
        return x @ self.W + self.b, x

    def backward(self, dy, x):
        return dy @ self.W.T, (x.T @ dy, dy.sum(axis=0))


def layer_from_spec(spec: dict, dtype=np.float32) -> Layer:
    kind = spec["kind"]
    if kind == "conv2d":
        return Conv2D(spec["channels_in"], spec["channels_out"], spec["kernel"], dtype)
    if kind == "relu":
        return ReLU()
    if kind == "avg_pool":
        return AvgPool(spec["pool"])
    if kind == "flatten":
        return Flatten()
    if kind == "dropout":
        return Dropout(spec["rate"])
    if kind == "dense":
        return Dense(spec["inputs"], spec["outputs"], dtype)
    raise DataError(f"unknown layer kind {kind!r}")


@dataclass
class ForwardCache:
    entries: list
    version: int
    output: np.ndarray


class Network:
    """A feed-forward stack of layers with a flat parameter list."""

    def __init__(self, layers: Sequence[Layer], input_shape, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.dtype = np.dtype(dtype)
        self.version = 0
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            if min(shape) < 1:
                raise InvalidInputError(
                    f"input {self.input_shape} too small: layer {i} ({layer.spec()['kind']}) "
                    f"would produce shape {shape}"
                )
        self.output_dim = shape[0] if len(shape) == 1 else int(np.prod(shape))
        if self.layers and isinstance(self.layers[0], Conv2D):
            self.layers[0].input_grad = False

    @property
    def params(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def specs(self) -> list:
        return [layer.spec() for layer in self.layers]

    def init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng)
        self.version += 1

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None):
        """Run the stack on ``x`` shaped (batch, bands, frames, channels)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != self.input_shape:
            raise InvalidInputError(f"expected input {self.input_shape}, got {x.shape[1:]}")
        if train and rng is None:
            raise InvalidInputError("training-mode forward needs an rng for dropout")
        entries = []
        for layer in self.layers:
            x, c = layer.forward(x, train, rng)
            entries.append(c)
        return x, ForwardCache(entries, self.version, x)

    def predict_raw(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def backward(self, cache: ForwardCache, loss_grad: np.ndarray, l2: float = 0.0) -> List[np.ndarray]:
        """Parameter gradients of the loss, plus ``l2 * w`` for every parameter."""
        if cache.version != self.version:
            raise InvalidInputError("stale forward cache: parameters changed since the forward pass")
        dy = np.asarray(loss_grad, dtype=self.dtype)
        if dy.shape != cache.output.shape:
            raise InvalidInputError(f"loss gradient shape {dy.shape} != output {cache.output.shape}")
        grads_rev = []
        for layer, c in zip(reversed(self.layers), reversed(cache.entries)):
            dy, g = layer.backward(dy, c)
            grads_rev.append(g)
            if dy is None:
                break
        grads = [g for gs in reversed(grads_rev) for g in gs]
        if l2:
            grads = [g + l2 * p for g, p in zip(grads, self.params)]
        return grads


def build_network(input_bands: int, input_frames: int, outputs: int, input_channels: int = 1,
                  arch: Optional[dict] = None, dtype=np.float32) -> Network:
    """Four time-axis conv/pool stages, two band-axis conv/pool stages, dropout, dense."""
    a = dict(DEFAULT_ARCH, **(arch or {}))
    layers: List[Layer] = []
    c = input_channels
    for i, width in enumerate(a["widths"]):
        if i < a["time_layers"]:
            kernel, pool = (1, a["time_kernel"]), (1, a["time_pool"])
        else:
            kernel, pool = (a["band_kernel"], 1), (a["band_pool"], 1)
        layers += [Conv2D(c, width, kernel, dtype), ReLU(), AvgPool(pool)]
        c = width
    shape = (input_bands, input_frames, input_channels)
    for layer in layers:
        shape = layer.output_shape(shape)
        if min(shape) < 1:
            break
    flat = int(np.prod(shape)) if min(shape) >= 1 else 0
    layers += [Flatten(), Dropout(a["dropout"]), Dense(max(flat, 1), outputs, dtype, init_scale=0.0)]
    return Network(layers, (input_bands, input_frames, input_channels), dtype)


class Adam:
    """Bias-corrected Adam with PyTorch default constants."""

    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                bad = int(np.count_nonzero(~np.isfinite(g)))
                raise NumericalError(
                    f"non-finite gradient in parameter {i} (shape {g.shape}, {bad} bad values) "
                    f"at step {self.t + 1}, lr={lr:g}"
                )
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(net: Network, opt: Adam, grads: Sequence[np.ndarray], lr: float) -> None:
    opt.step(net.params, grads, lr)
    net.version += 1


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"RFCK"
CKPT_VERSION = 1


@dataclass
class ModelCheckpoint:
    """A trained network with the context needed to use it."""

    net: Network
    target_mode: str
    recipe: str
    normalization: Dict[str, float] = field(default_factory=dict)
    feature_stats: Optional[dict] = None
    config: dict = field(default_factory=dict)
    opt: Optional[Adam] = None

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise InvalidInputError(f"target mode must be one of {TARGET_MODES}")

    @property
    def target_keys(self):
        return TARGET_KEYS[self.target_mode]

    def header(self) -> dict:
        arrays = self._arrays()
        return {
            "layers": self.net.specs(),
            "input_shape": list(self.net.input_shape),
            "target_mode": self.target_mode,
            "recipe": self.recipe,
            "normalization": self.normalization,
            "feature_stats": self.feature_stats,
            "config": self.config,
            "adam": None if self.opt is None else {
                "t": self.opt.t, "beta1": self.opt.beta1, "beta2": self.opt.beta2, "eps": self.opt.eps},
            "blobs": [list(a.shape) for a in arrays],
        }

    def _arrays(self) -> List[np.ndarray]:
        arrays = list(self.net.params)
        if self.opt is not None:
            arrays += self.opt.m + self.opt.v
        return arrays

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(head)))
        buf.write(head)
        for a in self._arrays():
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> str:
        data = self.to_bytes()
        from pathlib import Path
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if data[:4] != CKPT_MAGIC:
            raise DataError("not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        try:
            head = json.loads(data[12:12 + hlen])
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt checkpoint header: {exc}") from exc
        layers = [layer_from_spec(s) for s in head["layers"]]
        net = Network(layers, head["input_shape"])
        opt = None
        if head.get("adam") is not None:
            a = head["adam"]
            opt = Adam(net.params, a["beta1"], a["beta2"], a["eps"])
            opt.t = a["t"]
        targets = list(net.params) + ([] if opt is None else opt.m + opt.v)
        pos = 12 + hlen
        if len(targets) != len(head["blobs"]):
            raise DataError("checkpoint blob count does not match its layers")
        for arr, shape in zip(targets, head["blobs"]):
            if list(arr.shape) != shape:
                raise DataError(f"checkpoint blob shape {shape} != layer shape {list(arr.shape)}")
            n = arr.size * 4
            if pos + n > len(data):
                raise DataError("checkpoint is truncated")
            arr[...] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=pos).reshape(arr.shape)
            pos += n
        if pos != len(data):
            raise DataError("checkpoint has trailing bytes")
        return cls(net, head["target_mode"], head["recipe"], head.get("normalization") or {},
                   head.get("feature_stats"), head.get("config") or {}, opt)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def build_model(input_channels: int, input_bands: int, target_mode: str, input_frames: int = 1997,
                seed: int = 0, recipe: str = "PlusPhase", arch: Optional[dict] = None,
                dtype=np.float32) -> ModelCheckpoint:
    if target_mode not in TARGET_MODES:
        raise InvalidInputError(f"target mode must be one of {TARGET_MODES}")
    if min(input_channels, input_bands, input_frames) < 1:
        raise InvalidInputError("input dimensions must be positive")
    outputs = 2 if target_mode == "joint" else 1
    net = build_network(input_bands, input_frames, outputs, input_channels, arch, dtype)
    net.init(seed)
    return ModelCheckpoint(net, target_mode, recipe, config={"seed": seed, "arch": dict(DEFAULT_ARCH, **(arch or {}))})


def predict(model: ModelCheckpoint, features: np.ndarray) -> Dict[str, np.ndarray]:
    """Physical-unit estimates (``volume_m3`` and/or ``rt60_s``) for a feature batch.

    ``features`` is (batch, rows, frames), already standardised.
    """
    raw = model.net.predict_raw(np.asarray(features))
    return outputs_to_physical(model, raw)


def outputs_to_labels(model: ModelCheckpoint, raw: np.ndarray) -> Dict[str, np.ndarray]:
    raw = np.asarray(raw, dtype=np.float64).reshape(len(raw), -1)
    out = {}
    for i, key in enumerate(model.target_keys):
        col = raw[:, i]
        if model.target_mode == "joint":
            if key not in model.normalization:
                raise InvalidInputError(f"checkpoint lacks normalization constant for {key}")
            col = col * model.normalization[key]
        out[key] = col
    return out


def labels_to_physical(labels: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    out = {}
    if "log10_volume" in labels:
        out["volume_m3"] = 10.0 ** np.asarray(labels["log10_volume"])
    if "log_rt60" in labels:
        out["rt60_s"] = np.exp(np.asarray(labels["log_rt60"]))
    return out


def outputs_to_physical(model: ModelCheckpoint, raw: np.ndarray) -> Dict[str, np.ndarray]:
    return labels_to_physical(outputs_to_labels(model, raw))
