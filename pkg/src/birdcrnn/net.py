"""Convolutional-recurrent classifier with an exact hand-written backward pass.

Architecture, applied to one T x n_mels feature matrix at a time:

    conv blocks (2-D same-padded conv -> batch norm -> ReLU ->
                 non-overlapping max pool over frequency, + dropout)
    -> activations stacked over frequency into a T x (maps * bands) sequence
    -> unidirectional GRU layers (or shared-weight feedforward layers for
       the CNN baseline), dropout on each layer input
    -> temporal max pooling over all frames
    -> single sigmoid unit giving the clip-level bird probability

Batch normalization statistics are taken over all time-frequency positions
of a clip per feature map. backward() consumes the ForwardTrace of a
train-mode forward() and returns exact reverse-mode gradients, verified
against central finite differences by gradient_check().

Model files ("BADC") store the JSON config followed by float64 tensors in
canonical order: per conv layer kernel, bias, gamma, beta, running_mean,
running_var; per GRU layer W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h
(feedforward layers: W, b); then output weight and bias.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError, TruncatedError
from .fileio import atomic_write_bytes, atomic_write_text

MODEL_MAGIC = b"BADC"
MODEL_VERSION = 1
BN_MOMENTUM = 0.99
BN_EPS = 1e-5

GradientSet = dict[str, np.ndarray]


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class ModelConfig:
    n_feature_maps: int = 96
    conv_pooling: tuple[int, ...] = (5, 4, 2)
    kernel: tuple[int, int] = (3, 3)
    n_recurrent_layers: int = 1
    recurrent_type: str = "gru"  # "gru" | "feedforward"
    dropout_rate: float = 0.25
    n_mels: int = 40
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_pooling", tuple(int(p) for p in self.conv_pooling))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if len(self.conv_pooling) not in (1, 2, 3, 4):
            raise ConfigError(f"conv_pooling must list 1-4 pool sizes, got {self.conv_pooling}")
        if any(p < 1 for p in self.conv_pooling):
            raise ConfigError(f"pool sizes must be >= 1, got {self.conv_pooling}")
        bands = self.n_mels
        for p in self.conv_pooling:
            if bands % p:
                raise ConfigError(
                    f"pooling {self.conv_pooling} does not divide {self.n_mels} bands evenly "
                    f"(stuck at {bands} % {p})"
                )
            bands //= p
        if len(self.kernel) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"kernel must be a pair of odd positive integers, got {self.kernel}")
        if not (0 <= self.dropout_rate < 1):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.recurrent_type not in ("gru", "feedforward"):
            raise ConfigError(f"recurrent_type must be 'gru' or 'feedforward', got {self.recurrent_type!r}")
        if self.n_recurrent_layers < 0 or self.n_feature_maps < 1 or self.n_mels < 1:
            raise ConfigError("n_recurrent_layers must be >= 0 and widths positive")

    @property
    def n_conv_layers(self) -> int:
        return len(self.conv_pooling)

    @property
    def band_progression(self) -> tuple[int, ...]:
        """Frequency band count after each conv block, starting from n_mels."""
        bands = [self.n_mels]
        for p in self.conv_pooling:
            bands.append(bands[-1] // p)
        return tuple(bands)

    @property
    def conv_output_bands(self) -> int:
        return self.band_progression[-1]

    @property
    def recurrent_input_size(self) -> int:
        return self.n_feature_maps * self.conv_output_bands

    @property
    def classifier_input_size(self) -> int:
        if self.n_recurrent_layers > 0:
            return self.n_feature_maps
        return self.recurrent_input_size

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        doc = json.loads(text)
        doc["conv_pooling"] = tuple(doc["conv_pooling"])
        doc["kernel"] = tuple(doc["kernel"])
        return cls(**doc)


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (maps_out, maps_in, k_t, k_f)
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    pool: int


@dataclass
class GruLayer:
    W_z: np.ndarray  # (H, D)
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray  # (H, H)
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray  # (H,)
    b_r: np.ndarray
    b_h: np.ndarray


@dataclass
class DenseSeqLayer:
    """Shared-weight feedforward layer applied identically at every timestep."""

    W: np.ndarray  # (H, D)
    b: np.ndarray  # (H,)


@dataclass
class CrnnModel:
    config: ModelConfig
    conv_layers: list[ConvLayer]
    recurrent_layers: list[GruLayer | DenseSeqLayer]
    out_weight: np.ndarray  # (classifier_input_size,)
    out_bias: np.ndarray  # (1,)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Learnable tensors in canonical order (running stats excluded)."""
        out: list[tuple[str, np.ndarray]] = []
        for i, layer in enumerate(self.conv_layers):
            out += [
                (f"conv{i}.kernel", layer.kernel),
                (f"conv{i}.bias", layer.bias),
                (f"conv{i}.gamma", layer.gamma),
                (f"conv{i}.beta", layer.beta),
            ]
        for i, layer in enumerate(self.recurrent_layers):
            if isinstance(layer, GruLayer):
                for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"):
                    out.append((f"rec{i}.{name}", getattr(layer, name)))
            else:
                out += [(f"rec{i}.W", layer.W), (f"rec{i}.b", layer.b)]
        out += [("out.weight", self.out_weight), ("out.bias", self.out_bias)]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def copy(self) -> "CrnnModel":
        return copy.deepcopy(self)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_model(config: ModelConfig) -> CrnnModel:
    """Glorot-uniform weights, zero biases, identity batch norm; deterministic in config.seed."""
    rng = np.random.default_rng(config.seed)
    kt, kf = config.kernel
    maps = config.n_feature_maps
    conv_layers = []
    for i, pool in enumerate(config.conv_pooling):
        maps_in = 1 if i == 0 else maps
        conv_layers.append(
            ConvLayer(
                kernel=_glorot(rng, (maps, maps_in, kt, kf), maps_in * kt * kf, maps * kt * kf),
                bias=np.zeros(maps),
                gamma=np.ones(maps),
                beta=np.zeros(maps),
                running_mean=np.zeros(maps),
                running_var=np.ones(maps),
                pool=pool,
            )
        )
    recurrent_layers: list[GruLayer | DenseSeqLayer] = []
    size = config.recurrent_input_size
    for _ in range(config.n_recurrent_layers):
        if config.recurrent_type == "gru":
            recurrent_layers.append(
                GruLayer(
                    W_z=_glorot(rng, (maps, size), size, maps),
                    W_r=_glorot(rng, (maps, size), size, maps),
                    W_h=_glorot(rng, (maps, size), size, maps),
                    U_z=_glorot(rng, (maps, maps), maps, maps),
                    U_r=_glorot(rng, (maps, maps), maps, maps),
                    U_h=_glorot(rng, (maps, maps), maps, maps),
                    b_z=np.zeros(maps),
                    b_r=np.zeros(maps),
                    b_h=np.zeros(maps),
                )
            )
        else:
            recurrent_layers.append(
                DenseSeqLayer(W=_glorot(rng, (maps, size), size, maps), b=np.zeros(maps))
            )
        size = maps
    width = config.classifier_input_size
    return CrnnModel(
        config=config,
        conv_layers=conv_layers,
        recurrent_layers=recurrent_layers,
        out_weight=_glorot(rng, (width,), width, 1),
        out_bias=np.zeros(1),
    )


# --- layer forward/backward --------------------------------------------------


@dataclass
class ConvCache:
    x_in: np.ndarray
    conv: np.ndarray
    mean: np.ndarray
    inv_std: np.ndarray
    relu_mask: np.ndarray
    pool_argmax: np.ndarray
    dropout_mask: np.ndarray | None
    train_mode: bool


@dataclass
class GruCache:
    x_used: np.ndarray
    dropout_mask: np.ndarray | None
    h0: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray
    h: np.ndarray


@dataclass
class DenseSeqCache:
    x_used: np.ndarray
    dropout_mask: np.ndarray | None
    h: np.ndarray


@dataclass
class ForwardTrace:
    mode: str
    conv: list[ConvCache]
    recurrent: list[GruCache | DenseSeqCache]
    stack_shape: tuple[int, int, int]
    pooled: np.ndarray
    pool_argmax: np.ndarray
    seq_len: int
    logit: float
    probability: float


def _conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 2-D convolution via im2col."""
    maps_out, maps_in, kt, kf = kernel.shape
    if x.shape[0] != maps_in:
        raise ShapeError(f"conv expects {maps_in} input maps, got {x.shape[0]}")
    _, t, f = x.shape
    padded = np.pad(x, ((0, 0), (kt // 2, kt // 2), (kf // 2, kf // 2)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kt, kf), axis=(1, 2))
    patches = windows.transpose(1, 2, 0, 3, 4).reshape(t * f, maps_in * kt * kf)
    out = patches @ kernel.reshape(maps_out, -1).T + bias
    return out.reshape(t, f, maps_out).transpose(2, 0, 1)


def _conv2d_backward(
    d_out: np.ndarray, x_in: np.ndarray, kernel: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    maps_out, maps_in, kt, kf = kernel.shape
    _, t, f = x_in.shape
    padded = np.pad(x_in, ((0, 0), (kt // 2, kt // 2), (kf // 2, kf // 2)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kt, kf), axis=(1, 2))
    patches = windows.transpose(1, 2, 0, 3, 4).reshape(t * f, maps_in * kt * kf)
    d_flat = d_out.transpose(1, 2, 0).reshape(t * f, maps_out)
    d_kernel = (d_flat.T @ patches).reshape(kernel.shape)
    d_bias = d_flat.sum(axis=0)
    d_windows = (d_flat @ kernel.reshape(maps_out, -1)).reshape(t, f, maps_in, kt, kf).transpose(2, 0, 1, 3, 4)
    d_padded = np.zeros_like(padded)
    for i in range(kt):
        for j in range(kf):
            d_padded[:, i : i + t, j : j + f] += d_windows[:, :, :, i, j]
    return d_padded[:, kt // 2 : kt // 2 + t, kf // 2 : kf // 2 + f], d_kernel, d_bias


def _bn_relu(x: np.ndarray, layer: ConvLayer, mode: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (post-ReLU activations, stats mean, stats inv_std, active mask)."""
    if mode == "train":
        mean = x.mean(axis=(1, 2))
        var = x.var(axis=(1, 2))
        layer.running_mean *= BN_MOMENTUM
        layer.running_mean += (1 - BN_MOMENTUM) * mean
        layer.running_var *= BN_MOMENTUM
        layer.running_var += (1 - BN_MOMENTUM) * var
    else:
        mean = layer.running_mean
        var = layer.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = layer.gamma[:, None, None] * x_hat + layer.beta[:, None, None]
    mask = y > 0
    return np.where(mask, y, 0.0), mean, inv_std, mask


def _freq_max_pool(x: np.ndarray, pool: int) -> tuple[np.ndarray, np.ndarray]:
    maps, t, f = x.shape
    if f % pool:
        raise ShapeError(f"{f} frequency bands not divisible by pool size {pool}")
    grouped = x.reshape(maps, t, f // pool, pool)
    argmax = grouped.argmax(axis=3)
    pooled = np.take_along_axis(grouped, argmax[..., None], axis=3)[..., 0]
    return pooled, argmax


def _dropout_mask(rng: np.random.Generator | None, shape: tuple[int, ...], rate: float) -> np.ndarray:
    if rng is None:
        raise ConfigError("train-mode forward with dropout_rate > 0 requires an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def conv_block_forward(
    x: np.ndarray,
    layer: ConvLayer,
    mode: str,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ConvCache]:
    """conv -> batch norm -> ReLU -> frequency max pool (-> inverted dropout in train mode).

    Train mode normalizes with this clip's time-frequency statistics per map
    and folds them into the running estimates; infer mode uses the stored
    running statistics.
    """
    conv = _conv2d(x, layer.kernel, layer.bias)
    relu, mean, inv_std, relu_mask = _bn_relu(conv, layer, mode)
    pooled, argmax = _freq_max_pool(relu, layer.pool)
    mask = None
    if mode == "train" and dropout_rate > 0.0:
        mask = _dropout_mask(rng, pooled.shape, dropout_rate)
        pooled = pooled * mask
    cache = ConvCache(
        x_in=x, conv=conv, mean=mean, inv_std=inv_std, relu_mask=relu_mask,
        pool_argmax=argmax, dropout_mask=mask, train_mode=(mode == "train"),
    )
    return pooled, cache


def conv_block_backward(d_out: np.ndarray, layer: ConvLayer, cache: ConvCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    if not cache.train_mode:
        raise DataError("backward requires a train-mode trace")
    if cache.dropout_mask is not None:
        d_out = d_out * cache.dropout_mask
    maps, t, f = cache.conv.shape
    grouped = np.zeros((maps, t, f // layer.pool, layer.pool))
    np.put_along_axis(grouped, cache.pool_argmax[..., None], d_out[..., None], axis=3)
    d_relu = grouped.reshape(maps, t, f)

    x_hat = (cache.conv - cache.mean[:, None, None]) * cache.inv_std[:, None, None]
    d_bn = d_relu * cache.relu_mask

    # Batch-norm backward through the per-clip statistics (m positions per map).
    m = t * f
    d_gamma = (d_bn * x_hat).sum(axis=(1, 2))
    d_beta = d_bn.sum(axis=(1, 2))
    scale = (layer.gamma * cache.inv_std / m)[:, None, None]
    d_conv = scale * (m * d_bn - d_beta[:, None, None] - x_hat * d_gamma[:, None, None])

    d_x, d_kernel, d_bias = _conv2d_backward(d_conv, cache.x_in, layer.kernel)
    return d_x, {"kernel": d_kernel, "bias": d_bias, "gamma": d_gamma, "beta": d_beta}


def gru_layer_forward(
    x_seq: np.ndarray,
    layer: GruLayer,
    mode: str,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    h0: np.ndarray | None = None,
) -> tuple[np.ndarray, GruCache]:
    """Left-to-right GRU over a T x D sequence.

        z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
        r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
        g_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
        h_t = (1 - z_t) * h_{t-1} + z_t * g_t

    Dropout (train mode) applies to the layer input only, with one mask
    shared across all timesteps; the recurrent connection is untouched.
    ``h0`` defaults to zeros and exists as a test hook.
    """
    t_len, d = x_seq.shape
    h_size = layer.W_z.shape[0]
    if layer.W_z.shape[1] != d:
        raise ShapeError(f"GRU expects input size {layer.W_z.shape[1]}, got {d}")
    mask = None
    x_used = x_seq
    if mode == "train" and dropout_rate > 0.0:
        mask = _dropout_mask(rng, (d,), dropout_rate)
        x_used = x_seq * mask
    wz = x_used @ layer.W_z.T + layer.b_z
    wr = x_used @ layer.W_r.T + layer.b_r
    wh = x_used @ layer.W_h.T + layer.b_h
    z = np.empty((t_len, h_size))
    r = np.empty((t_len, h_size))
    g = np.empty((t_len, h_size))
    h = np.empty((t_len, h_size))
    h_prev = np.zeros(h_size) if h0 is None else np.asarray(h0, dtype=np.float64)
    h0_arr = h_prev.copy()
    for t in range(t_len):
        z[t] = sigmoid(wz[t] + layer.U_z @ h_prev)
        r[t] = sigmoid(wr[t] + layer.U_r @ h_prev)
        g[t] = np.tanh(wh[t] + layer.U_h @ (r[t] * h_prev))
        h[t] = (1.0 - z[t]) * h_prev + z[t] * g[t]
        h_prev = h[t]
    return h, GruCache(x_used=x_used, dropout_mask=mask, h0=h0_arr, z=z, r=r, h_tilde=g, h=h)


def gru_layer_backward(d_h_seq: np.ndarray, layer: GruLayer, cache: GruCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagation through time; returns input gradients and parameter gradients."""
    t_len, h_size = cache.h.shape
    h_prev_seq = np.vstack([cache.h0, cache.h[:-1]])
    da_z = np.empty((t_len, h_size))
    da_r = np.empty((t_len, h_size))
    da_h = np.empty((t_len, h_size))
    carry = np.zeros(h_size)
    for t in range(t_len - 1, -1, -1):
        dh = d_h_seq[t] + carry
        z, r, g = cache.z[t], cache.r[t], cache.h_tilde[t]
        h_prev = h_prev_seq[t]
        da_h[t] = dh * z * (1.0 - g**2)
        d_rh = layer.U_h.T @ da_h[t]
        da_r[t] = d_rh * h_prev * r * (1.0 - r)
        da_z[t] = dh * (g - h_prev) * z * (1.0 - z)
        carry = dh * (1.0 - z) + d_rh * r + layer.U_z.T @ da_z[t] + layer.U_r.T @ da_r[t]
    rh = cache.r * h_prev_seq
    grads = {
        "W_z": da_z.T @ cache.x_used,
        "W_r": da_r.T @ cache.x_used,
        "W_h": da_h.T @ cache.x_used,
        "U_z": da_z.T @ h_prev_seq,
        "U_r": da_r.T @ h_prev_seq,
        "U_h": da_h.T @ rh,
        "b_z": da_z.sum(axis=0),
        "b_r": da_r.sum(axis=0),
        "b_h": da_h.sum(axis=0),
    }
    d_x = da_z @ layer.W_z + da_r @ layer.W_r + da_h @ layer.W_h
    if cache.dropout_mask is not None:
        d_x = d_x * cache.dropout_mask
    return d_x, grads


def dense_seq_forward(
    x_seq: np.ndarray,
    layer: DenseSeqLayer,
    mode: str,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, DenseSeqCache]:
    """Baseline timestep-shared feedforward layer: h_t = tanh(W x_t + b)."""
    if layer.W.shape[1] != x_seq.shape[1]:
        raise ShapeError(f"dense layer expects input size {layer.W.shape[1]}, got {x_seq.shape[1]}")
    mask = None
    x_used = x_seq
    if mode == "train" and dropout_rate > 0.0:
        mask = _dropout_mask(rng, (x_seq.shape[1],), dropout_rate)
        x_used = x_seq * mask
    h = np.tanh(x_used @ layer.W.T + layer.b)
    return h, DenseSeqCache(x_used=x_used, dropout_mask=mask, h=h)


def dense_seq_backward(d_h_seq: np.ndarray, layer: DenseSeqLayer, cache: DenseSeqCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    da = d_h_seq * (1.0 - cache.h**2)
    grads = {"W": da.T @ cache.x_used, "b": da.sum(axis=0)}
    d_x = da @ layer.W
    if cache.dropout_mask is not None:
        d_x = d_x * cache.dropout_mask
    return d_x, grads


def temporal_max_pool(seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit maximum over all timesteps; ties resolve to the earliest frame."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"temporal max pool needs a non-empty T x H sequence, got shape {seq.shape}")
    argmax = seq.argmax(axis=0)
    return seq[argmax, np.arange(seq.shape[1])], argmax


# --- whole-network forward/backward -------------------------------------------


def forward(
    model: CrnnModel,
    features: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> tuple[float, ForwardTrace]:
    """Clip-level bird probability for a T x n_mels feature matrix.

    Train mode draws dropout masks from ``rng`` and updates batch-norm
    running statistics in place; infer mode is a pure function of
    (model, features).
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ShapeError(f"features must be a non-empty T x F matrix, got shape {features.shape}")
    if features.shape[1] != model.config.n_mels:
        raise ShapeError(f"expected {model.config.n_mels} bands, got {features.shape[1]}")

    rate = model.config.dropout_rate
    x = features[None, :, :]  # one input channel: (1, T, F)
    conv_caches = []
    for layer in model.conv_layers:
        x, cache = conv_block_forward(x, layer, mode, rate, rng)
        conv_caches.append(cache)

    maps, t_len, bands = x.shape
    seq = x.transpose(1, 0, 2).reshape(t_len, maps * bands)
    rec_caches: list[GruCache | DenseSeqCache] = []
    for layer in model.recurrent_layers:
        if isinstance(layer, GruLayer):
            seq, cache = gru_layer_forward(seq, layer, mode, rate, rng)
        else:
            seq, cache = dense_seq_forward(seq, layer, mode, rate, rng)
        rec_caches.append(cache)

    pooled, argmax = temporal_max_pool(seq)
    logit = float(model.out_weight @ pooled + model.out_bias[0])
    probability = float(sigmoid(np.float64(logit)))
    trace = ForwardTrace(
        mode=mode, conv=conv_caches, recurrent=rec_caches,
        stack_shape=(maps, t_len, bands), pooled=pooled, pool_argmax=argmax,
        seq_len=t_len, logit=logit, probability=probability,
    )
    return probability, trace


def backward(model: CrnnModel, trace: ForwardTrace, d_probability: float) -> GradientSet:
    """Exact gradients of d_probability * probability w.r.t. every learnable tensor."""
    if trace.mode != "train":
        raise DataError("backward requires a trace from forward(mode='train')")
    if len(trace.conv) != len(model.conv_layers) or len(trace.recurrent) != len(model.recurrent_layers):
        raise DataError("trace does not match model layer structure")
    grads: GradientSet = {}
    p = trace.probability
    d_logit = d_probability * p * (1.0 - p)
    grads["out.weight"] = d_logit * trace.pooled
    grads["out.bias"] = np.array([d_logit])
    d_pooled = d_logit * model.out_weight

    width = trace.pooled.size
    d_seq = np.zeros((trace.seq_len, width))
    d_seq[trace.pool_argmax, np.arange(width)] = d_pooled

    for i in range(len(model.recurrent_layers) - 1, -1, -1):
        layer = model.recurrent_layers[i]
        cache = trace.recurrent[i]
        if isinstance(layer, GruLayer):
            d_seq, layer_grads = gru_layer_backward(d_seq, layer, cache)
        else:
            d_seq, layer_grads = dense_seq_backward(d_seq, layer, cache)
        for name, g in layer_grads.items():
            grads[f"rec{i}.{name}"] = g

    maps, t_len, bands = trace.stack_shape
    d_x = d_seq.reshape(t_len, maps, bands).transpose(1, 0, 2)
    for i in range(len(model.conv_layers) - 1, -1, -1):
        d_x, layer_grads = conv_block_backward(d_x, model.conv_layers[i], trace.conv[i])
        for name, g in layer_grads.items():
            grads[f"conv{i}.{name}"] = g
    return grads


def zero_gradients(model: CrnnModel) -> GradientSet:
    return {name: np.zeros_like(p) for name, p in model.named_parameters()}


def accumulate_gradients(total: GradientSet, part: GradientSet) -> None:
    for name, g in part.items():
        total[name] += g


def scale_gradients(grads: GradientSet, factor: float) -> None:
    for g in grads.values():
        g *= factor


# --- verification and export ---------------------------------------------------


def _branch_signature(trace: ForwardTrace) -> bytes:
    """ReLU activation patterns plus every argmax decision of a forward pass."""
    parts = [trace.pool_argmax.tobytes()]
    for cache in trace.conv:
        parts.append(np.packbits(cache.relu_mask).tobytes())
        parts.append(cache.pool_argmax.astype(np.int8).tobytes())
    return b"".join(parts)


def finite_difference_gradients(
    model: CrnnModel,
    features: np.ndarray,
    step: float = 1e-4,
) -> GradientSet:
    """Central-difference gradients of the train-mode probability.

    The probability is piecewise smooth: ReLU masks and max-pool argmaxes
    split parameter space into branches. A probe that straddles a branch
    boundary measures a meaningless blend of slopes, so whenever the two
    evaluations disagree with the base point on any branch decision the
    step shrinks (to at most step/1e4) until the window is smooth.
    """
    _, base_trace = forward(model, features, mode="train")
    base_sig = _branch_signature(base_trace)
    numeric: GradientSet = {}
    for name, param in model.named_parameters():
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            h = step
            for _ in range(5):
                param[idx] = original + h
                p_plus, trace_plus = forward(model, features, mode="train")
                param[idx] = original - h
                p_minus, trace_minus = forward(model, features, mode="train")
                param[idx] = original
                if _branch_signature(trace_plus) == base_sig and _branch_signature(trace_minus) == base_sig:
                    break
                h /= 10.0
            grad[idx] = (p_plus - p_minus) / (2.0 * h)
        numeric[name] = grad
    return numeric


def gradient_check(
    config: ModelConfig,
    seed: int,
    t_len: int = 7,
    steps: tuple[float, ...] = (1e-4, 1e-5),
) -> float:
    """Max relative error of backward() against central finite differences.

    Dropout is forced to zero so both routes see the same function; batch
    norm runs in train mode on a fixed input. Each parameter keeps its best
    measurement across the probe widths: the wide probe keeps roundoff
    below the 1e-8 error floor (parameters whose exact gradient is zero,
    like conv biases under batch norm), the narrow probe keeps truncation
    negligible for small but curving gradients. A wrong gradient fails at
    every width.
    """
    config = dataclasses.replace(config, dropout_rate=0.0, seed=seed)
    model = init_model(config)
    rng = np.random.default_rng(seed + 1)
    features = rng.standard_normal((t_len, config.n_mels))
    _, trace = forward(model, features, mode="train")
    analytic = backward(model, trace, 1.0)

    best: dict[str, np.ndarray] = {}
    for step in steps:
        numeric = finite_difference_gradients(model, features, step=step)
        for name in analytic:
            ga = analytic[name]
            gn = numeric[name]
            err = np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
            best[name] = err if name not in best else np.minimum(best[name], err)
    return max(float(err.max()) for err in best.values())


def export_activations(model: CrnnModel, features: np.ndarray, conv_layer: int, filter_index: int) -> np.ndarray:
    """Post-ReLU, pre-pooling activation map of one filter, infer mode."""
    if not (0 <= conv_layer < len(model.conv_layers)):
        raise ConfigError(f"conv layer index {conv_layer} out of range")
    if not (0 <= filter_index < model.config.n_feature_maps):
        raise ConfigError(f"filter index {filter_index} out of range")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != model.config.n_mels:
        raise ShapeError(f"expected {model.config.n_mels} bands, got {features.shape[1]}")
    x = features[None, :, :].copy()
    for i, layer in enumerate(model.conv_layers):
        conv = _conv2d(x, layer.kernel, layer.bias)
        relu, _, _, _ = _bn_relu(conv, layer, "infer")
        if i == conv_layer:
            return relu[filter_index].copy()
        x, _ = _freq_max_pool(relu, layer.pool)
    raise AssertionError("unreachable")


def write_activation_csv(matrix: np.ndarray, path: Path | str) -> None:
    lines = [",".join(f"{v:.9g}" for v in row) for row in np.atleast_2d(matrix)]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


# --- serialization ---------------------------------------------------------------


def _all_tensors(model: CrnnModel) -> list[np.ndarray]:
    """Every stored tensor (learnable + running stats) in canonical file order."""
    out: list[np.ndarray] = []
    for layer in model.conv_layers:
        out += [layer.kernel, layer.bias, layer.gamma, layer.beta, layer.running_mean, layer.running_var]
    for layer in model.recurrent_layers:
        if isinstance(layer, GruLayer):
            out += [layer.W_z, layer.W_r, layer.W_h, layer.U_z, layer.U_r, layer.U_h,
                    layer.b_z, layer.b_r, layer.b_h]
        else:
            out += [layer.W, layer.b]
    out += [model.out_weight, model.out_bias]
    return out


def save_model(model: CrnnModel, path: Path | str) -> None:
    config_bytes = model.config.to_json().encode("utf-8")
    blob = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(config_bytes)) + config_bytes
    blob += b"".join(t.astype("<f8").tobytes() for t in _all_tensors(model))
    atomic_write_bytes(Path(path), blob)


def load_model(path: Path | str) -> tuple[CrnnModel, ModelConfig]:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad model-file magic")
    version, config_len = struct.unpack_from("<HI", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model-file version {version}")
    if 10 + config_len > len(data):
        raise TruncatedError(f"{path}: truncated config block")
    try:
        config = ModelConfig.from_json(data[10 : 10 + config_len].decode("utf-8"))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed model config ({exc})") from exc
    model = init_model(config)
    pos = 10 + config_len
    for tensor in _all_tensors(model):
        nbytes = tensor.size * 8
        if pos + nbytes > len(data):
            raise TruncatedError(f"{path}: truncated parameter block")
        tensor[...] = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(tensor.shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    return model, config
