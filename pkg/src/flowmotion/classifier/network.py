"""Residual convolutional binary classifier with explicit forward/backward passes.

The network is an 18-layer-style residual net adapted to 2-channel flow input
and a single sigmoid output. Every layer is written out in numpy; gradients
are derived by hand and checked against finite differences in the tests.

Parameters live in a flat ``name -> array`` mapping. Convolutions carry no
bias because each one is followed by batch normalization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_EPS = 1e-7

Tensors = Dict[str, np.ndarray]


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 2
    stem_channels: int = 64
    stage_widths: Tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2)
    output_dim: int = 1
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if self.input_channels != 2:
            raise ValueError("flow input has exactly 2 channels")
        if self.output_dim != 1:
            raise ValueError("binary classifier has a single output")
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ValueError("stage_widths and blocks_per_stage must be non-empty and equal length")
        if min(self.stage_widths + self.blocks_per_stage) < 1 or self.stem_channels < 1:
            raise ValueError("widths and block counts must be >= 1")
        if self.stem_kernel < 1 or self.stem_stride < 1 or self.input_size < 1:
            raise ValueError("stem kernel, stride and input size must be >= 1")

    @classmethod
    def resnet18(cls) -> "NetConfig":
        return cls()

    @classmethod
    def tiny(cls, width: int = 4, input_size: int = 8) -> "NetConfig":
        """One stage, one block; small enough for brute-force checking."""
        return cls(
            stem_channels=width, stage_widths=(width,), blocks_per_stage=(1,),
            stem_kernel=3, stem_stride=1, stem_pool=False, input_size=input_size,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class BlockSpec:
    prefix: str
    in_ch: int
    out_ch: int
    stride: int

    @property
    def has_downsample(self) -> bool:
        return self.stride != 1 or self.in_ch != self.out_ch


def block_specs(cfg: NetConfig) -> List[BlockSpec]:
    specs = []
    in_ch = cfg.stem_channels
    for s, (width, n_blocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
        for b in range(n_blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            specs.append(BlockSpec(f"stage{s}.block{b}", in_ch, width, stride))
            in_ch = width
    return specs


@dataclass
class ModelParams:
    """Learnable weights plus batch-norm running statistics."""

    config: NetConfig
    weights: Tensors
    buffers: Tensors = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


def param_shapes(cfg: NetConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}

    def bn(prefix: str, ch: int) -> None:
        shapes[f"{prefix}.gamma"] = (ch,)
        shapes[f"{prefix}.beta"] = (ch,)

    k = cfg.stem_kernel
    shapes["stem.conv.weight"] = (cfg.stem_channels, cfg.input_channels, k, k)
    bn("stem.bn", cfg.stem_channels)
    for spec in block_specs(cfg):
        p = spec.prefix
        shapes[f"{p}.conv1.weight"] = (spec.out_ch, spec.in_ch, 3, 3)
        bn(f"{p}.bn1", spec.out_ch)
        shapes[f"{p}.conv2.weight"] = (spec.out_ch, spec.out_ch, 3, 3)
        bn(f"{p}.bn2", spec.out_ch)
        if spec.has_downsample:
            shapes[f"{p}.downsample.conv.weight"] = (spec.out_ch, spec.in_ch, 1, 1)
            bn(f"{p}.downsample.bn", spec.out_ch)
    shapes["fc.weight"] = (cfg.output_dim, cfg.stage_widths[-1])
    shapes["fc.bias"] = (cfg.output_dim,)
    return shapes


def bn_names(cfg: NetConfig) -> List[str]:
    return [name[: -len(".gamma")] for name in param_shapes(cfg) if name.endswith(".gamma")]


def init_params(cfg: NetConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform convolutions, unit/zero batch norm, zero final layer."""
    weights: Tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            weights[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".beta") or name.startswith("fc."):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    buffers: Tensors = {}
    for prefix in bn_names(cfg):
        ch = weights[f"{prefix}.gamma"].shape[0]
        buffers[f"{prefix}.running_mean"] = np.zeros(ch, dtype=dtype)
        buffers[f"{prefix}.running_var"] = np.ones(ch, dtype=dtype)
    return ModelParams(cfg, weights, buffers)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (win, xp.shape, w, stride, pad)


def conv2d_backward(dout: np.ndarray, cache):
    win, xp_shape, w, stride, pad = cache
    kh, kw = w.shape[2:]
    ho, wo = dout.shape[2:]
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:xp_shape[2] - pad, pad:xp_shape[3] - pad] if pad else dxp
    return dx, dw


def batchnorm_forward(x, gamma, beta, mean_buf, var_buf, training: bool):
    """Returns ``(out, cache, new_running_mean, new_running_var)``."""
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        new_mean = (1 - BN_MOMENTUM) * mean_buf + BN_MOMENTUM * mean
        new_var = (1 - BN_MOMENTUM) * var_buf + BN_MOMENTUM * unbiased
    else:
        mean, var = mean_buf, var_buf
        new_mean, new_var = mean_buf, var_buf
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training), new_mean.astype(x.dtype), new_var.astype(x.dtype)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not training:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def maxpool_forward(x: np.ndarray, k: int = 3, stride: int = 2, pad: int = 1):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (idx, xp.shape, k, stride, pad)


def maxpool_backward(dout: np.ndarray, cache):
    idx, xp_shape, k, stride, pad = cache
    ho, wo = dout.shape[2:]
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            mask = idx == i * k + j
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dout * mask
    return dxp[:, :, pad:xp_shape[2] - pad, pad:xp_shape[3] - pad]


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _check_batch(cfg: NetConfig, x: np.ndarray) -> None:
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("empty batch")


class _Tape:
    """Per-call record of layer caches, consumed by the backward pass."""

    def __init__(self, params: ModelParams, training: bool):
        self.p = params.weights
        self.buffers = params.buffers
        self.training = training
        self.caches: Dict[str, object] = {}
        self.new_buffers: Tensors = {}

    def conv(self, name: str, x, stride: int, pad: int):
        out, self.caches[name] = conv2d_forward(x, self.p[f"{name}.weight"], stride, pad)
        return out

    def bn(self, name: str, x):
        out, cache, rm, rv = batchnorm_forward(
            x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
            self.training,
        )
        self.caches[name] = cache
        self.new_buffers[f"{name}.running_mean"] = rm
        self.new_buffers[f"{name}.running_var"] = rv
        return out


def _forward(params: ModelParams, x: np.ndarray, training: bool):
    cfg = params.config
    _check_batch(cfg, x)
    x = x.astype(params.weights["fc.weight"].dtype, copy=False)
    t = _Tape(params, training)
    k = cfg.stem_kernel
    h = t.bn("stem.bn", t.conv("stem.conv", x, cfg.stem_stride, k // 2))
    t.caches["stem.relu"] = h > 0
    h = np.maximum(h, 0)
    if cfg.stem_pool:
        h, t.caches["stem.pool"] = maxpool_forward(h)
    for spec in block_specs(cfg):
        p = spec.prefix
        y = t.bn(f"{p}.bn1", t.conv(f"{p}.conv1", h, spec.stride, 1))
        t.caches[f"{p}.relu1"] = y > 0
        y = np.maximum(y, 0)
        y = t.bn(f"{p}.bn2", t.conv(f"{p}.conv2", y, 1, 1))
        if spec.has_downsample:
            shortcut = t.bn(f"{p}.downsample.bn", t.conv(f"{p}.downsample.conv", h, spec.stride, 0))
        else:
            shortcut = h
        y = y + shortcut
        t.caches[f"{p}.relu2"] = y > 0
        h = np.maximum(y, 0)
    t.caches["pool"] = h.shape
    feats = h.mean(axis=(2, 3))
    t.caches["fc"] = feats
    logits = feats @ t.p["fc.weight"].T + t.p["fc.bias"]
    return logits[:, 0], t


def logits(params: ModelParams, x: np.ndarray, training: bool = False) -> np.ndarray:
    return _forward(params, x, training)[0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Sigmoid in float64, kept strictly inside (0, 1)."""
    p = expit(np.asarray(z, dtype=np.float64))
    return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def forward(params: ModelParams, batch: np.ndarray, training: bool = False) -> np.ndarray:
    """Probability of Moving for each ROI in an ``(N, 2, S, S)`` batch."""
    return sigmoid(logits(params, batch, training))


def loss_bce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _backward(t: _Tape, params: ModelParams, dlogits: np.ndarray) -> Tensors:
    cfg = params.config
    p = params.weights
    grads: Tensors = {}

    def conv_bn_back(name_conv: str, name_bn: str, d):
        d, grads[f"{name_bn}.gamma"], grads[f"{name_bn}.beta"] = batchnorm_backward(d, t.caches[name_bn])
        d, grads[f"{name_conv}.weight"] = conv2d_backward(d, t.caches[name_conv])
        return d

    dl = dlogits.astype(p["fc.weight"].dtype)[:, None]
    feats = t.caches["fc"]
    grads["fc.weight"] = dl.T @ feats
    grads["fc.bias"] = dl.sum(axis=0)
    n, c, hh, ww = t.caches["pool"]
    dh = np.broadcast_to((dl @ p["fc.weight"])[:, :, None, None] / (hh * ww), (n, c, hh, ww))
    for spec in reversed(block_specs(cfg)):
        pre = spec.prefix
        dy = dh * t.caches[f"{pre}.relu2"]
        if spec.has_downsample:
            dshort = conv_bn_back(f"{pre}.downsample.conv", f"{pre}.downsample.bn", dy)
        else:
            dshort = dy
        d = conv_bn_back(f"{pre}.conv2", f"{pre}.bn2", dy)
        d = d * t.caches[f"{pre}.relu1"]
        d = conv_bn_back(f"{pre}.conv1", f"{pre}.bn1", d)
        dh = d + dshort
    if cfg.stem_pool:
        dh = maxpool_backward(dh, t.caches["stem.pool"])
    dh = dh * t.caches["stem.relu"]
    conv_bn_back("stem.conv", "stem.bn", dh)
    return {name: grads[name] for name in p}


def loss_and_grads(
    params: ModelParams, batch: np.ndarray, labels: np.ndarray, training: bool = True
) -> Tuple[float, Tensors, Tensors, np.ndarray]:
    """One forward/backward pass.

    Returns:
        ``(loss, grads, new_buffers, probs)``; ``new_buffers`` holds the
        batch-norm running statistics after this batch.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (batch.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {batch.shape[0]}")
    z, tape = _forward(params, batch, training)
    probs = sigmoid(z)
    loss = loss_bce(probs, labels)
    # clamped region contributes no gradient
    active = (probs >= BCE_EPS) & (probs <= 1 - BCE_EPS)
    dlogits = np.where(active, probs - labels, 0.0) / labels.shape[0]
    grads = _backward(tape, params, dlogits)
    return loss, grads, tape.new_buffers, probs


def backward(params: ModelParams, batch: np.ndarray, labels: np.ndarray, training: bool = True) -> Tensors:
    """Exact gradients of the mean BCE loss with respect to every weight."""
    return loss_and_grads(params, batch, labels, training)[1]
