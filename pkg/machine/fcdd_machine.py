# machine/fcdd_machine.py
"""FCDD anomaly scorer: a small fully convolutional network with a pseudo-Huber head.

Network contract (weights JSON must mirror it):
 - Layers are 2-D convolutions with square kernels, zero padding (k - 1) // 2
   and the layer's stride. Output size is (H + 2p - k) // s + 1, which keeps
   "same" size for stride 1 and halves even sizes for k=3, s=2.
 - Every layer but the last is followed by a leaky ReLU; the last layer has one
   output channel and no activation, its output is phi(X).
 - Default architecture: conv 3x3x8 -> conv 3x3x16 stride 2 -> conv 1x1x1,
   total stride 2, so the heatmap is (height / 2, width / 2).

Heatmap  A = sqrt(phi^2 + 1) - 1   (evaluated as phi^2 / (sqrt(phi^2 + 1) + 1))
Score    z = mean(A)
Loss     mean_i (1 - y_i) z_i - y_i log(max(1 - exp(-z_i), eps))

Everything runs in float64. Batches are reduced by numpy tensordot over the
batch axis in sample order, so gradients are reproducible bit-for-bit.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from machine.frame_io import write_overlay, write_pgm
from machine.sewer_spec import (
    STREAM_AUGMENT,
    STREAM_INIT,
    STREAM_TRAIN,
    ConfigurationError,
    Frame,
    PathLike,
    ScoreStream,
    SewerFormatError,
    ShapeError,
    SpecificationError,
    read_json,
    substream,
    write_json,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
# (in_channels, out_channels, kernel_size, stride)
DEFAULT_ARCHITECTURE: Tuple[Tuple[int, int, int, int], ...] = (
    (1, 8, 3, 1),
    (8, 16, 3, 2),
    (16, 1, 1, 1),
)

UPSAMPLE_KERNEL_SIZE = 4
UPSAMPLE_SIGMA = 1.0

AUGMENT_MAX_ROTATION_DEG = 10.0
AUGMENT_MAX_SHIFT_PX = 3
AUGMENT_MAX_JITTER = 0.1
AUGMENT_NOISE_SIGMA = 0.02


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)
    stride: int = 1

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"Kernel must be (out, in, k, k), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"Bias shape {self.bias.shape} does not match {self.kernel.shape[0]} outputs")
        if int(self.stride) < 1:
            raise ShapeError("Stride must be >= 1")

    @property
    def in_channels(self) -> int:
        return int(self.kernel.shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def kernel_size(self) -> int:
        return int(self.kernel.shape[2])

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1


@dataclass
class AdamState:
    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def zeros_like(cls, weights: "NetworkWeights") -> "AdamState":
        params = weights.parameters()
        return cls(step=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])

    def copy(self) -> "AdamState":
        return AdamState(step=self.step, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


@dataclass
class NetworkWeights:
    layers: List[ConvLayer]
    leaky_slope: float = LEAKY_SLOPE
    optimizer: Optional[AdamState] = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("Network needs at least one layer")
        for previous, layer in zip(self.layers, self.layers[1:]):
            if previous.out_channels != layer.in_channels:
                raise ShapeError(
                    f"Layer channels do not chain: {previous.out_channels} -> {layer.in_channels}"
                )
        if self.layers[-1].out_channels != 1:
            raise ShapeError("Final layer must have exactly one output channel")

    @property
    def total_stride(self) -> int:
        return int(np.prod([layer.stride for layer in self.layers]))

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.kernel, layer.bias])
        return params

    def copy(self, with_optimizer: bool = True) -> "NetworkWeights":
        return NetworkWeights(
            layers=[ConvLayer(l.kernel.copy(), l.bias.copy(), l.stride) for l in self.layers],
            leaky_slope=self.leaky_slope,
            optimizer=self.optimizer.copy() if (with_optimizer and self.optimizer) else None,
        )

    def with_parameters(self, params: Sequence[np.ndarray]) -> "NetworkWeights":
        layers = [
            ConvLayer(params[2 * i], params[2 * i + 1], layer.stride)
            for i, layer in enumerate(self.layers)
        ]
        return NetworkWeights(layers=layers, leaky_slope=self.leaky_slope)


@dataclass
class FeatureMap:
    values: np.ndarray

    @property
    def u(self) -> int:
        return int(self.values.shape[0])

    @property
    def v(self) -> int:
        return int(self.values.shape[1])


@dataclass
class HeatMap:
    values: np.ndarray
    upsampled: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"Heatmap must be 2-D, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ShapeError("Heatmap entries must be non-negative")

    @property
    def u(self) -> int:
        return int(self.values.shape[0])

    @property
    def v(self) -> int:
        return int(self.values.shape[1])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 25
    augment_fraction: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    loss_clamp_epsilon: float = 1e-6

    def validate(self) -> "TrainConfig":
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigurationError("learning_rate must be finite and non-negative")
        if int(self.batch_size) < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if int(self.epochs) < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0.0 <= self.augment_fraction <= 1.0:
            raise ConfigurationError("augment_fraction must lie in [0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("Adam moments must lie in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ConfigurationError("adam_epsilon must be positive")
        if not 0.0 < self.loss_clamp_epsilon <= 1e-3:
            raise ConfigurationError("loss_clamp_epsilon must lie in (0, 1e-3]")
        return self


@dataclass
class TrainResult:
    weights: NetworkWeights
    loss_trace: List[float] = field(default_factory=list)


@dataclass
class AugmentParams:
    rotation_deg: float = 0.0
    translation: Tuple[int, int] = (0, 0)  # (dx, dy) in pixels
    jitter: float = 0.0
    noise_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and tuple(self.translation) == (0, 0)
            and self.jitter == 0.0
            and self.noise_sigma == 0.0
        )


# ---------------------------------------------------------------------------
# Network


def init_weights(seed: int, architecture: Sequence[Tuple[int, int, int, int]] = DEFAULT_ARCHITECTURE) -> NetworkWeights:
    """He-style uniform initialisation (limit sqrt(6 / fan_in)), zero biases."""
    rng = substream(seed, STREAM_INIT)
    layers = []
    for in_ch, out_ch, k, stride in architecture:
        limit = math.sqrt(6.0 / (in_ch * k * k))
        kernel = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k))
        layers.append(ConvLayer(kernel=kernel, bias=np.zeros(out_ch), stride=stride))
    return NetworkWeights(layers=layers)


def zero_weights(architecture: Sequence[Tuple[int, int, int, int]] = DEFAULT_ARCHITECTURE) -> NetworkWeights:
    return NetworkWeights(
        layers=[
            ConvLayer(np.zeros((out_ch, in_ch, k, k)), np.zeros(out_ch), stride)
            for in_ch, out_ch, k, stride in architecture
        ]
    )


def _check_input(weights: NetworkWeights, height: int, width: int) -> None:
    stride = weights.total_stride
    if height % stride or width % stride:
        raise ShapeError(f"Frame {height}x{width} is not a multiple of the network stride {stride}")
    if weights.layers[0].in_channels != 1:
        raise ShapeError("Network input must be single-channel")


def _stack(frames: Sequence[Frame]) -> np.ndarray:
    shapes = {frame.pixels.shape for frame in frames}
    if len(shapes) != 1:
        raise ShapeError(f"Frames in a batch must share one shape, got {sorted(shapes)}")
    return np.stack([frame.pixels for frame in frames])[:, None, :, :]


def _conv_forward(xp: np.ndarray, layer: ConvLayer) -> np.ndarray:
    k, s = layer.kernel_size, layer.stride
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, layer.kernel, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]


def _conv_backward(xp: np.ndarray, layer: ConvLayer, dout: np.ndarray):
    k, s = layer.kernel_size, layer.stride
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    dkernel = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    dbias = dout.sum(axis=(0, 2, 3))
    out_h, out_w = dout.shape[2], dout.shape[3]
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            contribution = np.tensordot(dout, layer.kernel[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += contribution.transpose(0, 3, 1, 2)
    return dxp, dkernel, dbias


def _forward_batch(weights: NetworkWeights, x: np.ndarray):
    _check_input(weights, x.shape[2], x.shape[3])
    caches = []
    activation = x
    last = len(weights.layers) - 1
    for index, layer in enumerate(weights.layers):
        p = layer.padding
        xp = np.pad(activation, ((0, 0), (0, 0), (p, p), (p, p))) if p else activation
        pre = _conv_forward(xp, layer)
        caches.append((xp, pre))
        activation = pre if index == last else np.where(pre > 0, pre, weights.leaky_slope * pre)
    return activation, caches


def _backward_batch(weights: NetworkWeights, caches, dphi: np.ndarray) -> List[np.ndarray]:
    grads: List[np.ndarray] = [None] * (2 * len(weights.layers))
    g = dphi
    last = len(weights.layers) - 1
    for index in range(last, -1, -1):
        layer = weights.layers[index]
        xp, pre = caches[index]
        if index != last:
            g = g * np.where(pre > 0, 1.0, weights.leaky_slope)
        dxp, dkernel, dbias = _conv_backward(xp, layer, g)
        grads[2 * index], grads[2 * index + 1] = dkernel, dbias
        if index > 0:
            p = layer.padding
            g = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp
    return grads


def forward(weights: NetworkWeights, frame: Frame) -> FeatureMap:
    """phi(X) for one frame."""
    phi, _ = _forward_batch(weights, frame.pixels[None, None, :, :])
    return FeatureMap(values=phi[0, 0])


def pseudo_huber(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    squared = phi * phi
    return squared / (np.sqrt(squared + 1.0) + 1.0)


def heatmap(feat: FeatureMap) -> HeatMap:
    return HeatMap(values=pseudo_huber(feat.values))


def score(heat_map: HeatMap) -> float:
    if heat_map.values.size == 0:
        raise ShapeError("Cannot score an empty heatmap")
    return float(heat_map.values.mean())


# ---------------------------------------------------------------------------
# Loss and gradient


def _loss_terms(z: np.ndarray, y: np.ndarray, epsilon: float):
    """Per-sample loss terms and their derivatives with respect to z."""
    one_minus = -np.expm1(-z)
    clamped = one_minus < epsilon
    anomaly_term = -np.log(np.maximum(one_minus, epsilon))
    safe = np.where(clamped, 1.0, np.expm1(z))
    anomaly_slope = np.where(clamped, 0.0, -1.0 / safe)
    terms = np.where(y == 1, anomaly_term, z)
    slopes = np.where(y == 1, anomaly_slope, 1.0)
    return terms, slopes


def _loss_and_gradient(weights: NetworkWeights, x: np.ndarray, y: np.ndarray, epsilon: float, need_gradient: bool = True):
    phi, caches = _forward_batch(weights, x)
    a = pseudo_huber(phi)
    cells = a.shape[2] * a.shape[3]
    z = a.reshape(a.shape[0], -1).mean(axis=1)
    terms, slopes = _loss_terms(z, y, epsilon)
    n = len(z)
    value = float(terms.mean())
    if not need_gradient:
        return value, None
    da = (slopes / (n * cells))[:, None, None, None] * np.ones_like(a)
    dphi = da * phi / np.sqrt(phi * phi + 1.0)
    return value, _backward_batch(weights, caches, dphi)


def _batch_arrays(batch: Sequence[Tuple[Frame, int]]):
    if not batch:
        raise ConfigurationError("Loss needs a non-empty batch")
    x = _stack([frame for frame, _ in batch])
    y = np.array([int(label) for _, label in batch], dtype=np.int64)
    return x, y


def loss(batch: Sequence[Tuple[Frame, int]], weights: NetworkWeights, epsilon: float = 1e-6) -> float:
    """Mean FCDD loss over the batch, log argument clamped below by *epsilon*."""
    x, y = _batch_arrays(batch)
    value, _ = _loss_and_gradient(weights, x, y, epsilon, need_gradient=False)
    return value


def gradient(batch: Sequence[Tuple[Frame, int]], weights: NetworkWeights, epsilon: float = 1e-6) -> NetworkWeights:
    """Exact gradient of ``loss`` with respect to every kernel and bias."""
    x, y = _batch_arrays(batch)
    _, grads = _loss_and_gradient(weights, x, y, epsilon)
    return weights.with_parameters(grads)


# ---------------------------------------------------------------------------
# Augmentation


def draw_augmentation(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        rotation_deg=float(rng.uniform(-AUGMENT_MAX_ROTATION_DEG, AUGMENT_MAX_ROTATION_DEG)),
        translation=(
            int(rng.integers(-AUGMENT_MAX_SHIFT_PX, AUGMENT_MAX_SHIFT_PX + 1)),
            int(rng.integers(-AUGMENT_MAX_SHIFT_PX, AUGMENT_MAX_SHIFT_PX + 1)),
        ),
        jitter=float(rng.uniform(-AUGMENT_MAX_JITTER, AUGMENT_MAX_JITTER)),
        noise_sigma=AUGMENT_NOISE_SIGMA,
    )


def _warp(values: np.ndarray, params: AugmentParams, order: int, mode: str) -> np.ndarray:
    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # (row, col) coordinates; output o maps to input R^-1 (o - c - t) + c
    inverse = np.array([[cos_t, sin_t], [-sin_t, cos_t]])
    centre = (np.array(values.shape, dtype=np.float64) - 1.0) / 2.0
    dx, dy = params.translation
    shift = np.array([dy, dx], dtype=np.float64)
    offset = centre - inverse @ (centre + shift)
    return ndimage.affine_transform(values, inverse, offset=offset, order=order, mode=mode, cval=0.0)


def apply_augmentation(frame: Frame, params: AugmentParams, rng: Optional[np.random.Generator] = None) -> Frame:
    if params.is_identity:
        return frame.with_pixels(frame.pixels.copy())
    pixels = _warp(frame.pixels, params, order=1, mode="nearest") + params.jitter
    if params.noise_sigma > 0:
        if rng is None:
            raise SpecificationError("Additive noise needs a random generator")
        pixels = pixels + rng.normal(0.0, params.noise_sigma, size=pixels.shape)
    mask = None
    label = frame.label
    if frame.mask is not None:
        mask = _warp(frame.mask.astype(np.float64), params, order=0, mode="constant") >= 0.5
        label = int(mask.any())
    return Frame(pixels=np.clip(pixels, 0.0, 1.0), label=label, mask=mask)


def augment(frame: Frame, seed: int) -> Frame:
    """Random small rotation, translation, intensity jitter and additive noise."""
    rng = substream(seed, STREAM_AUGMENT)
    params = draw_augmentation(rng)
    return apply_augmentation(frame, params, rng)


def augment_sample(frame: Frame, label: int, seed: int) -> Tuple[Frame, int]:
    """Augmented training pair; when the frame carries a mask the label follows the warped mask."""
    warped = augment(frame, seed)
    return warped, (warped.label if frame.mask is not None else int(label))


# ---------------------------------------------------------------------------
# Training


def _adam_step(weights: NetworkWeights, grads: Sequence[np.ndarray], state: AdamState, config: TrainConfig) -> None:
    state.step += 1
    correction1 = 1.0 - config.beta1 ** state.step
    correction2 = 1.0 - config.beta2 ** state.step
    for param, grad, m, v in zip(weights.parameters(), grads, state.m, state.v):
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        param -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_epsilon)


def train(
    dataset: Sequence[Tuple[Frame, int]],
    config: TrainConfig,
    initial: Optional[NetworkWeights] = None,
) -> TrainResult:
    """Minibatch Adam on the FCDD loss; returns final weights and the per-epoch loss trace."""
    config.validate()
    labels = np.array([int(label) for _, label in dataset], dtype=np.int64)
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise ConfigurationError("Training data needs at least one normal and one anomalous sample")
    shapes = {frame.pixels.shape for frame, _ in dataset}
    if len(shapes) != 1:
        raise ShapeError(f"Training frames must share one shape, got {sorted(shapes)}")

    weights = initial.copy() if initial is not None else init_weights(config.seed)
    state = weights.optimizer.copy() if weights.optimizer is not None else AdamState.zeros_like(weights)
    rng = substream(config.seed, STREAM_TRAIN)
    n = len(dataset)
    trace: List[float] = []

    logger.info(
        "Training on %d frames (%d anomalous) for %d epochs, lr=%g, batch=%d",
        n, int(labels.sum()), config.epochs, config.learning_rate, config.batch_size,
    )
    for epoch in range(int(config.epochs)):
        start_time = time.time()
        order = rng.permutation(n)
        augment_mask = rng.random(n) < config.augment_fraction
        augment_seeds = rng.integers(0, 2 ** 63, size=n)
        total = 0.0
        for begin in range(0, n, int(config.batch_size)):
            indices = order[begin:begin + int(config.batch_size)]
            batch = [
                augment_sample(dataset[i][0], labels[i], int(augment_seeds[i])) if augment_mask[i]
                else (dataset[i][0], int(labels[i]))
                for i in indices
            ]
            x, y = _batch_arrays(batch)
            value, grads = _loss_and_gradient(weights, x, y, config.loss_clamp_epsilon)
            _adam_step(weights, grads, state, config)
            total += value * len(indices)
        trace.append(total / n)
        logger.info("Epoch %d/%d loss %.6f (%.0fms)", epoch + 1, config.epochs, trace[-1], (time.time() - start_time) * 1000)

    weights.optimizer = state
    return TrainResult(weights=weights, loss_trace=trace)


# ---------------------------------------------------------------------------
# Upsampling and scoring


def gaussian_kernel(size: int = UPSAMPLE_KERNEL_SIZE, sigma: float = UPSAMPLE_SIGMA) -> np.ndarray:
    centre = (size - 1) / 2.0
    axis = np.arange(size, dtype=np.float64) - centre
    kernel = np.exp(-(axis[:, None] ** 2 + axis[None, :] ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def upsample(
    heat_map: HeatMap,
    input_dims: Tuple[int, int],
    stride: int = 2,
    kernel: Optional[np.ndarray] = None,
) -> HeatMap:
    """Strided transposed convolution of A with a fixed Gaussian kernel, cropped to *input_dims*."""
    kernel = gaussian_kernel() if kernel is None else np.asarray(kernel, dtype=np.float64)
    k = kernel.shape[0]
    height, width = (int(d) for d in input_dims)
    u, v = heat_map.values.shape
    if (height, width) != (u * stride, v * stride):
        raise ShapeError(f"Input dims {height}x{width} inconsistent with {u}x{v} heatmap at stride {stride}")
    if k < stride or (k - stride) % 2:
        raise ShapeError(f"Kernel size {k} cannot be centred at stride {stride}")
    pad = (k - stride) // 2
    full = np.zeros((stride * (u - 1) + k, stride * (v - 1) + k))
    for i in range(k):
        for j in range(k):
            full[i:i + stride * u:stride, j:j + stride * v:stride] += kernel[i, j] * heat_map.values
    upsampled = full[pad:pad + height, pad:pad + width]
    return HeatMap(values=heat_map.values.copy(), upsampled=np.maximum(upsampled, 0.0))


def explain(weights: NetworkWeights, frame: Frame) -> HeatMap:
    """Heatmap of one frame with its input-resolution upsampling A'."""
    heat = heatmap(forward(weights, frame))
    return upsample(heat, frame.pixels.shape, stride=weights.total_stride)


def score_frames(weights: NetworkWeights, frames: Sequence[Frame], batch_size: int = 64) -> ScoreStream:
    """Per-frame anomaly scores as an ordered stream (t, z_t, label)."""
    if not frames:
        return ScoreStream.empty()
    scores = []
    for begin in range(0, len(frames), batch_size):
        phi, _ = _forward_batch(weights, _stack(frames[begin:begin + batch_size]))
        a = pseudo_huber(phi)
        scores.append(a.reshape(a.shape[0], -1).mean(axis=1))
    return ScoreStream(
        t=np.arange(len(frames)),
        z=np.concatenate(scores),
        y=[frame.label for frame in frames],
    )


def localization_ratio(weights: NetworkWeights, frames: Sequence[Frame]) -> float:
    """Mean A' inside ground-truth masks over mean A' outside, averaged over anomalous frames."""
    inside, outside = [], []
    for frame in frames:
        if frame.mask is None or not frame.mask.any() or frame.mask.all():
            continue
        upsampled = explain(weights, frame).upsampled
        inside.append(float(upsampled[frame.mask].mean()))
        outside.append(float(upsampled[~frame.mask].mean()))
    if not inside:
        raise ShapeError("No frames with a partial ground-truth mask to localise against")
    mean_outside = float(np.mean(outside))
    return float(np.mean(inside)) / mean_outside if mean_outside > 0 else math.inf


# ---------------------------------------------------------------------------
# Persistence


def weights_to_dict(weights: NetworkWeights) -> Dict:
    document = {
        "leaky_slope": weights.leaky_slope,
        "layers": [
            {
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
                "kernel_size": layer.kernel_size,
                "stride": layer.stride,
                "kernel": layer.kernel.reshape(-1).tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in weights.layers
        ],
    }
    if weights.optimizer is not None:
        document["optimizer"] = {
            "step": weights.optimizer.step,
            "m": [a.reshape(-1).tolist() for a in weights.optimizer.m],
            "v": [a.reshape(-1).tolist() for a in weights.optimizer.v],
        }
    return document


def weights_from_dict(document: Dict) -> NetworkWeights:
    layers = []
    for entry in document["layers"]:
        shape = (entry["out_channels"], entry["in_channels"], entry["kernel_size"], entry["kernel_size"])
        layers.append(
            ConvLayer(
                kernel=np.asarray(entry["kernel"], dtype=np.float64).reshape(shape),
                bias=np.asarray(entry["bias"], dtype=np.float64),
                stride=int(entry["stride"]),
            )
        )
    weights = NetworkWeights(layers=layers, leaky_slope=float(document.get("leaky_slope", LEAKY_SLOPE)))
    if "optimizer" in document:
        shapes = [p.shape for p in weights.parameters()]
        opt = document["optimizer"]
        weights.optimizer = AdamState(
            step=int(opt["step"]),
            m=[np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(opt["m"], shapes)],
            v=[np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(opt["v"], shapes)],
        )
    return weights


def save_weights(path: PathLike, weights: NetworkWeights) -> Path:
    path = write_json(path, weights_to_dict(weights))
    logger.info("Saved network weights to %s", path)
    return path


def load_weights(path: PathLike) -> NetworkWeights:
    document = read_json(path)
    try:
        return weights_from_dict(document)
    except (KeyError, TypeError, ValueError) as exc:
        raise SewerFormatError(path, f"malformed weights document ({exc})") from exc


def write_loss_trace(path: PathLike, trace: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "loss"])
        for epoch, value in enumerate(trace, start=1):
            writer.writerow([epoch, repr(float(value))])
    return path


def write_explanations(directory: PathLike, weights: NetworkWeights, frames: Sequence[Frame], count: int) -> List[int]:
    """Normalised heatmap and overlay PGMs for the first *count* anomalous frames."""
    directory = Path(directory)
    picked = [i for i, frame in enumerate(frames) if frame.label == 1][: max(int(count), 0)]
    for index in picked:
        frame = frames[index]
        upsampled = explain(weights, frame).upsampled
        peak = float(upsampled.max())
        write_pgm(directory / f"heatmap_{index:05d}.pgm", upsampled / peak if peak > 0 else upsampled)
        write_overlay(directory / f"overlay_{index:05d}.pgm", frame, upsampled)
    if picked:
        logger.info("Wrote %d heatmap overlays to %s", len(picked), directory)
    return picked
