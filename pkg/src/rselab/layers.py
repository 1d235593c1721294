"""Declarative networks with noise layers in front of every convolution.

A ModelConfig is an ordered list of LayerSpecs; build_model runs shape
inference and initializes parameters deterministically from an RngStream.
Forward evaluation supports a clean mode (noise layers are skipped, i.e. the
deterministic base network) and a noisy mode (a fresh additive draw at every
noise layer). Gradients flow through noise layers unchanged: each draw is a
constant for the pass that used it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericError, UsageError
from .rng import RngStream
from .tensor import Tape, Tensor

LAYER_KINDS = ("noise", "conv2d", "dense", "relu", "brelu", "maxpool", "flatten",
               "softmax_temperature")
NOISE_FAMILIES = ("gaussian", "bernoulli_gaussian")


@dataclass(frozen=True)
class NoiseSpec:
    family: str = "gaussian"
    sigma: float = 0.0
    bernoulli_p: float = 1.0
    placement: str = "inner"  # "init" = before the first conv, "inner" = the rest

    def validate(self):
        if self.family not in NOISE_FAMILIES:
            raise ConfigurationError(f"unknown noise family '{self.family}'")
        if self.sigma < 0:
            raise ConfigurationError("noise sigma must be nonnegative")
        if not 0.0 <= self.bernoulli_p <= 1.0:
            raise ConfigurationError("bernoulli_p must lie in [0,1]")
        if self.placement not in ("init", "inner"):
            raise ConfigurationError(f"unknown noise placement '{self.placement}'")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0          # conv2d
    kernel: int = 0            # conv2d
    stride: int = 1            # conv2d
    padding: int = 0           # conv2d
    units: int = 0             # dense
    noise: NoiseSpec | None = None
    size: int = 2              # maxpool
    temperature: float = 1.0   # softmax_temperature


def noise_layer(sigma: float, placement: str, family: str = "gaussian",
                bernoulli_p: float = 1.0) -> LayerSpec:
    return LayerSpec(kind="noise", noise=NoiseSpec(family=family, sigma=sigma,
                                                   bernoulli_p=bernoulli_p,
                                                   placement=placement))


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple  # (C, H, W)
    layers: tuple
    classes: int

    def with_noise_scales(self, sigma_init: float, sigma_inner: float) -> "ModelConfig":
        """Same architecture with rescaled noise layers (0 disables them)."""
        out = []
        for spec in self.layers:
            if spec.kind == "noise":
                sigma = sigma_init if spec.noise.placement == "init" else sigma_inner
                out.append(replace(spec, noise=replace(spec.noise, sigma=sigma)))
            else:
                out.append(spec)
        return replace(self, layers=tuple(out))

    def noise_free(self) -> "ModelConfig":
        return self.with_noise_scales(0.0, 0.0)


@dataclass
class Model:
    config: ModelConfig
    parameters: dict  # name -> np.ndarray (float32)

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.parameters.items()})


# ---------------------------------------------------------------------------
# shape inference / validation


def infer_shapes(config: ModelConfig) -> list:
    """Per-layer output shapes; raises ConfigurationError naming bad layers."""
    if len(config.input_shape) not in (1, 3):
        raise ConfigurationError("input_shape must be (C, H, W) or (units,)")
    if config.classes < 2:
        raise ConfigurationError("need at least two classes")
    shape = tuple(config.input_shape)  # (C,H,W) or (units,) after flatten
    shapes = []
    for i, spec in enumerate(config.layers):
        if spec.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {i}: unknown kind '{spec.kind}'")
        if spec.kind == "noise":
            if spec.noise is None:
                raise ConfigurationError(f"layer {i}: noise layer without NoiseSpec")
            spec.noise.validate()
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: conv2d after flatten")
            c, h, w = shape
            if spec.kernel < 1 or spec.stride < 1 or spec.channels < 1:
                raise ConfigurationError(f"layer {i}: bad conv2d attributes")
            ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if ho < 1 or wo < 1:
                raise ConfigurationError(f"layer {i}: conv2d output collapses to zero")
            shape = (spec.channels, ho, wo)
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: maxpool after flatten")
            c, h, w = shape
            if h % spec.size or w % spec.size:
                raise ConfigurationError(f"layer {i}: pool size {spec.size} does not divide {h}x{w}")
            shape = (c, h // spec.size, w // spec.size)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(f"layer {i}: dense needs flattened input")
            if spec.units < 1:
                raise ConfigurationError(f"layer {i}: dense units must be positive")
            shape = (spec.units,)
        elif spec.kind == "softmax_temperature":
            if i != len(config.layers) - 1:
                raise ConfigurationError(f"layer {i}: softmax_temperature must be last")
            if spec.temperature <= 0:
                raise ConfigurationError(f"layer {i}: temperature must be positive")
        shapes.append(shape)
    if len(shape) != 1 or shape[0] != config.classes:
        raise ConfigurationError(
            f"final layer produces {shape}, expected ({config.classes},)")
    _validate_noise_placement(config)
    return shapes


def _validate_noise_placement(config: ModelConfig):
    noise_idx = [i for i, s in enumerate(config.layers) if s.kind == "noise"]
    if not noise_idx:
        return
    if noise_idx[0] != 0 or config.layers[0].noise.placement != "init":
        raise ConfigurationError("first layer must be the init-placement noise layer")
    if sum(1 for i in noise_idx if config.layers[i].noise.placement == "init") != 1:
        raise ConfigurationError("exactly one init-placement noise layer allowed")
    for i, s in enumerate(config.layers):
        if s.kind == "conv2d" and (i == 0 or config.layers[i - 1].kind != "noise"):
            raise ConfigurationError(f"layer {i}: conv2d not preceded by a noise layer")


# ---------------------------------------------------------------------------
# construction


def build_model(config: ModelConfig, init_rng: RngStream) -> Model:
    """Initialize parameters: fan-in-scaled uniform weights, zero biases."""
    shapes = infer_shapes(config)
    params = {}
    shape = tuple(config.input_shape)
    for i, spec in enumerate(config.layers):
        if spec.kind == "conv2d":
            c_in = shape[0]
            fan_in = c_in * spec.kernel * spec.kernel
            limit = np.sqrt(6.0 / fan_in)
            w = init_rng.uniform((spec.channels, c_in, spec.kernel, spec.kernel),
                                 -limit, limit)
            params[f"layer{i}.weight"] = w.astype(np.float32)
            params[f"layer{i}.bias"] = np.zeros(spec.channels, dtype=np.float32)
        elif spec.kind == "dense":
            fan_in = shape[0]
            limit = np.sqrt(6.0 / fan_in)
            w = init_rng.uniform((spec.units, fan_in), -limit, limit)
            params[f"layer{i}.weight"] = w.astype(np.float32)
            params[f"layer{i}.bias"] = np.zeros(spec.units, dtype=np.float32)
        shape = shapes[i]
    return Model(config, params)


# ---------------------------------------------------------------------------
# noise sampling / forward


def sample_noise(spec: NoiseSpec, shape, rng: RngStream) -> np.ndarray:
    """One additive-noise draw. sigma == 0 is the identity (no stream use)."""
    spec.validate()
    if spec.sigma == 0.0:
        return np.zeros(shape, dtype=np.float32)
    draw = rng.gaussian(shape, spec.sigma)
    if spec.family == "bernoulli_gaussian":
        draw = draw * rng.bernoulli(shape, spec.bernoulli_p)
    return draw.astype(np.float32)


def forward_tensor(model: Model, x: Tensor, noise_mode: str = "clean",
                   rng: RngStream | None = None, noise_tensors: list | None = None,
                   param_tensors: dict | None = None,
                   apply_temperature: bool = True, check_finite: bool = True):
    """Run the network on a batched input tensor; returns (probs, logits).

    noise_tensors, when given, overrides sampling: one Tensor per noise layer,
    consumed in order (used by the theory checks to differentiate w.r.t. the
    noise itself). param_tensors lets the trainer pass tape-watched parameter
    tensors so weight gradients can be read back.
    """
    if noise_mode not in ("noisy", "clean"):
        raise UsageError(f"unknown noise mode '{noise_mode}'")
    if noise_mode == "noisy" and rng is None and noise_tensors is None:
        raise UsageError("noisy forward needs an RngStream")
    h = x
    params = model.parameters
    dtype = x.data.dtype

    def param(name):
        if param_tensors is not None:
            return param_tensors[name]
        return Tensor(params[name], tape=h.tape, dtype=dtype)

    noise_i = 0
    temperature = None
    for i, spec in enumerate(model.config.layers):
        if spec.kind == "noise":
            if noise_tensors is not None:
                h = T.add(h, noise_tensors[noise_i])
                noise_i += 1
            elif noise_mode == "noisy" and spec.noise.sigma > 0.0:
                eps = sample_noise(spec.noise, h.data.shape, rng).astype(dtype)
                h = T.add(h, Tensor(eps, dtype=dtype))
        elif spec.kind == "conv2d":
            w = param(f"layer{i}.weight")
            b = param(f"layer{i}.bias")
            h = T.conv2d(h, w, stride=spec.stride, padding=spec.padding)
            h = T.add(h, T.reshape(b, (1, spec.channels, 1, 1)))
        elif spec.kind == "dense":
            w = param(f"layer{i}.weight")
            b = param(f"layer{i}.bias")
            h = T.add(T.matmul(h, w, transpose_b=True), b)
        elif spec.kind == "relu":
            h = T.relu(h)
        elif spec.kind == "brelu":
            h = T.brelu(h)
        elif spec.kind == "maxpool":
            h = T.maxpool2d(h, spec.size)
        elif spec.kind == "flatten":
            h = T.reshape(h, (h.data.shape[0], -1))
        elif spec.kind == "softmax_temperature":
            temperature = spec.temperature
        if check_finite and not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activation after layer {i} ({spec.kind})")
    logits = h
    if temperature is not None and apply_temperature:
        probs = T.softmax_temperature(logits, temperature)
    else:
        probs = T.softmax(logits)
    return probs, logits


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim in (1, 3):      # single flat vector / single image
        return x[None], True
    if x.ndim in (2, 4):      # batch of flat vectors / batch of images
        return x, False
    raise UsageError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def forward(model: Model, x, noise_mode: str = "clean",
            rng: RngStream | None = None) -> np.ndarray:
    """Probability output (sums to 1 along classes). Accepts single or batch."""
    xb, single = _as_batch(x)
    dtype = np.float64 if xb.dtype == np.float64 else np.float32
    probs, _ = forward_tensor(model, Tensor(xb.astype(dtype)), noise_mode, rng)
    return probs.data[0] if single else probs.data


def forward_logits(model: Model, x, noise_mode: str = "clean",
                   rng: RngStream | None = None) -> np.ndarray:
    xb, single = _as_batch(x)
    dtype = np.float64 if xb.dtype == np.float64 else np.float32
    _, logits = forward_tensor(model, Tensor(xb.astype(dtype)), noise_mode, rng)
    return logits.data[0] if single else logits.data


def input_gradient(model: Model, x, loss_fn: str, label_or_target,
                   eot_samples: int = 1, rng: RngStream | None = None,
                   noise_mode: str = "noisy") -> np.ndarray:
    """Gradient of the loss w.r.t. the input, averaged over eot_samples draws.

    loss_fn: "nll" (negative log-likelihood of the given class). For a clean
    model one sample is exact.
    """
    if eot_samples < 1:
        raise UsageError("eot_samples must be >= 1")
    if loss_fn != "nll":
        raise UsageError(f"unknown loss descriptor '{loss_fn}'")
    xb, single = _as_batch(x)
    labels = np.atleast_1d(np.asarray(label_or_target, dtype=np.int64))
    if labels.size == 1 and xb.shape[0] > 1:
        labels = np.full(xb.shape[0], labels[0], dtype=np.int64)
    if noise_mode == "clean" or not any(
            s.kind == "noise" and s.noise.sigma > 0 for s in model.config.layers):
        eot_samples = 1  # deterministic forward: extra draws repeat the gradient
    dtype = np.float64 if xb.dtype == np.float64 else np.float32
    total = np.zeros_like(xb, dtype=dtype)
    for _ in range(eot_samples):
        tape = Tape()
        xt = tape.watch(Tensor(xb.astype(dtype)))
        probs, _ = forward_tensor(model, xt, noise_mode, rng)
        loss = T.neg_log_likelihood(probs, labels)
        tape.backward(loss)
        total += tape.grad(xt)
    grad = total / eot_samples
    return grad[0] if single else grad


def count_noise_layers(model: Model) -> int:
    return sum(1 for s in model.config.layers if s.kind == "noise")


def noise_shapes(model: Model, batch: int = 1) -> list:
    """Activation shape at each noise layer for a given batch size."""
    shapes = infer_shapes(model.config)
    out = []
    shape = tuple(model.config.input_shape)
    for i, spec in enumerate(model.config.layers):
        if spec.kind == "noise":
            out.append((batch,) + shape)
        shape = shapes[i]
    return out
