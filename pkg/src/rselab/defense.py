"""Noisy training and self-ensemble inference, plus the baseline defenses.

The core trainer is plain SGD with momentum on the negative log-likelihood;
the "rse" kind draws fresh noise at every noise layer on every step, so it
minimizes the expected noisy loss. Inference ensembles n noisy forward
passes by accumulating probability vectors in fixed order and taking the
argmax (ties to the lowest class index).

Baselines: plain training, Gaussian-augmented training with bounded ReLU,
adversarial training (single-step batches with a coin flip, or projected
multi-step batches throughout), and teacher/student distillation with a
temperature-softened softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, NumericError, UsageError
from .layers import (LayerSpec, Model, ModelConfig, build_model, forward,
                     forward_tensor, noise_layer)
from .rng import RngStream
from .tensor import Tape, Tensor

DEFENSE_KINDS = ("none", "rse", "robust_brelu", "adv_train_1", "adv_train_2", "distill")

# Derived stream ids: keep shuffling, noise, augmentation and attack draws on
# separate streams so disabling one never perturbs the others.
_STREAM_SHUFFLE = 11
_STREAM_NOISE = 12
_STREAM_AUG = 13
_STREAM_ATTACK = 14
_STREAM_ENSEMBLE = 15


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 50
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_epochs: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    defense: str = "none"
    sigma_init: float = 0.2
    sigma_inner: float = 0.1
    aug_sigma: float = 0.05          # robust_brelu image augmentation
    adv_eps_low: float = 0.1         # adversarial training (I): eps ~ U(low, high)
    adv_eps_high: float = 0.3
    pgd_eps: float = 8.0 / 256.0     # adversarial training (II)
    pgd_steps: int = 7
    pgd_alpha: float = 2.0 / 256.0
    temperature: float = 40.0        # distillation

    def validate(self):
        if self.defense not in DEFENSE_KINDS:
            raise ConfigurationError(f"unknown defense kind '{self.defense}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.lr_decay <= 0 or self.momentum < 0:
            raise ConfigurationError("rates must be positive")
        if self.sigma_init < 0 or self.sigma_inner < 0 or self.aug_sigma < 0:
            raise ConfigurationError("noise scales must be nonnegative")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")


@dataclass
class EnsembleConfig:
    n: int = 10
    seed: int = 0

    def validate(self):
        if self.n < 1:
            raise ConfigurationError("ensemble size must be >= 1")


# ---------------------------------------------------------------------------
# architecture


def desk_config(input_shape=(3, 16, 16), classes: int = 10,
                sigma_init: float = 0.2, sigma_inner: float = 0.1,
                activation: str = "relu", temperature: float | None = None) -> ModelConfig:
    """Small VGG-style reference net: a noise layer ahead of every conv."""
    act = LayerSpec(kind=activation)
    layers = [
        noise_layer(sigma_init, "init"),
        LayerSpec(kind="conv2d", channels=32, kernel=3, stride=1, padding=1), act,
        noise_layer(sigma_inner, "inner"),
        LayerSpec(kind="conv2d", channels=32, kernel=3, stride=1, padding=1), act,
        LayerSpec(kind="maxpool", size=2),
        noise_layer(sigma_inner, "inner"),
        LayerSpec(kind="conv2d", channels=64, kernel=3, stride=1, padding=1), act,
        LayerSpec(kind="maxpool", size=2),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=256), act,
        LayerSpec(kind="dense", units=classes),
    ]
    if temperature is not None:
        layers.append(LayerSpec(kind="softmax_temperature", temperature=temperature))
    return ModelConfig(input_shape=tuple(input_shape), layers=tuple(layers),
                       classes=classes)


# ---------------------------------------------------------------------------
# SGD core


def _sgd_train(model: Model, data: Dataset, cfg: TrainConfig, *, noise_mode: str,
               batch_hook=None, soft_targets: np.ndarray | None = None,
               trace_label: str = "train") -> list:
    """Shared SGD loop. batch_hook(xb, yb, step, rng) may replace the batch;
    soft_targets switches the loss to cross-entropy against fixed targets."""
    cfg.validate()
    shuffle_rng = RngStream(cfg.seed, _STREAM_SHUFFLE)
    noise_rng = RngStream(cfg.seed, _STREAM_NOISE)
    hook_rng = RngStream(cfg.seed, _STREAM_ATTACK)
    params = model.parameters
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(data)
    lr = cfg.lr
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            lr *= cfg.lr_decay
        perm = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = data.images[idx]
            yb = data.labels[idx]
            tb = soft_targets[idx] if soft_targets is not None else None
            if batch_hook is not None:
                xb, yb = batch_hook(xb, yb, step, hook_rng)
            tape = Tape()
            ptensors = {k: tape.watch(Tensor(v)) for k, v in params.items()}
            probs, _ = forward_tensor(model, Tensor(xb, tape=tape), noise_mode,
                                      noise_rng, param_tensors=ptensors,
                                      check_finite=False)
            if tb is not None:
                loss = T.soft_cross_entropy(probs, tb)
            else:
                loss = T.neg_log_likelihood(probs, yb)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericError(
                    f"{trace_label}: loss diverged at epoch {epoch}, step {step}")
            tape.backward(loss)
            for k in params:
                g = tape.grad(ptensors[k])
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * params[k]
                velocity[k] = cfg.momentum * velocity[k] + g
                params[k] = params[k] - np.float32(lr) * velocity[k]
            losses.append(lval)
            step += 1
        trace.append(float(np.mean(losses)))
    return trace


def train(model: Model, data: Dataset, cfg: TrainConfig,
          rng: RngStream | None = None) -> tuple[Model, list]:
    """Train in place per cfg.defense ("none" or "rse"); returns (model, loss trace)."""
    cfg.validate()
    if cfg.defense not in ("none", "rse"):
        raise UsageError(f"train() handles 'none'/'rse'; use the dedicated "
                         f"entry point for '{cfg.defense}'")
    noise_mode = "noisy" if cfg.defense == "rse" else "clean"
    if cfg.defense == "rse":
        model.config = model.config.with_noise_scales(cfg.sigma_init, cfg.sigma_inner)
    trace = _sgd_train(model, data, cfg, noise_mode=noise_mode, trace_label=cfg.defense)
    return model, trace


# ---------------------------------------------------------------------------
# ensemble inference


def ensemble_probs(model: Model, x, ens: EnsembleConfig,
                   rng: RngStream | None = None) -> np.ndarray:
    """Average probability vector over ens.n noisy forwards, fixed draw order."""
    ens.validate()
    if rng is None:
        rng = RngStream(ens.seed, _STREAM_ENSEMBLE)
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    acc = np.zeros((xb.shape[0], model.config.classes), dtype=np.float64)
    for _ in range(ens.n):
        acc += forward(model, xb, noise_mode="noisy", rng=rng).astype(np.float64)
    p = (acc / ens.n).astype(np.float32)
    return p[0] if single else p


def predict_ensemble(model: Model, x, ens: EnsembleConfig,
                     rng: RngStream | None = None):
    """(predicted class, averaged probability vector); ties to lowest index."""
    p = ensemble_probs(model, x, ens, rng)
    if p.ndim == 1:
        return int(np.argmax(p)), p
    return np.argmax(p, axis=1), p


def make_decision_fn(model: Model, ens: EnsembleConfig | None,
                     rng: RngStream | None = None):
    """Defended inference as a callable batch->labels.

    Ensemble inference when the model has live noise layers, otherwise a
    deterministic clean forward.
    """
    noisy = any(s.kind == "noise" and s.noise.sigma > 0 for s in model.config.layers)
    if noisy:
        ens = ens or EnsembleConfig()

        def decide(xb):
            labels, _ = predict_ensemble(model, xb, replace(ens), rng)
            return np.atleast_1d(labels)
    else:

        def decide(xb):
            return np.atleast_1d(np.argmax(forward(model, xb, "clean"), axis=-1))

    return decide


# ---------------------------------------------------------------------------
# baseline defenses


def train_adversarial(model: Model, data: Dataset, cfg: TrainConfig,
                      rng: RngStream | None = None) -> tuple[Model, list]:
    """Variant I: continue from a pretrained model, replacing each batch by a
    single-step adversarial batch with probability 1/2 (eps ~ U(low, high)).
    Variant II: train from scratch on projected multi-step batches."""
    from .attacks import fgsm_perturb, pgd_perturb

    cfg.validate()
    if cfg.defense == "adv_train_1":

        def hook(xb, yb, step, hrng):
            if hrng.uniform() < 0.5:
                eps = float(hrng.uniform(low=cfg.adv_eps_low, high=cfg.adv_eps_high))
                xb = fgsm_perturb(model, xb, yb, eps, eot_samples=1, rng=hrng)
            return xb, yb

    elif cfg.defense == "adv_train_2":

        def hook(xb, yb, step, hrng):
            xb = pgd_perturb(model, xb, yb, eps=cfg.pgd_eps, alpha=cfg.pgd_alpha,
                             steps=cfg.pgd_steps, rng=hrng)
            return xb, yb

    else:
        raise UsageError("defense kind must be 'adv_train_1' or 'adv_train_2'")
    trace = _sgd_train(model, data, cfg, noise_mode="clean", batch_hook=hook,
                       trace_label=cfg.defense)
    return model, trace


def train_robust_brelu(model_config: ModelConfig, data: Dataset, cfg: TrainConfig,
                       rng: RngStream | None = None) -> tuple[Model, list]:
    """Bounded-ReLU net trained on Gaussian-augmented images (clipped to [0,1])."""
    cfg.validate()
    if not any(s.kind == "brelu" for s in model_config.layers):
        raise ConfigurationError("robust_brelu expects brelu activations in the config")
    model = build_model(model_config, RngStream(cfg.seed))
    aug_rng = RngStream(cfg.seed, _STREAM_AUG)

    def hook(xb, yb, step, hrng):
        if cfg.aug_sigma > 0:
            xb = np.clip(xb + aug_rng.gaussian(xb.shape, cfg.aug_sigma).astype(np.float32),
                         0.0, 1.0).astype(np.float32)
        return xb, yb

    trace = _sgd_train(model, data, cfg, noise_mode="clean", batch_hook=hook,
                       trace_label="robust_brelu")
    return model, trace


def train_distilled(model_config: ModelConfig, data: Dataset, cfg: TrainConfig,
                    rng: RngStream | None = None) -> tuple[Model, Model, list]:
    """Teacher/student distillation at temperature T; inference at T=1.

    Returns (teacher, student, student loss trace); both share the base
    architecture, the temperature layer exists only during training.
    """
    cfg.validate()
    hot = replace(model_config, layers=model_config.layers + (
        LayerSpec(kind="softmax_temperature", temperature=cfg.temperature),))
    teacher = build_model(hot, RngStream(cfg.seed))
    _sgd_train(teacher, data, cfg, noise_mode="clean", trace_label="distill-teacher")

    soft = forward(teacher, data.images, noise_mode="clean").astype(np.float32)
    student = build_model(hot, RngStream(cfg.seed + 1))
    trace = _sgd_train(student, data, cfg, noise_mode="clean", soft_targets=soft,
                       trace_label="distill-student")
    # Strip the temperature layer: deployed student predicts at T=1.
    cold = replace(model_config, layers=model_config.layers)
    teacher_out = Model(cold, teacher.parameters)
    student_out = Model(cold, student.parameters)
    return teacher_out, student_out, trace
