"""White-box attacks: sign-gradient family and the L2 optimization attack.

All attacks ascend the loss (single-step perturbations move along
sign(d loss/dx)), operate inside the [0,1] pixel box, and optionally average
gradients over fresh noise draws (expectation over the defense's randomness)
so they remain meaningful against a randomized model. Success is decided by
whatever decision function the caller supplies - for a defended model that is
the ensemble inference, never the attack's own loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericError, UsageError
from .layers import Model, forward, forward_tensor, input_gradient
from .rng import RngStream
from .tensor import Tape, Tensor

FAMILIES = ("fgsm", "rand_fgsm", "ifgsm", "pgd", "cw")


@dataclass
class AttackConfig:
    family: str = "cw"
    epsilon: float = 8.0 / 256.0   # L-inf budget (sign-gradient family)
    alpha: float = 2.0 / 256.0     # per-step size (iterative family)
    steps: int = 10
    c: float = 0.1                 # loss/distortion tradeoff (L2 attack)
    kappa: float = 0.0             # confidence margin
    cw_lr: float = 0.01
    cw_steps: int = 100
    eot_samples: int = 1
    targeted: int | None = None
    seed: int = 0

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family '{self.family}'")
        if self.epsilon < 0 or self.alpha <= 0 or self.steps < 1:
            raise ConfigurationError("bad step/budget attack parameters")
        if self.c <= 0 or self.kappa < 0 or self.cw_steps < 1 or self.cw_lr <= 0:
            raise ConfigurationError("bad L2-attack parameters")
        if self.eot_samples < 1:
            raise ConfigurationError("eot_samples must be >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    l2_distortion: float
    iterations: int
    predicted: int


def _model_noise_mode(model: Model) -> str:
    noisy = any(s.kind == "noise" and s.noise.sigma > 0 for s in model.config.layers)
    return "noisy" if noisy else "clean"


def _default_decision(model: Model, rng: RngStream):
    mode = _model_noise_mode(model)

    def decide(xb):
        return np.atleast_1d(np.argmax(forward(model, xb, mode, rng), axis=-1))

    return decide


def _results(x0, x_adv, labels, target, decision_fn, iterations) -> list:
    preds = decision_fn(x_adv)
    out = []
    for i in range(len(x_adv)):
        if target is not None:
            success = preds[i] == target
        else:
            success = preds[i] != labels[i]
        dist = float(np.linalg.norm((x_adv[i] - x0[i]).astype(np.float64)))
        out.append(AttackResult(x_adv=x_adv[i], success=bool(success),
                                l2_distortion=dist, iterations=iterations,
                                predicted=int(preds[i])))
    return out


def _as_batch(x):
    x = np.asarray(x, dtype=np.float32)
    return (x[None], True) if x.ndim == 3 else (x, False)


# ---------------------------------------------------------------------------
# sign-gradient family


def fgsm_perturb(model: Model, x0, y, epsilon: float, eot_samples: int = 1,
                 rng: RngStream | None = None) -> np.ndarray:
    """One step along sign of the (noise-averaged) loss gradient, clipped to [0,1]."""
    g = input_gradient(model, x0, "nll", y, eot_samples, rng,
                       noise_mode=_model_noise_mode(model))
    return np.clip(x0 + np.float32(epsilon) * np.sign(g, dtype=np.float32), 0.0, 1.0)


def fgsm(model: Model, x0, y, epsilon: float, eot_samples: int = 1,
         rng: RngStream | None = None, decision_fn=None) -> list:
    xb, single = _as_batch(x0)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rng = rng or RngStream(0)
    decision_fn = decision_fn or _default_decision(model, rng)
    if epsilon == 0.0:
        x_adv = xb.copy()
    else:
        x_adv = fgsm_perturb(model, xb, labels, epsilon, eot_samples, rng)
    res = _results(xb, x_adv, labels, None, decision_fn, iterations=1)
    return res[0] if single else res


def pgd_perturb(model: Model, x0, y, eps: float, alpha: float, steps: int,
                rng: RngStream, eot_samples: int = 1,
                random_start: bool = True) -> np.ndarray:
    """Iterated sign steps projected onto the eps-ball intersected with [0,1]."""
    x0 = np.asarray(x0, dtype=np.float32)
    mode = _model_noise_mode(model)
    x = x0.copy()
    if random_start and eps > 0:
        x = np.clip(x0 + rng.uniform(x0.shape, -eps, eps).astype(np.float32), 0.0, 1.0)
    for _ in range(steps):
        g = input_gradient(model, x, "nll", y, eot_samples, rng, noise_mode=mode)
        x = x + np.float32(alpha) * np.sign(g, dtype=np.float32)
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
    return x.astype(np.float32)


def iterative_attack(model: Model, x0, y, cfg: AttackConfig,
                     rng: RngStream | None = None, decision_fn=None) -> list:
    """rand_fgsm, ifgsm and pgd; also accepts family "fgsm" for uniformity."""
    cfg.validate()
    xb, single = _as_batch(x0)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rng = rng or RngStream(cfg.seed)
    decision_fn = decision_fn or _default_decision(model, rng)
    eps, alpha = cfg.epsilon, cfg.alpha
    if cfg.family == "fgsm":
        return fgsm(model, x0, y, eps, cfg.eot_samples, rng, decision_fn)
    if cfg.family == "rand_fgsm":
        # Jitter first, then one sign step with the remaining budget.
        jitter = np.float32(alpha) * np.sign(rng.gaussian(xb.shape)).astype(np.float32)
        x = np.clip(xb + jitter, 0.0, 1.0)
        step = max(eps - alpha, 0.0)
        g = input_gradient(model, x, "nll", labels, cfg.eot_samples, rng,
                           noise_mode=_model_noise_mode(model))
        x = x + np.float32(step) * np.sign(g, dtype=np.float32)
        x = np.clip(np.clip(x, xb - eps, xb + eps), 0.0, 1.0)
        res = _results(xb, x, labels, None, decision_fn, iterations=1)
    elif cfg.family in ("ifgsm", "pgd"):
        x = pgd_perturb(model, xb, labels, eps, alpha, cfg.steps, rng,
                        cfg.eot_samples, random_start=(cfg.family == "pgd"))
        res = _results(xb, x, labels, None, decision_fn, iterations=cfg.steps)
    else:
        raise UsageError(f"iterative_attack does not handle family '{cfg.family}'")
    return res[0] if single else res


# ---------------------------------------------------------------------------
# L2 optimization attack


def cw_untargeted_loss(logits, true_class: int, kappa: float = 0.0) -> float:
    """max{max_{i != t} Z_i - Z_t, -kappa} on a plain logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise UsageError("expected a logit vector with >= 2 classes")
    others = np.delete(z, true_class)
    return float(max(others.max() - z[true_class], -kappa))


def _margin_loss_tensor(logits: Tensor, classes: np.ndarray, kappa: float,
                        targeted: bool) -> Tensor:
    """Summed hinge margin over the batch, differentiable a.e.

    Descending this drives each input across the decision boundary with
    confidence margin kappa: untargeted pushes the true class below the best
    other class, targeted pulls the target above every other class.
    """
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(classes)), classes] = 1.0
    picked = T.sum_reduce(T.mul(logits, Tensor(onehot, dtype=logits.data.dtype)),
                          axis=1)
    masked = T.add(logits, Tensor(onehot * np.array(-1e9, dtype=logits.data.dtype),
                                  dtype=logits.data.dtype))
    best_other = T.max_reduce(masked, axis=1)
    margin = T.sub(best_other, picked) if targeted else T.sub(picked, best_other)
    # max(m, -kappa) == relu(m + kappa) - kappa; the constant drops out of grads.
    hinge = T.relu(T.add(margin, Tensor(np.full(margin.data.shape, kappa,
                                                dtype=margin.data.dtype))))
    return T.sum_reduce(hinge)


def cw_l2(model: Model, x0, y_or_target, cfg: AttackConfig,
          rng: RngStream | None = None, decision_fn=None) -> list:
    """L2 attack via tanh change of variables, fixed c, constant-rate descent.

    Gradients of the margin term are averaged over cfg.eot_samples noise
    draws; the distortion term's gradient is exact. The returned image is the
    lowest-distortion iterate that fooled a single noisy evaluation, else the
    final iterate flagged unsuccessful (then re-judged by decision_fn).
    """
    cfg.validate()
    xb, single = _as_batch(x0)
    n = xb.shape[0]
    classes = np.atleast_1d(np.asarray(y_or_target, dtype=np.int64))
    if classes.size == 1 and n > 1:
        classes = np.full(n, classes[0], dtype=np.int64)
    targeted = cfg.targeted is not None
    rng = rng or RngStream(cfg.seed)
    decision_fn = decision_fn or _default_decision(model, rng)
    mode = _model_noise_mode(model)
    # A clean forward is deterministic: extra EOT draws would repeat the same
    # gradient, so collapse them.
    eot = cfg.eot_samples if mode == "noisy" else 1

    x0f = xb.astype(np.float64)
    u = np.arctanh(np.clip(2.0 * x0f - 1.0, -1 + 1e-6, 1 - 1e-6))
    best_x = xb.copy()
    best_dist = np.full(n, np.inf)
    ever = np.zeros(n, dtype=bool)

    for it in range(cfg.cw_steps):
        x = ((np.tanh(u) + 1.0) / 2.0).astype(np.float32)
        gsum = np.zeros_like(x, dtype=np.float64)
        for _ in range(eot):
            tape = Tape()
            xt = tape.watch(Tensor(x))
            _, logits = forward_tensor(model, xt, mode, rng, check_finite=False)
            loss = _margin_loss_tensor(logits, classes, cfg.kappa, targeted)
            if not np.isfinite(loss.item()):
                raise NumericError(f"attack loss became non-finite at iteration {it}")
            tape.backward(loss)
            gsum += tape.grad(xt).astype(np.float64)
        g_margin = gsum / eot
        diff = x.astype(np.float64) - x0f
        g_x = cfg.c * g_margin + 2.0 * diff
        u = u - cfg.cw_lr * g_x * (1.0 - np.tanh(u) ** 2) / 2.0

        # Track the cheapest success under a one-draw evaluation.
        preds = np.argmax(forward(model, x, mode, rng), axis=-1)
        ok = (preds == classes) if targeted else (preds != classes)
        dist = np.linalg.norm(diff.reshape(n, -1), axis=1)
        upd = ok & (dist < best_dist)
        best_x[upd] = x[upd]
        best_dist[upd] = dist[upd]
        ever |= ok

    final = ((np.tanh(u) + 1.0) / 2.0).astype(np.float32)
    best_x[~ever] = final[~ever]
    res = _results(xb, best_x, classes if not targeted else np.full(n, -1),
                   cfg.targeted if targeted else None, decision_fn,
                   iterations=cfg.cw_steps)
    return res[0] if single else res


def run_attack(model: Model, x0, y, cfg: AttackConfig,
               rng: RngStream | None = None, decision_fn=None):
    """Dispatch on cfg.family."""
    cfg.validate()
    if cfg.family == "cw":
        classes = cfg.targeted if cfg.targeted is not None else y
        return cw_l2(model, x0, classes, cfg, rng, decision_fn)
    if cfg.family == "fgsm":
        return fgsm(model, x0, y, cfg.epsilon, cfg.eot_samples, rng, decision_fn)
    return iterative_attack(model, x0, y, cfg, rng, decision_fn)
