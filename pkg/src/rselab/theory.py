"""Numerical verification of the two theoretical claims behind the defense.

1. Jensen check: with shared noise draws, the average noisy negative
   log-likelihood upper-bounds the negative log of the averaged probability
   (finite-sample-exact), and the ensemble's predicted class dominates every
   other class in averaged probability by construction of the argmax.

2. Taylor check: for small sigma, the expected noisy loss exceeds the clean
   loss by (sigma^2/2) * trace of the loss Hessian w.r.t. the injected noise,
   up to o(sigma^2). The trace is estimated by Hutchinson probing with
   Rademacher vectors and finite-difference Hessian-vector products; the
   Monte-Carlo increase estimate must agree within its confidence interval.

All of this runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import UsageError
from .layers import Model, count_noise_layers, forward_tensor, noise_shapes
from .rng import RngStream
from .tensor import Tape, Tensor


@dataclass
class TheoryCheckReport:
    check: str
    lhs: float
    rhs: float
    tolerance: float
    passed: bool
    samples: int
    status: str = "pass"  # pass | fail | inconclusive
    details: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Jensen / argmax dominance


def check_jensen(model: Model, images, labels, samples: int = 32,
                 rng: RngStream | None = None) -> TheoryCheckReport:
    """Per-example: mean_j -log p_j[y] >= -log(mean_j p_j[y]) on shared draws,
    and the averaged vector's argmax dominates every class. Reports the
    minimum slack across examples (negative slack would be a violation)."""
    if samples < 2:
        raise UsageError("need at least two noise samples")
    rng = rng or RngStream(0, 21)
    m64 = model.astype(np.float64)
    xb = np.asarray(images, dtype=np.float64)
    if xb.ndim == 3:
        xb = xb[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = xb.shape[0]
    logp = np.empty((samples, n, model.config.classes))
    for j in range(samples):
        probs, _ = forward_tensor(m64, Tensor(xb, dtype=np.float64), "noisy", rng)
        logp[j] = np.log(probs.data)
    lhs = -logp[:, np.arange(n), y].mean(axis=0)                       # mean of -log
    # -log mean p == -(logsumexp - log m), stable against underflow
    lse = np.log(np.exp(logp[:, np.arange(n), y]
                        - logp[:, np.arange(n), y].max(axis=0)).sum(axis=0))
    rhs = -(lse + logp[:, np.arange(n), y].max(axis=0) - np.log(samples))
    slack = lhs - rhs
    mean_p = np.exp(logp).mean(axis=0)                                  # (n, K)
    yhat = np.argmax(mean_p, axis=1)
    dominance = bool(np.all(mean_p[np.arange(n), yhat][:, None] >= mean_p))
    tol = 1e-6
    ok = bool(slack.min() >= -tol) and dominance
    return TheoryCheckReport(
        check="jensen", lhs=float(lhs.mean()), rhs=float(rhs.mean()),
        tolerance=tol, passed=ok, samples=samples,
        status="pass" if ok else "fail",
        details={"min_slack": float(slack.min()),
                 "violations": int((slack < -tol).sum()),
                 "argmax_dominance": dominance,
                 "n_examples": int(n)})


# ---------------------------------------------------------------------------
# Taylor expansion in the noise / Hessian trace


@dataclass
class QuadraticLoss:
    """l(eps) = 0.5 eps^T A eps + b^T eps + c0; the closed-form oracle."""

    A: np.ndarray
    b: np.ndarray
    c0: float = 0.0

    @property
    def dim(self) -> int:
        return self.b.size

    def loss(self, eps: np.ndarray) -> float:
        return float(0.5 * eps @ self.A @ eps + self.b @ eps + self.c0)

    def grad(self, eps: np.ndarray) -> np.ndarray:
        return self.A @ eps + self.b

    def trace(self) -> float:
        return float(np.trace(self.A))


class NetworkNoiseLoss:
    """NLL of a fixed (x, y) batch as a function of the stacked noise vector.

    The noise vector concatenates one slot per noise layer (full activation
    shape); gradients come from the tape by treating each slot as an input.
    """

    def __init__(self, model: Model, images, labels):
        self.model = model.astype(np.float64)
        xb = np.asarray(images, dtype=np.float64)
        self.x = xb[None] if xb.ndim == 3 else xb
        self.y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        self.shapes = noise_shapes(self.model, batch=self.x.shape[0])
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.dim = sum(self.sizes)
        if count_noise_layers(self.model) == 0:
            raise UsageError("model has no noise layers to differentiate against")

    def _split(self, eps: np.ndarray, tape: Tape | None):
        out = []
        off = 0
        for shape, size in zip(self.shapes, self.sizes):
            t = Tensor(eps[off:off + size].reshape(shape), dtype=np.float64)
            if tape is not None:
                tape.watch(t)
            out.append(t)
            off += size
        return out

    def loss(self, eps: np.ndarray) -> float:
        noise = self._split(np.asarray(eps, dtype=np.float64), None)
        probs, _ = forward_tensor(self.model, Tensor(self.x, dtype=np.float64),
                                  "noisy", noise_tensors=noise)
        return float(T.neg_log_likelihood(probs, self.y).item())

    def grad(self, eps: np.ndarray) -> np.ndarray:
        tape = Tape()
        noise = self._split(np.asarray(eps, dtype=np.float64), tape)
        probs, _ = forward_tensor(self.model, Tensor(self.x, dtype=np.float64,
                                                     tape=tape), "noisy",
                                  noise_tensors=noise)
        nll = T.neg_log_likelihood(probs, self.y)
        tape.backward(nll)
        return np.concatenate([tape.grad(t).reshape(-1) for t in noise])


def hutchinson_trace(grad_fn, dim: int, probes: int = 32, step: float = 1e-3,
                     rng: RngStream | None = None) -> tuple[float, float]:
    """(trace estimate, standard error) of the Hessian at 0 via Rademacher
    probes on central-difference Hessian-vector products."""
    rng = rng or RngStream(0, 22)
    estimates = np.empty(probes)
    for k in range(probes):
        v = np.where(rng.uniform((dim,)) < 0.5, -1.0, 1.0)
        hv = (grad_fn(step * v) - grad_fn(-step * v)) / (2.0 * step)
        estimates[k] = v @ hv
    se = float(estimates.std(ddof=1) / np.sqrt(probes)) if probes > 1 else 0.0
    return float(estimates.mean()), se


def check_taylor_lipschitz(loss_fn, grad_fn, dim: int, sigma_grid,
                           samples: int = 1000, probes: int = 32,
                           rng: RngStream | None = None,
                           hvp_step: float = 1e-3) -> list:
    """Monte-Carlo loss increase vs (sigma^2/2) * estimated Hessian trace.

    One report per sigma: lhs = Delta(sigma)/sigma^2, rhs = trace/2.
    Pass when the 95% intervals of both sides overlap; a confidence interval
    wider than the compared quantity yields status "inconclusive".
    """
    rng = rng or RngStream(0, 23)
    base = loss_fn(np.zeros(dim))
    trace, trace_se = hutchinson_trace(grad_fn, dim, probes, hvp_step, rng)
    reports = []
    for sigma in sigma_grid:
        if sigma <= 0:
            raise UsageError("sigma grid must be positive")
        deltas = np.empty(samples)
        for j in range(samples):
            z = rng.gaussian((dim,))
            deltas[j] = loss_fn(sigma * z) - base
        mc = float(deltas.mean())
        mc_se = float(deltas.std(ddof=1) / np.sqrt(samples))
        lhs = mc / sigma**2
        lhs_ci = 1.96 * mc_se / sigma**2
        rhs = trace / 2.0
        rhs_ci = 1.96 * trace_se / 2.0
        gap = abs(lhs - rhs)
        tol = lhs_ci + rhs_ci
        if tol > max(abs(rhs), 1e-12) and gap > tol:
            status = "inconclusive"
            ok = False
        elif gap <= tol:
            status, ok = "pass", True
        else:
            status, ok = "fail", False
        reports.append(TheoryCheckReport(
            check=f"taylor_sigma={sigma:g}", lhs=lhs, rhs=rhs, tolerance=tol,
            passed=ok, samples=samples, status=status,
            details={"delta": mc, "delta_se": mc_se, "trace": trace,
                     "trace_se": trace_se, "base_loss": base}))
    return reports


def check_taylor_quadratic(A: np.ndarray, b: np.ndarray, sigma_grid,
                           samples: int = 10000,
                           rng: RngStream | None = None) -> list:
    """Taylor check on the closed-form quadratic oracle (identity is exact)."""
    q = QuadraticLoss(np.asarray(A, dtype=np.float64),
                      np.asarray(b, dtype=np.float64))
    return check_taylor_lipschitz(q.loss, q.grad, q.dim, sigma_grid,
                                  samples=samples, probes=64, rng=rng)


def check_taylor_network(model: Model, images, labels, sigma_grid,
                         samples: int = 400, probes: int = 32,
                         rng: RngStream | None = None) -> list:
    nl = NetworkNoiseLoss(model, images, labels)
    return check_taylor_lipschitz(nl.loss, nl.grad, nl.dim, sigma_grid,
                                  samples=samples, probes=probes, rng=rng)
