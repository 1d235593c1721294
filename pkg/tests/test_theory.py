import numpy as np
import pytest

from rselab.data import gen_synthetic
from rselab.defense import TrainConfig, desk_config, train
from rselab.errors import UsageError
from rselab.layers import Model, build_model
from rselab.rng import RngStream
from rselab.theory import (QuadraticLoss, check_jensen, check_taylor_network,
                           check_taylor_quadratic, hutchinson_trace)


@pytest.fixture(scope="module")
def rse_model():
    data = gen_synthetic(5, 30, 4, 8, split="train")
    model = build_model(desk_config((3, 8, 8), 4, 0.2, 0.1), RngStream(3))
    model, _ = train(model, data, TrainConfig(defense="rse", epochs=3,
                                              batch_size=30, lr=0.01, seed=3))
    return model


class TestJensen:
    def test_hand_example(self):
        # Two draws with p_y = 0.9 and 0.1:
        # LHS = -(log .9 + log .1)/2 = 1.20397..., RHS = -log .5 = 0.69314...
        p = np.array([0.9, 0.1])
        lhs = float(-np.log(p).mean())
        rhs = float(-np.log(p.mean()))
        assert lhs == pytest.approx(1.2039728, abs=1e-6)
        assert rhs == pytest.approx(0.6931472, abs=1e-6)
        assert lhs >= rhs

    def test_sigma_zero_equality(self, rse_model):
        silent = Model(rse_model.config.noise_free(), rse_model.parameters)
        data = gen_synthetic(5, 8, 4, 8, split="test")
        rep = check_jensen(silent, data.images, data.labels, samples=4)
        # No randomness: both sides coincide to numerical precision.
        assert abs(rep.details["min_slack"]) <= 1e-6
        assert rep.passed

    def test_noisy_model_nonnegative_slack(self, rse_model):
        data = gen_synthetic(5, 12, 4, 8, split="test")
        rep = check_jensen(rse_model, data.images, data.labels, samples=16)
        assert rep.details["min_slack"] >= -1e-6
        assert rep.details["violations"] == 0
        assert rep.details["argmax_dominance"]
        assert rep.passed and rep.status == "pass"
        assert rep.lhs >= rep.rhs - 1e-6

    def test_rejects_single_sample(self, rse_model):
        data = gen_synthetic(5, 2, 4, 8, split="test")
        with pytest.raises(UsageError):
            check_jensen(rse_model, data.images, data.labels, samples=1)


class TestHutchinson:
    def test_exact_on_quadratic(self):
        A = np.diag([1.0, 2.0, 3.0])
        q = QuadraticLoss(A, np.zeros(3))
        est, se = hutchinson_trace(q.grad, 3, probes=64, rng=RngStream(0, 40))
        # For a diagonal A, Rademacher probes have zero variance off-diagonal:
        # every probe returns the exact trace.
        assert est == pytest.approx(6.0, abs=1e-6)
        assert se <= 1e-6


class TestTaylorQuadratic:
    def test_diag_oracle(self):
        # E[l(sigma z)] - l(0) = sigma^2/2 * tr(A) exactly in expectation.
        A = np.diag([1.0, 2.0, 3.0])
        reps = check_taylor_quadratic(A, np.zeros(3), sigma_grid=[0.1],
                                      samples=20000, rng=RngStream(0, 41))
        (rep,) = reps
        assert rep.rhs == pytest.approx(3.0, abs=1e-6)   # tr/2
        assert rep.status == "pass"
        # Delta itself should be near sigma^2/2 * 6 = 0.03 within ~3 SE.
        assert rep.details["delta"] == pytest.approx(
            0.03, abs=3 * rep.details["delta_se"])

    def test_pure_linear_zero_expectation(self):
        # A = 0: the quadratic term vanishes, Delta has mean 0.
        reps = check_taylor_quadratic(np.zeros((3, 3)), np.array([1.0, -2.0, 0.5]),
                                      sigma_grid=[0.1], samples=20000,
                                      rng=RngStream(0, 42))
        (rep,) = reps
        assert rep.rhs == pytest.approx(0.0, abs=1e-8)
        assert abs(rep.details["delta"]) <= 3 * rep.details["delta_se"] + 1e-9

    def test_monte_carlo_convergence(self):
        # Standard error contracts like 1/sqrt(m).
        A = np.diag([1.0, 2.0, 3.0])
        ses = []
        for m in (500, 8000):
            (rep,) = check_taylor_quadratic(A, np.zeros(3), sigma_grid=[0.1],
                                            samples=m, rng=RngStream(0, 43))
            ses.append(rep.details["delta_se"])
        ratio = ses[0] / ses[1]
        assert 2.0 <= ratio <= 8.0  # expect ~4

    def test_bad_sigma_rejected(self):
        with pytest.raises(UsageError):
            check_taylor_quadratic(np.eye(2), np.zeros(2), sigma_grid=[0.0])


class TestTaylorNetwork:
    def test_desk_network_runs(self, rse_model):
        data = gen_synthetic(5, 4, 4, 8, split="test")
        reps = check_taylor_network(rse_model, data.images[:2], data.labels[:2],
                                    sigma_grid=[0.02, 0.04], samples=120,
                                    probes=16, rng=RngStream(0, 44))
        assert len(reps) == 2
        for rep in reps:
            assert rep.status in ("pass", "inconclusive")
            assert np.isfinite(rep.lhs) and np.isfinite(rep.rhs)
