"""Tests for the slow reference calibrators."""

import numpy as np
import pytest

from asymcal.config import Mode, QuantConfig
from asymcal.engine import calibrate_layer
from asymcal.exceptions import CapabilityError, EliminationError, ShapeError
from asymcal.linalg import build_hessian, ge_eliminate
from asymcal.matrix import Seed, gen_correlated, make_rng
from asymcal.oracle import (
    SingleRowProblem,
    augment_inputs,
    greedy_optimal_quantize,
    kkt_delta_w,
    loss_q,
    naive_engine,
    optimal_delta_w,
)
from asymcal.quantizer import fit_params_minmax, quantize_column, quantize_rtn


def _row_problem(seed, n=6, k=40, damp_lambda=0.0):
    rng = make_rng(Seed(seed), 4)
    w = rng.standard_normal(n)
    x = gen_correlated(Seed(seed), n, k, 0.5)
    x_tilde = x + 0.2 * rng.standard_normal((n, k))
    return SingleRowProblem.from_inputs(w, x, x_tilde, damp_lambda)


def _layer(seed, m=4, n=8, k=32):
    rng = make_rng(Seed(seed), 7)
    w = rng.standard_normal((m, n))
    x = gen_correlated(Seed(seed), n, k, 0.5)
    x_tilde = x + 0.2 * rng.standard_normal((n, k))
    return w, x, x_tilde


class TestClosedForm:
    """Test cases for optimal_delta_w and loss_q."""

    def test_constraint_satisfied(self):
        """Test that dw_q moves w_q exactly onto the target value."""
        p = _row_problem(0)
        dw = optimal_delta_w(p, 2, 0.5)
        assert abs(p.w[2] + dw[2] - 0.5) <= 1e-10

    def test_no_residual_no_move(self):
        """Test that r = 0 and w_hat_q = w_q gives dw = 0."""
        p = _row_problem(1)
        p = SingleRowProblem(w=p.w, X=p.X, r=np.zeros_like(p.r), Hinv=p.Hinv)
        assert np.allclose(optimal_delta_w(p, 1, p.w[1]), 0.0, atol=1e-14)

    def test_residual_free_is_obq_update(self):
        """Test the reduction to the classic single-weight update."""
        p = _row_problem(2)
        p = SingleRowProblem(w=p.w, X=p.X, r=np.zeros_like(p.r), Hinv=p.Hinv)
        dw = optimal_delta_w(p, 3, 0.25)
        expected = (0.25 - p.w[3]) / p.Hinv[3, 3] * p.Hinv[3, :]
        assert np.allclose(dw, expected, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_kkt(self, seed):
        """Test the closed form against the bordered KKT solve."""
        p = _row_problem(seed)
        for q in range(6):
            w_hat_q = np.round(p.w[q] * 4) / 4
            dw = optimal_delta_w(p, q, w_hat_q)
            dense = kkt_delta_w(p.X, p.r, p.w, q, w_hat_q)
            assert np.max(np.abs(dw - dense)) <= 1e-8

    def test_matches_dense_kkt_dampened(self):
        """Test that the augmented problem agrees with KKT as well."""
        p = _row_problem(9, damp_lambda=0.5)
        assert p.X.shape == (6, 46)
        dw = optimal_delta_w(p, 0, 0.0)
        assert np.max(np.abs(dw - kkt_delta_w(p.X, p.r, p.w, 0, 0.0))) <= 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_loss_matches_plug_in(self, seed):
        """Test the closed-form loss against direct evaluation."""
        p = _row_problem(seed)
        for q in range(6):
            w_hat_q = p.w[q] + 0.3
            dw = optimal_delta_w(p, q, w_hat_q)
            direct = float(np.sum((dw @ p.X - p.r) ** 2))
            assert loss_q(p, q, w_hat_q) == pytest.approx(direct, rel=1e-8, abs=1e-8)

    def test_loss_without_residual_is_obq_score(self):
        """Test that r = 0 gives (w_hat_q - w_q)^2 / Hinv_qq."""
        p = _row_problem(3)
        p = SingleRowProblem(w=p.w, X=p.X, r=np.zeros_like(p.r), Hinv=p.Hinv)
        assert loss_q(p, 4, 1.0) == pytest.approx((1.0 - p.w[4]) ** 2 / p.Hinv[4, 4])

    def test_loss_with_fixed_weight_non_negative(self):
        """Test the residual-only loss value."""
        p = _row_problem(4)
        rx = p.r @ p.X.T
        expected = p.r @ p.r - rx @ ge_eliminate(p.Hinv, 2) @ rx
        value = loss_q(p, 2, p.w[2])
        assert value == pytest.approx(expected, rel=1e-10)
        assert value >= 0.0

    def test_zero_pivot(self):
        """Test that an eliminated index cannot be used again."""
        p = _row_problem(5)
        p = SingleRowProblem(w=p.w, X=p.X, r=p.r, Hinv=ge_eliminate(p.Hinv, 0))
        with pytest.raises(EliminationError):
            optimal_delta_w(p, 0, 0.0)
        with pytest.raises(EliminationError):
            loss_q(p, 0, 0.0)

    def test_shape_check(self):
        """Test that non-conformable problems are rejected."""
        p = _row_problem(6)
        with pytest.raises(ShapeError):
            SingleRowProblem(w=p.w[:3], X=p.X, r=p.r, Hinv=p.Hinv)

    def test_augment_noop_without_damping(self):
        """Test that lambda = 0 leaves the inputs alone."""
        x = np.ones((2, 3))
        a, b = augment_inputs(x, x, 0.0)
        assert a.shape == (2, 3) and b.shape == (2, 3)


class TestGreedy:
    """Test cases for greedy_optimal_quantize."""

    def test_size_guard(self):
        """Test that rows longer than 16 are refused."""
        w, x, x_tilde = _layer(0, m=1, n=17, k=40)
        params = fit_params_minmax(w, 4, False)
        with pytest.raises(CapabilityError):
            greedy_optimal_quantize(w[0], x, x_tilde, params)

    def test_single_weight(self):
        """Test that n = 1 is plain rounding."""
        w = np.array([[0.37]])
        x = np.ones((1, 5))
        params = fit_params_minmax(np.array([[0.37]]), 4, False)
        w_hat, trace = greedy_optimal_quantize(w[0], x, x, params)
        _, expected = quantize_rtn(w, params)
        assert trace.order == [0]
        assert w_hat[0] == expected[0, 0]

    def test_no_residual_follows_obq_order(self):
        """Test that without input residual the first pick minimizes the classic score."""
        w, x, _ = _layer(1, m=1, n=2, k=20)
        params = fit_params_minmax(w, 3, False)
        w_hat, trace = greedy_optimal_quantize(w[0], x, x, params)

        h = build_hessian(x, 0.01)
        hinv = np.linalg.inv(h.H)
        scores = []
        for q in range(2):
            _, w_q = quantize_column(w[0, q:q + 1], params, q)
            scores.append((w_q[0] - w[0, q]) ** 2 / hinv[q, q])
        assert trace.order[0] == int(np.argmin(scores))
        assert sorted(trace.order) == [0, 1]

        for q in range(2):
            _, again = quantize_column(w_hat[q:q + 1], params, q)
            assert again[0] == w_hat[q]

    def test_competitive_with_naive_engine(self):
        """Test that greedy ordering is not worse than the fixed order by a wide margin."""
        w, x, x_tilde = _layer(9, m=1, n=8, k=32)
        params = fit_params_minmax(w, 4, False)
        w_hat, _ = greedy_optimal_quantize(w[0], x, x_tilde, params)
        greedy_loss = float(np.sum((w_hat @ x - w[0] @ x_tilde) ** 2))
        naive = naive_engine(w, x, x_tilde, params)
        assert greedy_loss <= 1.5 * naive.asym_loss


class TestNaiveEngine:
    """Test cases for naive_engine."""

    def test_size_guard(self):
        """Test that layers wider than 64 are refused."""
        w, x, x_tilde = _layer(0, m=2, n=65, k=80)
        with pytest.raises(CapabilityError):
            naive_engine(w, x, x_tilde, fit_params_minmax(w, 4, False))

    @pytest.mark.parametrize("seed", range(3))
    def test_no_residual_matches_gptq(self, seed):
        """Test that the naive engine reproduces GPTQ when X_tilde == X."""
        w, x, _ = _layer(seed)
        params = fit_params_minmax(w, 4, False)
        naive = naive_engine(w, x, x, params)
        gptq = calibrate_layer(w, x, x, QuantConfig(mode=Mode.GPTQ))
        assert np.max(np.abs(naive.Q - gptq.Q)) <= 1e-9

    def test_beats_rtn(self):
        """Test that residual compensation improves on plain rounding."""
        w, x, x_tilde = _layer(5)
        params = fit_params_minmax(w, 4, False)
        naive = naive_engine(w, x, x_tilde, params)
        rtn = calibrate_layer(w, x, x_tilde, QuantConfig(mode=Mode.RTN))
        assert np.isfinite(naive.asym_loss)
        assert naive.asym_loss <= rtn.asym_loss

    def test_engine_within_band(self):
        """Test that the fast GPTAQ engine stays within 2x of the naive loss."""
        w, x, x_tilde = _layer(5)
        params = fit_params_minmax(w, 4, False)
        naive = naive_engine(w, x, x_tilde, params)
        gptaq = calibrate_layer(w, x, x_tilde, QuantConfig(mode=Mode.GPTAQ))
        assert gptaq.asym_loss <= 2.0 * naive.asym_loss
