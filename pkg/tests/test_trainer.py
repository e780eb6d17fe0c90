"""Tests for the regularized objective and multiplicative-update training."""

import numpy as np
import pytest

from _reference import (
    exact_fit_instance,
    model_params_vector,
    planted_tensor,
    random_instance,
    ref_epoch,
    ref_gradient_fd,
    ref_objective,
)
from btdqos.errors import (
    ConfigError,
    DimMismatchError,
    DuplicateIndexError,
    EmptyInputError,
    InvalidCoordinateError,
    NonFiniteError,
)
from btdqos.model import BlockStructure, cp_structure, init_random, predict_entries
from btdqos.sparse import SparseTensor3
from btdqos.trainer import (
    TrainConfig,
    epoch,
    fit,
    gradient,
    grid_search,
    objective,
)
from test_model import single_block_model

ZERO_REG = TrainConfig(stop_on="train_loss")


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.max_iter == 1000
        assert cfg.tol == 1e-5
        assert cfg.epsilon_guard == 1e-12
        assert cfg.bias_enabled

    @pytest.mark.parametrize("kwargs", [
        dict(lambda1=-0.1), dict(max_iter=0), dict(tol=0.0),
        dict(epsilon_guard=0.0), dict(stop_on="nope"),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestObjective:
    def test_single_entry_unregularized(self):
        """y=2 predicted as 1 with all lambdas zero -> loss 1."""
        m = single_block_model(1, 1, 1, 1, 0, 0, 0)  # predicts 1.0
        t = SparseTensor3.from_entries((1, 1, 1), [((0, 0, 0), 2.0)])
        assert objective(m, t, ZERO_REG) == pytest.approx(1.0, abs=1e-15)

    def test_empty_observations(self):
        m = single_block_model(1, 1, 1, 1, 0, 0, 0)
        t = SparseTensor3.from_entries((1, 1, 1), [])
        assert objective(m, t, ZERO_REG) == 0.0

    def test_matches_reference_with_regularization(self):
        """Vectorized loss equals the quadruple-loop oracle on 4x4x4."""
        cfg = TrainConfig(lambda1=0.01, lambda2=0.01, lambda3=0.01,
                          stop_on="train_loss")
        for seed in range(5):
            dims, structure, tensor, model = random_instance(
                seed, max_dim=4, max_blocks=2, max_rank=2)
            fast = objective(model, tensor, cfg)
            slow = ref_objective(model, tensor, cfg)
            assert fast == pytest.approx(slow, rel=1e-10)

    def test_dim_mismatch(self):
        m = single_block_model(1, 1, 1, 1, 0, 0, 0)
        t = SparseTensor3.from_entries((2, 2, 2), [((0, 0, 0), 1.0)])
        with pytest.raises(DimMismatchError):
            objective(m, t, ZERO_REG)


class TestGradient:
    def test_zero_at_perfect_fit(self):
        tensor, model = exact_fit_instance(1)
        for coord in [("core", 0, 0, 0, 0), ("user", 0, 0, 0),
                      ("service", 0, 1, 1), ("time", 0, 2, 0),
                      ("user_bias", 0), ("service_bias", 2), ("time_bias", 1)]:
            assert gradient(model, tensor, ZERO_REG, coord) == pytest.approx(0.0, abs=1e-9)

    def test_hand_case(self):
        """s=a=b=c=1, no biases, y=2 -> direction for a is -(2-1)*1 = -1."""
        m = single_block_model(1, 1, 1, 1, 0, 0, 0)
        t = SparseTensor3.from_entries((1, 1, 1), [((0, 0, 0), 2.0)])
        assert gradient(m, t, ZERO_REG, ("user", 0, 0, 0)) == pytest.approx(-1.0, abs=1e-15)

    def test_matches_finite_differences(self):
        """The bracket is half the objective derivative (documented convention)."""
        rng = np.random.default_rng(0)
        cfg = TrainConfig(lambda1=0.02, lambda2=0.05, lambda3=0.01,
                          stop_on="train_loss")
        for seed in range(4):
            dims, structure, tensor, model = random_instance(
                seed + 100, max_dim=5, max_blocks=2, max_rank=2)
            from _reference import all_coords
            coords = all_coords(model)
            for coord in [coords[int(rng.integers(0, len(coords)))] for _ in range(12)]:
                analytic = 2.0 * gradient(model, tensor, cfg, coord)
                fd = ref_gradient_fd(model, tensor, cfg, coord, objective)
                assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_invalid_coordinates(self):
        tensor, model = exact_fit_instance(2)
        for coord in [("core", 5, 0, 0, 0), ("user", 0, 99, 0),
                      ("user", 0, 0, 99), ("nope", 1), ("user_bias", -1)]:
            with pytest.raises(InvalidCoordinateError):
                gradient(model, tensor, ZERO_REG, coord)


class TestEpoch:
    def test_fixed_point_at_exact_fit(self):
        """With zero residuals and zero lambdas every ratio is ~1."""
        tensor, model = exact_fit_instance(7)
        after = epoch(model, tensor, ZERO_REG)
        before_vec = model_params_vector(model)
        after_vec = model_params_vector(after)
        # Drift is bounded by the denominator guard only.
        assert np.max(np.abs(after_vec - before_vec)) <= 1e-9

    def test_bias_update_hand_case(self):
        """One user, two entries with yhat=1 each and y=2,4: d 0.5 -> 1.5."""
        m = single_block_model(0, 0, 0, 0, 0.5, 0.25, 0.25)
        m.dims = (1, 1, 2)
        m.time_factors = [np.zeros((2, 1))]
        m.time_bias = np.array([0.25, 0.25])
        t = SparseTensor3.from_entries((1, 1, 2), [((0, 0, 0), 2.0), ((0, 0, 1), 4.0)])
        after = epoch(m, t, ZERO_REG)
        assert after.user_bias[0] == pytest.approx(1.5, rel=1e-9)

    def test_matches_reference_epoch(self):
        """Optimized epoch equals the per-coordinate loop on 4x5x6."""
        cfg = TrainConfig(lambda1=0.01, lambda2=0.02, lambda3=0.005,
                          stop_on="train_loss")
        rng = np.random.default_rng(12)
        dims = (4, 5, 6)
        sel = rng.choice(120, size=55, replace=False)
        ii, jj, kk = np.unravel_index(sel, dims)
        tensor = SparseTensor3.from_arrays(dims, ii, jj, kk, rng.uniform(0, 2, 55))
        model = init_random(dims, BlockStructure(((2, 2, 2), (2, 2, 2))), 4)
        fast = model_params_vector(epoch(model, tensor, cfg))
        slow = model_params_vector(ref_epoch(model, tensor, cfg))
        np.testing.assert_allclose(fast, slow, rtol=1e-10, atol=1e-300)

    @pytest.mark.parametrize("kwargs", [
        dict(bias_enabled=False), dict(freeze_cores=True), dict(lambda1=0.0)])
    def test_matches_reference_epoch_variants(self, kwargs):
        cfg = TrainConfig(lambda2=0.01, lambda3=0.01, stop_on="train_loss", **kwargs)
        dims, structure, tensor, model = random_instance(31, max_dim=5,
                                                         max_blocks=2, max_rank=2)
        fast = model_params_vector(epoch(model, tensor, cfg))
        slow = model_params_vector(ref_epoch(model, tensor, cfg))
        np.testing.assert_allclose(fast, slow, rtol=1e-10)

    def test_nonnegativity_preserved(self):
        cfg = TrainConfig(lambda1=0.001, lambda2=0.001, lambda3=0.001,
                          stop_on="train_loss")
        for seed in range(5):
            dims, structure, tensor, model = random_instance(seed + 50)
            for _ in range(20):
                model = epoch(model, tensor, cfg)
            assert model.min_parameter() >= 0.0

    def test_unobserved_slices_keep_initialization(self):
        """Rows without observations are never touched by an epoch."""
        dims = (3, 2, 2)
        t = SparseTensor3.from_entries(dims, [((0, 0, 0), 1.0), ((0, 1, 1), 2.0)])
        model = init_random(dims, BlockStructure(((1, 1, 1),)), 9)
        after = epoch(model, t, ZERO_REG)
        np.testing.assert_array_equal(after.user_factors[0][1:], model.user_factors[0][1:])
        np.testing.assert_array_equal(after.user_bias[1:], model.user_bias[1:])
        assert not np.array_equal(after.user_factors[0][0], model.user_factors[0][0])

    def test_empty_tensor_is_identity(self):
        model = init_random((2, 2, 2), BlockStructure(((1, 1, 1),)), 1)
        t = SparseTensor3.from_entries((2, 2, 2), [])
        after = epoch(model, t, ZERO_REG)
        np.testing.assert_array_equal(model_params_vector(after),
                                      model_params_vector(model))

    def test_non_finite_model_raises(self):
        tensor, model = exact_fit_instance(3)
        model.cores[0][0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            epoch(model, tensor, ZERO_REG)

    def test_objective_non_increasing(self):
        """Empirical descent over the seeded fixture suite (short check)."""
        cfg = TrainConfig(lambda1=0.01, lambda2=0.01, lambda3=0.01,
                          stop_on="train_loss")
        for seed in range(20):
            dims, structure, tensor, model = random_instance(seed)
            prev = objective(model, tensor, cfg)
            for _ in range(30):
                model = epoch(model, tensor, cfg)
                current = objective(model, tensor, cfg)
                assert current <= prev * (1 + 1e-9), f"seed {seed}"
                prev = current


class TestFit:
    def _split_instance(self, seed, dims=(8, 8, 8), structure=None, density=0.4):
        structure = structure or BlockStructure(((2, 2, 2),))
        tensor, truth, signal_std, _ = planted_tensor(seed, dims, structure, density)
        rng = np.random.default_rng(seed + 999)
        perm = rng.permutation(tensor.n_entries)
        n_val = tensor.n_entries // 10
        val = tensor.subset(perm[:n_val])
        train = tensor.subset(perm[n_val:])
        return train, val, truth, signal_std

    def test_deterministic(self):
        train, val, _, _ = self._split_instance(0)
        cfg = TrainConfig(max_iter=20, tol=1e-12, seed=5)
        m1, r1 = fit(train, val, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        m2, r2 = fit(train, val, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        assert r1.loss_trajectory == r2.loss_trajectory
        assert r1.validation_rmse_trajectory == r2.validation_rmse_trajectory
        np.testing.assert_array_equal(model_params_vector(m1), model_params_vector(m2))

    def test_infinite_tol_stops_after_one_epoch(self):
        train, val, _, _ = self._split_instance(1)
        cfg = TrainConfig(tol=float("inf"), seed=1)
        _, report = fit(train, val, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        assert report.epochs_run == 1
        assert report.converged
        assert len(report.loss_trajectory) == 1
        assert len(report.validation_rmse_trajectory) == 1

    def test_max_iter_bound(self):
        train, val, _, _ = self._split_instance(2)
        cfg = TrainConfig(max_iter=7, tol=1e-15, seed=2)
        _, report = fit(train, val, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        assert report.epochs_run == 7
        assert not report.converged

    def test_noiseless_recovery(self):
        """Planted noiseless data: training RMSE under 1% of data std."""
        train, val, _, _ = self._split_instance(2, dims=(12, 10, 8), density=0.5)
        cfg = TrainConfig(max_iter=2200, tol=1e-14, seed=2, stop_on="train_loss")
        model, report = fit(train, val, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        pred = predict_entries(model, train.user_ids, train.service_ids, train.time_ids)
        train_rmse = float(np.sqrt(np.mean((train.values - pred) ** 2)))
        assert train_rmse <= 0.01 * float(train.values.std())

    def test_bias_disabled_keeps_biases_zero(self):
        train, val, _, _ = self._split_instance(4)
        cfg = TrainConfig(max_iter=5, tol=1e-15, seed=4, bias_enabled=False)
        model, _ = fit(train, val, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        assert not model.user_bias.any()
        assert not model.service_bias.any()
        assert not model.time_bias.any()

    def test_validation_stopping_requires_validation(self):
        train, _, _, _ = self._split_instance(5)
        empty = SparseTensor3.from_entries(train.dims, [])
        with pytest.raises(EmptyInputError):
            fit(train, empty, train.dims, BlockStructure(((2, 2, 2),)), TrainConfig())

    def test_train_loss_stopping_allows_empty_validation(self):
        train, _, _, _ = self._split_instance(6)
        empty = SparseTensor3.from_entries(train.dims, [])
        cfg = TrainConfig(max_iter=3, tol=1e-15, stop_on="train_loss")
        _, report = fit(train, empty, train.dims, BlockStructure(((2, 2, 2),)), cfg)
        assert report.epochs_run == 3
        assert all(np.isnan(v) for v in report.validation_rmse_trajectory)

    def test_overlapping_sets_rejected(self):
        train, _, _, _ = self._split_instance(7)
        with pytest.raises(DuplicateIndexError):
            fit(train, train, train.dims, BlockStructure(((2, 2, 2),)), TrainConfig())

    def test_dim_mismatch(self):
        train, val, _, _ = self._split_instance(8)
        with pytest.raises(DimMismatchError):
            fit(train, val, (9, 9, 9), BlockStructure(((2, 2, 2),)), TrainConfig())


class TestGridSearch:
    def _instance(self, seed):
        tensor, _, _, _ = planted_tensor(seed, (8, 8, 6), BlockStructure(((2, 2, 2),)), 0.5)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(tensor.n_entries)
        n_val = tensor.n_entries // 5
        return tensor.subset(perm[n_val:]), tensor.subset(perm[:n_val])

    def test_single_point(self):
        train, val = self._instance(0)
        cfg = TrainConfig(max_iter=5, tol=1e-15, seed=0)
        best = grid_search(train, val, train.dims, BlockStructure(((2, 2, 2),)),
                           ((0.25,), (0.5,), (0.75,)), cfg)
        assert (best.lambda1, best.lambda2, best.lambda3) == (0.25, 0.5, 0.75)

    def test_noiseless_data_prefers_no_regularization(self):
        """On noiseless exactly-ranked data any penalty only hurts.

        Needs enough epochs that every combination is near its own
        optimum; early in training a core penalty can masquerade as
        useful because factor scale migrates between cores and factors.
        """
        train, val = self._instance(2)
        cfg = TrainConfig(max_iter=800, tol=1e-15, seed=2)
        best = grid_search(train, val, train.dims, BlockStructure(((2, 2, 2),)),
                           ((0.0, 10.0), (0.0, 10.0), (0.0, 10.0)), cfg)
        assert (best.lambda1, best.lambda2, best.lambda3) == (0.0, 0.0, 0.0)

    def test_enumeration_order_invariant(self):
        train, val = self._instance(2)
        cfg = TrainConfig(max_iter=5, tol=1e-15, seed=2)
        grids_a = ((0.0, 0.1), (0.05, 0.0), (0.0,))
        grids_b = ((0.1, 0.0), (0.0, 0.05), (0.0,))
        best_a = grid_search(train, val, train.dims, BlockStructure(((2, 2, 2),)),
                             grids_a, cfg)
        best_b = grid_search(train, val, train.dims, BlockStructure(((2, 2, 2),)),
                             grids_b, cfg)
        assert (best_a.lambda1, best_a.lambda2, best_a.lambda3) == \
               (best_b.lambda1, best_b.lambda2, best_b.lambda3)

    def test_empty_grid_rejected(self):
        train, val = self._instance(3)
        with pytest.raises(ConfigError):
            grid_search(train, val, train.dims, BlockStructure(((2, 2, 2),)),
                        ((), (0.0,), (0.0,)), TrainConfig())


def test_cp_emulation_trains():
    """Unit-rank blocks train as a biased CP model end to end."""
    tensor, _, _, _ = planted_tensor(11, (8, 8, 6), cp_structure(3), 0.5)
    rng = np.random.default_rng(11)
    perm = rng.permutation(tensor.n_entries)
    n_val = tensor.n_entries // 5
    cfg = TrainConfig(max_iter=50, tol=1e-15, seed=11)
    model, report = fit(tensor.subset(perm[n_val:]), tensor.subset(perm[:n_val]),
                        tensor.dims, cp_structure(3), cfg)
    assert report.loss_trajectory[-1] < report.loss_trajectory[0]
    assert model.min_parameter() >= 0.0
