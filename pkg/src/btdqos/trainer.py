"""Regularized objective and nonnegative multiplicative-update training.

Training minimizes, over the observed entry set, the squared prediction
error plus L2 penalties whose weights ride inside the per-entry sum::

    loss = sum_obs [ delta^2
                     + lambda1 * sum(core^2)
                     + lambda2 * (sum(A[i,:]^2) + sum(B[j,:]^2) + sum(C[k,:]^2))
                     + lambda3 * (d[i]^2 + e[j]^2 + f[k]^2) ]

so each parameter's penalty is weighted by how many observed entries touch
it.  One epoch applies, in order, multiplicative updates to the cores, the
three factor families and the three bias vectors; each rule is a ratio of
the per-slice "observed" and "predicted" weighted sums, e.g. for a user
factor entry::

    a <- a * sum_{obs(i)} y * g / (sum_{obs(i)} yhat * g + lambda2 * |obs(i)| * a)

with g the core/factor contraction for that entry, and for a user bias::

    d <- d * sum_{obs(i)} y / (sum_{obs(i)} yhat + lambda3 * |obs(i)| * d)

Ratios of nonnegative sums keep every parameter nonnegative without any
projection step.  The prediction cache is refreshed after each of the seven
update passes (cores, A, B, C, d, e, f), not after every coordinate:
per-coordinate refreshes would cost a full prediction pass per coordinate
and destroy the linear-in-observations epoch cost.  Every denominator gets
a small additive guard so empty or all-zero slices cannot divide by zero;
parameters of slices with no observations are left untouched.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .errors import (
    ConfigError,
    DimMismatchError,
    DuplicateIndexError,
    EmptyInputError,
    InvalidCoordinateError,
    NonFiniteError,
)
from .model import BnbtModel, check_dims, init_random, predict_entries
from .sparse import SparseTensor3

logger = logging.getLogger(__name__)

#: Stopping metrics for ``fit``.
STOP_ON_VALIDATION = "validation_rmse"
STOP_ON_TRAIN_LOSS = "train_loss"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and loop controls for one training run."""

    lambda1: float = 0.0        # core penalty
    lambda2: float = 0.0        # factor penalty
    lambda3: float = 0.0        # bias penalty
    max_iter: int = 1000
    tol: float = 1e-5
    seed: int = 0
    epsilon_guard: float = 1e-12
    bias_enabled: bool = True
    freeze_cores: bool = False  # keep cores fixed (CP-emulation ablation)
    stop_on: str = STOP_ON_VALIDATION

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ConfigError("regularization coefficients must be >= 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0")
        if not self.epsilon_guard > 0:
            raise ConfigError("epsilon_guard must be > 0")
        if self.stop_on not in (STOP_ON_VALIDATION, STOP_ON_TRAIN_LOSS):
            raise ConfigError(f"unknown stop_on {self.stop_on!r}")


@dataclass
class TrainReport:
    """Bookkeeping for one ``fit`` run."""

    epochs_run: int
    loss_trajectory: list = field(default_factory=list)
    validation_rmse_trajectory: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0


# -- objective and its analytic gradient ---------------------------------

def objective(model: BnbtModel, train: SparseTensor3, cfg: TrainConfig) -> float:
    """Regularized training loss over the observed entries."""
    check_dims(model, train.dims)
    pred = predict_entries(model, train.user_ids, train.service_ids, train.time_ids)
    resid = train.values - pred
    loss = float(resid @ resid)
    if cfg.lambda1 > 0.0:
        core_sq = sum(float((s * s).sum()) for s in model.cores)
        loss += cfg.lambda1 * train.n_entries * core_sq
    if cfg.lambda2 > 0.0:
        for factors, mode in ((model.user_factors, "user"),
                              (model.service_factors, "service"),
                              (model.time_factors, "time")):
            row_sq = sum((f * f).sum(axis=1) for f in factors)
            loss += cfg.lambda2 * float(train.slice_counts(mode) @ row_sq)
    if cfg.lambda3 > 0.0:
        for bias, mode in ((model.user_bias, "user"),
                           (model.service_bias, "service"),
                           (model.time_bias, "time")):
            loss += cfg.lambda3 * float(train.slice_counts(mode) @ (bias * bias))
    return loss


def gradient(model: BnbtModel, train: SparseTensor3, cfg: TrainConfig, coord) -> float:
    """Analytic descent direction for one parameter coordinate.

    Returns the additive-rule bracket, which equals exactly half of
    ``d objective / d coord`` (the squared-error term is differentiated
    without its factor 2; the same convention rescales the eliminated
    per-parameter learning rate and cancels in the multiplicative rules).
    Used by tests as the gradient oracle; the trainer never evaluates it.

    Coordinates: ("core", r, l, m, n), ("user", r, i, l),
    ("service", r, j, m), ("time", r, k, n), ("user_bias", i),
    ("service_bias", j), ("time_bias", k).
    """
    check_dims(model, train.dims)
    kind, rest = coord[0], coord[1:]
    blocks = model.structure.blocks

    def _check(cond, msg):
        if not cond:
            raise InvalidCoordinateError(f"{coord}: {msg}")

    if kind == "core":
        _check(len(rest) == 4, "expected (r, l, m, n)")
        r, l, m, n = rest
        _check(0 <= r < len(blocks), "block out of range")
        _check(all(0 <= x < d for x, d in zip((l, m, n), blocks[r])), "rank index out of range")
        u, s, t, y = (train.user_ids, train.service_ids, train.time_ids, train.values)
        w = (model.user_factors[r][u, l] * model.service_factors[r][s, m]
             * model.time_factors[r][t, n])
        delta = y - predict_entries(model, u, s, t)
        return cfg.lambda1 * float(model.cores[r][l, m, n]) * train.n_entries - float(delta @ w)

    if kind in ("user", "service", "time"):
        _check(len(rest) == 3, "expected (r, index, rank)")
        r, idx, rank = rest
        _check(0 <= r < len(blocks), "block out of range")
        axis = ("user", "service", "time").index(kind)
        _check(0 <= rank < blocks[r][axis], "rank index out of range")
        _check(0 <= idx < model.dims[axis], "slice index out of range")
        factors = (model.user_factors, model.service_factors, model.time_factors)[axis]
        u, s, t, y = train.slice_entries(kind, idx)
        core = model.cores[r]
        if kind == "user":
            contr = np.einsum("mn,pm,pn->p", core[rank],
                              model.service_factors[r][s], model.time_factors[r][t])
        elif kind == "service":
            contr = np.einsum("ln,pl,pn->p", core[:, rank, :],
                              model.user_factors[r][u], model.time_factors[r][t])
        else:
            contr = np.einsum("lm,pl,pm->p", core[:, :, rank],
                              model.user_factors[r][u], model.service_factors[r][s])
        delta = y - predict_entries(model, u, s, t)
        value = float(factors[r][idx, rank])
        return cfg.lambda2 * value * y.size - float(delta @ contr)

    if kind in ("user_bias", "service_bias", "time_bias"):
        _check(len(rest) == 1, "expected (index,)")
        (idx,) = rest
        mode = kind.split("_")[0]
        axis = ("user", "service", "time").index(mode)
        _check(0 <= idx < model.dims[axis], "slice index out of range")
        bias = (model.user_bias, model.service_bias, model.time_bias)[axis]
        u, s, t, y = train.slice_entries(mode, idx)
        delta = y - predict_entries(model, u, s, t)
        return cfg.lambda3 * float(bias[idx]) * y.size - float(delta.sum())

    raise InvalidCoordinateError(f"unknown coordinate kind {kind!r}")


# -- one training epoch ---------------------------------------------------

def _column_sums(idx, weights, dim):
    # Segment-sum each column of `weights` by `idx`.  bincount accumulates
    # in entry order, so the sums follow the tensor's lexicographic order.
    out = np.empty((dim, weights.shape[1]), dtype=np.float64)
    for col in range(weights.shape[1]):
        out[:, col] = np.bincount(idx, weights=weights[:, col], minlength=dim)
    return out


def epoch(model: BnbtModel, train: SparseTensor3, cfg: TrainConfig) -> BnbtModel:
    """One full multiplicative-update pass; returns a new model.

    Pass order is cores, user factors, service factors, time factors, then
    the three biases; predictions over the observed entries are recomputed
    after each pass.  Parameters whose slice has no observations keep their
    current values.
    """
    check_dims(model, train.dims)
    m = model.copy()
    if train.n_entries == 0:
        return m

    u, s, t = train.user_ids, train.service_ids, train.time_ids
    y = train.values
    n_obs = train.n_entries
    guard = cfg.epsilon_guard
    counts = {mode: train.slice_counts(mode) for mode in ("user", "service", "time")}
    yhat = predict_entries(m, u, s, t)
    if not np.isfinite(yhat).all():
        raise NonFiniteError("model predictions are non-finite before the epoch")

    if not cfg.freeze_cores:
        new_cores = []
        for r in range(m.structure.n_blocks):
            ae = m.user_factors[r][u]
            be = m.service_factors[r][s]
            ce = m.time_factors[r][t]
            num = np.einsum("p,pl,pm,pn->lmn", y, ae, be, ce)
            den = np.einsum("p,pl,pm,pn->lmn", yhat, ae, be, ce)
            den += cfg.lambda1 * n_obs * m.cores[r]
            new_cores.append(m.cores[r] * num / (den + guard))
        m.cores = new_cores
        yhat = predict_entries(m, u, s, t)

    for mode, idx, factors in (("user", u, m.user_factors),
                               ("service", s, m.service_factors),
                               ("time", t, m.time_factors)):
        cnt = counts[mode]
        observed = cnt[:, None] > 0
        updated = []
        for r in range(m.structure.n_blocks):
            core = m.cores[r]
            ae = m.user_factors[r][u]
            be = m.service_factors[r][s]
            ce = m.time_factors[r][t]
            if mode == "user":
                contr = np.einsum("lmn,pm,pn->pl", core, be, ce)
            elif mode == "service":
                contr = np.einsum("lmn,pl,pn->pm", core, ae, ce)
            else:
                contr = np.einsum("lmn,pl,pm->pn", core, ae, be)
            f = factors[r]
            num = _column_sums(idx, y[:, None] * contr, f.shape[0])
            den = _column_sums(idx, yhat[:, None] * contr, f.shape[0])
            den += cfg.lambda2 * cnt[:, None] * f
            updated.append(np.where(observed, f * num / (den + guard), f))
        if mode == "user":
            m.user_factors = updated
        elif mode == "service":
            m.service_factors = updated
        else:
            m.time_factors = updated
        yhat = predict_entries(m, u, s, t)

    if cfg.bias_enabled:
        for mode, idx, which in (("user", u, "user_bias"),
                                 ("service", s, "service_bias"),
                                 ("time", t, "time_bias")):
            cnt = counts[mode]
            bias = getattr(m, which)
            num = np.bincount(idx, weights=y, minlength=bias.size)
            den = np.bincount(idx, weights=yhat, minlength=bias.size)
            den += cfg.lambda3 * cnt * bias
            setattr(m, which, np.where(cnt > 0, bias * num / (den + guard), bias))
            yhat = predict_entries(m, u, s, t)

    for arr in m.parameter_arrays():
        if not np.isfinite(arr).all():
            raise NonFiniteError("update produced a non-finite parameter")
    return m


# -- training loop --------------------------------------------------------

def _validation_rmse(model, validation):
    pred = predict_entries(model, validation.user_ids, validation.service_ids,
                           validation.time_ids)
    resid = validation.values - pred
    return float(np.sqrt(resid @ resid / resid.size))


def fit(train: SparseTensor3, validation: SparseTensor3, dims, structure,
        cfg: TrainConfig):
    """Train a fresh model until the stop metric settles.

    The model starts from ``init_random(dims, structure, cfg.seed)`` and
    runs epochs until the absolute change of the stop metric between two
    consecutive epochs drops below ``cfg.tol`` or ``cfg.max_iter`` is
    reached.  The default metric is RMSE on the validation partition;
    ``stop_on="train_loss"`` switches to the training objective.

    Returns ``(model, TrainReport)``.
    """
    for tensor in (train, validation):
        if tuple(tensor.dims) != tuple(dims):
            raise DimMismatchError(
                f"tensor dims {tuple(tensor.dims)} differ from requested dims {tuple(dims)}")
    overlap = np.intersect1d(train.index_codes(), validation.index_codes())
    if overlap.size:
        raise DuplicateIndexError(
            f"train and validation sets share {overlap.size} entries")
    if train.n_entries == 0:
        raise EmptyInputError("training set is empty")
    use_validation = cfg.stop_on == STOP_ON_VALIDATION
    if use_validation and validation.n_entries == 0:
        raise EmptyInputError(
            "validation set is empty; use stop_on='train_loss' instead")

    started = time.perf_counter()
    model = init_random(dims, structure, cfg.seed)
    if not cfg.bias_enabled:
        model.user_bias = np.zeros(dims[0])
        model.service_bias = np.zeros(dims[1])
        model.time_bias = np.zeros(dims[2])

    losses = []
    val_rmses = []
    prev = (_validation_rmse(model, validation) if use_validation
            else objective(model, train, cfg))
    converged = False
    for n in range(cfg.max_iter):
        model = epoch(model, train, cfg)
        losses.append(objective(model, train, cfg))
        val_rmses.append(_validation_rmse(model, validation)
                         if validation.n_entries else float("nan"))
        current = val_rmses[-1] if use_validation else losses[-1]
        if n % 100 == 0:
            logger.debug("epoch %d: loss=%.6g metric=%.6g", n + 1, losses[-1], current)
        if abs(current - prev) < cfg.tol:
            converged = True
            break
        prev = current

    report = TrainReport(
        epochs_run=len(losses),
        loss_trajectory=losses,
        validation_rmse_trajectory=val_rmses,
        converged=converged,
        wall_time=time.perf_counter() - started,
    )
    logger.info("fit: %d epochs, converged=%s, final loss %.6g",
                report.epochs_run, converged, losses[-1])
    return model, report


def grid_search(train: SparseTensor3, validation: SparseTensor3, dims, structure,
                grids, cfg: TrainConfig) -> TrainConfig:
    """Pick the regularization triple minimizing validation RMSE.

    ``grids`` is a (lambda1_grid, lambda2_grid, lambda3_grid) triple of
    candidate sequences.  One model is trained per combination; ties are
    broken toward the lexicographically smallest triple, so the result
    does not depend on grid enumeration order.
    """
    axes = [sorted(set(float(v) for v in g)) for g in grids]
    if any(not axis for axis in axes):
        raise ConfigError("every lambda grid must be nonempty")
    best_key = None
    best_cfg = None
    for l1, l2, l3 in product(*axes):
        candidate = replace(cfg, lambda1=l1, lambda2=l2, lambda3=l3)
        _, report = fit(train, validation, dims, structure, candidate)
        score = (report.validation_rmse_trajectory[-1]
                 if candidate.stop_on == STOP_ON_VALIDATION
                 else report.loss_trajectory[-1])
        key = (score, l1, l2, l3)
        logger.info("grid point lambda=(%g, %g, %g): score %.6g", l1, l2, l3, score)
        if best_key is None or key < best_key:
            best_key, best_cfg = key, candidate
    return best_cfg
