"""Prediction metrics and the cross-density benchmark harness.

The harness trains one model per (sub-dataset, model config, repeat) cell,
scoring each on the held-out test partition:

    RMSE = sqrt(mean((y - yhat)^2))      MAE = mean(|y - yhat|)

Detail rows and per-model aggregates are exported as CSV with the columns
``dataset,model,seed,lambda1,lambda2,lambda3,epochs,rmse,mae,wall_time_s``
and ``dataset,model,rmse_mean,rmse_std,mae_mean,mae_std``.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_io import SplitSpec, split
from .errors import ConfigError, EmptyTestSetError
from .model import BlockStructure, BnbtModel, check_dims, predict_entries
from .rng import derive_seed
from .sparse import SparseTensor3
from .trainer import TrainConfig, fit, grid_search

logger = logging.getLogger(__name__)

DETAIL_COLUMNS = ("dataset", "model", "seed", "lambda1", "lambda2", "lambda3",
                  "epochs", "rmse", "mae", "wall_time_s")
AGGREGATE_COLUMNS = ("dataset", "model", "rmse_mean", "rmse_std",
                     "mae_mean", "mae_std")


def _residuals(model: BnbtModel, test: SparseTensor3) -> np.ndarray:
    check_dims(model, test.dims)
    if test.n_entries == 0:
        raise EmptyTestSetError("metrics need at least one test entry")
    pred = predict_entries(model, test.user_ids, test.service_ids, test.time_ids)
    return test.values - pred


def rmse(model: BnbtModel, test: SparseTensor3) -> float:
    resid = _residuals(model, test)
    return float(np.sqrt(resid @ resid / resid.size))


def mae(model: BnbtModel, test: SparseTensor3) -> float:
    resid = _residuals(model, test)
    return float(np.abs(resid).mean())


@dataclass(frozen=True)
class BenchmarkCell:
    """Metrics of one trained model on one sub-dataset for one seed."""

    dataset: str
    model: str
    seed: int
    lambda1: float
    lambda2: float
    lambda3: float
    epochs: int
    rmse: float
    mae: float
    wall_time_s: float


@dataclass(frozen=True)
class ModelAggregate:
    """Mean and sample standard deviation of a model's cells."""

    dataset: str
    model: str
    rmse_mean: float
    rmse_std: float
    mae_mean: float
    mae_std: float


@dataclass
class MetricsReport:
    cells: list
    aggregates: list

    def write_detail_csv(self, path):
        _write_csv(path, DETAIL_COLUMNS, self.cells)

    def write_aggregate_csv(self, path):
        _write_csv(path, AGGREGATE_COLUMNS, self.aggregates)


def _write_csv(path, columns, rows):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([getattr(row, col) for col in columns])


def _aggregate(cells):
    out = []
    seen = []
    for cell in cells:
        key = (cell.dataset, cell.model)
        if key not in seen:
            seen.append(key)
    for dataset, model_label in seen:
        rs = np.array([c.rmse for c in cells
                       if (c.dataset, c.model) == (dataset, model_label)])
        ms = np.array([c.mae for c in cells
                       if (c.dataset, c.model) == (dataset, model_label)])
        out.append(ModelAggregate(
            dataset=dataset,
            model=model_label,
            rmse_mean=float(rs.mean()),
            rmse_std=float(rs.std(ddof=1)) if rs.size > 1 else 0.0,
            mae_mean=float(ms.mean()),
            mae_std=float(ms.std(ddof=1)) if ms.size > 1 else 0.0,
        ))
    return out


def run_benchmark(source: SparseTensor3, split_specs, model_configs,
                  cfg: TrainConfig, repeats, grids=None,
                  threads: int = 1) -> MetricsReport:
    """Train and score every (sub-dataset, model, repeat) cell.

    ``split_specs`` maps sub-dataset labels to ratio triples, as a list of
    ``(label, (train, validation, test))``.  ``model_configs`` is a list of
    ``(label, BlockStructure)``.  ``repeats`` is either a run count or an
    explicit list of per-run seeds; all per-cell randomness (the split
    shuffle and the model init) is derived from the run seed and the cell
    labels, so the same seed always reproduces the same cell.  When
    ``grids`` (a lambda-grid triple) is given, each cell grid-searches its
    regularization before the final fit.  Cells are independent and may be
    trained in up to ``threads`` threads; the report order is fixed.
    """
    if not split_specs:
        raise ConfigError("need at least one split spec")
    if not model_configs:
        raise ConfigError("need at least one model config")
    seeds = list(range(repeats)) if isinstance(repeats, int) else [int(s) for s in repeats]
    if not seeds:
        raise ConfigError("need at least one repeat")

    splits = {}
    for label, ratios in split_specs:
        for run_seed in seeds:
            spec = SplitSpec(*ratios, seed=derive_seed(run_seed, label, "split"))
            splits[(label, run_seed)] = split(source, spec)

    tasks = [(label, model_label, structure, run_seed)
             for label, _ in split_specs
             for model_label, structure in model_configs
             for run_seed in seeds]

    def run_cell(task):
        label, model_label, structure, run_seed = task
        parts = splits[(label, run_seed)]
        cell_cfg = replace(cfg, seed=derive_seed(run_seed, label, model_label, "train"))
        if grids is not None:
            cell_cfg = grid_search(parts.train, parts.validation, source.dims,
                                   structure, grids, cell_cfg)
        model, report = fit(parts.train, parts.validation, source.dims,
                            structure, cell_cfg)
        cell = BenchmarkCell(
            dataset=label,
            model=model_label,
            seed=run_seed,
            lambda1=cell_cfg.lambda1,
            lambda2=cell_cfg.lambda2,
            lambda3=cell_cfg.lambda3,
            epochs=report.epochs_run,
            rmse=rmse(model, parts.test),
            mae=mae(model, parts.test),
            wall_time_s=report.wall_time,
        )
        logger.info("cell %s/%s seed=%d: rmse=%.4f mae=%.4f (%d epochs)",
                    label, model_label, run_seed, cell.rmse, cell.mae, cell.epochs)
        return cell

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(run_cell, tasks))
    else:
        cells = [run_cell(task) for task in tasks]

    return MetricsReport(cells=cells, aggregates=_aggregate(cells))
