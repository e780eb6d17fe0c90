"""Biased nonnegative block term model: parameters and prediction.

The approximation of an observed tensor is a sum of R Tucker-structured
blocks plus per-mode linear biases::

    yhat[i,j,k] = sum_r sum_{l,m,n} core_r[l,m,n] * A_r[i,l] * B_r[j,m] * C_r[k,n]
                  + d[i] + e[j] + f[k]

where block r has a dense ``L_r x M_r x N_r`` core, factor matrices
``A_r (|I| x L_r)``, ``B_r (|J| x M_r)``, ``C_r (|K| x N_r)``, and d, e, f
are the user/service/time bias vectors.  Every parameter is nonnegative.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatchError,
    InvalidStructureError,
    NegativeValueError,
    OutOfBoundsError,
    TooLargeError,
)

#: Cell budget for dense materialization; it exists as a test oracle only.
DENSE_CELL_LIMIT = 1_000_000


@dataclass(frozen=True)
class BlockStructure:
    """Shape descriptor: one (L, M, N) rank triple per block."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(tuple(int(x) for x in b) for b in self.blocks)
        if not blocks:
            raise InvalidStructureError("a block structure needs at least one block")
        for b in blocks:
            if len(b) != 3 or any(x < 1 for x in b):
                raise InvalidStructureError(f"invalid block ranks {b}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def parameter_count(self, dims) -> int:
        """Total parameters of a model with these blocks on ``dims``."""
        i, j, k = dims
        factors = sum(i * l + j * m + k * n + l * m * n for l, m, n in self.blocks)
        return factors + i + j + k


def cp_structure(n_blocks: int) -> BlockStructure:
    """Structure of ``n_blocks`` rank-(1,1,1) blocks.

    With unit blocks the model degenerates to a weighted biased CP sum,
    which is how the CP baseline is emulated.
    """
    if n_blocks < 1:
        raise InvalidStructureError("need at least one block")
    return BlockStructure(((1, 1, 1),) * n_blocks)


def tucker_structure(l: int, m: int, n: int) -> BlockStructure:
    """Single-block structure of rank (l, m, n), i.e. biased Tucker."""
    return BlockStructure(((l, m, n),))


@dataclass
class BnbtModel:
    """Parameter container for the biased nonnegative block term model."""

    dims: tuple
    structure: BlockStructure
    cores: list          # per block: (L_r, M_r, N_r) array
    user_factors: list   # per block: (|I|, L_r)
    service_factors: list
    time_factors: list
    user_bias: np.ndarray
    service_bias: np.ndarray
    time_bias: np.ndarray

    def copy(self) -> "BnbtModel":
        return BnbtModel(
            dims=self.dims,
            structure=self.structure,
            cores=[s.copy() for s in self.cores],
            user_factors=[a.copy() for a in self.user_factors],
            service_factors=[b.copy() for b in self.service_factors],
            time_factors=[c.copy() for c in self.time_factors],
            user_bias=self.user_bias.copy(),
            service_bias=self.service_bias.copy(),
            time_bias=self.time_bias.copy(),
        )

    def parameter_arrays(self):
        """All parameter arrays, in a fixed (block-major) order."""
        return (list(self.cores) + list(self.user_factors)
                + list(self.service_factors) + list(self.time_factors)
                + [self.user_bias, self.service_bias, self.time_bias])

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameter_arrays())

    def min_parameter(self) -> float:
        return min(float(a.min()) for a in self.parameter_arrays())

    def max_parameter(self) -> float:
        return max(float(a.max()) for a in self.parameter_arrays())


def validate_model(model: BnbtModel):
    """Check shape consistency and nonnegativity; raise on violation."""
    i, j, k = model.dims
    blocks = model.structure.blocks
    if not (len(model.cores) == len(model.user_factors)
            == len(model.service_factors) == len(model.time_factors)
            == len(blocks)):
        raise InvalidStructureError("per-block array lists disagree with structure")
    for r, (l, m, n) in enumerate(blocks):
        if model.cores[r].shape != (l, m, n):
            raise InvalidStructureError(f"core {r} has shape {model.cores[r].shape}, want {(l, m, n)}")
        if model.user_factors[r].shape != (i, l):
            raise InvalidStructureError(f"user factor {r} has shape {model.user_factors[r].shape}, want {(i, l)}")
        if model.service_factors[r].shape != (j, m):
            raise InvalidStructureError(f"service factor {r} has shape {model.service_factors[r].shape}, want {(j, m)}")
        if model.time_factors[r].shape != (k, n):
            raise InvalidStructureError(f"time factor {r} has shape {model.time_factors[r].shape}, want {(k, n)}")
    for name, bias, dim in (("user", model.user_bias, i),
                            ("service", model.service_bias, j),
                            ("time", model.time_bias, k)):
        if bias.shape != (dim,):
            raise InvalidStructureError(f"{name} bias has shape {bias.shape}, want {(dim,)}")
    for a in model.parameter_arrays():
        if not np.isfinite(a).all() or (a.size and a.min() < 0):
            raise NegativeValueError("model parameters must be finite and >= 0")


def init_random(dims, structure: BlockStructure, seed: int) -> BnbtModel:
    """Draw every parameter independently and uniformly from [0, 0.05].

    The draw order is fixed (cores block by block, then user, service and
    time factors, then the three bias vectors) so one seed always yields
    one bitwise-identical model.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise InvalidStructureError(f"dims must be three positive integers, got {dims}")
    if not isinstance(structure, BlockStructure):
        structure = BlockStructure(tuple(structure))
    i, j, k = dims
    rng = np.random.default_rng(int(seed) % (2 ** 64))
    u = lambda *shape: rng.uniform(0.0, 0.05, shape)
    return BnbtModel(
        dims=dims,
        structure=structure,
        cores=[u(l, m, n) for l, m, n in structure.blocks],
        user_factors=[u(i, l) for l, _, _ in structure.blocks],
        service_factors=[u(j, m) for _, m, _ in structure.blocks],
        time_factors=[u(k, n) for _, _, n in structure.blocks],
        user_bias=u(i),
        service_bias=u(j),
        time_bias=u(k),
    )


def predict_entry(model: BnbtModel, i: int, j: int, k: int) -> float:
    """Predicted QoS value at one cell, by direct quadruple summation.

    This is the scalar reference path; batched prediction goes through
    ``predict_entries`` and the dense oracle through ``dense_reconstruct``.
    """
    for axis, v in enumerate((i, j, k)):
        if not 0 <= v < model.dims[axis]:
            raise OutOfBoundsError(f"index {v} out of range [0, {model.dims[axis]}) on axis {axis}")
    total = 0.0
    for r in range(model.structure.n_blocks):
        core = model.cores[r]
        a = model.user_factors[r][i]
        b = model.service_factors[r][j]
        c = model.time_factors[r][k]
        ll, mm, nn = core.shape
        for l in range(ll):
            for m in range(mm):
                for n in range(nn):
                    total += core[l, m, n] * a[l] * b[m] * c[n]
    return total + float(model.user_bias[i] + model.service_bias[j] + model.time_bias[k])


def predict_entries(model: BnbtModel, user_ids, service_ids, time_ids) -> np.ndarray:
    """Vectorized predictions for parallel index arrays."""
    user_ids = np.asarray(user_ids)
    service_ids = np.asarray(service_ids)
    time_ids = np.asarray(time_ids)
    out = np.zeros(user_ids.shape, dtype=np.float64)
    for r in range(model.structure.n_blocks):
        ae = model.user_factors[r][user_ids]
        be = model.service_factors[r][service_ids]
        ce = model.time_factors[r][time_ids]
        out += np.einsum("pl,pm,pn,lmn->p", ae, be, ce, model.cores[r])
    out += model.user_bias[user_ids]
    out += model.service_bias[service_ids]
    out += model.time_bias[time_ids]
    return out


def dense_reconstruct(model: BnbtModel, cell_limit: int = DENSE_CELL_LIMIT) -> np.ndarray:
    """Materialize the full approximation tensor (test oracle).

    Each block is assembled by three successive mode products of its core
    with the factor matrices, then blocks are summed and biases broadcast
    on top.  This path shares no summation code with ``predict_entry``,
    which is what makes the pair a useful cross-check.
    """
    i, j, k = model.dims
    if i * j * k > cell_limit:
        raise TooLargeError(f"{i * j * k} cells exceed the limit of {cell_limit}")
    out = np.zeros((i, j, k), dtype=np.float64)
    for r in range(model.structure.n_blocks):
        t = np.tensordot(model.user_factors[r], model.cores[r], axes=(1, 0))  # (I, M, N)
        t = np.tensordot(model.service_factors[r], t, axes=(1, 1))            # (J, I, N)
        t = np.tensordot(model.time_factors[r], t, axes=(1, 2))               # (K, J, I)
        out += t.transpose(2, 1, 0)
    out += model.user_bias[:, None, None]
    out += model.service_bias[None, :, None]
    out += model.time_bias[None, None, :]
    return out


def check_dims(model: BnbtModel, tensor_dims):
    if tuple(model.dims) != tuple(tensor_dims):
        raise DimMismatchError(f"model dims {model.dims} != tensor dims {tuple(tensor_dims)}")
