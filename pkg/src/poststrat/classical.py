"""Classical estimators: weighted means, poststratified estimates, and the
unit weights implied by least-squares cell models.

Any linear model fit by least squares on cell predictors turns the
population-adjusted estimate into a weighted average of the data; the
weight vector is recoverable in closed form and takes at most one value
per cell. The two extremes are the constant-only model (all weights 1)
and the saturated cell model (full poststratification weights).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import PoststratificationTable
from .design import RANK_TOL, DesignMatrices
from .errors import DataError, EmptyCellError, RankDeficiencyError

SUM_TO_N_RTOL = 1e-9


@dataclass(frozen=True)
class WeightVector:
    """Unit weights (length n) plus the per-cell weights they came from.

    ``normalization`` is ``"sum_to_n"`` when the unit weights sum to the
    sample size, else ``"unnormalized"``. ``cell`` is None for weights that
    were never reduced to cell form (e.g. factor-rule weights).
    """

    unit: np.ndarray
    cell: np.ndarray | None = None
    normalization: str = "sum_to_n"

    @property
    def n(self) -> int:
        return self.unit.shape[0]

    @property
    def total(self) -> float:
        return float(self.unit.sum())

    def check_sum_to_n(self, rtol: float = SUM_TO_N_RTOL) -> None:
        if self.normalization == "sum_to_n":
            n = self.n
            if abs(self.total - n) > rtol * n:
                raise DataError(
                    f"weights tagged sum_to_n sum to {self.total}, expected {n}"
                )

    def renormalized(self) -> "WeightVector":
        """Rescale so the unit weights sum to n."""
        if self.total <= 0:
            raise DataError("cannot renormalize weights with nonpositive total")
        f = self.n / self.total
        return WeightVector(
            unit=self.unit * f,
            cell=None if self.cell is None else self.cell * f,
            normalization="sum_to_n",
        )

    @classmethod
    def from_cells(
        cls,
        cell_weights: np.ndarray,
        table: PoststratificationTable,
        normalization: str = "sum_to_n",
    ) -> "WeightVector":
        """Broadcast per-cell unit weights to respondents via the cell index."""
        cell_weights = np.asarray(cell_weights, dtype=float)
        return cls(
            unit=cell_weights[table.cell_of],
            cell=cell_weights,
            normalization=normalization,
        )


@dataclass(frozen=True)
class EstimateReport:
    """A point estimate with its standard errors and the weights behind it."""

    estimand: str
    estimate: float
    se: Mapping[str, float]
    weights: WeightVector | None
    model: str


def weighted_mean(y, w) -> float:
    """Weighted average sum(w*y)/sum(w); identical in unit and cell form."""
    y = np.asarray(y, dtype=float)
    wu = w.unit if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    if wu.shape != y.shape:
        raise DataError(f"weights have shape {wu.shape}, outcomes {y.shape}")
    tot = wu.sum()
    if tot <= 0:
        raise DataError("weights sum to zero; no mass to average over")
    return float(wu @ y / tot)


def cell_weighted_mean(cell_means, cell_weights) -> float:
    """Cell form of the weighted average: sum(W_j * ybar_j) / sum(W_j)."""
    ybar = np.asarray(cell_means, dtype=float)
    W = np.asarray(cell_weights, dtype=float)
    tot = W.sum()
    if tot <= 0:
        raise DataError("cell weights sum to zero")
    return float(W @ ybar / tot)


def poststratified_estimate(cell_estimates, table: PoststratificationTable) -> float:
    """Population-weighted combination of cell estimates: sum(N_j t_j)/sum(N_j)."""
    theta = np.asarray(cell_estimates, dtype=float)
    N = table.require_population()
    if theta.shape != N.shape:
        raise DataError(f"cell estimates have shape {theta.shape}, table has J={table.J}")
    live = N > 0
    if np.any(~np.isfinite(theta[live])):
        bad = int(np.flatnonzero(live & ~np.isfinite(theta))[0])
        raise DataError(
            f"cell estimate missing for populated cell {table.label_of(bad)}"
        )
    return float((N[live] @ theta[live]) / N[live].sum())


def full_poststrat_weights(table: PoststratificationTable) -> WeightVector:
    """Unit weights of full poststratification: (N_j/n_j) * (n/N) per cell.

    Requires every populated cell to be sampled; with empty populated cells
    the saturated estimator does not exist and a model-based estimator must
    predict into them instead.
    """
    N = table.require_population()
    n_j = table.n_j
    starved = (N > 0) & (n_j == 0)
    if np.any(starved):
        j = int(np.flatnonzero(starved)[0])
        raise EmptyCellError(
            f"cell {table.label_of(j)} has population {N[j]} but no respondents; "
            "full poststratification is undefined - use a model-based estimator"
        )
    w = np.zeros(table.J)
    live = n_j > 0
    w[live] = (N[live] / n_j[live]) * (table.n / N.sum())
    return WeightVector.from_cells(w, table)


def ols_fit(M: DesignMatrices, y) -> np.ndarray:
    """Least-squares coefficients via SVD with a hard collinearity check."""
    y = np.asarray(y, dtype=float)
    U, s, Vt = np.linalg.svd(M.X, full_matrices=False)
    if M.k > M.n or s[-1] <= RANK_TOL * s[0]:
        raise RankDeficiencyError("design matrix is rank deficient")
    return Vt.T @ ((U.T @ y) / s)


def classical_implied_weights(M: DesignMatrices) -> WeightVector:
    """The unit weights under which the least-squares poststratified estimate
    is a weighted average of the data.

    Computed by solving against the design factors (no explicit inverse of
    X'X). The weights are a function of the design and the counts only, take
    one value per cell, and sum to n because the design has a constant column.
    """
    N_pop = M.require_population()
    U, s, Vt = np.linalg.svd(M.X, full_matrices=False)
    if M.k > M.n or s[-1] <= RANK_TOL * s[0]:
        raise RankDeficiencyError("design matrix is rank deficient")
    a = M.X_pop.T @ N_pop
    t = Vt.T @ ((Vt @ a) / s**2)
    scale = M.n / N_pop.sum()
    w_pop = scale * (M.X_pop @ t)
    wv = WeightVector(unit=w_pop[M.cell_of], cell=w_pop, normalization="sum_to_n")
    wv.check_sum_to_n()
    return wv


def implied_weight_estimate(M: DesignMatrices, y) -> float:
    """Weighted-average evaluation of the model estimate: (1/n) sum(w_i y_i)."""
    w = classical_implied_weights(M)
    y = np.asarray(y, dtype=float)
    return float(w.unit @ y / M.n)


def regression_poststratified_estimate(M: DesignMatrices, y) -> float:
    """Direct evaluation: fit coefficients, predict every cell, combine by N_j."""
    beta = ols_fit(M, y)
    N_pop = M.require_population()
    return float(N_pop @ (M.X_pop @ beta) / N_pop.sum())
