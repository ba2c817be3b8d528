"""Hierarchical (ridge-structured) regression poststratification.

Batched indicator coefficients get independent zero-mean normal priors with
one standard deviation per batch; the penalized least-squares solve then
yields cell estimates, and the population-adjusted estimate is again a
weighted average of the data, with weights that now depend on the variance
components (and hence, through fitting, on the outcome being analyzed).

The exchangeable special case - one batch of cell indicators under a flat
overall level - has closed-form posterior means and weights. Those closed
forms and the general penalized-solve path are implemented independently
so each can check the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from .classical import WeightVector, full_poststrat_weights
from .data import PoststratificationTable
from .design import DesignMatrices
from .errors import (
    ConvergenceError,
    DataError,
    EmptyCellError,
    RankDeficiencyError,
    SchemaError,
)


@dataclass(frozen=True)
class VarianceComponents:
    """Residual sd and one prior sd per coefficient batch.

    A batch sd of 0 means complete pooling (its coefficients are forced to
    zero); math.inf means the batch is effectively unpenalized.
    """

    sigma_y: float
    sigma_batch: dict[str, float]

    def __post_init__(self):
        if not (np.isfinite(self.sigma_y) and self.sigma_y > 0):
            raise DataError(f"sigma_y must be positive and finite, got {self.sigma_y}")
        for b, s in self.sigma_batch.items():
            if math.isnan(s) or s < 0:
                raise DataError(f"batch {b!r}: sd must be >= 0, got {s}")

    @classmethod
    def exchangeable(
        cls, sigma_y: float, sigma_theta: float, batch: str = "cells"
    ) -> "VarianceComponents":
        return cls(sigma_y=sigma_y, sigma_batch={batch: sigma_theta})

    @property
    def sigma_theta(self) -> float:
        if len(self.sigma_batch) != 1:
            raise SchemaError(
                "sigma_theta is defined only for a single-batch component set"
            )
        return next(iter(self.sigma_batch.values()))


@dataclass(frozen=True)
class ShrinkageWeights:
    """Per-cell unit weights of the exchangeable model.

    ``exact`` solves the closed form; ``approximate`` replaces the fitted
    constant by 1, giving shrink * full-poststratification-weight +
    (1 - shrink) * 1. ``shrink`` is the per-cell data weight
    (n_j/sigma_y^2) / (n_j/sigma_y^2 + 1/sigma_theta^2).
    """

    exact: np.ndarray
    approximate: np.ndarray
    shrink: np.ndarray


def _split_sigmas(M: DesignMatrices, vc: VarianceComponents):
    """Column keep-mask (pooled batches dropped) and penalty diag for the rest."""
    for b in M.batches:
        if b not in vc.sigma_batch:
            raise SchemaError(f"no variance component supplied for batch {b!r}")
    keep = np.ones(M.k, dtype=bool)
    pen = np.zeros(M.k)
    for c, b in enumerate(M.batch_map):
        if b is None:
            continue
        s = vc.sigma_batch[b]
        if s == 0:
            keep[c] = False
        elif math.isinf(s):
            pen[c] = 0.0
        else:
            pen[c] = 1.0 / (s * s)
    return keep, pen[keep]


def _penalized_normal_matrix(X: np.ndarray, pen: np.ndarray, sigma_y: float):
    A = X.T @ X / (sigma_y**2)
    A[np.diag_indices_from(A)] += pen
    return A


def gls_ridge_fit(M: DesignMatrices, y, vc: VarianceComponents) -> np.ndarray:
    """Penalized least-squares coefficients (X'X/s^2 + P)^-1 X'y/s^2.

    With all penalties zero this is exactly ordinary least squares; a batch
    sd of zero pools completely (those coefficients are returned as 0).
    """
    y = np.asarray(y, dtype=float)
    keep, pen = _split_sigmas(M, vc)
    X = M.X[:, keep]
    A = _penalized_normal_matrix(X, pen, vc.sigma_y)
    try:
        c, low = sla.cho_factor(A)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(
            "penalized system is singular: unpenalized columns are collinear"
        ) from None
    beta_kept = sla.cho_solve((c, low), X.T @ y / vc.sigma_y**2)
    beta = np.zeros(M.k)
    beta[keep] = beta_kept
    return beta


def bayes_implied_weights(M: DesignMatrices, vc: VarianceComponents) -> WeightVector:
    """Unit weights under which the penalized fit's poststratified estimate is
    a weighted average of the data.

    Reduces to the classical implied weights when every penalty is zero. The
    weights sum to n because the constant column is never penalized.
    """
    N_pop = M.require_population()
    keep, pen = _split_sigmas(M, vc)
    X = M.X[:, keep]
    X_pop = M.X_pop[:, keep]
    A = _penalized_normal_matrix(X, pen, vc.sigma_y)
    try:
        c, low = sla.cho_factor(A)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(
            "penalized system is singular: unpenalized columns are collinear"
        ) from None
    t = sla.cho_solve((c, low), X_pop.T @ N_pop)
    scale = M.n / (N_pop.sum() * vc.sigma_y**2)
    w_pop = scale * (X_pop @ t)
    wv = WeightVector(unit=w_pop[M.cell_of], cell=w_pop, normalization="sum_to_n")
    wv.check_sum_to_n()
    return wv


def bayes_poststratified_estimate(M: DesignMatrices, y, vc: VarianceComponents) -> float:
    """Direct evaluation: penalized fit, predict every cell, combine by N_j."""
    beta = gls_ridge_fit(M, y, vc)
    N_pop = M.require_population()
    return float(N_pop @ (M.X_pop @ beta) / N_pop.sum())


# ---------------------------------------------------------------------------
# Marginal likelihood and variance-component fitting
# ---------------------------------------------------------------------------

_LOG_SIGMA_LO = math.log(1e-6)
_LOG_SIGMA_HI = math.log(1e6)


def marginal_loglik(M: DesignMatrices, y, vc: VarianceComponents) -> float:
    """Log marginal likelihood of y with batch coefficients integrated out and
    unpenalized coefficients profiled at their generalized-least-squares value.

    The covariance sigma_y^2 I + sum_b sigma_b^2 Z_b Z_b' is handled through
    its k x k reduction, so cost scales with the column count, not n.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    unpen_mask = np.array([b is None for b in M.batch_map])
    U = M.X[:, unpen_mask]

    # Penalized columns scaled by their prior sd: V = s^2 I + Z Z'.
    zcols, zscales = [], []
    for c, b in enumerate(M.batch_map):
        if b is None:
            continue
        s = vc.sigma_batch.get(b)
        if s is None:
            raise SchemaError(f"no variance component supplied for batch {b!r}")
        if math.isinf(s):
            raise DataError("marginal likelihood undefined for an infinite batch sd")
        if s > 0:
            zcols.append(M.X[:, c])
            zscales.append(s)
    s2 = vc.sigma_y**2

    if zcols:
        Z = np.column_stack(zcols) * np.asarray(zscales)
        q = Z.shape[1]
        C = Z.T @ Z + s2 * np.eye(q)
        cf = sla.cho_factor(C)

        def vinv(a):
            return (a - Z @ sla.cho_solve(cf, Z.T @ a)) / s2

        logdet = (n - q) * math.log(s2) + 2 * np.log(
            np.diag(cf[0])
        ).sum()
    else:

        def vinv(a):
            return a / s2

        logdet = n * math.log(s2)

    if U.shape[1]:
        VU = vinv(U)
        G = U.T @ VU
        try:
            beta_u = np.linalg.solve(G, VU.T @ y)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("unpenalized columns are collinear") from None
        r = y - U @ beta_u
    else:
        r = y
    quad = float(r @ vinv(r))
    return -0.5 * (n * math.log(2 * math.pi) + logdet + quad)


def fit_variance_components(
    M: DesignMatrices,
    y,
    *,
    xatol: float = 1e-8,
    joint_tol: float = 1e-6,
    max_evals: int = 500,
    max_cycles: int = 100,
) -> VarianceComponents:
    """Maximize the marginal likelihood over sigma_y and the batch sds.

    Coordinate cycles of bounded scalar maximization on the log-sd scale;
    deterministic given the inputs. Raises ``ConvergenceError`` carrying the
    best iterate if the cycles do not settle.
    """
    y = np.asarray(y, dtype=float)
    batches = M.batches
    if not batches:
        raise SchemaError("variance-component fitting needs at least one batch")
    k_unpen = sum(b is None for b in M.batch_map)
    if y.shape[0] <= k_unpen:
        raise DataError(
            f"need more observations ({y.shape[0]}) than unpenalized columns ({k_unpen})"
        )

    scale = float(np.std(y)) or 1.0
    log_sigmas = {name: math.log(scale) for name in ("sigma_y", *batches)}

    def current() -> VarianceComponents:
        return VarianceComponents(
            sigma_y=math.exp(log_sigmas["sigma_y"]),
            sigma_batch={b: math.exp(log_sigmas[b]) for b in batches},
        )

    def objective(name: str, value: float) -> float:
        trial = dict(log_sigmas)
        trial[name] = value
        vc = VarianceComponents(
            sigma_y=math.exp(trial["sigma_y"]),
            sigma_batch={b: math.exp(trial[b]) for b in batches},
        )
        return -marginal_loglik(M, y, vc)

    for _ in range(max_cycles):
        biggest = 0.0
        for name in log_sigmas:
            res = optimize.minimize_scalar(
                lambda v: objective(name, v),
                bounds=(_LOG_SIGMA_LO, _LOG_SIGMA_HI),
                method="bounded",
                options={"xatol": xatol, "maxiter": max_evals},
            )
            biggest = max(biggest, abs(res.x - log_sigmas[name]))
            log_sigmas[name] = float(res.x)
        if biggest < joint_tol:
            return current()
    raise ConvergenceError(
        f"variance components did not settle in {max_cycles} cycles",
        best=current(),
    )


# ---------------------------------------------------------------------------
# Exchangeable normal model: closed forms
# ---------------------------------------------------------------------------


def _exch_setup(table: PoststratificationTable, vc: VarianceComponents):
    n_j = table.n_j
    sampled = n_j > 0
    return n_j, sampled, vc.sigma_y**2, vc.sigma_theta**2


def cell_means(y, table: PoststratificationTable) -> np.ndarray:
    """Sample mean per cell; NaN where the cell has no respondents."""
    y = np.asarray(y, dtype=float)
    sums = np.bincount(table.cell_of, weights=y, minlength=table.J)
    out = np.full(table.J, np.nan)
    live = table.n_j > 0
    out[live] = sums[live] / table.n_j[live]
    return out


def exch_normal_posterior(
    ybar, table: PoststratificationTable, vc: VarianceComponents
) -> tuple[np.ndarray, float]:
    """Posterior cell means under exchangeable shrinkage toward a fitted level.

    Each sampled cell mean is pulled toward the precision-weighted overall
    level; unsampled cells sit at that level. sigma_theta = 0 pools
    completely, sigma_theta = inf leaves cell means untouched.
    """
    ybar = np.asarray(ybar, dtype=float)
    n_j, sampled, s2y, s2t = _exch_setup(table, vc)
    if np.any(~np.isfinite(ybar[sampled])):
        raise DataError("cell means must be finite for every sampled cell")
    ns = n_j[sampled]
    ys = ybar[sampled]

    if math.isinf(s2t):
        mu = float(ys.mean())
        theta = ybar.copy()
        theta[~sampled] = mu
        return theta, mu

    prec = ns / (s2y + ns * s2t)  # 1 / (s2y/n + s2t), stable at s2t = 0
    mu = float((prec * ys).sum() / prec.sum())
    shrink = ns * s2t / (s2y + ns * s2t)
    theta = np.full(table.J, mu)
    theta[sampled] = shrink * ys + (1 - shrink) * mu
    return theta, mu


def exch_posterior_coefficients(
    table: PoststratificationTable, vc: VarianceComponents
) -> np.ndarray:
    """Matrix C with theta_hat = C @ ybar over sampled cells; rows sum to 1.

    Row k mixes cell k's own mean (weight = its shrink factor) with every
    cell's contribution to the fitted overall level.
    """
    n_j, sampled, s2y, s2t = _exch_setup(table, vc)
    if not np.all(sampled):
        raise EmptyCellError("coefficient matrix requires every cell to be sampled")
    if math.isinf(s2t):
        return np.eye(table.J)
    A = n_j / (s2y + n_j * s2t)
    shrink = n_j * s2t / (s2y + n_j * s2t)
    C = np.outer(1 - shrink, A / A.sum())
    C[np.diag_indices_from(C)] += shrink
    return C


def approx_shrinkage_weights(
    table: PoststratificationTable, vc: VarianceComponents
) -> np.ndarray:
    """Shrunk unit weights: shrink * full-poststrat weight + (1 - shrink) * 1."""
    n_j, sampled, s2y, s2t = _exch_setup(table, vc)
    full = full_poststrat_weights(table).cell
    if math.isinf(s2t):
        return full.copy()
    shrink = n_j * s2t / (s2y + n_j * s2t)
    return shrink * full + (1 - shrink)


def exch_normal_weights(
    table: PoststratificationTable, vc: VarianceComponents
) -> ShrinkageWeights:
    """Exact and approximate per-cell unit weights of the exchangeable model.

    The exact weight interpolates between the full poststratification weight
    and the model's fitted constant; the approximation replaces that constant
    by 1 and is exact whenever the n_j are all equal. Sampled-cell weights
    satisfy sum(n_j w_j) = n.
    """
    n_j, sampled, s2y, s2t = _exch_setup(table, vc)
    N = table.require_population()
    if np.any((N > 0) & ~sampled):
        j = int(np.flatnonzero((N > 0) & ~sampled)[0])
        raise EmptyCellError(
            f"cell {table.label_of(j)} is populated but unsampled; closed-form "
            "weights need every populated cell sampled"
        )
    full = full_poststrat_weights(table).cell
    if math.isinf(s2t):
        exact = full.copy()
        shrink = np.ones(table.J)
    else:
        A = n_j / (s2y + n_j * s2t)
        shrink = n_j * s2t / (s2y + n_j * s2t)
        smoothed = float((A * full).sum() / A.sum())  # fitted-constant weight
        exact = shrink * full + (1 - shrink) * smoothed
    approx = approx_shrinkage_weights(table, vc)
    if math.isinf(s2t):
        shrink = np.ones(table.J)
    return ShrinkageWeights(exact=exact, approximate=approx, shrink=shrink)


def exch_weight_vector(
    table: PoststratificationTable, vc: VarianceComponents
) -> WeightVector:
    """Exact exchangeable weights broadcast to respondents."""
    sw = exch_normal_weights(table, vc)
    return WeightVector.from_cells(sw.exact, table)
