"""Generalized quasi-likelihood score (GQLS) association statistics.

The allele proportion ``Y`` of a marker is the response and the trait ``X``
the covariate of a logistic mean model. Under no association the responses
share a common mean ``mu`` and covariance ``mu (1 - mu) R / 2``; the score
test of the trait slope then has the closed form

    W_G = 2 / (mu (1 - mu)) * A^2 / B,
    A = X' R^-1 (Y - mu 1),
    B = X' R^-1 X - (X' R^-1 1)^2 / (1' R^-1 1),

which is chi-square with one degree of freedom under the null. Multi-allelic
markers generalize this to ``k - 1`` degrees of freedom, and stratified
samples add per-population statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.special

from .exceptions import (
    ConstantTraitError,
    DegenerateTestError,
    MonomorphicMarkerError,
    SingularMatrixError,
)
from .pedigree import BlockDiagonalR, RMatrix

MU_BOUND = 1e-10
TRAIT_TOLERANCE = 1e-12
# statistics below this are compared absolutely (p-value is 1 to machine precision)
ORACLE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class NullFit:
    mu_hat: np.ndarray
    beta0_hat: np.ndarray
    f_hat: np.ndarray | None = None

    @property
    def mu(self) -> float:
        """Scalar allele frequency of a biallelic fit."""
        return float(self.mu_hat[0])


@dataclass(eq=False)
class AssocResult:
    marker_id: str
    statistic: float
    df: int
    p_value: float
    method: str
    n_used: int
    null_fit: NullFit | None = None
    flags: tuple[str, ...] = ()
    detail: list[tuple[str, "AssocResult"]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return np.isfinite(self.statistic)

    @property
    def mu_hat_text(self) -> str:
        if self.null_fit is None:
            return "."
        return ",".join(f"{v:.10g}" for v in self.null_fit.mu_hat)


@dataclass(frozen=True)
class ScoreOracleReport:
    score: np.ndarray
    info_inverse_entry: float
    w_generic: float
    w_closed: float
    rel_diff: float
    beta0_hat: float


def chi_square_sf(w: float, df: int) -> float:
    """Upper-tail chi-square probability via the regularized incomplete gamma."""
    if w < 0:
        raise ValueError("statistic must be nonnegative")
    if df < 1:
        raise ValueError("degrees of freedom must be positive")
    if w == 0:
        return 1.0
    return float(scipy.special.gammaincc(0.5 * df, 0.5 * w))


# --- quadratic forms shared by all statistics -------------------------------

@dataclass(frozen=True, eq=False)
class _Moments:
    """Inner products ``u' R^-1 v`` among ``1``, ``X`` and the response columns."""

    one_one: float
    one_x: float
    x_x: float
    one_y: np.ndarray  # (k-1,)
    x_y: np.ndarray  # (k-1,)
    n: int

    def __add__(self, other: "_Moments") -> "_Moments":
        return _Moments(
            self.one_one + other.one_one,
            self.one_x + other.one_x,
            self.x_x + other.x_x,
            self.one_y + other.one_y,
            self.x_y + other.x_y,
            self.n + other.n,
        )


def _moments(x, ycols, r: RMatrix) -> _Moments:
    n = r.n
    ones = np.ones(n)
    rhs = np.column_stack([ones, x]) if x is not None else ones[:, None]
    sol = r.solve(rhs)
    r1 = sol[:, 0]
    one_one = float(ones @ r1)
    one_y = ycols.T @ r1
    if x is None:
        return _Moments(one_one, 0.0, 0.0, one_y, np.zeros_like(one_y), n)
    rx = sol[:, 1]
    return _Moments(one_one, float(x @ r1), float(x @ rx), one_y, ycols.T @ rx, n)


def _family_moments(x, ycols, r) -> _Moments:
    if isinstance(r, BlockDiagonalR):
        total = None
        for idx, rf in r:
            m = _moments(None if x is None else x[idx], ycols[idx], rf)
            total = m if total is None else total + m
        return total
    return _moments(x, ycols, r)


def _as_columns(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def _centered(x) -> np.ndarray:
    # W is shift invariant; centering avoids cancellation in B for offset traits
    x = np.asarray(x, dtype=float)
    return x - x.mean() if x.size else x


def _check_inputs(x, ycols, r):
    if ycols.shape[0] != r.n or (x is not None and len(x) != r.n):
        raise ValueError("trait, marker and relationship matrix sizes differ")
    if np.isnan(ycols).any() or (x is not None and np.isnan(x).any()):
        raise ValueError("inputs contain missing values; restrict to the effective subset first")
    if r.n < 2:
        raise DegenerateTestError("fewer than 2 subjects")


def _fit_from_moments(mom: _Moments, ycols: np.ndarray) -> NullFit:
    if np.all(ycols == ycols[0]):
        raise MonomorphicMarkerError("marker is monomorphic on the tested subjects")
    mu = mom.one_y / mom.one_one
    if np.any(mu < MU_BOUND) or np.any(mu > 1 - MU_BOUND) or mu.sum() > 1 - MU_BOUND:
        raise MonomorphicMarkerError(f"estimated allele frequency {mu} is degenerate")
    if ycols.shape[1] == 1:
        beta0 = np.log(mu / (1 - mu))
        f = np.array([[0.5 * mu[0] * (1 - mu[0])]])
    else:
        beta0 = np.log(mu / (1 - mu.sum()))
        f = multinomial_f(mu)
    return NullFit(mu, beta0, f)


def multinomial_f(mu) -> np.ndarray:
    """Covariance of allele proportions for one diploid draw.

    ``F_jj = mu_j (1 - mu_j) / 2`` and ``F_jl = -mu_j mu_l / 2``.
    """
    mu = np.asarray(mu, dtype=float)
    return 0.5 * (np.diag(mu) - np.outer(mu, mu))


# --- null fits ---------------------------------------------------------------

def fit_null_biallelic(y, r: RMatrix | BlockDiagonalR) -> NullFit:
    """Generalized least-squares allele frequency ``(1'R^-1 1)^-1 1'R^-1 Y``.

    With a :class:`BlockDiagonalR` the per-family sums are accumulated.
    """
    ycols = _as_columns(y)
    if ycols.shape[1] != 1:
        raise ValueError("biallelic fit needs a single response column")
    _check_inputs(None, ycols, r)
    return _fit_from_moments(_family_moments(None, ycols, r), ycols)


def fit_null_multiallelic(y, r: RMatrix | BlockDiagonalR) -> NullFit:
    """Componentwise GLS frequencies of the first ``k - 1`` alleles and ``F``."""
    ycols = _as_columns(y)
    _check_inputs(None, ycols, r)
    if ycols.shape[1] > 1:
        obs = ycols.sum(axis=0)
        omitted = (1 - ycols.sum(axis=1)).sum()
        if np.any(obs == 0) or omitted == 0:
            raise MonomorphicMarkerError("an allele is not observed on the tested subjects")
    return _fit_from_moments(_family_moments(None, ycols, r), ycols)


# --- statistics --------------------------------------------------------------

def _trait_denominator(mom: _Moments) -> float:
    b = mom.x_x - mom.one_x**2 / mom.one_one
    if not b > TRAIT_TOLERANCE * abs(mom.x_x):
        raise ConstantTraitError("trait carries no information beyond the intercept")
    return b


def _result(marker_id, w, df, method, n, fit, flags=()) -> AssocResult:
    w = max(float(w), 0.0)
    p = chi_square_sf(w, df)
    if p == 0.0 and w > 0:
        flags = tuple(flags) + ("p_underflow",)
    return AssocResult(marker_id, w, df, p, method, n, fit, tuple(flags))


def w_g_biallelic(x, y, r: RMatrix, fit: NullFit | None = None, marker_id: str = "") -> AssocResult:
    """Closed-form GQLS statistic for one pedigree (1 degree of freedom)."""
    x = _centered(x)
    ycols = _as_columns(y)
    _check_inputs(x, ycols, r)
    mom = _moments(x, ycols, r)
    if fit is None:
        fit = _fit_from_moments(mom, ycols)
    mu = fit.mu
    b = _trait_denominator(mom)
    a = mom.x_y[0] - mu * mom.one_x
    w = 2.0 / (mu * (1.0 - mu)) * a * a / b
    return _result(marker_id, w, 1, "single-pedigree", r.n, fit)


def w_g_multifamily(
    x, y, blocks: BlockDiagonalR, fit: NullFit | None = None, marker_id: str = ""
) -> AssocResult:
    """GQLS statistic for independent families, accumulated block by block."""
    x = _centered(x)
    ycols = _as_columns(y)
    _check_inputs(x, ycols, blocks)
    a = 0.0
    x_x = 0.0
    x_one = 0.0
    one_one = 0.0
    one_y = 0.0
    for idx, rf in blocks:
        xf = x[idx]
        ones = np.ones(len(idx))
        sol = rf.solve(np.column_stack([ones, xf]))
        one_one += ones @ sol[:, 0]
        x_one += xf @ sol[:, 0]
        x_x += xf @ sol[:, 1]
        one_y += ycols[idx, 0] @ sol[:, 0]
    if fit is None:
        if np.all(ycols == ycols[0]):
            raise MonomorphicMarkerError("marker is monomorphic on the tested subjects")
        mu = one_y / one_one
        if not MU_BOUND <= mu <= 1 - MU_BOUND:
            raise MonomorphicMarkerError(f"estimated allele frequency {mu} is degenerate")
        fit = NullFit(np.array([mu]), np.array([np.log(mu / (1 - mu))]), np.array([[0.5 * mu * (1 - mu)]]))
    mu = fit.mu
    for idx, rf in blocks:
        xf = x[idx]
        a += xf @ rf.solve(ycols[idx, 0] - mu)
    b = x_x - x_one**2 / one_one
    if not b > TRAIT_TOLERANCE * abs(x_x):
        raise ConstantTraitError("trait carries no information beyond the intercept")
    w = 2.0 / (mu * (1.0 - mu)) * a * a / b
    return _result(marker_id, w, 1, "multi-family", blocks.n, fit)


def w_g_multiallelic(
    x, y, r: RMatrix | BlockDiagonalR, fit: NullFit | None = None, marker_id: str = ""
) -> AssocResult:
    """GQLS statistic for a ``k``-allele marker (``k - 1`` degrees of freedom).

    Uses the double-sum form
    ``C * sum_jl (F^-1)_jl (Y_j - mu_j 1)' R^-1 X X' R^-1 (Y_l - mu_l 1)``
    with per-family accumulation when ``r`` is block diagonal.
    """
    x = _centered(x)
    ycols = _as_columns(y)
    _check_inputs(x, ycols, r)
    mom = _family_moments(x, ycols, r)
    if fit is None:
        if ycols.shape[1] > 1:
            fit = fit_null_multiallelic(ycols, r)
        else:
            fit = _fit_from_moments(mom, ycols)
    c = 1.0 / _trait_denominator(mom)
    # a_j = (Y_j - mu_j 1)' R^-1 X
    a = mom.x_y - fit.mu_hat * mom.one_x
    try:
        f_inv_a = np.linalg.solve(fit.f_hat, a)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("allele covariance matrix is singular") from None
    w = c * float(a @ f_inv_a)
    return _result(marker_id, w, ycols.shape[1], "multiallelic", r.n, fit)


def gqls_test(x, y, r: RMatrix | BlockDiagonalR, marker_id: str = "") -> AssocResult:
    """Dispatch to the statistic matching the marker arity and ``R`` layout."""
    ycols = _as_columns(y)
    if ycols.shape[1] > 1:
        return w_g_multiallelic(x, ycols, r, marker_id=marker_id)
    if isinstance(r, BlockDiagonalR):
        if len(r) == 1:
            return w_g_biallelic(x, ycols, r.matrices[0], marker_id=marker_id)
        return w_g_multifamily(x, ycols, r, marker_id=marker_id)
    return w_g_biallelic(x, ycols, r, marker_id=marker_id)


def w_all_stratified(
    per_population: Sequence[tuple[str, object, object, RMatrix | BlockDiagonalR]],
    marker_id: str = "",
) -> AssocResult:
    """Sum of per-population GQLS statistics with summed degrees of freedom.

    ``per_population`` holds ``(label, x, y, r)`` tuples. A failure in any
    population is re-raised with its label prepended.
    """
    if len(per_population) < 2:
        raise ValueError("stratified test needs at least two populations; use W_G directly")
    parts = []
    for label, x, y, r in per_population:
        try:
            parts.append((label, gqls_test(x, y, r, marker_id)))
        except DegenerateTestError as exc:
            raise type(exc)(f"population {label}: {exc}") from exc
    return combine_stratified(parts, marker_id)


def combine_stratified(parts: Sequence[tuple[str, AssocResult]], marker_id: str = "") -> AssocResult:
    if len(parts) < 2:
        raise ValueError("stratified test needs at least two populations")
    w = sum(res.statistic for _, res in parts)
    df = sum(res.df for _, res in parts)
    n = sum(res.n_used for _, res in parts)
    out = _result(marker_id, w, df, "stratified", n, None)
    out.detail = list(parts)
    return out


# --- generic quasi-score assembly (verification oracle) ------------------------

def logistic_mean(beta, x) -> np.ndarray:
    return scipy.special.expit(beta[0] + beta[1] * np.asarray(x, dtype=float))


def mean_derivative(beta, x) -> np.ndarray:
    """``D = d mu / d beta`` (``n x 2``) of the logistic mean model."""
    mu = logistic_mean(beta, x)
    v = mu * (1 - mu)
    return np.column_stack([v, v * np.asarray(x, dtype=float)])


def score_oracle(x, y, r) -> ScoreOracleReport:
    """Assemble the quasi-score statistic from its generic ingredients.

    Solves the intercept score equation numerically, forms ``D``, the null
    covariance ``mu (1 - mu) R / 2`` and the information ``D' S^-1 D`` with
    explicit dense inverses, and compares ``S_1^2 [I^-1]_22`` with
    :func:`w_g_biallelic`.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r_mat = r.dense() if isinstance(r, BlockDiagonalR) else np.asarray(getattr(r, "entries", r))
    r_inv = np.linalg.inv(r_mat)

    def intercept_score(b0):
        mu = scipy.special.expit(b0)
        return np.sum(r_inv @ (y - mu))

    # intercept score is decreasing in b0; bracket on the logit scale
    lo, hi = -40.0, 40.0
    if intercept_score(lo) * intercept_score(hi) > 0:
        raise MonomorphicMarkerError("intercept score equation has no root")
    b0 = scipy.optimize.brentq(intercept_score, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    if not MU_BOUND <= scipy.special.expit(b0) <= 1 - MU_BOUND:
        raise MonomorphicMarkerError("estimated allele frequency is degenerate")
    beta = np.array([b0, 0.0])
    mu = logistic_mean(beta, x)
    d = mean_derivative(beta, x)
    sigma_inv = np.linalg.inv(0.5 * mu[0] * (1 - mu[0]) * r_mat)
    score = d.T @ sigma_inv @ (y - mu)
    info = d.T @ sigma_inv @ d
    try:
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("information matrix is singular") from None
    w_generic = float(score[1] ** 2 * info_inv[1, 1])
    rm = r if isinstance(r, (RMatrix, BlockDiagonalR)) else RMatrix(r_mat)
    w_closed = gqls_test(x, y, rm).statistic
    rel = abs(w_generic - w_closed) / max(abs(w_closed), ORACLE_FLOOR)
    return ScoreOracleReport(score, float(info_inv[1, 1]), w_generic, w_closed, rel, b0)
