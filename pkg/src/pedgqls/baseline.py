"""Armitage trend test assuming independent subjects."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConstantTraitError, InsufficientDataError, MonomorphicMarkerError
from .gqls import chi_square_sf

SCORES = np.array([0.0, 1.0, 2.0])


@dataclass(frozen=True)
class TrendResult:
    statistic: float
    df: int
    p_value: float
    n_used: int


def genotype_table(x, y) -> np.ndarray:
    """2 x 3 table of controls/cases by allele count ``2 Y``."""
    g = np.rint(2 * np.asarray(y, dtype=float)).astype(int)
    x = np.asarray(x)
    table = np.zeros((2, 3))
    np.add.at(table, (x.astype(int), g), 1)
    return table


def cochran_armitage(table: np.ndarray, scores=SCORES) -> float:
    """Trend chi-square of a 2 x k table (row 0 controls, row 1 cases)."""
    table = np.asarray(table, dtype=float)
    controls, cases = table
    col = table.sum(axis=0)
    r0, r1 = controls.sum(), cases.sum()
    n = r0 + r1
    t = np.sum(scores * (cases * r0 - controls * r1))
    spread = np.sum(scores**2 * col * (n - col))
    cross = np.outer(scores * col, scores * col)
    spread -= np.sum(np.triu(cross, 1)) * 2
    var = r0 * r1 / n * spread
    if var <= 0:
        raise ConstantTraitError("degenerate table")
    return float(t * t / var)


def trend_test(x, y) -> TrendResult:
    """Trend test of allele count against the trait.

    Binary traits (all values 0/1) use the Cochran-Armitage statistic with
    genotype scores 0, 1, 2. Quantitative traits use ``n r^2`` from the
    simple regression of the allele count on the trait.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    n = x.size
    if n < 3:
        raise InsufficientDataError("trend test needs at least 3 subjects")
    if np.all(x == x[0]):
        raise ConstantTraitError("trait is constant")
    if np.all(y == y[0]):
        raise MonomorphicMarkerError("marker is monomorphic")
    if np.all((x == 0) | (x == 1)):
        stat = cochran_armitage(genotype_table(x, y))
    else:
        xc = x - x.mean()
        gc = 2 * y - 2 * y.mean()
        r2 = (xc @ gc) ** 2 / ((xc @ xc) * (gc @ gc))
        stat = float(n * r2)
    return TrendResult(stat, 1, chi_square_sf(max(stat, 0.0), 1), n)
