import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from pedgqls.exceptions import ConstantTraitError, MonomorphicMarkerError
from pedgqls.gqls import (
    chi_square_sf,
    fit_null_biallelic,
    fit_null_multiallelic,
    gqls_test,
    logistic_mean,
    mean_derivative,
    multinomial_f,
    score_oracle,
    w_all_stratified,
    w_g_biallelic,
    w_g_multiallelic,
    w_g_multifamily,
)
from pedgqls.pedigree import BlockDiagonalR, RMatrix, build_r_matrix, compute_kinship, partition_families

from conftest import random_instance, random_pedigree

PO = RMatrix([[1.0, 0.5], [0.5, 1.0]])


def mp_chi2_sf(w, df):
    """Upper tail by direct quadrature of the chi-square density."""
    mpmath.mp.dps = 40
    k = mpmath.mpf(df) / 2
    dens = lambda t: t ** (k - 1) * mpmath.exp(-t / 2) / (2**k * mpmath.gamma(k))  # noqa: E731
    return float(mpmath.quad(dens, [w, w + 50, mpmath.inf]))


def kronecker_w(x, ycols, r_dense, mu, f):
    """Multi-allelic statistic via the explicit Kronecker product."""
    n = x.size
    r_inv = np.linalg.inv(r_dense)
    one = np.ones(n)
    c = 1.0 / (x @ r_inv @ x - (x @ r_inv @ one) ** 2 / (one @ r_inv @ one))
    resid = (ycols - mu).T.reshape(-1)  # stacked by allele
    m = r_inv @ np.outer(x, x) @ r_inv
    return c * resid @ np.kron(np.linalg.inv(f), m) @ resid


def multiallelic_instance(rng, k, n=None, r=None):
    if r is None:
        n = n or int(rng.integers(8, 30))
        ped = random_pedigree(rng, n, n_founders=n // 2)
        r = build_r_matrix(compute_kinship(ped))
    n = r.n
    freq = rng.dirichlet(np.full(k, 3.0))
    while True:
        calls = rng.choice(k, size=(n, 2), p=freq)
        y = np.stack([(calls == j).sum(axis=1) for j in range(k - 1)], axis=1) / 2
        try:
            fit_null_multiallelic(y, r)  # GLS weights may miss an allele
        except MonomorphicMarkerError:
            continue
        return rng.normal(size=n), y, r


class TestNullFit:
    def test_identity_sample_mean(self):
        fit = fit_null_biallelic([0, 0.5, 1, 0.5], RMatrix(np.eye(4)))
        assert fit.mu == 0.5
        assert fit.beta0_hat[0] == pytest.approx(0.0)

    def test_monomorphic(self):
        with pytest.raises(MonomorphicMarkerError):
            fit_null_biallelic([1, 1, 1], RMatrix(np.eye(3)))

    def test_parent_offspring(self):
        # hand evaluation: R^-1 1 = (2/3, 2/3), so mu = (1 + 0.5) / 2
        assert fit_null_biallelic([1.0, 0.5], PO).mu == pytest.approx(0.75, abs=1e-15)

    def test_multiallelic_identity_means(self):
        y = np.array([[1, 0], [0.5, 0.5], [0, 0.5], [0.5, 0]])
        fit = fit_null_multiallelic(y, RMatrix(np.eye(4)))
        assert_allclose(fit.mu_hat, [0.5, 0.25])
        assert_allclose(fit.f_hat, multinomial_f([0.5, 0.25]))

    def test_multiallelic_k2_matches_biallelic(self, rng):
        inst = random_instance(rng)
        while inst is None:
            inst = random_instance(rng)
        _, y, r = inst
        a = fit_null_biallelic(y, r)
        b = fit_null_multiallelic(y[:, None], r)
        assert_allclose(b.mu_hat, a.mu_hat, rtol=0, atol=0)

    def test_multiallelic_gls_oracle(self, rng):
        for _ in range(20):
            x, y, r = multiallelic_instance(rng, 4)
            r_inv = np.linalg.inv(r.entries)
            one = np.ones(r.n)
            expected = (one @ r_inv @ y) / (one @ r_inv @ one)
            assert_allclose(fit_null_multiallelic(y, r).mu_hat, expected, rtol=1e-10)

    def test_unobserved_allele(self):
        y = np.array([[1, 0], [0.5, 0], [0, 0]])
        with pytest.raises(MonomorphicMarkerError):
            fit_null_multiallelic(y, RMatrix(np.eye(3)))

    def test_f_hat_biallelic_reduction(self):
        assert_allclose(multinomial_f([0.3]), [[0.5 * 0.3 * 0.7]])


class TestBiallelic:
    def test_orthogonal_gives_zero(self):
        # X balanced within each Y level: A = 0
        x = np.array([0, 1, 0, 1, 0, 1.0])
        y = np.array([0, 0, 0.5, 0.5, 1, 1.0])
        res = w_g_biallelic(x, y, RMatrix(np.eye(6)))
        assert res.statistic == pytest.approx(0, abs=1e-28)
        assert res.p_value == pytest.approx(1.0)

    def test_constant_trait(self):
        with pytest.raises(ConstantTraitError):
            w_g_biallelic(np.ones(4), [0, 0.5, 1, 0.5], RMatrix(np.eye(4)))

    def test_oracle_twelve_subjects(self, rng):
        ped = random_pedigree(rng, 12)
        r = build_r_matrix(compute_kinship(ped))
        x = rng.normal(size=12)
        y = np.array([0, 0.5, 1, 0.5, 0.5, 0, 1, 1, 0.5, 0, 0.5, 0.5])
        rep = score_oracle(x, y, r)
        assert rep.rel_diff <= 1e-8

    def test_identity_oracle_tight(self, rng):
        for _ in range(50):
            x = rng.normal(size=20)
            y = rng.integers(0, 3, 20) / 2
            rep = score_oracle(x, y, RMatrix(np.eye(20)))
            assert rep.rel_diff <= 1e-10

    def test_derivative_finite_difference(self, rng):
        for _ in range(20):
            beta = rng.normal(size=2)
            x = rng.normal(size=10)
            d = mean_derivative(beta, x)
            h = 1e-6
            fd = np.column_stack([
                (logistic_mean(beta + h * e, x) - logistic_mean(beta - h * e, x)) / (2 * h)
                for e in np.eye(2)
            ])
            assert np.all(np.abs(fd - d) <= 1e-5 * np.abs(d) + 1e-12)

    def test_p_underflow_flag(self):
        n = 2000  # W = 2n, beyond double-precision tail
        x = np.r_[np.zeros(n // 2), np.ones(n // 2)]
        y = np.r_[np.zeros(n // 2), np.ones(n // 2)]
        res = w_g_biallelic(x, y, RMatrix(np.eye(n)))
        assert res.p_value == 0.0 and "p_underflow" in res.flags


class TestMultifamily:
    def _two_trios(self):
        half = np.array([[1, 0, 0.5], [0, 1, 0.5], [0.5, 0.5, 1]])
        dense = np.zeros((6, 6))
        dense[:3, :3] = half
        dense[3:, 3:] = half
        r = RMatrix(dense)
        return r, r.split(partition_families(dense))

    def test_two_trios_block_identity(self):
        r, blocks = self._two_trios()
        x = np.array([1.0, 0, 1, 0, 0, 1])
        y = np.array([1.0, 0.5, 1, 0, 0.5, 0.5])
        full = w_g_biallelic(x, y, r)
        fam = w_g_multifamily(x, y, blocks)
        assert fam.method == "multi-family"
        assert_allclose(fam.statistic, full.statistic, rtol=1e-12)

    def test_single_block_equals_biallelic(self, rng):
        inst = None
        while inst is None:
            inst = random_instance(rng)
        x, y, r = inst
        one = BlockDiagonalR([np.arange(r.n)], [r])
        assert_allclose(w_g_multifamily(x, y, one).statistic, w_g_biallelic(x, y, r).statistic, rtol=1e-12)

    def test_singletons_match_oracle(self, rng):
        n = 25
        eye = RMatrix(np.eye(n))
        blocks = BlockDiagonalR([np.array([i]) for i in range(n)], [RMatrix(np.eye(1))] * n)
        x = rng.normal(size=n)
        y = rng.integers(0, 3, n) / 2
        rep = score_oracle(x, y, eye)
        assert_allclose(w_g_multifamily(x, y, blocks).statistic, rep.w_generic, rtol=1e-10)

    def test_dispatch(self):
        r, blocks = self._two_trios()
        x = np.array([1.0, 0, 1, 0, 0, 1])
        y = np.array([1.0, 0.5, 1, 0, 0.5, 0.5])
        assert gqls_test(x, y, blocks).method == "multi-family"
        assert gqls_test(x, y, r).method == "single-pedigree"
        assert gqls_test(x, np.c_[y, 1 - y][:, :1], r).method == "single-pedigree"


class TestMultiallelic:
    def test_k2_equals_biallelic(self, rng):
        for _ in range(20):
            inst = random_instance(rng)
            if inst is None:
                continue
            x, y, r = inst
            a = w_g_biallelic(x, y, r)
            b = w_g_multiallelic(x, y[:, None], r)
            assert_allclose(b.statistic, a.statistic, rtol=1e-10)
            assert b.df == 1

    def test_kronecker_form(self, rng):
        for _ in range(20):
            x, y, r = multiallelic_instance(rng, 4)
            res = w_g_multiallelic(x, y, r)
            fit = res.null_fit
            expected = kronecker_w(x, y, r.entries, fit.mu_hat, fit.f_hat)
            assert res.df == 3
            assert_allclose(res.statistic, expected, rtol=1e-10)

    def test_family_form_matches_dense(self, rng):
        x, y, _ = multiallelic_instance(rng, 3, r=RMatrix(np.eye(12)))
        dense = np.eye(12)
        dense[0, 1] = dense[1, 0] = 0.5
        dense[5, 9] = dense[9, 5] = 0.25
        r = RMatrix(dense)
        blocks = r.split(partition_families(dense))
        assert len(blocks) == 10
        assert_allclose(w_g_multiallelic(x, y, blocks).statistic, w_g_multiallelic(x, y, r).statistic, rtol=1e-10)

    @pytest.mark.slow
    def test_null_calibration_three_alleles(self):
        rng = np.random.default_rng(7)
        r = RMatrix(np.eye(300))
        pv = []
        for _ in range(1000):
            x, y, _ = multiallelic_instance(rng, 3, r=r)
            pv.append(w_g_multiallelic(x, y, r).p_value)
        rate = np.mean(np.array(pv) <= 0.05)
        assert abs(rate - 0.05) <= 3 * np.sqrt(0.05 * 0.95 / 1000)


class TestStratified:
    def test_duplicate_population(self, rng):
        inst = None
        while inst is None:
            inst = random_instance(rng)
        x, y, r = inst
        single = gqls_test(x, y, r)
        both = w_all_stratified([("a", x, y, r), ("b", x, y, r)])
        assert both.statistic == pytest.approx(2 * single.statistic, rel=1e-14)
        assert both.df == 2
        assert [label for label, _ in both.detail] == ["a", "b"]

    def test_single_population_rejected(self, rng):
        with pytest.raises(ValueError):
            w_all_stratified([("a", np.arange(3.0), [0, 0.5, 1], RMatrix(np.eye(3)))])

    def test_failure_carries_label(self):
        good = ("ok", np.arange(3.0), [0, 0.5, 1], RMatrix(np.eye(3)))
        bad = ("north", np.arange(3.0), [1, 1, 1], RMatrix(np.eye(3)))
        with pytest.raises(MonomorphicMarkerError, match="north"):
            w_all_stratified([good, bad])


class TestChiSquare:
    def test_zero(self):
        assert chi_square_sf(0.0, 1) == 1.0

    @pytest.mark.parametrize("w,df", [(3.841459, 1), (5.991465, 2)])
    def test_five_percent(self, w, df):
        oracle = mp_chi2_sf(w, df)
        assert abs(oracle - 0.05) <= 1e-6
        assert abs(chi_square_sf(w, df) - oracle) <= 1e-12

    @pytest.mark.parametrize("w", [0.01, 0.5, 2.0, 10.0, 40.0, 120.0])
    @pytest.mark.parametrize("df", [1, 2, 3, 7])
    def test_against_quadrature(self, w, df):
        assert abs(chi_square_sf(w, df) - mp_chi2_sf(w, df)) <= 1e-12

    def test_deep_tail_relative(self):
        p = chi_square_sf(1300.0, 1)
        assert p > 0
        assert p == pytest.approx(mp_chi2_sf(1300.0, 1), rel=1e-10)

    def test_invalid(self):
        with pytest.raises(ValueError):
            chi_square_sf(-1.0, 1)
        with pytest.raises(ValueError):
            chi_square_sf(1.0, 0)


class TestInvariance:
    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.floats(-50, 50), b=st.floats(-100, 100))
    def test_affine(self, seed, a, b):
        if abs(a) < 1e-3:
            a = 1.0
        inst = random_instance(np.random.default_rng(seed))
        if inst is None:
            return
        x, y, r = inst
        try:
            base = gqls_test(x, y, r).statistic
        except (MonomorphicMarkerError, ConstantTraitError):
            return
        assert_allclose(gqls_test(a * x + b, y, r).statistic, base, rtol=1e-10, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_relabel(self, seed):
        inst = random_instance(np.random.default_rng(seed))
        if inst is None:
            return
        x, y, r = inst
        try:
            base = gqls_test(x, y, r).statistic
        except (MonomorphicMarkerError, ConstantTraitError):
            return
        assert_allclose(gqls_test(x, 1 - y, r).statistic, base, rtol=1e-12, atol=1e-14)

    def test_binary_coding(self, rng):
        inst = random_instance(rng, kind="binary")
        while inst is None:
            inst = random_instance(rng, kind="binary")
        x, y, r = inst
        assert_allclose(
            gqls_test(np.where(x == 1, 7.5, -2.0), y, r).statistic, gqls_test(x, y, r).statistic, rtol=1e-10
        )

    @settings(max_examples=60, deadline=None)
    @given(df=st.integers(1, 30), w=st.floats(0, 500), dw=st.floats(1e-3, 10))
    def test_sf_monotone(self, df, w, dw):
        lo, hi = chi_square_sf(w, df), chi_square_sf(w + dw, df)
        assert hi <= lo
        if 1e-300 < lo < 1 - 1e-12:
            assert hi < lo
