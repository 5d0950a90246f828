"""Quasi-likelihood score association tests for samples of related individuals."""
from .baseline import TrendResult, trend_test
from .exceptions import (
    ConstantTraitError,
    CycleError,
    DegenerateTestError,
    GenotypeFormatError,
    MonomorphicMarkerError,
    NotPositiveDefiniteError,
    PedigreeError,
)
from .genodata import (
    MarkerData,
    TraitVector,
    allele_frequency,
    effective_subset,
    filter_markers,
    parse_genotypes,
    parse_phenotypes,
)
from .gqls import (
    AssocResult,
    NullFit,
    chi_square_sf,
    fit_null_biallelic,
    fit_null_multiallelic,
    gqls_test,
    score_oracle,
    w_all_stratified,
    w_g_biallelic,
    w_g_multiallelic,
    w_g_multifamily,
)
from .pedigree import (
    FamilyPartition,
    KinshipTable,
    Pedigree,
    RMatrix,
    build_r_matrix,
    compute_kinship,
    parse_pedigree,
    partition_families,
)

__version__ = "0.1.0"
