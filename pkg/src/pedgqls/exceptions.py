"""Exception hierarchy shared across the package."""


class PedgqlsError(Exception):
    """Base class for all package errors."""


class PedigreeError(PedgqlsError, ValueError):
    """Malformed or inconsistent genealogy."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CycleError(PedigreeError):
    """The parent relation contains a cycle."""

    def __init__(self, members):
        self.members = tuple(members)
        super().__init__("cycle detected among: " + ", ".join(self.members))


class NotPositiveDefiniteError(PedgqlsError, ValueError):
    """Correlation matrix failed to factor.

    Usually caused by duplicated subjects (e.g. unmerged monozygotic twins).
    """

    def __init__(self, pivot, subject=None):
        self.pivot = pivot
        self.subject = subject
        who = f" (subject {subject!r})" if subject is not None else ""
        super().__init__(
            f"relationship matrix is not positive definite at pivot {pivot}{who}; "
            "duplicated subjects must be merged"
        )


class GenotypeFormatError(PedgqlsError, ValueError):
    """Malformed genotype or phenotype input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateTestError(PedgqlsError, ValueError):
    """A marker/trait combination for which the statistic is undefined."""

    flag = "degenerate"


class MonomorphicMarkerError(DegenerateTestError):
    flag = "monomorphic"


class ConstantTraitError(DegenerateTestError):
    flag = "trait_constant"


class InsufficientDataError(DegenerateTestError):
    flag = "too_few_subjects"


class SingularMatrixError(DegenerateTestError):
    flag = "singular"


class GrowthBudgetError(PedgqlsError, RuntimeError):
    """Pedigree growth did not meet its targets within the attempt budget."""

    def __init__(self, attempts):
        self.attempts = attempts
        super().__init__(f"pedigree growth failed after {attempts} attempts")
