import numpy as np
import pytest

from pedgqls.pedigree import Individual, Pedigree, build_r_matrix, compute_kinship
from pedgqls.simulate import drop_allele_counts, DropPlan


def random_pedigree(rng, m, n_founders=None, prefix="P"):
    """Random genealogy of ``m`` members; parents drawn among earlier members.

    Matings between relatives are allowed, so members can be inbred.
    """
    if n_founders is None:
        n_founders = max(2, int(rng.integers(2, max(3, m // 3) + 1)))
    n_founders = min(n_founders, m)
    members = [Individual(f"{prefix}{i}") for i in range(n_founders)]
    for i in range(n_founders, m):
        sire, dam = rng.choice(i, size=2, replace=False)
        members.append(Individual(f"{prefix}{i}", f"{prefix}{sire}", f"{prefix}{dam}"))
    # shuffle the input order; construction must sort topologically
    order = rng.permutation(m)
    return Pedigree.from_individuals([members[k] for k in order])


def recursive_kinship(ped):
    """Textbook memoized kinship; ``phi(a, b)`` recurses on the later-born member."""
    pos = ped.index
    memo = {}

    def phi(a, b):
        if a is None or b is None:
            return 0.0
        if pos[a] > pos[b]:
            a, b = b, a
        key = (a, b)
        if key in memo:
            return memo[key]
        ind_b = ped[b]
        if a == b:
            val = 0.5 * (1.0 + phi(ind_b.sire, ind_b.dam))
        else:
            val = 0.5 * (phi(a, ind_b.sire) + phi(a, ind_b.dam))
        memo[key] = val
        return val

    ids = ped.ids
    n = len(ids)
    mat = np.array([[phi(ids[i], ids[j]) for j in range(n)] for i in range(n)])
    inb = np.array([phi(ped[s].sire, ped[s].dam) for s in ids])
    return mat, inb


def random_instance(rng, n_max=30, kind=None):
    """Random (x, y, R) on a small pedigree, with y from gene dropping.

    Returns ``None`` for draws where the test is undefined.
    """
    m = int(rng.integers(4, n_max + 1))
    ped = random_pedigree(rng, m)
    r = build_r_matrix(compute_kinship(ped))
    maf = rng.uniform(0.1, 0.5)
    y = drop_allele_counts(DropPlan.from_pedigree(ped), maf, 1, rng)[:, 0] / 2
    kind = kind or ("binary" if rng.random() < 0.5 else "quantitative")
    if kind == "binary":
        x = (rng.random(m) < 0.4).astype(float)
    else:
        x = rng.normal(size=m) + 2 * y
    if np.all(y == y[0]) or np.all(x == x[0]):
        return None
    return x, y, r


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
