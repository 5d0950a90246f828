"""Genealogies, kinship/inbreeding coefficients and the relationship matrix.

The relationship matrix used by the association tests has ``1 + F_i`` on the
diagonal (``F_i`` the inbreeding coefficient) and ``2 * phi_ij`` off the
diagonal (``phi_ij`` the kinship coefficient).
"""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import CycleError, NotPositiveDefiniteError, PedigreeError

MISSING_PARENT = (".", "0", "")

# Pivots smaller than this fraction of the largest diagonal entry are
# treated as a factorization failure.
PIVOT_TOLERANCE = 1e-10


@dataclass(frozen=True)
class Individual:
    id: str
    sire: str | None = None
    dam: str | None = None
    generation: int | None = None
    placeholder: bool = False

    def __post_init__(self):
        if self.sire == self.id or self.dam == self.id:
            raise PedigreeError(f"individual {self.id!r} is its own parent")

    @property
    def is_founder(self) -> bool:
        return self.sire is None and self.dam is None


@dataclass(frozen=True, eq=False)
class Pedigree:
    """A validated genealogy stored in topological order (parents first).

    Use :meth:`from_individuals` or :func:`parse_pedigree` to construct one.
    ``sampled`` optionally lists the members carrying data (the remainder
    are kept only for computing relationships).
    """

    members: tuple[Individual, ...]
    index: dict[str, int] = field(repr=False)
    sampled: tuple[str, ...] | None = None

    @classmethod
    def from_individuals(
        cls,
        individuals: Iterable[Individual],
        placeholders: bool = False,
        sampled: Sequence[str] | None = None,
        lines: Sequence[int] | None = None,
    ) -> "Pedigree":
        records = list(individuals)
        by_id: dict[str, Individual] = {}
        line_of: dict[str, int | None] = {}
        for k, ind in enumerate(records):
            line = lines[k] if lines is not None else None
            if ind.id in by_id:
                raise PedigreeError(f"duplicate identifier {ind.id!r}", line)
            by_id[ind.id] = ind
            line_of[ind.id] = line

        extra: list[Individual] = []
        fixed: list[Individual] = []
        for ind in records:
            sire, dam = ind.sire, ind.dam
            if (sire is None) != (dam is None):
                # single known parent: the unknown one becomes a unique founder
                slot = "sire" if sire is None else "dam"
                pid = _unique_id(f"~{ind.id}.{slot}", by_id)
                ph = Individual(pid, placeholder=True)
                by_id[pid] = ph
                extra.append(ph)
                if sire is None:
                    sire = pid
                else:
                    dam = pid
            for pid in (sire, dam):
                if pid is not None and pid not in by_id:
                    if not placeholders:
                        raise PedigreeError(
                            f"parent {pid!r} of {ind.id!r} is not in the pedigree",
                            line_of[ind.id],
                        )
                    ph = Individual(pid, placeholder=True)
                    by_id[pid] = ph
                    extra.append(ph)
            if (sire, dam) != (ind.sire, ind.dam):
                ind = Individual(ind.id, sire, dam, ind.generation, ind.placeholder)
            fixed.append(ind)

        ordered = _topological_order(extra + fixed)
        index = {ind.id: i for i, ind in enumerate(ordered)}
        if sampled is not None:
            unknown = [s for s in sampled if s not in index]
            if unknown:
                raise PedigreeError(f"sampled subjects not in pedigree: {unknown[:5]}")
            sampled = tuple(sampled)
        return cls(tuple(ordered), index, sampled)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, ident: str) -> bool:
        return ident in self.index

    def __getitem__(self, ident: str) -> Individual:
        return self.members[self.index[ident]]

    @property
    def ids(self) -> list[str]:
        return [ind.id for ind in self.members]

    @property
    def sampled_ids(self) -> list[str]:
        return list(self.sampled) if self.sampled is not None else self.ids

    @property
    def placeholders(self) -> list[str]:
        return [ind.id for ind in self.members if ind.placeholder]

    def parent_indices(self) -> np.ndarray:
        """``(m, 2)`` integer array of sire/dam positions, ``-1`` if unknown."""
        out = np.full((len(self.members), 2), -1, dtype=np.int64)
        for i, ind in enumerate(self.members):
            if ind.sire is not None:
                out[i, 0] = self.index[ind.sire]
                out[i, 1] = self.index[ind.dam]
        return out

    def with_sampled(self, sampled: Sequence[str] | None) -> "Pedigree":
        return Pedigree.from_individuals(self.members, sampled=sampled)


def _unique_id(base: str, taken) -> str:
    candidate, k = base, 1
    while candidate in taken:
        k += 1
        candidate = f"{base}.{k}"
    return candidate


def _topological_order(records: list[Individual]) -> list[Individual]:
    """Kahn's algorithm; stable with respect to the input order."""
    by_id = {r.id: r for r in records}
    position = {r.id: i for i, r in enumerate(records)}
    children: dict[str, list[str]] = {r.id: [] for r in records}
    indegree = {}
    for r in records:
        parents = {p for p in (r.sire, r.dam) if p is not None}
        indegree[r.id] = len(parents)
        for p in parents:
            children[p].append(r.id)
    queue = deque(r.id for r in records if indegree[r.id] == 0)
    ordered: list[Individual] = []
    while queue:
        ident = queue.popleft()
        ordered.append(by_id[ident])
        for c in sorted(children[ident], key=position.__getitem__):
            indegree[c] -= 1
            if indegree[c] == 0:
                queue.append(c)
    if len(ordered) != len(records):
        left = {r.id for r in records} - {r.id for r in ordered}
        raise CycleError(_find_cycle(by_id, left))
    return ordered


def _find_cycle(by_id: dict[str, Individual], left: set[str]) -> list[str]:
    # every unresolved node has an unresolved ancestor, so walking parents
    # inside ``left`` must revisit a node
    start = min(left)
    path: list[str] = []
    seen: dict[str, int] = {}
    node = start
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        ind = by_id[node]
        node = next(p for p in (ind.sire, ind.dam) if p is not None and p in left)
    return path[seen[node]:]


def parse_pedigree(source: str | os.PathLike | TextIO, placeholders: bool = False) -> Pedigree:
    """Read a whitespace-separated ``id sire dam`` pedigree file.

    ``.`` or ``0`` mark an unknown parent, ``#`` starts a comment, and rows may
    appear in any order. Extra columns (e.g. sex) are ignored. With
    ``placeholders`` enabled, parents referenced but never listed are added as
    flagged founders instead of raising :class:`PedigreeError`.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return parse_pedigree(fh, placeholders)

    records: list[Individual] = []
    lines: list[int] = []
    for lineno, raw in enumerate(source, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) < 3:
            raise PedigreeError(f"expected 3 columns, found {len(fields)}", lineno)
        ident, sire, dam = fields[:3]
        if not records and (ident.lower(), sire.lower(), dam.lower()) == ("id", "sire", "dam"):
            continue
        if ident in MISSING_PARENT:
            raise PedigreeError(f"invalid identifier {ident!r}", lineno)
        try:
            records.append(
                Individual(
                    ident,
                    None if sire in MISSING_PARENT else sire,
                    None if dam in MISSING_PARENT else dam,
                )
            )
        except PedigreeError as exc:
            raise PedigreeError(str(exc), lineno) from None
        lines.append(lineno)
    return Pedigree.from_individuals(records, placeholders=placeholders, lines=lines)


def write_pedigree(ped: Pedigree, stream: TextIO) -> None:
    stream.write("id\tsire\tdam\n")
    for ind in ped.members:
        stream.write(f"{ind.id}\t{ind.sire or '.'}\t{ind.dam or '.'}\n")


@dataclass(frozen=True, eq=False)
class KinshipTable:
    """Kinship coefficients restricted to a subject list.

    ``phi_pair`` holds self-kinship ``(1 + F_i) / 2`` on its diagonal.
    """

    subject_ids: tuple[str, ...]
    phi_self: np.ndarray
    phi_pair: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_ids)

    def subset(self, idx) -> "KinshipTable":
        idx = np.asarray(idx, dtype=np.int64)
        return KinshipTable(
            tuple(self.subject_ids[i] for i in idx),
            self.phi_self[idx],
            self.phi_pair[np.ix_(idx, idx)],
        )

    def write(self, pairs: TextIO, inbreeding: TextIO | None = None) -> None:
        """Write ``id_i id_j phi`` (i <= j) and optionally ``id phi_self``."""
        ids = self.subject_ids
        pairs.write("id_i\tid_j\tphi\n")
        n = len(ids)
        for i in range(n):
            row = self.phi_pair[i]
            pairs.writelines(f"{ids[i]}\t{ids[j]}\t{row[j]:.17g}\n" for j in range(i, n))
        if inbreeding is not None:
            inbreeding.write("id\tphi_self\n")
            for ident, f in zip(ids, self.phi_self):
                inbreeding.write(f"{ident}\t{f:.17g}\n")


def compute_kinship(ped: Pedigree, subjects: Sequence[str] | None = None) -> KinshipTable:
    """Kinship and inbreeding coefficients for ``subjects`` (default: all members).

    Runs the tabular recursion over the topological order,
    ``phi(a, a) = (1 + F_a) / 2`` and
    ``phi(a, b) = (phi(a, sire_b) + phi(a, dam_b)) / 2`` for ``b`` after ``a``.
    Only ancestors of the requested subjects are visited, and an ancestor's
    row is discarded once its last child has been processed, so memory scales
    with the subject count plus the widest generation rather than with the
    whole pedigree.
    """
    if subjects is None:
        subjects = ped.ids
    try:
        keep = np.array([ped.index[s] for s in subjects], dtype=np.int64)
    except KeyError as exc:
        raise PedigreeError(f"unknown subject identifier {exc.args[0]!r}") from None

    m = len(ped)
    parents = ped.parent_indices()
    needed = np.zeros(m, dtype=bool)
    needed[keep] = True
    for i in range(m - 1, -1, -1):
        if needed[i] and parents[i, 0] >= 0:
            needed[parents[i]] = True
    is_kept = np.zeros(m, dtype=bool)
    is_kept[keep] = True
    pending = np.zeros(m, dtype=np.int64)
    for i in np.flatnonzero(needed):
        if parents[i, 0] >= 0:
            pending[parents[i, 0]] += 1
            pending[parents[i, 1]] += 1

    cap = 64
    table = np.zeros((cap, cap))
    slot = np.full(m, -1, dtype=np.int64)
    free: list[int] = []
    next_slot = 0
    inbreeding = np.zeros(m)

    for i in np.flatnonzero(needed):
        if free:
            j = free.pop()
        else:
            if next_slot == cap:
                grown = np.zeros((2 * cap, 2 * cap))
                grown[:cap, :cap] = table
                table, cap = grown, 2 * cap
            j = next_slot
            next_slot += 1
        s, d = parents[i]
        if s < 0:
            row = np.zeros(cap)
            f = 0.0
        else:
            ss, sd = slot[s], slot[d]
            row = 0.5 * (table[ss] + table[sd])
            f = table[ss, sd]
        table[j, :] = row
        table[:, j] = row
        table[j, j] = 0.5 * (1.0 + f)
        slot[i] = j
        inbreeding[i] = f
        if s >= 0:
            for p in (s, d):
                pending[p] -= 1
                if pending[p] == 0 and not is_kept[p]:
                    free.append(int(slot[p]))
                    slot[p] = -1

    ks = slot[keep]
    phi_pair = table[np.ix_(ks, ks)].copy()
    phi_pair = 0.5 * (phi_pair + phi_pair.T)
    return KinshipTable(tuple(subjects), inbreeding[keep].copy(), phi_pair)


class RMatrix:
    """Relationship matrix with a cached Cholesky factor.

    Parameters
    ----------
    entries
        Symmetric positive-definite matrix.
    subject_ids
        Optional identifiers for rows/columns.

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot falls below ``PIVOT_TOLERANCE`` times the largest diagonal.
    """

    def __init__(self, entries, subject_ids: Sequence[str] | None = None):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("relationship matrix must be square")
        self.entries = entries
        self.entries.setflags(write=False)
        self.subject_ids = tuple(subject_ids) if subject_ids is not None else None
        self.factor = _cholesky(entries, self.subject_ids)
        self.factor.setflags(write=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def solve(self, v) -> np.ndarray:
        """Return ``R^{-1} v`` using the cached factor."""
        return scipy.linalg.cho_solve((self.factor, True), v, check_finite=False)

    def submatrix(self, idx) -> "RMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        ids = None if self.subject_ids is None else [self.subject_ids[i] for i in idx]
        return RMatrix(self.entries[np.ix_(idx, idx)], ids)

    def split(self, partition: "FamilyPartition") -> "BlockDiagonalR":
        return BlockDiagonalR(
            [np.asarray(b) for b in partition.blocks],
            [self.submatrix(b) for b in partition.blocks],
        )

    def __repr__(self) -> str:
        return f"RMatrix(n={self.n})"


def _cholesky(a: np.ndarray, ids) -> np.ndarray:
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    c, info = scipy.linalg.lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        pivot = info - 1
        raise NotPositiveDefiniteError(pivot, ids[pivot] if ids else None)
    if info < 0:
        raise ValueError("invalid relationship matrix")
    pivots = np.diag(c) ** 2
    bad = np.flatnonzero(pivots < PIVOT_TOLERANCE * np.max(np.diag(a)))
    if bad.size:
        pivot = int(bad[0])
        raise NotPositiveDefiniteError(pivot, ids[pivot] if ids else None)
    return c


def build_r_matrix(kin: KinshipTable) -> RMatrix:
    """Relationship matrix ``R`` with ``R_ii = 1 + F_i`` and ``R_ij = 2 phi_ij``."""
    entries = 2.0 * kin.phi_pair
    entries[np.diag_indices_from(entries)] = 1.0 + kin.phi_self
    return RMatrix(entries, kin.subject_ids)


@dataclass(frozen=True, eq=False)
class FamilyPartition:
    """Connected components of the relatedness graph among sampled subjects."""

    blocks: tuple[np.ndarray, ...]

    @property
    def counts(self) -> list[int]:
        return [len(b) for b in self.blocks]

    def __len__(self) -> int:
        return len(self.blocks)


def partition_families(kin: KinshipTable | np.ndarray) -> FamilyPartition:
    """Split subjects into families: components of the graph ``phi_ij > 0``.

    Accepts a :class:`KinshipTable` or any square matrix whose off-diagonal
    zeros mark unrelated pairs (e.g. ``R`` itself).
    """
    mat = kin.phi_pair if isinstance(kin, KinshipTable) else np.asarray(kin)
    n = mat.shape[0]
    adj = mat > 0
    np.fill_diagonal(adj, False)
    n_comp, labels = connected_components(csr_matrix(adj), directed=False)
    blocks = [np.flatnonzero(labels == c) for c in range(n_comp)]
    blocks.sort(key=lambda b: b[0])
    assert sum(len(b) for b in blocks) == n
    return FamilyPartition(tuple(blocks))


class BlockDiagonalR:
    """Per-family relationship matrices of a block-diagonal ``R``."""

    def __init__(self, index_sets: Sequence[np.ndarray], matrices: Sequence[RMatrix]):
        self.index_sets = [np.asarray(b, dtype=np.int64) for b in index_sets]
        self.matrices = list(matrices)

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.index_sets)

    def __len__(self) -> int:
        return len(self.matrices)

    def __iter__(self):
        return iter(zip(self.index_sets, self.matrices))

    def solve(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for idx, r in self:
            out[idx] = r.solve(v[idx])
        return out

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for idx, r in self:
            out[np.ix_(idx, idx)] = r.entries
        return out
