"""Genotype and phenotype tables, allele-proportion responses and filters."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np

from .exceptions import ConstantTraitError, GenotypeFormatError, InsufficientDataError

MISSING_TOKENS = ("./.", ".", "NA", "")


@dataclass(frozen=True, eq=False)
class MarkerData:
    """Allele-proportion responses for one marker.

    ``y`` has shape ``(n,)`` for a biallelic marker (proportion of
    ``alleles[0]``) and ``(n, k - 1)`` otherwise, column ``j`` holding the
    proportion of ``alleles[j]``; the last allele is omitted. Missing entries
    are stored as ``nan`` and flagged in ``missing``.
    """

    marker_id: str
    alleles: tuple[str, ...]
    y: np.ndarray
    missing: np.ndarray
    subject_ids: tuple[str, ...] | None = None

    @property
    def k(self) -> int:
        return len(self.alleles)

    @property
    def biallelic(self) -> bool:
        return self.y.ndim == 1

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def columns(self) -> np.ndarray:
        """Responses as an ``(n, k - 1)`` matrix regardless of arity."""
        return self.y[:, None] if self.y.ndim == 1 else self.y

    def take(self, idx) -> "MarkerData":
        idx = np.asarray(idx, dtype=np.int64)
        ids = None if self.subject_ids is None else tuple(self.subject_ids[i] for i in idx)
        return MarkerData(self.marker_id, self.alleles, self.y[idx], self.missing[idx], ids)

    def with_reference(self, allele: str) -> "MarkerData":
        """Re-express a biallelic marker in terms of ``allele``."""
        if allele not in self.alleles:
            raise KeyError(allele)
        if not self.biallelic or allele == self.alleles[0]:
            return self
        other = self.alleles[0]
        return MarkerData(self.marker_id, (allele, other), 1.0 - self.y, self.missing, self.subject_ids)


@dataclass(frozen=True, eq=False)
class TraitVector:
    values: np.ndarray
    kind: str
    missing: np.ndarray
    subject_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("binary", "quantitative"):
            raise ValueError(f"unknown trait kind {self.kind!r}")
        if self.kind == "binary":
            obs = self.values[~self.missing]
            if not np.all((obs == 0) | (obs == 1)):
                raise GenotypeFormatError("binary trait must be coded 0/1")

    @classmethod
    def from_values(cls, values, kind: str | None = None, subject_ids=None) -> "TraitVector":
        values = np.asarray(values, dtype=float)
        missing = np.isnan(values)
        if kind is None:
            obs = values[~missing]
            kind = "binary" if np.all((obs == 0) | (obs == 1)) else "quantitative"
        return cls(values, kind, missing, None if subject_ids is None else tuple(subject_ids))

    def take(self, idx) -> "TraitVector":
        idx = np.asarray(idx, dtype=np.int64)
        ids = None if self.subject_ids is None else tuple(self.subject_ids[i] for i in idx)
        return TraitVector(self.values[idx], self.kind, self.missing[idx], ids)


@dataclass(frozen=True, eq=False)
class CohortView:
    """Subjects shared by the trait, the markers and the relationship matrix."""

    subject_ids: tuple[str, ...]
    trait: TraitVector
    markers: list[MarkerData]
    populations: tuple[str, ...] | None = None
    dropped: tuple[str, ...] = field(default=())

    def population_indices(self) -> dict[str, np.ndarray]:
        if self.populations is None:
            raise ValueError("cohort has no population labels")
        labels = np.asarray(self.populations)
        return {p: np.flatnonzero(labels == p) for p in sorted(set(self.populations))}


def _open(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8", newline="")
    return None


def _rows(stream: TextIO):
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield lineno, line.split("\t")


def _split_genotype(token: str, marker: str, lineno: int) -> tuple[str, str] | None:
    token = token.strip()
    if token in MISSING_TOKENS:
        return None
    parts = token.replace("|", "/").split("/")
    if len(parts) != 2:
        raise GenotypeFormatError(
            f"marker {marker}: genotype {token!r} is not diploid 'a/b'", lineno
        )
    a, b = parts
    if not a or not b or a == "." or b == ".":
        raise GenotypeFormatError(f"marker {marker}: malformed genotype {token!r}", lineno)
    return a, b


def parse_genotypes(
    source,
    reference: Mapping[str, str] | None = None,
    cohort: Sequence[str] | None = None,
) -> list[MarkerData]:
    """Read a genotype TSV (``subject_id`` then one ``a/b`` column per marker).

    Allele order per marker is lexicographic on the labels unless
    ``reference`` names the allele to put first; the biallelic response is the
    proportion of the first allele and multi-allelic responses omit the last.
    Subjects absent from ``cohort`` (when given) raise an error.
    """
    fh = _open(source)
    if fh is not None:
        with fh:
            return parse_genotypes(fh, reference, cohort)

    rows = _rows(source)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise GenotypeFormatError("empty genotype file") from None
    if header[0].strip() != "subject_id":
        raise GenotypeFormatError("first column must be 'subject_id'", lineno)
    marker_ids = [h.strip() for h in header[1:]]
    if len(set(marker_ids)) != len(marker_ids):
        raise GenotypeFormatError("duplicate marker identifiers in header", lineno)
    allowed = set(cohort) if cohort is not None else None

    subjects: list[str] = []
    calls: list[list[tuple[str, str] | None]] = [[] for _ in marker_ids]
    for lineno, fields in rows:
        if len(fields) != len(header):
            raise GenotypeFormatError(
                f"expected {len(header)} columns, found {len(fields)}", lineno
            )
        sid = fields[0].strip()
        if allowed is not None and sid not in allowed:
            raise GenotypeFormatError(f"subject {sid!r} is not in the cohort", lineno)
        subjects.append(sid)
        for j, token in enumerate(fields[1:]):
            calls[j].append(_split_genotype(token, marker_ids[j], lineno))

    reference = reference or {}
    return [
        _marker_from_calls(mid, col, reference.get(mid), tuple(subjects))
        for mid, col in zip(marker_ids, calls)
    ]


def _marker_from_calls(marker_id, calls, ref, subjects) -> MarkerData:
    labels = sorted({a for c in calls if c is not None for a in c})
    if ref is not None:
        if ref not in labels:
            raise GenotypeFormatError(f"marker {marker_id}: reference allele {ref!r} not observed")
        labels.remove(ref)
        labels.insert(0, ref)
    n = len(calls)
    k = len(labels)
    pos = {a: i for i, a in enumerate(labels)}
    counts = np.zeros((n, max(k, 1)))
    missing = np.array([c is None for c in calls], dtype=bool)
    for i, c in enumerate(calls):
        if c is not None:
            counts[i, pos[c[0]]] += 0.5
            counts[i, pos[c[1]]] += 0.5
    counts[missing] = np.nan
    # a monomorphic marker keeps a single-allele response column
    y = counts[:, 0] if k <= 2 else counts[:, : k - 1]
    return MarkerData(marker_id, tuple(labels), np.ascontiguousarray(y), missing, subjects)


def write_genotypes(markers: Sequence[MarkerData], stream: TextIO, subject_ids=None) -> None:
    """Serialize markers in the format read by :func:`parse_genotypes`."""
    if subject_ids is None:
        subject_ids = markers[0].subject_ids
    stream.write("\t".join(["subject_id", *(m.marker_id for m in markers)]) + "\n")
    tokens = [_genotype_tokens(m) for m in markers]
    for i, sid in enumerate(subject_ids):
        stream.write("\t".join([sid, *(t[i] for t in tokens)]) + "\n")


def _genotype_tokens(m: MarkerData) -> list[str]:
    ys = m.columns()
    out = []
    for i in range(m.n):
        if m.missing[i]:
            out.append("./.")
            continue
        copies = np.rint(2 * ys[i]).astype(int)
        alleles = [a for a, c in zip(m.alleles, copies) for _ in range(c)]
        alleles += [m.alleles[-1]] * (2 - len(alleles))
        out.append("/".join(alleles))
    return out


def parse_phenotypes(
    source, kind: str | None = None, strata: str = "population"
) -> tuple[TraitVector, tuple[str, ...] | None]:
    """Read a phenotype TSV with ``subject_id``, ``trait`` and optional strata column.

    Returns the trait (binary if every observed value is 0/1 unless ``kind``
    says otherwise) and the labels of the ``strata`` column, or ``None`` if
    the column is absent.
    """
    fh = _open(source)
    if fh is not None:
        with fh:
            return parse_phenotypes(fh, kind, strata)

    reader = csv.DictReader((line for line in source if line.strip()), delimiter="\t")
    if reader.fieldnames is None or not {"subject_id", "trait"} <= set(reader.fieldnames):
        raise GenotypeFormatError("phenotype file needs 'subject_id' and 'trait' columns")
    has_pop = strata in reader.fieldnames
    ids, values, pops = [], [], []
    for lineno, row in enumerate(reader, start=2):
        ids.append(row["subject_id"].strip())
        token = (row["trait"] or "").strip()
        if token in (".", "NA", ""):
            values.append(np.nan)
        else:
            try:
                values.append(float(token))
            except ValueError:
                raise GenotypeFormatError(f"malformed trait value {token!r}", lineno) from None
        if has_pop:
            pops.append((row[strata] or "").strip())
    trait = TraitVector.from_values(values, kind, ids)
    return trait, (tuple(pops) if has_pop else None)


def parse_marker_map(source) -> dict[str, tuple[str, float]]:
    """Read an optional ``marker_id chrom position_cM`` map."""
    fh = _open(source)
    if fh is not None:
        with fh:
            return parse_marker_map(fh)
    out = {}
    for lineno, raw in enumerate(source, start=1):
        fields = raw.split("#", 1)[0].split()
        if not fields or fields[0] == "marker_id":
            continue
        if len(fields) < 3:
            raise GenotypeFormatError("map rows need marker_id, chrom, position_cM", lineno)
        try:
            out[fields[0]] = (fields[1], float(fields[2]))
        except ValueError:
            raise GenotypeFormatError(f"bad position {fields[2]!r}", lineno) from None
    return out


def allele_frequency(m: MarkerData) -> np.ndarray:
    """Naive counting frequency of each allele, in ``m.alleles`` order."""
    obs = ~m.missing
    if not obs.any():
        raise InsufficientDataError(f"marker {m.marker_id}: all genotypes missing")
    cols = m.columns()[obs]
    freq = cols.mean(axis=0)
    if m.k == 1:
        return np.ones(1)
    return np.append(freq, 1.0 - freq.sum())


def minor_allele_frequency(m: MarkerData) -> float:
    return float(allele_frequency(m).min()) if m.k > 1 else 0.0


def missing_fraction(m: MarkerData) -> float:
    return float(m.missing.mean()) if m.n else 1.0


@dataclass(frozen=True)
class Exclusion:
    marker_id: str
    reason: str
    value: float


def filter_markers(
    markers: Sequence[MarkerData],
    max_missing_fraction: float = 0.20,
    min_maf: float = 0.05,
) -> tuple[list[MarkerData], list[Exclusion]]:
    """Drop markers with too much missingness or too small a minor allele frequency.

    A marker is excluded when its missing fraction exceeds
    ``max_missing_fraction`` or its MAF is below ``min_maf``.
    """
    if not 0 <= max_missing_fraction < 1:
        raise ValueError("max_missing_fraction must lie in [0, 1)")
    if not 0 <= min_maf < 0.5:
        raise ValueError("min_maf must lie in [0, 0.5)")
    kept, report = [], []
    for m in markers:
        miss = missing_fraction(m)
        if miss > max_missing_fraction:
            report.append(Exclusion(m.marker_id, "missingness", miss))
            continue
        maf = minor_allele_frequency(m)
        if maf < min_maf:
            report.append(Exclusion(m.marker_id, "maf", maf))
            continue
        kept.append(m)
    return kept, report


def effective_subset(m: MarkerData, t: TraitVector) -> np.ndarray:
    """Indices of subjects observed for both the marker and the trait."""
    idx = np.flatnonzero(~m.missing & ~t.missing)
    if idx.size < 2:
        raise InsufficientDataError(f"marker {m.marker_id}: fewer than 2 usable subjects")
    vals = t.values[idx]
    if np.all(vals == vals[0]):
        raise ConstantTraitError(f"marker {m.marker_id}: trait is constant on usable subjects")
    return idx


def align_cohort(
    subject_ids: Sequence[str],
    markers: Sequence[MarkerData],
    trait: TraitVector,
    populations: Sequence[str] | None = None,
    merge_duplicates: bool = False,
) -> CohortView:
    """Reorder markers and trait onto one subject order.

    The cohort is the genotyped subjects in genotype-file order. Trait values
    for subjects without a phenotype row are marked missing. Repeated subject
    identifiers are kept as-is (and later make ``R`` singular) unless
    ``merge_duplicates`` keeps only their first occurrence.
    """
    ids = list(subject_ids)
    dropped: list[str] = []
    if merge_duplicates:
        seen: set[str] = set()
        take = []
        for i, s in enumerate(ids):
            if s in seen:
                dropped.append(s)
            else:
                seen.add(s)
                take.append(i)
        ids = [ids[i] for i in take]
        markers = [m.take(take) for m in markers]
    trait_pos: dict[str, int] = {}
    for i, s in enumerate(trait.subject_ids or ()):
        trait_pos.setdefault(s, i)
    n = len(ids)
    values = np.full(n, np.nan)
    pops = [""] * n if populations is not None else None
    for i, s in enumerate(ids):
        j = trait_pos.get(s)
        if j is not None:
            values[i] = trait.values[j]
            if pops is not None:
                pops[i] = populations[j]
    missing = np.isnan(values)
    aligned = TraitVector(values, trait.kind, missing, tuple(ids))
    return CohortView(
        tuple(ids), aligned, list(markers), tuple(pops) if pops is not None else None, tuple(dropped)
    )
