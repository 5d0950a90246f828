"""Command-line entry points: ``kinship``, ``scan`` and ``simulate``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .baseline import trend_test
from .exceptions import ConstantTraitError, DegenerateTestError, NotPositiveDefiniteError, PedgqlsError
from .genodata import (
    CohortView,
    Exclusion,
    MarkerData,
    align_cohort,
    effective_subset,
    filter_markers,
    parse_genotypes,
    parse_marker_map,
    parse_phenotypes,
)
from .gqls import AssocResult, combine_stratified, gqls_test
from .pedigree import (
    BlockDiagonalR,
    RMatrix,
    build_r_matrix,
    compute_kinship,
    parse_pedigree,
    partition_families,
)
from .simulate import parse_experiment_spec, run_experiment, with_seed

log = logging.getLogger("pedgqls")

THREADS_ENV = "PEDGQLS_THREADS"
EXIT_OK, EXIT_DEGENERATE, EXIT_INPUT = 0, 1, 2
RESULT_COLUMNS = ("marker_id", "method", "df", "statistic", "p_value", "mu_hat", "n_used", "flags")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# --- scan ---------------------------------------------------------------------

@dataclass
class ScanConfig:
    pedigree_path: str
    genotype_path: str
    phenotype_path: str
    map_path: str | None = None
    min_maf: float = 0.05
    max_missing: float = 0.20
    method: str = "gqls"
    stratify_by: str | None = None
    out: str | None = None
    threads: int = 1
    merge_duplicates: bool = False
    placeholders: bool = False
    trait_kind: str | None = None

    def __post_init__(self):
        if self.method not in ("gqls", "trend", "both"):
            raise ValueError("method must be gqls, trend or both")
        if not 0 <= self.min_maf < 0.5:
            raise ValueError("--min-maf must lie in [0, 0.5)")
        if not 0 <= self.max_missing < 1:
            raise ValueError("--max-missing must lie in [0, 1)")
        if self.threads < 1:
            raise ValueError("--threads must be positive")

    @property
    def methods(self) -> tuple[str, ...]:
        return ("gqls", "trend") if self.method == "both" else (self.method,)


@dataclass
class ScanOutput:
    results: list[AssocResult]
    exclusions: list[Exclusion]
    n_tested: int
    n_subjects: int
    merged: tuple[str, ...] = ()
    flags_summary: dict[str, int] = field(default_factory=dict)

    @property
    def bonferroni(self) -> float:
        return 0.05 / self.n_tested if self.n_tested else float("nan")

    @property
    def all_degenerate(self) -> bool:
        return bool(self.results) and not any(r.ok for r in self.results)

    def summary(self) -> str:
        reasons: dict[str, int] = {}
        for e in self.exclusions:
            reasons[e.reason] = reasons.get(e.reason, 0) + 1
        excl = ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())) or "none"
        bonf = f"{self.bonferroni:.4g}" if self.n_tested else "NA"
        degenerate = sum(1 for r in self.results if not r.ok)
        return (
            f"subjects={self.n_subjects} markers_tested={self.n_tested} "
            f"excluded={len(self.exclusions)} ({excl}) degenerate_tests={degenerate} "
            f"bonferroni_threshold_5pct={bonf}"
        )


class _Relatedness:
    """Relationship matrices for the cohort and its per-marker subsets.

    Subset factorizations are cached by index set so markers sharing a
    missingness pattern reuse them. Safe for concurrent readers.
    """

    def __init__(self, r: RMatrix):
        self.r = r
        self._cache: dict[bytes, RMatrix | BlockDiagonalR] = {}
        self._lock = threading.Lock()

    def for_subset(self, idx: np.ndarray) -> RMatrix | BlockDiagonalR:
        key = idx.tobytes()
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        sub = self.r if idx.size == self.r.n else self.r.submatrix(idx)
        part = partition_families(sub.entries)
        rel = sub.split(part) if len(part) > 1 else sub
        with self._lock:
            self._cache.setdefault(key, rel)
        return rel


def _degenerate(marker_id: str, method: str, exc: Exception, n: int = 0) -> AssocResult:
    flag = getattr(exc, "flag", "error")
    return AssocResult(marker_id, float("nan"), 0, float("nan"), method, n, None, (flag,))


def _test_marker(
    marker: MarkerData, cohort: CohortView, rel: _Relatedness, methods: Sequence[str], strata
) -> list[AssocResult]:
    out = []
    trait = cohort.trait
    try:
        idx = effective_subset(marker, trait)
    except DegenerateTestError as exc:
        return [_degenerate(marker.marker_id, m, exc) for m in methods]
    x = trait.values[idx]
    y = marker.columns()[idx]
    for method in methods:
        try:
            if method == "trend":
                if not marker.biallelic:
                    out.append(
                        AssocResult(marker.marker_id, float("nan"), 0, float("nan"), "trend",
                                    idx.size, None, ("trend_not_applicable",))
                    )
                    continue
                tr = trend_test(x, y[:, 0])
                out.append(AssocResult(marker.marker_id, tr.statistic, 1, tr.p_value, "trend", tr.n_used))
            elif strata is None:
                ycol = y[:, 0] if marker.biallelic else y
                out.append(gqls_test(x, ycol, rel.for_subset(idx), marker.marker_id))
            else:
                out.append(_stratified(marker, idx, x, y, rel, strata))
        except DegenerateTestError as exc:
            out.append(_degenerate(marker.marker_id, method, exc, idx.size))
    return out


def _stratified(marker, idx, x, y, rel, strata) -> AssocResult:
    parts = []
    labels = np.asarray(strata)[idx]
    for label in sorted(set(labels.tolist())):
        local = np.flatnonzero(labels == label)
        sub = idx[local]
        try:
            ycol = y[local, 0] if marker.biallelic else y[local]
            if np.all(x[local] == x[local][0]):
                raise ConstantTraitError("trait is constant")
            parts.append((label, gqls_test(x[local], ycol, rel.for_subset(sub), marker.marker_id)))
        except DegenerateTestError as exc:
            raise type(exc)(f"population {label}: {exc}") from exc
    return combine_stratified(parts, marker.marker_id)


def _sort_key(res: AssocResult):
    p = res.p_value if math.isfinite(res.p_value) else math.inf
    return (p, res.marker_id, res.method)


def run_scan(cfg: ScanConfig) -> ScanOutput:
    """Load inputs, filter markers and test each one; results sorted by p-value."""
    ped = parse_pedigree(cfg.pedigree_path, placeholders=cfg.placeholders)
    if cfg.map_path:
        parse_marker_map(cfg.map_path)
    markers = parse_genotypes(cfg.genotype_path, cohort=ped.ids)
    trait, strata = parse_phenotypes(
        cfg.phenotype_path, cfg.trait_kind, cfg.stratify_by or "population"
    )
    if cfg.stratify_by and strata is None:
        raise PedgqlsError(f"phenotype file has no column {cfg.stratify_by!r}")
    subjects = markers[0].subject_ids if markers else ()
    cohort = align_cohort(
        subjects, markers, trait, strata if cfg.stratify_by else None, cfg.merge_duplicates
    )
    kept, exclusions = filter_markers(cohort.markers, cfg.max_missing, cfg.min_maf)
    n_subjects = len(cohort.subject_ids)
    if not kept:
        return ScanOutput([], exclusions, 0, n_subjects, cohort.dropped)

    kin = compute_kinship(ped, cohort.subject_ids)
    rel = _Relatedness(build_r_matrix(kin))
    work = lambda m: _test_marker(m, cohort, rel, cfg.methods, cohort.populations)  # noqa: E731
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_marker = list(pool.map(work, kept))
    else:
        per_marker = [work(m) for m in kept]
    results = sorted((r for group in per_marker for r in group), key=_sort_key)
    return ScanOutput(results, exclusions, len(kept), n_subjects, cohort.dropped)


def _fmt(v: float) -> str:
    return "NA" if not math.isfinite(v) else f"{v:.10g}"


def write_results(results: Sequence[AssocResult], stream: TextIO) -> None:
    stream.write("\t".join(RESULT_COLUMNS) + "\n")
    for res in results:
        _write_row(stream, res.marker_id, res.method, res)
        for label, sub in res.detail:
            _write_row(stream, res.marker_id, f"{res.method}:{label}", sub)


def _write_row(stream, marker_id, method, res: AssocResult) -> None:
    df = str(res.df) if res.df else "NA"
    flags = ",".join(res.flags) if res.flags else "."
    stream.write(
        f"{marker_id}\t{method}\t{df}\t{_fmt(res.statistic)}\t{_fmt(res.p_value)}\t"
        f"{res.mu_hat_text}\t{res.n_used}\t{flags}\n"
    )


# --- subcommands ----------------------------------------------------------------

def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline="\n"), True


def cmd_kinship(args) -> int:
    ped = parse_pedigree(args.pedigree, placeholders=args.placeholders)
    subjects = None
    if args.subjects:
        with open(args.subjects, encoding="utf-8") as fh:
            subjects = fh.read().split()
    kin = compute_kinship(ped, subjects)
    out, close = _open_out(args.out)
    try:
        if args.inbreeding_out:
            with open(args.inbreeding_out, "w", encoding="utf-8", newline="\n") as inb:
                kin.write(out, inb)
        else:
            kin.write(out)
    finally:
        if close:
            out.close()
    if ped.placeholders:
        print(f"note: created placeholder founders: {', '.join(ped.placeholders)}", file=sys.stderr)
    return EXIT_OK


def cmd_scan(args) -> int:
    cfg = ScanConfig(
        pedigree_path=args.pedigree,
        genotype_path=args.genotypes,
        phenotype_path=args.phenotypes,
        map_path=args.map,
        min_maf=args.min_maf,
        max_missing=args.max_missing,
        method=args.method,
        stratify_by=args.stratify_by,
        out=args.out,
        threads=args.threads,
        merge_duplicates=args.merge_duplicates,
        placeholders=args.placeholders,
        trait_kind=args.trait_kind,
    )
    try:
        output = run_scan(cfg)
    except NotPositiveDefiniteError as exc:
        print(f"error: {exc} (rerun with --merge-duplicates to keep first occurrences)", file=sys.stderr)
        return EXIT_INPUT
    out, close = _open_out(cfg.out)
    try:
        write_results(output.results, out)
    finally:
        if close:
            out.close()
    if output.merged:
        print(f"merged duplicate subjects: {', '.join(output.merged)}", file=sys.stderr)
    print(output.summary(), file=sys.stderr)
    return EXIT_DEGENERATE if output.all_degenerate else EXIT_OK


def resolve_spec(path: str) -> str:
    p = Path(path)
    if p.exists():
        return p.read_text(encoding="utf-8")
    bundled = resources.files("pedgqls") / "specs" / p.name
    if bundled.is_file():
        return bundled.read_text(encoding="utf-8")
    raise FileNotFoundError(f"spec file not found: {path}")


def cmd_simulate(args) -> int:
    spec = parse_experiment_spec(resolve_spec(args.spec))
    if args.seed is not None:
        spec = with_seed(spec, args.seed)
    if args.replicates is not None:
        spec = dataclasses.replace(spec, replicates=args.replicates)
    result = run_experiment(spec, threads=args.threads)
    out, close = _open_out(args.out)
    try:
        result.write(out)
    finally:
        if close:
            out.close()
    for row in result.rows:
        print(
            f"{row.method} alpha={row.alpha:g}: rate={row.rejection_rate:.4f} "
            f"(MC SE {row.se:.4f}, {row.replicates} replicates)",
            file=sys.stderr,
        )
    if result.failures:
        print(f"failed replicates: {result.failures}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pedgqls", description="Quasi-likelihood association tests for related individuals"
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kinship", help="export kinship and inbreeding coefficients")
    k.add_argument("--pedigree", required=True)
    k.add_argument("--subjects", help="file of subject identifiers (default: all members)")
    k.add_argument("--out", help="pair table path (default: stdout)")
    k.add_argument("--inbreeding-out", help="path for the per-subject inbreeding table")
    k.add_argument("--placeholders", action="store_true",
                   help="create founders for parents missing from the file")
    k.set_defaults(func=cmd_kinship)

    s = sub.add_parser("scan", help="test every marker for association")
    s.add_argument("--pedigree", required=True)
    s.add_argument("--genotypes", required=True)
    s.add_argument("--phenotypes", required=True)
    s.add_argument("--map")
    s.add_argument("--min-maf", type=float, default=0.05)
    s.add_argument("--max-missing", type=float, default=0.20)
    s.add_argument("--method", choices=("gqls", "trend", "both"), default="gqls")
    s.add_argument("--stratify-by", help="phenotype column holding population labels")
    s.add_argument("--trait-kind", choices=("binary", "quantitative"))
    s.add_argument("--merge-duplicates", action="store_true",
                   help="keep only the first occurrence of repeated subject identifiers")
    s.add_argument("--placeholders", action="store_true")
    s.add_argument("--threads", type=int, default=default_threads())
    s.add_argument("--out")
    s.set_defaults(func=cmd_scan)

    m = sub.add_parser("simulate", help="run a type-I error or power experiment")
    m.add_argument("spec", help="experiment spec file or name of a bundled spec")
    m.add_argument("--seed", type=int)
    m.add_argument("--replicates", type=int, help="override the spec's replicate count")
    m.add_argument("--threads", type=int, default=default_threads())
    m.add_argument("--out")
    m.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except BrokenPipeError:
        sys.stderr.close()
        return EXIT_OK
    except (PedgqlsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
