"""Pedigree growth, gene dropping, trait models and Monte-Carlo experiments."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baseline import trend_test
from .exceptions import DegenerateTestError, GrowthBudgetError
from .genodata import MarkerData, TraitVector
from .gqls import AssocResult, combine_stratified, gqls_test
from .pedigree import (
    BlockDiagonalR,
    Individual,
    Pedigree,
    RMatrix,
    build_r_matrix,
    compute_kinship,
    partition_families,
)

log = logging.getLogger(__name__)

MAX_REDRAWS = 1000


# --- pedigree growth -----------------------------------------------------------

@dataclass(frozen=True)
class PedigreeGrowthConfig:
    spouse_probability: float = 0.8
    offspring_mean: float = 3.0
    max_generations: int = 6
    target_size_range: tuple[int, int] = (120, 130)
    generations_removed: int = 3
    seed: int = 0
    max_attempts: int = 100_000

    def __post_init__(self):
        if not 0 <= self.spouse_probability <= 1:
            raise ValueError("spouse_probability must lie in [0, 1]")
        if self.offspring_mean <= 0:
            raise ValueError("offspring_mean must be positive")
        if not 0 <= self.generations_removed < self.max_generations:
            raise ValueError("generations_removed must be below max_generations")
        lo, hi = self.target_size_range
        if lo > hi or lo < 1:
            raise ValueError("invalid target_size_range")


def _grow_lineage(
    rng: np.random.Generator,
    generations: int,
    spouse_probability: float,
    offspring_mean: float,
    prefix: str,
) -> tuple[list[Individual], bool]:
    """Grow one family from a single founder.

    Each lineage member of generation ``g`` marries an unrelated new founder
    with ``spouse_probability`` and the couple has ``Poisson(offspring_mean)``
    children in generation ``g + 1``. Returns the members and whether the
    last generation was reached.
    """
    counter = 0

    def new_id():
        nonlocal counter
        counter += 1
        return f"{prefix}{counter}"

    members = [Individual(new_id(), generation=1)]
    lineage = list(members)
    for g in range(1, generations):
        children = []
        for ind in lineage:
            if rng.random() >= spouse_probability:
                continue
            spouse = Individual(new_id(), generation=g)
            members.append(spouse)
            for _ in range(rng.poisson(offspring_mean)):
                children.append(Individual(new_id(), ind.id, spouse.id, generation=g + 1))
        if not children:
            return members, False
        members.extend(children)
        lineage = children
    return members, True


def grow_pedigree(cfg: PedigreeGrowthConfig, rng: np.random.Generator | None = None) -> Pedigree:
    """Grow one large pedigree by rejection until it meets ``cfg``.

    The pedigree must reach ``cfg.max_generations`` and the members below the
    top ``cfg.generations_removed`` generations (the sampled subjects) must
    number within ``cfg.target_size_range``. The removed generations stay in
    the genealogy but are excluded from ``Pedigree.sampled``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.target_size_range
    for attempt in range(1, cfg.max_attempts + 1):
        members, complete = _grow_lineage(
            rng, cfg.max_generations, cfg.spouse_probability, cfg.offspring_mean, "I"
        )
        if not complete:
            continue
        sampled = [m.id for m in members if m.generation > cfg.generations_removed]
        if lo <= len(sampled) <= hi:
            log.debug("pedigree accepted after %d attempts", attempt)
            return Pedigree.from_individuals(members, sampled=sampled)
    raise GrowthBudgetError(cfg.max_attempts)


def grow_multifamily_sample(
    total_size: int,
    rng: np.random.Generator,
    spouse_probability: float = 0.8,
    offspring_mean: float = 3.0,
    generations: int = 3,
) -> Pedigree:
    """Independent small families accumulated until ``total_size`` subjects.

    Each family grows from one founder for at most ``generations``
    generations under the same law as :func:`grow_pedigree`; families die
    out naturally, so the sample mixes singletons with larger families. The
    last family is truncated to the requested size, dropping its youngest
    members first.
    """
    if total_size < 1:
        raise ValueError("total_size must be positive")
    members: list[Individual] = []
    fam = 0
    while len(members) < total_size:
        fam += 1
        grown, _ = _grow_lineage(
            rng, generations, spouse_probability, offspring_mean, f"F{fam}_"
        )
        room = total_size - len(members)
        if len(grown) > room:
            grown = _truncate_family(grown, room)
        members.extend(grown)
    return Pedigree.from_individuals(members)


def _truncate_family(members: list[Individual], size: int) -> list[Individual]:
    # keep a parent-closed prefix: founders and couples come before children
    kept: list[Individual] = []
    ids: set[str] = set()
    for ind in sorted(members, key=lambda m: m.generation):
        if len(kept) == size:
            break
        if ind.sire is None or (ind.sire in ids and ind.dam in ids):
            kept.append(ind)
            ids.add(ind.id)
    return kept


# --- gene dropping -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DropPlan:
    """Pedigree layout for vectorized gene dropping, one level per depth."""

    parents: np.ndarray
    founders: np.ndarray
    levels: tuple[np.ndarray, ...]

    @classmethod
    def from_pedigree(cls, ped: Pedigree) -> "DropPlan":
        parents = ped.parent_indices()
        depth = np.zeros(len(ped), dtype=np.int64)
        for i in range(len(ped)):
            if parents[i, 0] >= 0:
                depth[i] = 1 + max(depth[parents[i, 0]], depth[parents[i, 1]])
        founders = np.flatnonzero(depth == 0)
        levels = tuple(np.flatnonzero(depth == d) for d in range(1, depth.max() + 1))
        return cls(parents, founders, levels)

    @property
    def m(self) -> int:
        return self.parents.shape[0]

    def drop(self, founder_alleles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Propagate founder alleles ``(n_founders, 2, M)`` to everyone.

        Each child receives one uniformly chosen allele from each parent,
        independently per column.
        """
        nf, two, n_cols = founder_alleles.shape
        out = np.empty((self.m, 2, n_cols), dtype=founder_alleles.dtype)
        out[self.founders] = founder_alleles
        for idx in self.levels:
            for side in (0, 1):
                pick = rng.integers(0, 2, size=(idx.size, 1, n_cols))
                src = out[self.parents[idx, side]]
                out[idx, side] = np.take_along_axis(src, pick, axis=1)[:, 0, :]
        return out


def drop_allele_counts(
    plan: DropPlan, founder_maf: float, n_markers: int, rng: np.random.Generator
) -> np.ndarray:
    """Copies of allele ``1`` (0, 1 or 2) per member and unlinked marker."""
    founders = rng.random((plan.founders.size, 2, n_markers)) < founder_maf
    return plan.drop(founders, rng).sum(axis=1, dtype=np.int8)


def gene_drop(
    ped: Pedigree,
    founder_maf: float,
    n_markers: int,
    rng: np.random.Generator,
    subjects: Sequence[str] | None = None,
) -> list[MarkerData]:
    """Simulate unlinked biallelic markers by Mendelian gene dropping.

    Founder alleles are ``1`` with probability ``founder_maf``. Returned
    markers cover ``subjects`` (default: the sampled members) and express
    the proportion of allele ``1``.
    """
    if not 0 <= founder_maf <= 1:
        raise ValueError("founder_maf must lie in [0, 1]")
    subjects = ped.sampled_ids if subjects is None else list(subjects)
    rows = np.array([ped.index[s] for s in subjects], dtype=np.int64)
    counts = drop_allele_counts(DropPlan.from_pedigree(ped), founder_maf, n_markers, rng)
    y = counts[rows].astype(float) / 2
    return [
        MarkerData(f"sim{j + 1}", ("1", "0"), y[:, j].copy(), np.zeros(len(rows), dtype=bool), tuple(subjects))
        for j in range(n_markers)
    ]


def ibd_kinship_estimate(
    ped: Pedigree, n_drops: int, rng: np.random.Generator, subjects: Sequence[str] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo kinship and inbreeding from dropping unique founder alleles.

    Per drop, the kinship of ``i`` and ``j`` is scored as the fraction of the
    four allele pairings that are identical by descent (for ``i == j``, the
    two alleles drawn with replacement), and inbreeding as whether the two
    alleles of ``i`` coincide. Returns ``(phi_pair, phi_self)`` averaged over
    drops.
    """
    plan = DropPlan.from_pedigree(ped)
    subjects = ped.ids if subjects is None else list(subjects)
    rows = np.array([ped.index[s] for s in subjects], dtype=np.int64)
    n = rows.size
    pair_sum = np.zeros((n, n))
    self_sum = np.zeros(n)
    labels = np.arange(2 * plan.founders.size, dtype=np.int32).reshape(-1, 2, 1)
    chunk = 20_000
    done = 0
    while done < n_drops:
        cols = min(chunk, n_drops - done)
        alleles = plan.drop(np.repeat(labels, cols, axis=2), rng)[rows]  # (n, 2, cols)
        for a in (0, 1):
            for b in (0, 1):
                eq = alleles[:, None, a, :] == alleles[None, :, b, :]
                pair_sum += eq.sum(axis=2) / 4.0
        self_sum += (alleles[:, 0, :] == alleles[:, 1, :]).sum(axis=1)
        done += cols
    return pair_sum / n_drops, self_sum / n_drops


# --- trait models --------------------------------------------------------------

@dataclass(frozen=True)
class TraitModel:
    tag: str
    kind: str
    n_causal: int
    intercept: float = 0.0
    slope: float = 0.0
    sigma: float = 0.0
    penetrance: tuple[float, ...] = ()

    @property
    def null(self) -> bool:
        return self.tag.startswith("null")


TRAIT_MODELS: dict[str, TraitModel] = {
    "qt1": TraitModel("qt1", "quantitative", 1, 0.0, 0.5, 1.2),
    "qt2": TraitModel("qt2", "quantitative", 1, 0.0, 1.0, 1.5),
    "qt3": TraitModel("qt3", "quantitative", 1, 0.0, 1.0, 1.2),
    # two-locus penetrances: (both loci, one locus, neither)
    "bt1": TraitModel("bt1", "binary", 2, penetrance=(0.5, 0.4, 0.1)),
    # (at least one copy at both loci, otherwise)
    "bt2": TraitModel("bt2", "binary", 2, penetrance=(0.5, 0.1)),
    # by copies of allele 1: (two, one, none)
    "bt3": TraitModel("bt3", "binary", 1, penetrance=(0.5, 0.3, 0.1)),
    "null_qt": TraitModel("null_qt", "quantitative", 1, -1.0, 1.0, 1.2),
    # by copies of allele 1: (none, one, two)
    "null_bt": TraitModel("null_bt", "binary", 1, penetrance=(0.1, 0.3, 0.4)),
}


def get_trait_model(tag: str) -> TraitModel:
    try:
        return TRAIT_MODELS[tag]
    except KeyError:
        raise ValueError(f"unknown trait model {tag!r}; choose from {sorted(TRAIT_MODELS)}") from None


def generate_trait(
    model: TraitModel | str, causal: Sequence, rng: np.random.Generator
) -> TraitVector:
    """Simulate a phenotype from one or two causal markers.

    ``causal`` holds :class:`MarkerData` or arrays of allele-1 proportions.
    """
    if isinstance(model, str):
        model = get_trait_model(model)
    ys = [np.asarray(c.y if isinstance(c, MarkerData) else c, dtype=float) for c in causal]
    if len(ys) != model.n_causal:
        raise ValueError(f"model {model.tag} needs {model.n_causal} causal marker(s), got {len(ys)}")
    if any(np.isnan(y).any() for y in ys):
        raise ValueError("causal genotypes must not contain missing values")
    copies = [np.rint(2 * y).astype(int) for y in ys]
    n = copies[0].size
    tag = model.tag
    if tag in ("qt1", "qt2", "qt3"):
        g = copies[0] - 1
        values = model.intercept + model.slope * g + rng.normal(0.0, model.sigma, n)
    elif tag == "null_qt":
        values = rng.normal(model.intercept + copies[0], model.sigma)
    else:
        if tag == "bt1":
            hom = (copies[0] == 2).astype(int) + (copies[1] == 2).astype(int)
            pen = np.choose(hom, [model.penetrance[2], model.penetrance[1], model.penetrance[0]])
        elif tag == "bt2":
            both = (copies[0] >= 1) & (copies[1] >= 1)
            pen = np.where(both, model.penetrance[0], model.penetrance[1])
        elif tag == "bt3":
            pen = np.choose(copies[0], [model.penetrance[2], model.penetrance[1], model.penetrance[0]])
        elif tag == "null_bt":
            pen = np.asarray(model.penetrance)[copies[0]]
        else:
            raise ValueError(f"unhandled trait model {tag!r}")
        values = (rng.random(n) < pen).astype(float)
    return TraitVector(values, model.kind, np.zeros(n, dtype=bool))


# --- experiments ---------------------------------------------------------------

DESIGNS = ("single-pedigree", "multi-family", "stratified")
METHODS = ("gqls", "trend")


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell of a type-I error or power table.

    For ``design="stratified"`` the ``sizes``/``mafs`` tuples list one entry
    per subpopulation, each grown with ``sub_design``.
    """

    design: str
    sizes: tuple[int, ...]
    mafs: tuple[float, ...]
    trait_model: str
    replicates: int = 1000
    alpha_levels: tuple[float, ...] = (0.05, 0.01)
    methods: tuple[str, ...] = ("gqls",)
    mode: str = "type1"
    seed: int = 1
    sub_design: str = "multi-family"
    max_generations: int = 6
    generations_removed: int = 3
    size_slack: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.alpha_levels or any(not 0 < a < 1 for a in self.alpha_levels):
            raise ValueError("alpha levels must lie in (0, 1)")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be a subset of {METHODS}")
        if self.mode not in ("type1", "power"):
            raise ValueError("mode must be 'type1' or 'power'")
        if len(self.sizes) != len(self.mafs):
            raise ValueError("sizes and mafs must have equal length")
        if self.design == "stratified":
            if len(self.sizes) < 2:
                raise ValueError("stratified design needs at least two populations")
            if self.sub_design not in ("single-pedigree", "multi-family"):
                raise ValueError("sub_design must be single-pedigree or multi-family")
        elif len(self.sizes) != 1:
            raise ValueError("non-stratified designs take a single size and maf")
        if any(not 0 < f < 1 for f in self.mafs):
            raise ValueError("maf must lie in (0, 1)")
        model = get_trait_model(self.trait_model)
        if (self.mode == "type1") != model.null:
            raise ValueError("type1 mode needs a null trait model and power mode a genetic one")


@dataclass(frozen=True, eq=False)
class _Population:
    ped: Pedigree
    plan: DropPlan
    rows: np.ndarray
    r: RMatrix | BlockDiagonalR
    maf: float


@dataclass
class ExperimentRow:
    design: str
    n: str
    maf: str
    trait_model: str
    method: str
    alpha: float
    rejection_rate: float
    se: float
    replicates: int


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[ExperimentRow]
    marker_redraws: int = 0
    trait_redraws: int = 0
    failures: dict[str, int] = field(default_factory=dict)

    def rate(self, method: str, alpha: float) -> float:
        for row in self.rows:
            if row.method == method and math.isclose(row.alpha, alpha):
                return row.rejection_rate
        raise KeyError((method, alpha))

    def write(self, stream) -> None:
        stream.write("design\tn\tmaf\ttrait_model\tmethod\talpha\trejection_rate\tse\treplicates\n")
        for r in self.rows:
            stream.write(
                f"{r.design}\t{r.n}\t{r.maf}\t{r.trait_model}\t{r.method}\t{r.alpha:g}\t"
                f"{r.rejection_rate:.6f}\t{r.se:.6f}\t{r.replicates}\n"
            )


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _design_pedigree(kind: str, size: int, spec: ExperimentSpec, rng) -> Pedigree:
    if kind == "single-pedigree":
        cfg = PedigreeGrowthConfig(
            max_generations=spec.max_generations,
            generations_removed=spec.generations_removed,
            target_size_range=(size - spec.size_slack, size + spec.size_slack),
        )
        return grow_pedigree(cfg, rng)
    return grow_multifamily_sample(size, rng)


def build_population(ped: Pedigree, maf: float) -> _Population:
    subjects = ped.sampled_ids
    kin = compute_kinship(ped, subjects)
    r = build_r_matrix(kin)
    part = partition_families(kin)
    rel = r.split(part) if len(part) > 1 else r
    rows = np.array([ped.index[s] for s in subjects], dtype=np.int64)
    return _Population(ped, DropPlan.from_pedigree(ped), rows, rel, maf)


def design_populations(spec: ExperimentSpec) -> list[_Population]:
    kind = spec.sub_design if spec.design == "stratified" else spec.design
    pops = []
    for p, (size, maf) in enumerate(zip(spec.sizes, spec.mafs)):
        ped = _design_pedigree(kind, size, spec, _stream(spec.seed, 0, p))
        pops.append(build_population(ped, maf))
    return pops


@dataclass
class _ReplicateOutcome:
    pvalues: dict[str, float]
    marker_redraws: int = 0
    trait_redraws: int = 0
    failure: str | None = None


def _polymorphic(y: np.ndarray) -> bool:
    return bool(np.any(y != y[0]))


def _simulate_population(pop: _Population, model: TraitModel, mode: str, rng):
    redraw_m = redraw_t = 0
    for _ in range(MAX_REDRAWS):
        n_markers = model.n_causal + (1 if mode == "type1" else 0)
        counts = drop_allele_counts(pop.plan, pop.maf, n_markers, rng)[pop.rows]
        ys = counts.astype(float).T / 2
        causal = ys[: model.n_causal]
        if mode == "type1":
            tested = ys[-1]
            while not _polymorphic(tested) and redraw_m < MAX_REDRAWS:
                redraw_m += 1
                tested = drop_allele_counts(pop.plan, pop.maf, 1, rng)[pop.rows, 0] / 2
        else:
            tested = causal[0]
        if not _polymorphic(tested):
            redraw_m += 1
            continue
        for _ in range(MAX_REDRAWS):
            trait = generate_trait(model, causal, rng).values
            if _polymorphic(trait):
                return trait, tested, redraw_m, redraw_t
            redraw_t += 1
        break
    raise DegenerateTestError("could not draw a testable replicate")


def _run_replicate(spec: ExperimentSpec, pops: list[_Population], rep: int) -> _ReplicateOutcome:
    rng = _stream(spec.seed, 1, rep)
    model = get_trait_model(spec.trait_model)
    out = _ReplicateOutcome({})
    draws = []
    try:
        for pop in pops:
            x, y, rm, rt = _simulate_population(pop, model, spec.mode, rng)
            out.marker_redraws += rm
            out.trait_redraws += rt
            draws.append((x, y))
        if "gqls" in spec.methods:
            parts = [(str(i + 1), gqls_test(x, y, pop.r)) for i, ((x, y), pop) in enumerate(zip(draws, pops))]
            res: AssocResult = parts[0][1] if len(parts) == 1 else combine_stratified(parts)
            out.pvalues["gqls"] = res.p_value
        if "trend" in spec.methods:
            x = np.concatenate([d[0] for d in draws])
            y = np.concatenate([d[1] for d in draws])
            out.pvalues["trend"] = trend_test(x, y).p_value
    except DegenerateTestError as exc:
        out.failure = getattr(exc, "flag", "degenerate")
        out.pvalues = {}
    return out


def run_experiment(spec: ExperimentSpec, threads: int = 1, pops: list[_Population] | None = None) -> ExperimentResult:
    """Monte-Carlo rejection rates for one design/trait/MAF cell.

    The design sample is grown once from ``spec.seed`` and reused; every
    replicate draws fresh markers and traits from its own stream derived from
    ``(seed, replicate)``, so results do not depend on ``threads``.
    Replicates whose tested marker (or binary trait) is monomorphic are
    redrawn; remaining degenerate replicates are counted as failures and
    excluded from the rates.
    """
    if pops is None:
        pops = design_populations(spec)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda k: _run_replicate(spec, pops, k), range(spec.replicates)))
    else:
        outcomes = [_run_replicate(spec, pops, k) for k in range(spec.replicates)]

    result = ExperimentResult(spec, [])
    for o in outcomes:
        result.marker_redraws += o.marker_redraws
        result.trait_redraws += o.trait_redraws
        if o.failure is not None:
            result.failures[o.failure] = result.failures.get(o.failure, 0) + 1
    if result.marker_redraws or result.trait_redraws:
        log.info(
            "redrew %d monomorphic markers and %d constant traits",
            result.marker_redraws,
            result.trait_redraws,
        )
    n_label = "+".join(str(p.rows.size) for p in pops)
    maf_label = "+".join(f"{m:g}" for m in spec.mafs)
    for method in spec.methods:
        pv = np.array([o.pvalues[method] for o in outcomes if method in o.pvalues])
        for alpha in spec.alpha_levels:
            count = pv.size
            rate = float(np.mean(pv <= alpha)) if count else float("nan")
            se = math.sqrt(rate * (1 - rate) / count) if count else float("nan")
            result.rows.append(
                ExperimentRow(spec.design, n_label, maf_label, spec.trait_model, method, alpha, rate, se, count)
            )
    return result


SPEC_KEYS = {
    "design", "sizes", "size", "maf", "mafs", "model", "trait_model", "replicates", "alphas",
    "methods", "seed", "mode", "sub_design", "generations", "generations_removed", "size_slack",
}


def parse_experiment_spec(text: str) -> ExperimentSpec:
    """Parse ``key = value`` lines (``#`` comments) into an :class:`ExperimentSpec`."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SPEC_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = val

    def items(key, alt=None):
        raw = values.get(key, values.get(alt, "") if alt else "")
        return [v for v in raw.replace(",", " ").split() if v]

    try:
        kwargs = dict(
            design=values["design"],
            sizes=tuple(int(v) for v in items("sizes", "size")),
            mafs=tuple(float(v) for v in items("mafs", "maf")),
            trait_model=values.get("trait_model", values.get("model", "")),
        )
    except KeyError as exc:
        raise ValueError(f"missing required key {exc.args[0]!r}") from None
    if "replicates" in values:
        kwargs["replicates"] = int(values["replicates"])
    if "alphas" in values:
        kwargs["alpha_levels"] = tuple(float(v) for v in items("alphas"))
    if "methods" in values:
        kwargs["methods"] = tuple(items("methods"))
    if "seed" in values:
        kwargs["seed"] = int(values["seed"])
    if "mode" in values:
        kwargs["mode"] = values["mode"]
    if "sub_design" in values:
        kwargs["sub_design"] = values["sub_design"]
    if "generations" in values:
        kwargs["max_generations"] = int(values["generations"])
    if "generations_removed" in values:
        kwargs["generations_removed"] = int(values["generations_removed"])
    if "size_slack" in values:
        kwargs["size_slack"] = int(values["size_slack"])
    return ExperimentSpec(**kwargs)


def with_seed(spec: ExperimentSpec, seed: int) -> ExperimentSpec:
    return replace(spec, seed=seed)
