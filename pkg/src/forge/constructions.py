"""Cover and parametrized-fiber constructions, plus growth estimation.

The cover of a structure replaces each element by a finite block of copies
of itself, marked by a fresh equivalence symbol E, with every original
relation holding of copies exactly when it held of the originals.  The
parametrized-fiber construction (pfc) turns a single-sorted class K into a
two-sorted one: objects of sort O, parameters of sort P, and for each base
relation R a lifted R' whose first coordinate selects the parameter; a
structure belongs to the lifted class exactly when every parameter's fiber
is a K-member.

Growth estimation follows realization counts of a quantifier-free type or
a formula instance along a chain's stages and classifies them as algebraic
(bounded), growing, or inconclusive.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

from .errors import SignatureError, SortError, StructureError
from .fraisse import (
    ClassPresentation,
    StageChain,
    equivalence_patterns,
    invariance_patterns,
    pattern_completions,
    pattern_completions_modulo_equivalence,
    _dedup_patterns,
)
from .logic import Formula, Var, all_assignments, evaluate, free_vars, qftp_ordered
from .structures import (
    FinStructure,
    RelationDecl,
    Signature,
    make_signature,
)

ElemRef = tuple[str, int]


# ---------------------------------------------------------------------------
# Imaginary cover.


def _single_sort(sig: Signature) -> str:
    if len(sig.sorts) != 1:
        raise SignatureError("this construction needs a single-sorted input")
    return sig.sorts[0]


def cover_signature(sig: Signature) -> Signature:
    """The input signature plus a fresh binary E on its single sort."""
    sort = _single_sort(sig)
    if sig.has_relation("E"):
        raise SignatureError("signature already has a relation named E")
    return sig.extend(RelationDecl("E", (sort, sort)))


def imaginary_cover_structure(s: FinStructure, m: int) -> FinStructure:
    """Replace each element by an E-class of m copies, lifting relations.

    Copy i of the element at position p (in id order) gets id p*m + i; E
    holds exactly within a block, and each original relation holds of
    copies iff it held of the originals.
    """
    if m < 1:
        raise StructureError("the cover needs at least one copy per element")
    sig = cover_signature(s.sig)
    sort = sig.sorts[0]
    ids = s.elems(sort)
    position = {x: p for p, x in enumerate(ids)}

    def copies(x: int) -> range:
        return range(position[x] * m, position[x] * m + m)

    universe = {sort: range(len(ids) * m)}
    tables: dict[str, list[tuple[int, ...]]] = {
        "E": [
            (u, v) for x in ids for u in copies(x) for v in copies(x)
        ]
    }
    for decl, table in zip(s.sig.relations, s.tables):
        rows = []
        for t in table:
            for lifted in itertools.product(*(copies(x) for x in t)):
                rows.append(lifted)
        tables[decl.name] = rows
    return FinStructure.build(sig, universe, tables)


def imaginary_cover_class(k: ClassPresentation) -> ClassPresentation:
    """The class of finite pieces of covers of K-members.

    Membership amounts to: E is an equivalence, every original relation is
    E-invariant and compatible with its flags on the quotient, and the
    quotient is a K-member.  Block sizes are unbounded at class level.
    """
    sig = cover_signature(k.sig)
    sort = sig.sorts[0]
    forbidden = list(equivalence_patterns(sig, "E"))
    helpers = ["equivalence:E"]
    for decl in k.sig.relations:
        forbidden.extend(invariance_patterns(sig, decl.name, "E"))
        helpers.append(f"invariance:{decl.name}:E")
        if "irreflexive" in decl.flags:
            # a lifted relation may not hold inside one block
            forbidden.extend(
                pattern_completions_modulo_equivalence(
                    sig,
                    {sort: [0, 1]},
                    [("E", (0, 1)), (decl.name, (0, 1))],
                    [],
                    "E",
                )
            )
            helpers.append(f"quotient_irreflexive:{decl.name}")
        if "reflexive" in decl.flags:
            forbidden.extend(
                pattern_completions_modulo_equivalence(
                    sig,
                    {sort: [0, 1]},
                    [("E", (0, 1))],
                    [(decl.name, (0, 1))],
                    "E",
                )
            )
            helpers.append(f"quotient_reflexive:{decl.name}")
    for d in k.forbidden:
        pts = d.elems(k.sig.sorts[0])
        rows: dict[str, list[tuple[int, ...]]] = {
            "E": [(x, x) for x in pts]
        }
        for decl, table in zip(d.sig.relations, d.tables):
            rows[decl.name] = sorted(table)
        forbidden.append(
            FinStructure.build(sig, {sort: pts}, rows)
        )
    return ClassPresentation(
        f"cover({k.name})", sig, _dedup_patterns(forbidden), helpers
    )


# ---------------------------------------------------------------------------
# Parametrized fibers.

OBJECT_SORT = "O"
PARAM_SORT = "P"


def pfc_signature(sig: Signature) -> Signature:
    """Two sorts O and P; each base R becomes R' with a leading P slot."""
    _single_sort(sig)
    decls = []
    for decl in sig.relations:
        decls.append(
            RelationDecl(
                decl.name + "'",
                (PARAM_SORT,) + (OBJECT_SORT,) * decl.arity,
            )
        )
    return Signature((OBJECT_SORT, PARAM_SORT), tuple(decls))


def fiber_structure(
    m: FinStructure, b: int, base_sig: Optional[Signature] = None
) -> FinStructure:
    """The base-signature structure a parameter b induces on sort O.

    Each base relation holds of a tuple exactly when the lifted relation
    holds of the tuple prefixed with b.  When base_sig is omitted a
    flagless single-sorted signature over sort O is inferred.
    """
    if PARAM_SORT not in m.sig.sorts or OBJECT_SORT not in m.sig.sorts:
        raise SignatureError("structure is not over a lifted signature")
    if b not in m.elems(PARAM_SORT):
        raise StructureError(f"{b} is not a parameter element")
    if base_sig is None:
        base_sig = make_signature(
            (OBJECT_SORT,),
            [
                (decl.name[:-1], (OBJECT_SORT,) * (decl.arity - 1))
                for decl in m.sig.relations
            ],
        )
    sort = _single_sort(base_sig)
    tables: dict[str, list[tuple[int, ...]]] = {}
    for decl in m.sig.relations:
        base_name = decl.name[:-1]
        if not base_sig.has_relation(base_name):
            raise SignatureError(
                f"base signature lacks {base_name!r} for {decl.name!r}"
            )
        tables[base_name] = [
            t[1:] for t in m.table(decl.name) if t[0] == b
        ]
    # the lifted symbols carry no flags, so a fiber can violate the base
    # flags; report that instead of letting build() silently close it
    for decl in base_sig.relations:
        rows = set(tables.get(decl.name, ()))
        if "symmetric" in decl.flags:
            for x, y in rows:
                if (y, x) not in rows:
                    raise StructureError(
                        f"fiber at {b} breaks symmetry of {decl.name}: "
                        f"({x},{y}) without its transpose"
                    )
        if "irreflexive" in decl.flags and any(x == y for x, y in rows):
            raise StructureError(
                f"fiber at {b} puts a loop in irreflexive {decl.name}"
            )
        if "reflexive" in decl.flags:
            for x in m.elems(OBJECT_SORT):
                if (x, x) not in rows:
                    raise StructureError(
                        f"fiber at {b} misses a loop of reflexive "
                        f"{decl.name}"
                    )
    return FinStructure.build(
        base_sig, {sort: m.elems(OBJECT_SORT)}, tables
    )


def pfc_class(k: ClassPresentation) -> ClassPresentation:
    """The lifted class: every parameter's fiber is a K-member.

    Forbidden patterns are one parameter plus a forbidden fiber shape, one
    per forbidden pattern of K, plus violators of K's relation flags seen
    through a parameter.
    """
    sig = pfc_signature(k.sig)
    base_sort = k.sig.sorts[0]
    forbidden: list[FinStructure] = []
    helpers: list[str] = []
    for d in k.forbidden:
        pts = d.elems(base_sort)
        rows = {
            decl.name + "'": [(0,) + t for t in table]
            for decl, table in zip(d.sig.relations, d.tables)
        }
        forbidden.append(
            FinStructure.build(
                sig,
                {OBJECT_SORT: pts, PARAM_SORT: [0]},
                rows,
            )
        )
    for decl in k.sig.relations:
        lifted = decl.name + "'"
        if "symmetric" in decl.flags:
            forbidden.extend(
                pattern_completions(
                    sig,
                    {OBJECT_SORT: [0, 1], PARAM_SORT: [0]},
                    [(lifted, (0, 0, 1))],
                    [(lifted, (0, 1, 0))],
                )
            )
            helpers.append(f"fiber_symmetric:{decl.name}")
        if "irreflexive" in decl.flags:
            forbidden.extend(
                pattern_completions(
                    sig,
                    {OBJECT_SORT: [0], PARAM_SORT: [0]},
                    [(lifted, (0, 0, 0))],
                    [],
                )
            )
            helpers.append(f"fiber_irreflexive:{decl.name}")
        if "reflexive" in decl.flags:
            forbidden.extend(
                pattern_completions(
                    sig,
                    {OBJECT_SORT: [0], PARAM_SORT: [0]},
                    [],
                    [(lifted, (0, 0, 0))],
                )
            )
            helpers.append(f"fiber_reflexive:{decl.name}")
    return ClassPresentation(
        f"pfc({k.name})", sig, _dedup_patterns(forbidden), helpers
    )


# ---------------------------------------------------------------------------
# Growth along a chain.


@dataclass(frozen=True)
class GrowthVerdict:
    """Realization counts across examined stages, classified.

    algebraic: constant counts (bound = the constant); growing: strictly
    increasing counts over at least 3 consecutive examined stages; anything
    else inconclusive.
    """

    kind: str
    bound: Optional[int]
    counts: tuple[int, ...]
    stages: tuple[int, ...]


def _classify_counts(
    counts: Sequence[int], stages: Sequence[int]
) -> GrowthVerdict:
    counts = tuple(counts)
    stages = tuple(stages)
    if len(set(counts)) == 1:
        return GrowthVerdict("algebraic", counts[0], counts, stages)
    for i in range(len(counts) - 2):
        if counts[i] < counts[i + 1] < counts[i + 2]:
            return GrowthVerdict("growing", None, counts, stages)
    return GrowthVerdict("inconclusive", None, counts, stages)


def _chain_forward(
    chain: StageChain, start: int, end: int, ref: ElemRef
) -> ElemRef:
    sort, x = ref
    for i in range(start, end):
        x = chain.embeddings[i].apply(sort, x)
    return (sort, x)


def _check_stages(chain: StageChain, stages: Sequence[int]) -> tuple[int, ...]:
    stages = tuple(stages)
    if len(stages) < 3:
        raise StructureError("need at least 3 stages to classify growth")
    if list(stages) != sorted(set(stages)):
        raise StructureError("stages must be strictly increasing")
    if stages[-1] >= len(chain.stages) or stages[0] < 0:
        raise StructureError(
            f"stage {stages[-1]} not built (chain has "
            f"{len(chain.stages)} stages)"
        )
    return stages


def acl_estimate(
    chain: StageChain,
    a: ElemRef,
    base: Iterable[ElemRef],
    stages: Sequence[int],
) -> GrowthVerdict:
    """Classify the orbit of a over the base set across chain stages.

    a and the base must live in the first examined stage; both are mapped
    forward along the recorded connecting embeddings, and at each stage the
    elements with the same quantifier-free type over the (ordered) base as
    a are counted.
    """
    stages = _check_stages(chain, stages)
    s0 = stages[0]
    start = chain.stages[s0]
    base = sorted(
        set(base),
        key=lambda r: (start.sig.sort_index(r[0]), r[1]),
    )
    sort_a = a[0]
    counts = []
    for t in stages:
        m = chain.stages[t]
        a_t = _chain_forward(chain, s0, t, a)
        base_t = [_chain_forward(chain, s0, t, r) for r in base]
        target = qftp_ordered(m, [a_t], base_t)
        n = sum(
            1
            for x in m.elems(sort_a)
            if qftp_ordered(m, [(sort_a, x)], base_t) == target
        )
        counts.append(n)
    return _classify_counts(counts, stages)


def count_realizations_over_stages(
    chain: StageChain,
    phi: Formula,
    x: Var,
    assignment: Mapping[str, int],
    stages: Sequence[int],
) -> tuple[int, ...]:
    """Number of solutions for x at each stage, parameters mapped forward.

    The assignment gives ids in the first examined stage for every free
    variable except x.
    """
    stages = _check_stages(chain, stages)
    s0 = stages[0]
    sorts = {v.name: v.sort for v in free_vars(phi)}
    for name in assignment:
        if name not in sorts:
            raise SortError(f"{name!r} is not free in the formula")
    counts = []
    for t in stages:
        m = chain.stages[t]
        env = {
            name: _chain_forward(chain, s0, t, (sorts[name], val))[1]
            for name, val in assignment.items()
        }
        counts.append(
            sum(
                1
                for cand in m.elems(x.sort)
                if evaluate(m, phi, {**env, x.name: cand})
            )
        )
    return tuple(counts)


@dataclass(frozen=True)
class InstanceGrowth:
    params: tuple[tuple[str, int], ...]
    verdict: GrowthVerdict


@dataclass(frozen=True)
class FormulaGrowthReport:
    """Per-instance growth verdicts and the uniform-bound separation.

    bound_found means: some k <= k_max has every algebraic instance bounded
    by k and every growing instance eventually above k, with no instance
    left inconclusive - the finite trace of deciding "has infinitely many
    solutions" by a counting threshold.
    """

    instances: tuple[InstanceGrowth, ...]
    uniform_bound: Optional[int]
    bound_found: bool
    k_max: int
    stages: tuple[int, ...]

    @property
    def growing(self) -> int:
        return sum(1 for i in self.instances if i.verdict.kind == "growing")

    @property
    def algebraic(self) -> int:
        return sum(
            1 for i in self.instances if i.verdict.kind == "algebraic"
        )

    @property
    def inconclusive(self) -> int:
        return sum(
            1 for i in self.instances if i.verdict.kind == "inconclusive"
        )


def classify_formula_growth(
    chain: StageChain,
    phi: Formula,
    x: Union[Var, str],
    stages: Sequence[int],
    k_max: int,
) -> FormulaGrowthReport:
    """Growth verdicts of phi(x, params) over all parameter tuples.

    Parameters range over the first examined stage; each instance's
    realization counts are classified, and the report states whether a
    uniform bound at most k_max separates the algebraic instances from the
    growing ones.
    """
    stages = _check_stages(chain, stages)
    variables = free_vars(phi)
    if isinstance(x, str):
        matches = [v for v in variables if v.name == x]
        if not matches:
            raise SortError(f"no free variable named {x!r}")
        x = matches[0]
    if x not in variables:
        raise SortError(f"{x.name!r} is not free in the formula")
    params = tuple(v for v in variables if v.name != x.name)
    first = chain.stages[stages[0]]
    instances = []
    for env in all_assignments(first, params):
        counts = count_realizations_over_stages(chain, phi, x, env, stages)
        verdict = _classify_counts(counts, stages)
        instances.append(
            InstanceGrowth(
                tuple((v.name, env[v.name]) for v in params), verdict
            )
        )
    bounds = [
        i.verdict.bound for i in instances if i.verdict.kind == "algebraic"
    ]
    uniform = max(bounds) if bounds else 0
    ok = (
        uniform <= k_max
        and all(
            i.verdict.counts[-1] > uniform
            for i in instances
            if i.verdict.kind == "growing"
        )
        and all(i.verdict.kind != "inconclusive" for i in instances)
    )
    return FormulaGrowthReport(
        instances=tuple(instances),
        uniform_bound=uniform,
        bound_found=ok,
        k_max=k_max,
        stages=stages,
    )
