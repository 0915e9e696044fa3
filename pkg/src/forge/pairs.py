"""Dense and codense predicate expansions over trivial-acl classes.

An expansion distinguishes a subset H of a class member so that every
small extension task has a realization inside H (density) and another one
outside the base and H (codensity).  The whole module works at the
degenerate end of the geometry: the classes built here have trivial
algebraic closure, so a 1-type with a fresh realization is automatically
non-algebraic, the small closure of a set is the set with H added, and
independence from H holds for every tuple.  Each operation that would
otherwise need closure machinery states which degenerate identity it
relies on.

The builder grows a single stage from the empty structure, rotating
between generic growth, density tasks whose fresh point joins H, and
codensity tasks whose fresh point stays outside; a fourth rotation slot
for H-internal tasks approximates the flavor of expansion in which H is a
substructure rather than just an independent set.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

from .errors import AmalgamError, BudgetError, DocumentError, SortError, StructureError
from .fraisse import (
    ClassPresentation,
    ExtensionReport,
    TaskRecord,
    _realize,
    check_extension_axioms,
    extension_types,
)
from .logic import And, Exists, Formula, HAtom, Var, free_vars, realizations
from .structures import (
    Embedding,
    FinStructure,
    empty_structure,
    enumerate_embeddings,
    is_valid_embedding,
    structure_from_doc,
    structure_to_doc,
)

ElemRef = tuple[str, int]

H_MODES = ("independent", "substructure")


@dataclass(frozen=True)
class PairExpansion:
    """A class member together with its distinguished subset H.

    `h_sets` holds H per sort.  The log pairs each realized build task
    with the stream that scheduled it, enough to replay the build
    byte-for-byte from the provenance fields.
    """

    host: FinStructure
    h_sets: Mapping[str, frozenset[int]]
    presentation: ClassPresentation
    provenance: Mapping[str, object] = field(default_factory=dict)
    log: tuple[tuple[str, TaskRecord], ...] = ()

    def __post_init__(self):
        for sort in self.h_sets:
            if sort not in self.host.sig.sorts:
                raise SortError(f"unknown sort {sort!r} in H")
        norm = {}
        for sort in self.host.sig.sorts:
            ids = frozenset(self.h_sets.get(sort, ()))
            stray = ids - set(self.host.elems(sort))
            if stray:
                raise StructureError(
                    f"H leaves the universe on {sort!r}: {sorted(stray)}"
                )
            norm[sort] = ids
        if not self.presentation.contains(self.host):
            raise StructureError("host is not a member of the class")
        object.__setattr__(self, "h_sets", norm)
        object.__setattr__(self, "provenance", dict(self.provenance))

    def in_h(self, sort: str, ident: int) -> bool:
        return ident in self.h_sets[sort]

    def complement(self, sort: str) -> tuple[int, ...]:
        return tuple(
            x for x in self.host.elems(sort) if x not in self.h_sets[sort]
        )


class _Stream:
    """One rotation slot: its own realized-task set and refill filter."""

    def __init__(self, name, number, join_h, base_in_h):
        self.name = name
        self.number = number
        self.join_h = join_h
        self.base_in_h = base_in_h
        self.done: set[tuple[str, tuple]] = set()
        self.queues: list[list[Embedding]] = []
        self.cursor = 0


def build_pair_stage(
    k: ClassPresentation,
    seed: int,
    steps: int,
    k_cap: int,
    h_mode: str = "independent",
    max_rounds: int = 64,
) -> PairExpansion:
    """Grow one stage whose H ends up dense and codense at the cap.

    A task is an extension type (extended member of size at most
    k_cap + 1) plus an embedding of its base into the current structure;
    each stream realizes a task at most once, types taking turns in the
    order build_stage uses.  The dense stream and, under the substructure
    mode, the H-internal stream (bases embedded inside H) put their fresh
    point into H; the generic and codense streams leave it outside.

    The rotation spends `steps` tasks; afterwards the dense and codense
    task spaces are drained to a fixed point, so the result passes both
    axiom checks at k_cap.  Draining terminates because a met task stays
    met: a witness's atoms toward its base never change once created, H
    only grows, and its complement only grows.  The caller is expected to
    have verified strong amalgamation at this cap; realization failures
    surface as AmalgamError.
    """
    if steps <= 0:
        raise BudgetError("steps must be positive")
    if h_mode not in H_MODES:
        raise ValueError(f"h_mode must be one of {H_MODES}")
    types = extension_types(k, k_cap + 1)
    if not types:
        raise AmalgamError("the class has no extension tasks at this cap")
    key_hex = {
        t.key: hashlib.sha256(t.key).hexdigest()[:16] for t in types
    }
    streams = [
        _Stream("generic", 0, join_h=False, base_in_h=False),
        _Stream("dense", 1, join_h=True, base_in_h=False),
        _Stream("codense", 2, join_h=False, base_in_h=False),
    ]
    if h_mode == "substructure":
        streams.append(_Stream("h-internal", 3, join_h=True, base_in_h=True))

    cur = empty_structure(k.sig)
    h: dict[str, set[int]] = {sort: set() for sort in k.sig.sorts}

    def refill(st: _Stream) -> None:
        st.queues = []
        for t in types:
            fits = []
            for e in enumerate_embeddings(t.base, cur):
                if (key_hex[t.key], e.maps) in st.done:
                    continue
                if st.base_in_h and any(
                    x not in h[sort]
                    for sort in k.sig.sorts
                    for x in e.image_set(sort)
                ):
                    continue
                fits.append(e)
            st.queues.append(fits)

    def next_task(st: _Stream):
        if not st.queues:
            refill(st)
        for attempt in range(2):
            for _ in range(len(types)):
                ti = st.cursor % len(types)
                st.cursor += 1
                if st.queues[ti]:
                    return types[ti], st.queues[ti].pop(0)
            if attempt == 0:
                refill(st)
        return None

    log: list[tuple[str, TaskRecord]] = []

    def run_task(st: _Stream, typ, emb) -> None:
        nonlocal cur
        cur, rec = _realize(
            k, cur, typ, emb, seed * 4 + st.number, 1, False
        )
        st.done.add((rec.type_key, rec.embedding.maps))
        if st.join_h:
            sort, ident = rec.new_ref
            h[sort].add(ident)
        log.append((st.name, rec))

    realized = 0
    turn = 0
    starved = 0
    while realized < steps:
        st = streams[turn % len(streams)]
        turn += 1
        task = next_task(st)
        if task is None:
            starved += 1
            if starved >= len(streams):
                raise AmalgamError("no unrealized extension tasks remain")
            continue
        starved = 0
        run_task(st, *task)
        realized += 1

    def has_witness(typ, emb, in_h: bool) -> bool:
        sort_p, pnew = typ.new_ref
        image = emb.image_set(sort_p)
        for w in cur.elems(sort_p):
            if (w in h[sort_p]) != in_h or w in image:
                continue
            cand_map = {
                sort: {x: emb.apply(sort, x) for x in typ.base.elems(sort)}
                for sort in k.sig.sorts
            }
            cand_map[sort_p][pnew] = w
            if is_valid_embedding(
                Embedding.from_dict(cand_map), typ.extended, cur
            ):
                return True
        return False

    dense, codense = streams[1], streams[2]
    met = {id(dense): set(dense.done), id(codense): set(codense.done)}
    for _ in range(max_rounds):
        added = 0
        for st in (dense, codense):
            for typ in types:
                for emb in list(enumerate_embeddings(typ.base, cur)):
                    key = (key_hex[typ.key], emb.maps)
                    if key in met[id(st)]:
                        continue
                    if has_witness(typ, emb, in_h=st.join_h):
                        met[id(st)].add(key)
                        continue
                    run_task(st, typ, emb)
                    met[id(st)].add(key)
                    added += 1
        if not added:
            break
    else:
        raise BudgetError(
            f"axiom saturation still unstable after {max_rounds} rounds"
        )

    return PairExpansion(
        host=cur,
        h_sets={sort: frozenset(ids) for sort, ids in h.items()},
        presentation=k,
        provenance={
            "seed": seed,
            "steps": steps,
            "k_cap": k_cap,
            "h_mode": h_mode,
            "stage_index": 1,
        },
        log=tuple(log),
    )


def check_density(p: PairExpansion, k: int) -> ExtensionReport:
    """Every extension task over a base of size <= k has a witness in H.

    Under trivial acl every such task is a non-algebraic 1-type over its
    base, so witness-in-H is exactly the density half of the pair axioms.
    """
    return check_extension_axioms(p.host, p.presentation, k, pool=p.h_sets)


def check_codensity(p: PairExpansion, k: int) -> ExtensionReport:
    """Every extension task has a witness outside the base and H.

    The checker never accepts base elements as witnesses, so restricting
    the pool to the complement of H tests membership in the complement of
    base union H, which is the complement of the small closure here.
    """
    pool = {sort: p.complement(sort) for sort in p.host.sig.sorts}
    return check_extension_axioms(p.host, p.presentation, k, pool=pool)


def _check_refs(p: PairExpansion, refs: Iterable[ElemRef]) -> frozenset[ElemRef]:
    out = set()
    for sort, ident in refs:
        if sort not in p.host.sig.sorts:
            raise SortError(f"unknown sort {sort!r}")
        if ident not in p.host.elems(sort):
            raise StructureError(f"element {sort}:{ident} not in universe")
        out.add((sort, int(ident)))
    return frozenset(out)


def small_closure(
    p: PairExpansion, b: Iterable[ElemRef]
) -> frozenset[ElemRef]:
    """The closure of b with H added: trivial acl collapses acl(b + H).

    Extensive, monotone and idempotent by construction.
    """
    refs = set(_check_refs(p, b))
    for sort, ids in p.h_sets.items():
        refs.update((sort, x) for x in ids)
    return frozenset(refs)


def h_independent(p: PairExpansion, a: Iterable[ElemRef]) -> bool:
    """Whether a is independent from H over its own H-part.

    With trivial acl this degenerates to (a intersect H) being a subset
    of itself, so every well-formed tuple passes; the value of the call
    is the ref validation.  Labeled trees over such an expansion are
    likewise always H-independent tuples, so no tree-side hook exists.
    """
    _check_refs(p, a)
    return True


@dataclass(frozen=True)
class HAgreementReport:
    """Two separately reported checks on a formula pair.

    `h_restriction`: the formulas agree on H.  `small_difference`: their
    symmetric difference stays inside the small closure of the supplied
    parameters.  Witnesses are offending element ids of the checked sort.
    """

    h_restriction: bool
    small_difference: bool
    h_witness: Optional[int] = None
    difference_witness: Optional[int] = None

    @property
    def passed(self) -> bool:
        return self.h_restriction and self.small_difference


def check_h_agreement(
    p: PairExpansion,
    phi: Formula,
    psi: Formula,
    params: Mapping[str, int],
    x: Union[Var, str] = "x",
) -> HAgreementReport:
    """Compare an H-aware formula with a candidate H-free translation."""
    def resolve(f: Formula) -> Optional[Var]:
        name = x if isinstance(x, str) else x.name
        got = [v for v in free_vars(f) if v.name == name]
        return got[0] if got else None

    xp, xq = resolve(phi), resolve(psi)
    if xp is None and xq is None:
        raise SortError("the designated variable is free in neither formula")
    if xp is not None and xq is not None and xp.sort != xq.sort:
        raise SortError(
            f"designated variable sorts differ: {xp.sort} vs {xq.sort}"
        )
    xv = xp if xp is not None else xq

    r_phi = set(realizations(p.host, phi, xv, params, h_sets=p.h_sets))
    r_psi = set(realizations(p.host, psi, xv, params, h_sets=p.h_sets))
    h_here = p.h_sets.get(xv.sort, frozenset())
    on_h = (r_phi ^ r_psi) & h_here

    param_ids = set()
    for v in free_vars(phi) + free_vars(psi):
        if v.name in params and v.sort == xv.sort:
            param_ids.add(params[v.name])
    off_small = (r_phi ^ r_psi) - h_here - param_ids

    return HAgreementReport(
        h_restriction=not on_h,
        small_difference=not off_small,
        h_witness=min(on_h) if on_h else None,
        difference_witness=min(off_small) if off_small else None,
    )


def build_mu(
    theta: Formula,
    phi: Formula,
    x: Union[Var, str] = "x",
    z: Union[Var, str] = "z",
) -> Formula:
    """H(z) joined with an existential x shared by both formulas.

    The result is exactly H(z) & Exists x (theta & phi), with free
    variables z plus the non-x frees of both inputs.  A theta with no
    occurrence of x is accepted; the existential is then vacuous on the
    theta side.
    """
    def pick(name_or_var, formulas):
        name = (
            name_or_var if isinstance(name_or_var, str) else name_or_var.name
        )
        found = [
            v for f in formulas for v in free_vars(f) if v.name == name
        ]
        sorts = {v.sort for v in found}
        if len(sorts) > 1:
            raise SortError(
                f"{name!r} occurs with conflicting sorts {sorted(sorts)}"
            )
        if found:
            return found[0]
        if isinstance(name_or_var, Var) and name_or_var.sort is not None:
            return name_or_var
        return None

    xv = pick(x, (theta, phi))
    if xv is None:
        raise SortError("the shared variable is free in neither formula")
    zv = pick(z, (theta,)) or pick(z, (phi,))
    if zv is None:
        raise SortError("the H variable needs a sort; none could be found")
    if zv.name == xv.name:
        raise SortError("the shared and H variables must differ")
    return And(HAtom(zv), Exists(xv, And(theta, phi)))


# ---------------------------------------------------------------------------
# External JSON documents.


def pair_to_doc(p: PairExpansion) -> dict:
    return {
        "host": structure_to_doc(p.host),
        "H": {sort: sorted(ids) for sort, ids in p.h_sets.items()},
        "provenance": dict(p.provenance),
    }


def pair_from_doc(doc: Mapping, k: ClassPresentation) -> PairExpansion:
    """Load a pair file; the class comes from context, not the file."""
    try:
        host = structure_from_doc(doc["host"])
        h_sets = {
            sort: frozenset(int(x) for x in ids)
            for sort, ids in doc.get("H", {}).items()
        }
        provenance = dict(doc.get("provenance", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise DocumentError(f"malformed pair document: {exc}") from exc
    return PairExpansion(
        host=host, h_sets=h_sets, presentation=k, provenance=provenance
    )
