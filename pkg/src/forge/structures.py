"""Finite multi-sorted relational structures and induced embeddings.

Everything here is a plain immutable value: structures can be dict keys,
compared for equality, and shared freely across threads.  Element ids are
small non-negative integers kept sorted per sort; constructors in this
package hand out dense ids 0..n-1, while derived structures (induced
substructures) may keep the original ids of their parent.
"""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .errors import (
    DocumentError,
    EmbeddingError,
    QuotientError,
    SignatureError,
    StructureError,
)

VALID_FLAGS = frozenset({"symmetric", "reflexive", "irreflexive"})


@dataclass(frozen=True)
class RelationDecl:
    """A relation symbol: name, sort profile, optional validation flags."""

    name: str
    profile: tuple[str, ...]
    flags: frozenset[str] = frozenset()

    @property
    def arity(self) -> int:
        return len(self.profile)


@dataclass(frozen=True)
class Signature:
    sorts: tuple[str, ...]
    relations: tuple[RelationDecl, ...]

    def __post_init__(self):
        if not self.sorts:
            raise SignatureError("signature needs at least one sort")
        if len(set(self.sorts)) != len(self.sorts):
            raise SignatureError("duplicate sort names")
        for s in self.sorts:
            if not s or not isinstance(s, str):
                raise SignatureError("sort names must be nonempty strings")
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise SignatureError("duplicate relation names")
        for r in self.relations:
            if not r.name:
                raise SignatureError("relation names must be nonempty")
            if r.arity < 1:
                raise SignatureError(f"relation {r.name} needs arity >= 1")
            for s in r.profile:
                if s not in self.sorts:
                    raise SignatureError(
                        f"relation {r.name} uses undeclared sort {s!r}"
                    )
            bad = r.flags - VALID_FLAGS
            if bad:
                raise SignatureError(f"unknown flags {sorted(bad)} on {r.name}")
            if r.flags and (r.arity != 2 or r.profile[0] != r.profile[1]):
                raise SignatureError(
                    f"flags only apply to binary homogeneous relations ({r.name})"
                )
        object.__setattr__(
            self, "_sort_pos", {s: i for i, s in enumerate(self.sorts)}
        )
        object.__setattr__(
            self, "_rel_pos", {r.name: i for i, r in enumerate(self.relations)}
        )

    def relation(self, name: str) -> RelationDecl:
        i = self._rel_pos.get(name)
        if i is None:
            raise SignatureError(f"no relation named {name!r}")
        return self.relations[i]

    def has_relation(self, name: str) -> bool:
        return name in self._rel_pos

    def rel_index(self, name: str) -> int:
        i = self._rel_pos.get(name)
        if i is None:
            raise SignatureError(f"no relation named {name!r}")
        return i

    def sort_index(self, sort: str) -> int:
        i = self._sort_pos.get(sort)
        if i is None:
            raise SignatureError(f"no sort named {sort!r}")
        return i

    def drop_relation(self, name: str) -> "Signature":
        self.relation(name)
        return Signature(
            self.sorts, tuple(r for r in self.relations if r.name != name)
        )

    def extend(self, *decls: RelationDecl) -> "Signature":
        return Signature(self.sorts, self.relations + tuple(decls))


def make_signature(
    sorts: Sequence[str],
    relations: Sequence[tuple] = (),
) -> Signature:
    """Convenience builder: relations as (name, profile[, flags]) tuples."""
    decls = []
    for item in relations:
        if len(item) == 2:
            name, profile = item
            flags: Iterable[str] = ()
        else:
            name, profile, flags = item
        decls.append(RelationDecl(name, tuple(profile), frozenset(flags)))
    return Signature(tuple(sorts), tuple(decls))


@dataclass(frozen=True)
class FinStructure:
    """A finite structure: per-sort universes plus one table per relation.

    `universe[i]` lists the elements of `sig.sorts[i]` in ascending order;
    `tables[j]` holds the tuples of `sig.relations[j]`.
    """

    sig: Signature
    universe: tuple[tuple[int, ...], ...]
    tables: tuple[frozenset[tuple[int, ...]], ...]

    def __post_init__(self):
        if len(self.universe) != len(self.sig.sorts):
            raise StructureError("universe must align with signature sorts")
        if len(self.tables) != len(self.sig.relations):
            raise StructureError("tables must align with signature relations")
        for ids in self.universe:
            if list(ids) != sorted(set(ids)):
                raise StructureError("universe ids must be sorted and distinct")
            if any((not isinstance(x, int)) or x < 0 for x in ids):
                raise StructureError("element ids must be non-negative ints")
        sets = [frozenset(ids) for ids in self.universe]
        for decl, table in zip(self.sig.relations, self.tables):
            for t in table:
                if len(t) != decl.arity:
                    raise StructureError(
                        f"tuple {t} has wrong arity for {decl.name}"
                    )
                for x, s in zip(t, decl.profile):
                    if x not in sets[self.sig.sort_index(s)]:
                        raise StructureError(
                            f"tuple {t} of {decl.name} leaves the universe"
                        )
            if "symmetric" in decl.flags:
                for (a, b) in table:
                    if (b, a) not in table:
                        raise StructureError(
                            f"{decl.name} flagged symmetric but ({a},{b}) "
                            f"lacks its transpose"
                        )
            if "reflexive" in decl.flags:
                for a in self.universe[self.sig.sort_index(decl.profile[0])]:
                    if (a, a) not in table:
                        raise StructureError(
                            f"{decl.name} flagged reflexive but misses ({a},{a})"
                        )
            if "irreflexive" in decl.flags:
                for (a, b) in table:
                    if a == b:
                        raise StructureError(
                            f"{decl.name} flagged irreflexive but holds ({a},{a})"
                        )

    @classmethod
    def build(
        cls,
        sig: Signature,
        universe: Mapping[str, Iterable[int]],
        tables: Mapping[str, Iterable[Sequence[int]]] = (),
    ) -> "FinStructure":
        """Constructor that completes symmetric and reflexive flags.

        Tuples implied by a relation's flags (transposes, loops) are added
        rather than demanded of the caller; irreflexive violations still
        raise.
        """
        for s in universe:
            sig.sort_index(s)
        tables = dict(tables or {})
        for name in tables:
            sig.relation(name)
        uni = tuple(
            tuple(sorted(set(universe.get(s, ())))) for s in sig.sorts
        )
        tabs = []
        for r in sig.relations:
            rows = set(tuple(t) for t in tables.get(r.name, ()))
            if "symmetric" in r.flags:
                rows |= {(b, a) for (a, b) in rows}
            if "reflexive" in r.flags:
                rows |= {
                    (a, a) for a in uni[sig.sort_index(r.profile[0])]
                }
            tabs.append(frozenset(rows))
        return cls(sig, uni, tuple(tabs))

    def elems(self, sort: str) -> tuple[int, ...]:
        return self.universe[self.sig.sort_index(sort)]

    def table(self, name: str) -> frozenset[tuple[int, ...]]:
        return self.tables[self.sig.rel_index(name)]

    def has(self, name: str, *ids: int) -> bool:
        return tuple(ids) in self.table(name)

    @property
    def total_size(self) -> int:
        return sum(len(ids) for ids in self.universe)

    def size_vector(self) -> tuple[int, ...]:
        return tuple(len(ids) for ids in self.universe)

    def all_elements(self) -> Iterator[tuple[int, int]]:
        """Yield (sort index, id) over the whole universe, sorts in order."""
        for si, ids in enumerate(self.universe):
            for x in ids:
                yield (si, x)

    def universe_dict(self) -> dict[str, tuple[int, ...]]:
        return {s: ids for s, ids in zip(self.sig.sorts, self.universe)}


def empty_structure(sig: Signature) -> FinStructure:
    return FinStructure.build(sig, {}, {})


# ---------------------------------------------------------------------------
# Embeddings.


@dataclass(frozen=True)
class Embedding:
    """A per-sort injective map between structures, stored as sorted pairs."""

    maps: tuple[tuple[str, tuple[tuple[int, int], ...]], ...]

    @classmethod
    def from_dict(cls, d: Mapping[str, Mapping[int, int]]) -> "Embedding":
        return cls(
            tuple(
                (s, tuple(sorted(d[s].items())))
                for s in sorted(d)
            )
        )

    def as_dict(self) -> dict[str, dict[int, int]]:
        return {s: dict(pairs) for s, pairs in self.maps}

    def apply(self, sort: str, x: int) -> int:
        for s, pairs in self.maps:
            if s == sort:
                for a, b in pairs:
                    if a == x:
                        return b
                break
        raise EmbeddingError(f"element ({sort},{x}) outside embedding domain")

    def image(self, sort: str, ids: Sequence[int]) -> tuple[int, ...]:
        return tuple(self.apply(sort, x) for x in ids)

    def domain(self, sort: str) -> tuple[int, ...]:
        for s, pairs in self.maps:
            if s == sort:
                return tuple(a for a, _ in pairs)
        return ()

    def image_set(self, sort: str) -> frozenset[int]:
        for s, pairs in self.maps:
            if s == sort:
                return frozenset(b for _, b in pairs)
        return frozenset()


def identity_embedding(s: FinStructure) -> Embedding:
    return Embedding.from_dict(
        {sort: {x: x for x in s.elems(sort)} for sort in s.sig.sorts}
    )


def compose_embeddings(first: Embedding, second: Embedding) -> Embedding:
    """Return the map x -> second(first(x))."""
    out: dict[str, dict[int, int]] = {}
    for sort, pairs in first.maps:
        out[sort] = {a: second.apply(sort, b) for a, b in pairs}
    return Embedding.from_dict(out)


def check_embedding(e: Embedding, a: FinStructure, b: FinStructure) -> None:
    """Raise unless e is an induced embedding of a into b.

    Induced means relations are both preserved and reflected: a tuple holds
    in `a` exactly when its image holds in `b`.
    """
    if a.sig != b.sig:
        raise EmbeddingError("embedding requires a common signature")
    d = e.as_dict()
    for sort in a.sig.sorts:
        dom = d.get(sort, {})
        if set(dom) != set(a.elems(sort)):
            raise EmbeddingError(f"domain on sort {sort!r} must be the universe")
        targets = list(dom.values())
        if len(set(targets)) != len(targets):
            raise EmbeddingError(f"not injective on sort {sort!r}")
        bset = set(b.elems(sort))
        for t in targets:
            if t not in bset:
                raise EmbeddingError(f"target {t} missing from sort {sort!r}")
    for decl, table_a, table_b in zip(a.sig.relations, a.tables, b.tables):
        sidx = [a.sig.sort_index(s) for s in decl.profile]
        for t in itertools.product(*(a.universe[i] for i in sidx)):
            img = tuple(
                e.apply(decl.profile[i], t[i]) for i in range(decl.arity)
            )
            if (t in table_a) != (img in table_b):
                raise EmbeddingError(
                    f"relation {decl.name} not matched at {t} -> {img}"
                )


def is_valid_embedding(e: Embedding, a: FinStructure, b: FinStructure) -> bool:
    try:
        check_embedding(e, a, b)
        return True
    except EmbeddingError:
        return False


def _incidence(s: FinStructure) -> dict[tuple[int, int], list[tuple[int, tuple]]]:
    """Index tuples by the (sort index, id) elements they mention."""
    out: dict[tuple[int, int], list[tuple[int, tuple]]] = {}
    for ri, decl in enumerate(s.sig.relations):
        sidx = [s.sig.sort_index(x) for x in decl.profile]
        for t in s.tables[ri]:
            for pos, x in enumerate(t):
                key = (sidx[pos], x)
                out.setdefault(key, []).append((ri, t))
    return out


def enumerate_embeddings(
    a: FinStructure,
    b: FinStructure,
    limit: Optional[int] = None,
) -> list[Embedding]:
    """All induced embeddings of a into b, in a fixed deterministic order.

    Backtracks over a's elements in (sort, id) order, trying targets in
    ascending id order, so the result order is reproducible.
    """
    if a.sig != b.sig:
        raise EmbeddingError("embedding enumeration requires equal signatures")
    sig = a.sig
    elems = [(si, x) for si, ids in enumerate(a.universe) for x in ids]
    if not elems:
        return [Embedding.from_dict({s: {} for s in sig.sorts})]

    a_inc = _incidence(a)
    profiles = [
        tuple(sig.sort_index(s) for s in decl.profile)
        for decl in sig.relations
    ]

    assigned: dict[tuple[int, int], int] = {}
    used: list[set[int]] = [set() for _ in sig.sorts]
    results: list[Embedding] = []

    def consistent(key: tuple[int, int], target: int) -> bool:
        si, _ = key
        assigned[key] = target
        try:
            for ri, t in a_inc.get(key, ()):  # preservation
                prof = profiles[ri]
                img = []
                for pos, x in enumerate(t):
                    v = assigned.get((prof[pos], x))
                    if v is None:
                        break
                    img.append(v)
                else:
                    if tuple(img) not in b.tables[ri]:
                        return False
            # reflection: a b-row inside the image can only use assigned
            # targets, so enumerate candidate rows over those instead of
            # scanning everything incident to the target in b
            by_sort: list[dict[int, int]] = [{} for _ in sig.sorts]
            for (ksi, kx), v in assigned.items():
                by_sort[ksi][v] = kx
            for ri, prof in enumerate(profiles):
                pools = [by_sort[sj] for sj in prof]
                if any(not p for p in pools):
                    continue
                for img_t in itertools.product(*pools):
                    if img_t in b.tables[ri]:
                        pre = tuple(
                            pools[pos][y] for pos, y in enumerate(img_t)
                        )
                        if pre not in a.tables[ri]:
                            return False
            return True
        finally:
            del assigned[key]

    def rec(i: int) -> bool:
        if i == len(elems):
            m: dict[str, dict[int, int]] = {s: {} for s in sig.sorts}
            for (si, x), v in assigned.items():
                m[sig.sorts[si]][x] = v
            results.append(Embedding.from_dict(m))
            return limit is not None and len(results) >= limit
        key = elems[i]
        si = key[0]
        for target in b.universe[si]:
            if target in used[si]:
                continue
            if consistent(key, target):
                assigned[key] = target
                used[si].add(target)
                stop = rec(i + 1)
                used[si].remove(target)
                del assigned[key]
                if stop:
                    return True
        return False

    rec(0)
    return results


def is_isomorphic(a: FinStructure, b: FinStructure) -> bool:
    if a.sig != b.sig or a.size_vector() != b.size_vector():
        return False
    return bool(enumerate_embeddings(a, b, limit=1))


# ---------------------------------------------------------------------------
# Induced substructures.


def induced_substructure(
    s: FinStructure, subset: Mapping[str, Iterable[int]]
) -> tuple[FinStructure, Embedding]:
    """Restrict s to the given element subset; the embedding is inclusion."""
    keep: list[frozenset[int]] = []
    for si, sort in enumerate(s.sig.sorts):
        ids = frozenset(subset.get(sort, ()))
        extra = ids - frozenset(s.universe[si])
        if extra:
            raise StructureError(
                f"subset ids {sorted(extra)} missing from sort {sort!r}"
            )
        keep.append(ids)
    uni = tuple(
        tuple(x for x in ids if x in keep[si])
        for si, ids in enumerate(s.universe)
    )
    tabs = []
    for decl, table in zip(s.sig.relations, s.tables):
        sidx = [s.sig.sort_index(x) for x in decl.profile]
        tabs.append(
            frozenset(
                t for t in table
                if all(t[i] in keep[sidx[i]] for i in range(decl.arity))
            )
        )
    sub = FinStructure(s.sig, uni, tuple(tabs))
    incl = Embedding.from_dict(
        {sort: {x: x for x in sub.elems(sort)} for sort in s.sig.sorts}
    )
    return sub, incl


# ---------------------------------------------------------------------------
# Canonical forms.


def _refine(
    s: FinStructure,
    cells: list[list[tuple[int, int]]],
    inc: dict[tuple[int, int], list[tuple[int, tuple]]],
    profiles: list[tuple[int, ...]],
) -> list[list[tuple[int, int]]]:
    """Stable colour refinement for arbitrary-arity relations.

    Each element is keyed by the multiset of (relation, position, colour
    pattern of the whole tuple) facts it participates in; cells split until
    no key separates two members of one cell.
    """
    while True:
        colour = {}
        for ci, cell in enumerate(cells):
            for e in cell:
                colour[e] = ci
        keys = {}
        for cell in cells:
            for e in cell:
                sigs = []
                for ri, t in inc.get(e, ()):
                    prof = profiles[ri]
                    pat = tuple(colour[(prof[i], x)] for i, x in enumerate(t))
                    for pos, x in enumerate(t):
                        if (prof[pos], x) == e:
                            sigs.append((ri, pos, pat))
                keys[e] = tuple(sorted(sigs))
        new_cells: list[list[tuple[int, int]]] = []
        split = False
        for cell in cells:
            if len(cell) == 1:
                new_cells.append(cell)
                continue
            groups: dict[tuple, list[tuple[int, int]]] = {}
            for e in cell:
                groups.setdefault(keys[e], []).append(e)
            if len(groups) == 1:
                new_cells.append(cell)
            else:
                split = True
                for k in sorted(groups):
                    new_cells.append(sorted(groups[k]))
        if not split:
            return new_cells
        cells = new_cells


def _encode_with_labels(
    s: FinStructure, label: dict[tuple[int, int], int]
) -> tuple:
    body = []
    for ri, decl in enumerate(s.sig.relations):
        prof = tuple(s.sig.sort_index(x) for x in decl.profile)
        body.append(
            tuple(
                sorted(
                    tuple(label[(prof[i], x)] for i, x in enumerate(t))
                    for t in s.tables[ri]
                )
            )
        )
    return (s.size_vector(), tuple(body))


@functools.lru_cache(maxsize=65536)
def canonical_form(s: FinStructure) -> bytes:
    """Canonical code of s: equal codes exactly for isomorphic structures.

    Ordered-partition refinement drives an individualisation search; every
    discrete partition reached yields one candidate labelling, and the
    lexicographically least encoding wins.  Intended for desk-scale inputs
    (tens of elements), where the search stays tiny.
    """
    inc = _incidence(s)
    profiles = [
        tuple(s.sig.sort_index(x) for x in decl.profile)
        for decl in s.sig.relations
    ]
    init = [
        sorted((si, x) for x in ids)
        for si, ids in enumerate(s.universe)
        if ids
    ]
    best: list[Optional[tuple]] = [None]

    def search(cells: list[list[tuple[int, int]]]) -> None:
        cells = _refine(s, cells, inc, profiles)
        target = None
        for ci, cell in enumerate(cells):
            if len(cell) > 1:
                target = ci
                break
        if target is None:
            label = {}
            counters = [0] * len(s.universe)
            for cell in cells:
                (si, x) = cell[0]
                label[(si, x)] = counters[si]
                counters[si] += 1
            enc = _encode_with_labels(s, label)
            if best[0] is None or enc < best[0]:
                best[0] = enc
            return
        cell = cells[target]
        for e in cell:
            rest = [x for x in cell if x != e]
            branched = cells[:target] + [[e], rest] + cells[target + 1:]
            search(branched)

    if not init:
        best[0] = _encode_with_labels(s, {})
    else:
        search(init)
    payload = {
        "sorts": list(s.sig.sorts),
        "relations": [
            [r.name, list(r.profile), sorted(r.flags)]
            for r in s.sig.relations
        ],
        "code": repr(best[0]),
    }
    return json.dumps(payload, sort_keys=True).encode("ascii")


@functools.lru_cache(maxsize=65536)
def canonical_form_with_marks(
    s: FinStructure, marks: tuple[tuple[str, int], ...]
) -> bytes:
    """Canonical code of s with the marked elements distinguished.

    Equal codes exactly when an isomorphism maps marks to marks in order;
    used to deduplicate a structure with a chosen point up to automorphism.
    """
    mark_refs = []
    for sort, x in marks:
        ref = (s.sig.sort_index(sort), x)
        if x not in s.elems(sort):
            raise StructureError(f"marked element ({sort},{x}) missing")
        if ref in mark_refs:
            raise StructureError("marks must be distinct")
        mark_refs.append(ref)
    inc = _incidence(s)
    profiles = [
        tuple(s.sig.sort_index(x) for x in decl.profile)
        for decl in s.sig.relations
    ]
    init: list[list[tuple[int, int]]] = [[ref] for ref in mark_refs]
    for si, ids in enumerate(s.universe):
        rest = sorted((si, x) for x in ids if (si, x) not in mark_refs)
        if rest:
            init.append(rest)
    best: list[Optional[tuple]] = [None]

    def search(cells: list[list[tuple[int, int]]]) -> None:
        cells = _refine(s, cells, inc, profiles)
        target = None
        for ci, cell in enumerate(cells):
            if len(cell) > 1:
                target = ci
                break
        if target is None:
            label = {}
            counters = [0] * len(s.universe)
            for cell in cells:
                (si, x) = cell[0]
                label[(si, x)] = counters[si]
                counters[si] += 1
            enc = (
                tuple(label[ref] for ref in mark_refs),
                _encode_with_labels(s, label),
            )
            if best[0] is None or enc < best[0]:
                best[0] = enc
            return
        cell = cells[target]
        for e in cell:
            rest = [x for x in cell if x != e]
            branched = cells[:target] + [[e], rest] + cells[target + 1:]
            search(branched)

    if not init:
        best[0] = ((), _encode_with_labels(s, {}))
    else:
        search(init)
    payload = {
        "sorts": list(s.sig.sorts),
        "relations": [
            [r.name, list(r.profile), sorted(r.flags)]
            for r in s.sig.relations
        ],
        "marks": [sort for sort, _ in marks],
        "code": repr(best[0]),
    }
    return json.dumps(payload, sort_keys=True).encode("ascii")


# ---------------------------------------------------------------------------
# Free amalgams.


def free_amalgam(
    a: FinStructure,
    b: FinStructure,
    c: FinStructure,
    e: Embedding,
    f: Embedding,
) -> tuple[FinStructure, Embedding, Embedding]:
    """Glue b and c along a with no relations across the two halves.

    Returns (d, g, h) with g: b -> d and h: c -> d satisfying g.e = h.f and
    image(g) meeting image(h) exactly in the image of a.
    """
    check_embedding(e, a, b)
    check_embedding(f, a, c)
    sig = a.sig
    g_map: dict[str, dict[int, int]] = {}
    h_map: dict[str, dict[int, int]] = {}
    uni: dict[str, list[int]] = {}
    for sort in sig.sorts:
        nxt = 0
        gm: dict[int, int] = {}
        for x in b.elems(sort):
            gm[x] = nxt
            nxt += 1
        fa = {f.apply(sort, z): e.apply(sort, z) for z in a.elems(sort)}
        hm: dict[int, int] = {}
        for y in c.elems(sort):
            if y in fa:
                hm[y] = gm[fa[y]]
            else:
                hm[y] = nxt
                nxt += 1
        g_map[sort] = gm
        h_map[sort] = hm
        uni[sort] = list(range(nxt))
    tables: dict[str, set[tuple[int, ...]]] = {
        r.name: set() for r in sig.relations
    }
    for src, m in ((b, g_map), (c, h_map)):
        for decl, table in zip(sig.relations, src.tables):
            for t in table:
                tables[decl.name].add(
                    tuple(m[decl.profile[i]][t[i]] for i in range(decl.arity))
                )
    d = FinStructure.build(sig, uni, {k: v for k, v in tables.items()})
    g = Embedding.from_dict(g_map)
    h = Embedding.from_dict(h_map)
    return d, g, h


# ---------------------------------------------------------------------------
# Quotients.


def quotient_by_equivalence(
    s: FinStructure, e_name: str
) -> tuple[FinStructure, dict[str, dict[int, int]]]:
    """Collapse the classes of relation e_name; drops e_name from the result.

    Every other relation must be invariant under replacing any single
    argument by an equivalent one; the error witness names the tuple pair
    that breaks invariance.
    """
    decl = s.sig.relation(e_name)
    if decl.arity != 2 or decl.profile[0] != decl.profile[1]:
        raise QuotientError(f"{e_name} must be binary on a single sort")
    sort = decl.profile[0]
    ids = s.elems(sort)
    table = s.table(e_name)
    for x in ids:
        if (x, x) not in table:
            raise QuotientError(f"{e_name} not reflexive at {x}")
    for (x, y) in table:
        if (y, x) not in table:
            raise QuotientError(f"{e_name} not symmetric at ({x},{y})")
    related = {x: {y for (a, y) in table if a == x} for x in ids}
    for x in ids:
        for y in related[x]:
            for z in related[y]:
                if z not in related[x]:
                    raise QuotientError(
                        f"{e_name} not transitive at ({x},{y},{z})"
                    )
    seen: set[int] = set()
    classes: list[list[int]] = []
    for x in ids:
        if x in seen:
            continue
        cls = sorted(related[x])
        seen.update(cls)
        classes.append(cls)
    classes.sort(key=lambda c: c[0])
    cls_of = {x: i for i, cls in enumerate(classes) for x in cls}

    sidx = s.sig.sort_index(sort)
    for rdecl, rtable in zip(s.sig.relations, s.tables):
        if rdecl.name == e_name:
            continue
        prof = [s.sig.sort_index(x) for x in rdecl.profile]
        for t in rtable:
            for pos in range(rdecl.arity):
                if prof[pos] != sidx:
                    continue
                for y in related[t[pos]]:
                    if y == t[pos]:
                        continue
                    t2 = t[:pos] + (y,) + t[pos + 1:]
                    if t2 not in rtable:
                        raise QuotientError(
                            f"{rdecl.name} not invariant under {e_name}: "
                            f"{t} holds but {t2} does not",
                            witness=(rdecl.name, t, t2),
                        )

    new_sig = s.sig.drop_relation(e_name)
    proj: dict[str, dict[int, int]] = {}
    uni: dict[str, list[int]] = {}
    for so in s.sig.sorts:
        if so == sort:
            proj[so] = dict(cls_of)
            uni[so] = list(range(len(classes)))
        else:
            proj[so] = {x: x for x in s.elems(so)}
            uni[so] = list(s.elems(so))
    tabs: dict[str, set[tuple[int, ...]]] = {}
    for rdecl, rtable in zip(s.sig.relations, s.tables):
        if rdecl.name == e_name:
            continue
        out = set()
        for t in rtable:
            out.add(
                tuple(
                    proj[rdecl.profile[i]][t[i]] for i in range(rdecl.arity)
                )
            )
        tabs[rdecl.name] = out
    q = FinStructure.build(new_sig, uni, tabs)
    return q, proj


# ---------------------------------------------------------------------------
# External JSON documents.


def signature_to_doc(sig: Signature) -> dict:
    return {
        "sorts": list(sig.sorts),
        "relations": [
            {
                "name": r.name,
                "profile": list(r.profile),
                "flags": sorted(r.flags),
            }
            for r in sig.relations
        ],
    }


def structure_to_doc(s: FinStructure) -> dict:
    return {
        "signature": signature_to_doc(s.sig),
        "universe": {
            sort: list(ids) for sort, ids in zip(s.sig.sorts, s.universe)
        },
        "tables": {
            r.name: sorted(list(t) for t in table)
            for r, table in zip(s.sig.relations, s.tables)
        },
    }


def signature_from_doc(doc: Mapping) -> Signature:
    try:
        sorts = tuple(doc["sorts"])
        decls = tuple(
            RelationDecl(
                r["name"], tuple(r["profile"]), frozenset(r.get("flags", ()))
            )
            for r in doc["relations"]
        )
    except (KeyError, TypeError) as exc:
        raise DocumentError(f"malformed signature document: {exc}") from exc
    try:
        return Signature(sorts, decls)
    except SignatureError as exc:
        raise DocumentError(str(exc)) from exc


def structure_from_doc(doc: Mapping) -> FinStructure:
    try:
        sig = signature_from_doc(doc["signature"])
        universe = {s: list(ids) for s, ids in doc.get("universe", {}).items()}
        tables = {
            name: [tuple(t) for t in rows]
            for name, rows in doc.get("tables", {}).items()
        }
    except (KeyError, TypeError, AttributeError) as exc:
        raise DocumentError(f"malformed structure document: {exc}") from exc
    try:
        return FinStructure.build(sig, universe, tables)
    except (StructureError, SignatureError) as exc:
        raise DocumentError(str(exc)) from exc


def dumps_canonical(obj) -> str:
    """Key-sorted, whitespace-free JSON; equal values give equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
