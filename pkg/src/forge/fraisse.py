"""Amalgamation classes of finite structures and generic approximation chains.

A class is presented by a signature plus finitely many forbidden induced
substructures: membership means no forbidden pattern embeds.  Helper
compilers turn common universal axioms (equivalence relation laws,
symmetry, irreflexivity, invariance under an equivalence) into such
forbidden lists by enumerating every completion of the violating pattern.

On top of membership the module provides age enumeration, (strong)
amalgamation checking with minimal failure witnesses, and seeded chains
M0 -> M1 -> ... that realize one-point extension tasks fairly, giving
finite approximations of the generic limit.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import random
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .errors import (
    AmalgamError,
    BudgetError,
    DocumentError,
    SignatureError,
    StructureError,
)
from .structures import (
    Embedding,
    FinStructure,
    RelationDecl,
    Signature,
    canonical_form,
    canonical_form_with_marks,
    compose_embeddings,
    empty_structure,
    enumerate_embeddings,
    free_amalgam,
    induced_substructure,
    is_valid_embedding,
    make_signature,
    signature_from_doc,
    signature_to_doc,
    structure_from_doc,
    structure_to_doc,
)

Atom = tuple[str, tuple[int, ...]]


# ---------------------------------------------------------------------------
# Atom slots.  An "optional atom" is one representative tuple per degree of
# freedom left by the relation flags: symmetric pairs appear once (min order)
# and flag-determined loops are omitted entirely.


def optional_atoms(
    sig: Signature, universe: Mapping[str, Sequence[int]]
) -> list[Atom]:
    out: list[Atom] = []
    for decl in sig.relations:
        pools = [tuple(universe.get(s, ())) for s in decl.profile]
        if "symmetric" in decl.flags:
            ids = pools[0]
            for i, a in enumerate(ids):
                for b in ids[i:]:
                    if a == b and decl.flags & {"reflexive", "irreflexive"}:
                        continue
                    out.append((decl.name, (a, b)))
            continue
        for t in itertools.product(*pools):
            if (
                len(t) == 2
                and t[0] == t[1]
                and decl.flags & {"reflexive", "irreflexive"}
            ):
                continue
            out.append((decl.name, t))
    return out


def _normalize_atom(sig: Signature, atom: Atom) -> Atom:
    name, t = atom
    decl = sig.relation(name)
    if "symmetric" in decl.flags and len(t) == 2 and t[0] > t[1]:
        return (name, (t[1], t[0]))
    return atom


def _build_with_atoms(
    sig: Signature,
    universe: Mapping[str, Sequence[int]],
    atoms: Iterable[Atom],
) -> FinStructure:
    rows: dict[str, list[tuple[int, ...]]] = {}
    for name, t in atoms:
        rows.setdefault(name, []).append(t)
    return FinStructure.build(sig, universe, rows)


def pattern_completions(
    sig: Signature,
    universe: Mapping[str, Sequence[int]],
    atoms_in: Sequence[Atom],
    atoms_out: Sequence[Atom],
) -> Iterator[FinStructure]:
    """All structures on `universe` extending atoms_in and avoiding atoms_out.

    Yields nothing when the pattern is contradictory (an atom both required
    and excluded, or excluded though forced by a flag).
    """
    fixed_in = {_normalize_atom(sig, a) for a in atoms_in}
    fixed_out = {_normalize_atom(sig, a) for a in atoms_out}
    if fixed_in & fixed_out:
        return
    for name, t in fixed_in:
        decl = sig.relation(name)
        if len(t) == 2 and t[0] == t[1] and "irreflexive" in decl.flags:
            return
    for name, t in fixed_out:
        decl = sig.relation(name)
        if len(t) == 2 and t[0] == t[1] and "reflexive" in decl.flags:
            return
    free = [
        a
        for a in optional_atoms(sig, universe)
        if a not in fixed_in and a not in fixed_out
    ]
    for r in range(len(free) + 1):
        for combo in itertools.combinations(free, r):
            yield _build_with_atoms(sig, universe, list(fixed_in) + list(combo))


def pattern_completions_modulo_equivalence(
    sig: Signature,
    universe: Mapping[str, Sequence[int]],
    atoms_in: Sequence[Atom],
    atoms_out: Sequence[Atom],
    e_name: str,
) -> Iterator[FinStructure]:
    """Completions whose e_name part is an equivalence relation.

    Used when the surrounding forbidden list already contains the
    equivalence violators for e_name: completions with a broken e_name are
    then redundant, and enumerating set partitions instead of free atom
    subsets keeps the pattern count small.  e_name atom constraints in the
    pattern become block constraints on the partition.
    """
    sort = _binary_same_sort(sig, e_name)
    pts = list(universe.get(sort, ()))
    same: list[tuple[int, int]] = []
    diff: list[tuple[int, int]] = []
    rest_in: list[Atom] = []
    rest_out: list[Atom] = []
    for name, t in atoms_in:
        if name == e_name:
            same.append((t[0], t[1]))
        else:
            rest_in.append((name, t))
    for name, t in atoms_out:
        if name == e_name:
            if t[0] == t[1]:
                return
            diff.append((t[0], t[1]))
        else:
            rest_out.append((name, t))
    others = [
        a
        for a in optional_atoms(sig, universe)
        if a[0] != e_name
        and _normalize_atom(sig, a) not in map(
            lambda x: _normalize_atom(sig, x), rest_in + rest_out
        )
    ]
    fixed_in = {_normalize_atom(sig, a) for a in rest_in}
    fixed_out = {_normalize_atom(sig, a) for a in rest_out}
    if fixed_in & fixed_out:
        return
    for name, t in fixed_in:
        decl = sig.relation(name)
        if len(t) == 2 and t[0] == t[1] and "irreflexive" in decl.flags:
            return
    for name, t in fixed_out:
        decl = sig.relation(name)
        if len(t) == 2 and t[0] == t[1] and "reflexive" in decl.flags:
            return
    for blocks in _set_partitions(len(pts)):
        block_of = {}
        for bi, block in enumerate(blocks):
            for v in block:
                block_of[pts[v]] = bi
        if any(block_of[a] != block_of[b] for a, b in same):
            continue
        if any(block_of[a] == block_of[b] for a, b in diff):
            continue
        e_rows = [
            (e_name, (a, b))
            for a in pts
            for b in pts
            if block_of[a] == block_of[b]
        ]
        for r in range(len(others) + 1):
            for combo in itertools.combinations(others, r):
                yield _build_with_atoms(
                    sig, universe, e_rows + list(fixed_in) + list(combo)
                )


def _dedup_patterns(
    patterns: Iterable[FinStructure],
) -> tuple[FinStructure, ...]:
    seen: dict[bytes, FinStructure] = {}
    for p in patterns:
        code = canonical_form(p)
        if code not in seen:
            seen[code] = p
    return tuple(
        seen[c]
        for c in sorted(
            seen, key=lambda c: (seen[c].total_size, seen[c].size_vector(), c)
        )
    )


Ref = tuple[int, int]


def _iso_code(
    blocks: Sequence[Sequence[Ref]],
    atoms: Iterable[tuple[int, tuple[Ref, ...]]],
) -> tuple:
    """Isomorphism-invariant code of a small labeled point set.

    blocks lists the points per sort index; atoms are (relation index,
    point tuple) pairs with every point in some block.  The code is the
    minimum, over all sort-preserving relabelings, of the sorted atom
    list; exact because all permutations are tried, so only use this on
    pattern-sized sets.
    """
    local: dict[Ref, int] = {}
    offsets = []
    n = 0
    for blk in blocks:
        offsets.append(n)
        for r in blk:
            local[r] = n
            n += 1
    atom_list = [
        (ri, tuple(local[r] for r in refs)) for ri, refs in atoms
    ]
    best = None
    for perms in itertools.product(
        *(itertools.permutations(range(len(blk))) for blk in blocks)
    ):
        relabel = list(range(n))
        for off, pm in zip(offsets, perms):
            for i, p in enumerate(pm):
                relabel[off + i] = off + p
        cand = tuple(
            sorted((ri, tuple(relabel[x] for x in t)) for ri, t in atom_list)
        )
        if best is None or cand < best:
            best = cand
    return best if best is not None else ()


def _structure_iso_code(s: FinStructure) -> tuple:
    blocks = [
        tuple((si, x) for x in ids) for si, ids in enumerate(s.universe)
    ]
    atoms = []
    for ri, (decl, table) in enumerate(zip(s.sig.relations, s.tables)):
        prof = [s.sig.sort_index(p) for p in decl.profile]
        for t in table:
            atoms.append((ri, tuple(zip(prof, t))))
    return _iso_code(blocks, atoms)


def _atom_touch_index(
    s: FinStructure,
) -> dict[Ref, list[tuple[int, tuple[Ref, ...]]]]:
    """Map each point to the full relation rows that mention it."""
    touch: dict[Ref, list[tuple[int, tuple[Ref, ...]]]] = {}
    for ri, (decl, table) in enumerate(zip(s.sig.relations, s.tables)):
        prof = [s.sig.sort_index(p) for p in decl.profile]
        for t in table:
            refs = tuple(zip(prof, t))
            for r in set(refs):
                touch.setdefault(r, []).append((ri, refs))
    return touch


# ---------------------------------------------------------------------------
# Axiom helpers: each returns forbidden patterns over the given signature.


def _binary_same_sort(sig: Signature, name: str) -> str:
    decl = sig.relation(name)
    if decl.arity != 2 or decl.profile[0] != decl.profile[1]:
        raise SignatureError(
            f"{name} must be binary over one sort for this helper"
        )
    return decl.profile[0]


def equivalence_patterns(
    sig: Signature, e_name: str
) -> tuple[FinStructure, ...]:
    """Violators of reflexivity, symmetry, and transitivity of e_name.

    Laws already imposed by flags contribute nothing.
    """
    sort = _binary_same_sort(sig, e_name)
    flags = sig.relation(e_name).flags
    found: list[FinStructure] = []
    if "reflexive" not in flags:
        found.extend(
            pattern_completions(sig, {sort: [0]}, [], [(e_name, (0, 0))])
        )
    if "symmetric" not in flags:
        found.extend(
            pattern_completions(
                sig, {sort: [0, 1]}, [(e_name, (0, 1))], [(e_name, (1, 0))]
            )
        )
    found.extend(
        pattern_completions(
            sig,
            {sort: [0, 1, 2]},
            [(e_name, (0, 1)), (e_name, (1, 2))],
            [(e_name, (0, 2))],
        )
    )
    found.extend(
        pattern_completions(
            sig,
            {sort: [0, 1]},
            [(e_name, (0, 1)), (e_name, (1, 0))],
            [(e_name, (0, 0))],
        )
    )
    return _dedup_patterns(found)


def _set_partitions(n: int) -> Iterator[list[list[int]]]:
    """Partitions of range(n) into blocks, coarsest identification first.

    Ordered by block count ascending so smaller patterns come out first.
    """
    all_parts: list[list[list[int]]] = []

    def grow(i: int, blocks: list[list[int]]) -> None:
        if i == n:
            all_parts.append([list(b) for b in blocks])
            return
        for b in blocks:
            b.append(i)
            grow(i + 1, blocks)
            b.pop()
        blocks.append([i])
        grow(i + 1, blocks)
        blocks.pop()

    grow(0, [])
    all_parts.sort(key=lambda bs: (len(bs), bs))
    yield from all_parts


def invariance_patterns(
    sig: Signature, rel_name: str, e_name: str
) -> tuple[FinStructure, ...]:
    """Violators of coordinatewise invariance of rel_name under e_name.

    Only completions whose e_name part is an equivalence are produced, so
    the result presents the intended class exactly when combined with
    equivalence_patterns(sig, e_name); rel_name must have arity at most 2.
    Full invariance follows from the coordinatewise version by chaining
    one replacement at a time.
    """
    sort = _binary_same_sort(sig, e_name)
    decl = sig.relation(rel_name)
    if decl.arity > 2:
        raise SignatureError("invariance helper handles arity <= 2 only")
    if any(s != sort for s in decl.profile):
        raise SignatureError(
            f"{rel_name} must live on sort {sort!r} for this helper"
        )
    if decl.arity == 1:
        templates = [
            ([(e_name, (0, 1)), (rel_name, (0,))], [(rel_name, (1,))], 2)
        ]
    else:
        # vars: 0 = x, 1 = y, 2 = replacement for one coordinate
        templates = [
            (
                [(e_name, (0, 2)), (rel_name, (0, 1))],
                [(rel_name, (2, 1))],
                3,
            ),
            (
                [(e_name, (1, 2)), (rel_name, (0, 1))],
                [(rel_name, (0, 2))],
                3,
            ),
        ]
    found: list[FinStructure] = []
    for atoms_in, atoms_out, n_vars in templates:
        for blocks in _set_partitions(n_vars):
            point = {}
            for bi, block in enumerate(blocks):
                for v in block:
                    point[v] = bi
            uni = {sort: list(range(len(blocks)))}
            a_in = [
                (n, tuple(point[v] for v in t)) for n, t in atoms_in
            ]
            a_out = [
                (n, tuple(point[v] for v in t)) for n, t in atoms_out
            ]
            found.extend(
                pattern_completions_modulo_equivalence(
                    sig, uni, a_in, a_out, e_name
                )
            )
    return _dedup_patterns(found)


def irreflexivity_patterns(
    sig: Signature, rel_name: str
) -> tuple[FinStructure, ...]:
    sort = _binary_same_sort(sig, rel_name)
    if "irreflexive" in sig.relation(rel_name).flags:
        return ()
    return _dedup_patterns(
        pattern_completions(sig, {sort: [0]}, [(rel_name, (0, 0))], [])
    )


def symmetry_patterns(
    sig: Signature, rel_name: str
) -> tuple[FinStructure, ...]:
    sort = _binary_same_sort(sig, rel_name)
    if "symmetric" in sig.relation(rel_name).flags:
        return ()
    return _dedup_patterns(
        pattern_completions(
            sig, {sort: [0, 1]}, [(rel_name, (0, 1))], [(rel_name, (1, 0))]
        )
    )


def clique_patterns(
    sig: Signature, e_name: str, size: int
) -> tuple[FinStructure, ...]:
    """All patterns containing an e_name-clique on `size` points."""
    sort = _binary_same_sort(sig, e_name)
    pts = list(range(size))
    atoms = [
        (e_name, (a, b)) for a in pts for b in pts if a < b
    ]
    return _dedup_patterns(
        pattern_completions(sig, {sort: pts}, atoms, [])
    )


# ---------------------------------------------------------------------------
# Class presentations.


class ClassPresentation:
    """A hereditary class: signature plus forbidden induced substructures.

    Membership is "no forbidden pattern occurs as an induced substructure",
    decided by scanning subsets whose size vector matches some pattern and
    comparing canonical codes (equivalent to an embedding scan, since
    induced embeddings are exactly isomorphisms onto induced substructures).
    """

    def __init__(
        self,
        name: str,
        sig: Signature,
        forbidden: Iterable[FinStructure] = (),
        helpers: Iterable[str] = (),
    ):
        self.name = name
        self.sig = sig
        forbidden = tuple(forbidden)
        for d in forbidden:
            if d.sig != sig:
                raise SignatureError(
                    f"forbidden pattern signature differs in class {name!r}"
                )
            if d.total_size == 0:
                raise StructureError("forbidden patterns must be nonempty")
        self.forbidden = _dedup_patterns(forbidden)
        self.helpers = tuple(helpers)
        self._codes_by_vec: dict[tuple[int, ...], frozenset] = {}
        for d in self.forbidden:
            vec = d.size_vector()
            self._codes_by_vec[vec] = self._codes_by_vec.get(
                vec, frozenset()
            ) | {_structure_iso_code(d)}
        self._member_cache: dict[FinStructure, bool] = {}
        self._age_cache: dict[int, tuple[FinStructure, ...]] = {}

    def __repr__(self):
        return (
            f"ClassPresentation({self.name!r}, forbidden="
            f"{len(self.forbidden)})"
        )

    def __eq__(self, other):
        return (
            isinstance(other, ClassPresentation)
            and self.sig == other.sig
            and tuple(canonical_form(d) for d in self.forbidden)
            == tuple(canonical_form(d) for d in other.forbidden)
        )

    def __hash__(self):
        return hash(
            (self.sig, tuple(canonical_form(d) for d in self.forbidden))
        )

    def _subset_hits(
        self,
        s: FinStructure,
        touch: Mapping[Ref, list],
        vec: tuple[int, ...],
        codes: frozenset,
        must_have: Optional[tuple[int, int]] = None,
    ) -> bool:
        pools = []
        for si, want in enumerate(vec):
            ids = s.universe[si]
            if want > len(ids):
                return False
            if must_have is not None and must_have[0] == si:
                others = [x for x in ids if x != must_have[1]]
                if want == 0:
                    return False
                pools.append(
                    [
                        (must_have[1],) + rest
                        for rest in itertools.combinations(others, want - 1)
                    ]
                )
            else:
                pools.append(list(itertools.combinations(ids, want)))
        for chosen in itertools.product(*pools):
            blocks = [
                tuple((si, x) for x in chosen[si]) for si in range(len(vec))
            ]
            in_subset = {r for blk in blocks for r in blk}
            atoms = {
                a
                for r in in_subset
                for a in touch.get(r, ())
                if all(q in in_subset for q in a[1])
            }
            if _iso_code(blocks, atoms) in codes:
                return True
        return False

    def contains(self, s: FinStructure) -> bool:
        """Membership: no forbidden pattern embeds into s."""
        if s.sig != self.sig:
            raise SignatureError(
                f"structure signature differs from class {self.name!r}"
            )
        if not self.forbidden:
            return True
        hit = self._member_cache.get(s)
        if hit is not None:
            return hit
        touch = _atom_touch_index(s)
        ok = not any(
            self._subset_hits(s, touch, vec, codes)
            for vec, codes in self._codes_by_vec.items()
        )
        if len(self._member_cache) < 65536:
            self._member_cache[s] = ok
        return ok

    def new_point_ok(self, s: FinStructure, ref: tuple[str, int]) -> bool:
        """Membership of s given that s minus the referenced point belongs.

        Scans only subsets through the new point; sound because the class
        is hereditary.
        """
        if s.sig != self.sig:
            raise SignatureError(
                f"structure signature differs from class {self.name!r}"
            )
        si = self.sig.sort_index(ref[0])
        touch = _atom_touch_index(s)
        return not any(
            self._subset_hits(s, touch, vec, codes, must_have=(si, ref[1]))
            for vec, codes in self._codes_by_vec.items()
        )


def class_membership(k: ClassPresentation, s: FinStructure) -> bool:
    return k.contains(s)


def presentation_to_doc(k: ClassPresentation) -> dict:
    return {
        "name": k.name,
        "signature": signature_to_doc(k.sig),
        "forbidden": [structure_to_doc(d) for d in k.forbidden],
        "helpers": list(k.helpers),
    }


def presentation_from_doc(doc: Mapping) -> ClassPresentation:
    try:
        sig = signature_from_doc(doc["signature"])
        forbidden = [structure_from_doc(d) for d in doc["forbidden"]]
        name = doc.get("name", "unnamed")
        helpers = tuple(doc.get("helpers", ()))
    except (KeyError, TypeError) as ex:
        raise DocumentError(f"bad class presentation document: {ex}") from ex
    for d in forbidden:
        if d.sig != sig:
            raise DocumentError(
                "forbidden pattern signature differs from class signature"
            )
    return ClassPresentation(name, sig, forbidden, helpers)


# ---------------------------------------------------------------------------
# Built-in classes.

GRAPH_SIG = make_signature(
    ("V",), [("R", ("V", "V"), ("symmetric", "irreflexive"))]
)


def _complete_graph(n: int) -> FinStructure:
    return FinStructure.build(
        GRAPH_SIG,
        {"V": range(n)},
        {"R": [(a, b) for a in range(n) for b in range(n) if a < b]},
    )


@functools.lru_cache(maxsize=128)
def builtin_presentation(spec: str) -> ClassPresentation:
    """Built-in classes by name; kn_free takes its clique size in parens."""
    m = re.fullmatch(r"kn_free\((\d+)\)", spec)
    if m:
        n = int(m.group(1))
        if n < 3:
            raise SignatureError("kn_free needs a clique size of at least 3")
        return ClassPresentation(spec, GRAPH_SIG, [_complete_graph(n)])
    if spec == "pure_set":
        return ClassPresentation(spec, make_signature(("V",)), [])
    if spec == "random_graph":
        return ClassPresentation(spec, GRAPH_SIG, [])
    if spec == "triangle_free":
        return ClassPresentation(spec, GRAPH_SIG, [_complete_graph(3)])
    if spec == "degree_le_1":
        path = FinStructure.build(
            GRAPH_SIG, {"V": [0, 1, 2]}, {"R": [(0, 1), (1, 2)]}
        )
        return ClassPresentation(spec, GRAPH_SIG, [path, _complete_graph(3)])
    if spec == "equivalence_relation":
        sig = make_signature(("V",), [("E", ("V", "V"))])
        return ClassPresentation(
            spec, sig, equivalence_patterns(sig, "E"), ("equivalence:E",)
        )
    raise SignatureError(f"unknown built-in class {spec!r}")


# ---------------------------------------------------------------------------
# Age enumeration.


def _next_id(s: FinStructure, sort: str) -> int:
    ids = s.elems(sort)
    return (ids[-1] + 1) if ids else 0


def one_point_extensions(
    k: ClassPresentation, s: FinStructure, sort: str
) -> Iterator[tuple[FinStructure, tuple[str, int]]]:
    """Members of k extending s by one fresh point of the given sort.

    Every member extension appears at least once (possibly repeated up to
    isomorphism); pairs are (extension, new point reference).
    """
    new_id = _next_id(s, sort)
    uni = {t: list(s.elems(t)) for t in k.sig.sorts}
    uni[sort] = uni[sort] + [new_id]
    base_atoms: list[Atom] = []
    for decl, table in zip(s.sig.relations, s.tables):
        for t in table:
            base_atoms.append((decl.name, t))
    slots = [
        a
        for a in optional_atoms(k.sig, uni)
        if _touches(k.sig, a, sort, new_id)
    ]
    ref = (sort, new_id)
    for r in range(len(slots) + 1):
        for combo in itertools.combinations(slots, r):
            cand = _build_with_atoms(k.sig, uni, base_atoms + list(combo))
            if k.new_point_ok(cand, ref):
                yield cand, ref


def _touches(sig: Signature, atom: Atom, sort: str, ident: int) -> bool:
    name, t = atom
    decl = sig.relation(name)
    return any(
        x == ident and prof_sort == sort
        for x, prof_sort in zip(t, decl.profile)
    )


def enumerate_age(
    k: ClassPresentation, n: int, max_count: int = 200000
) -> tuple[FinStructure, ...]:
    """All isomorphism types in k of total size 1..n, canonical order."""
    if n < 0:
        raise BudgetError("age bound must be non-negative")
    cached = k._age_cache.get(n)
    if cached is not None:
        return cached
    layers: list[list[FinStructure]] = [[empty_structure(k.sig)]]
    out: list[FinStructure] = []
    for size in range(1, n + 1):
        seen: dict[bytes, FinStructure] = {}
        for parent in layers[size - 1]:
            for sort in k.sig.sorts:
                # dedup candidates by code before the membership test
                new_id = _next_id(parent, sort)
                uni = {t: list(parent.elems(t)) for t in k.sig.sorts}
                uni[sort] = uni[sort] + [new_id]
                base_atoms = [
                    (decl.name, t)
                    for decl, table in zip(parent.sig.relations, parent.tables)
                    for t in table
                ]
                slots = [
                    a
                    for a in optional_atoms(k.sig, uni)
                    if _touches(k.sig, a, sort, new_id)
                ]
                for r in range(len(slots) + 1):
                    for combo in itertools.combinations(slots, r):
                        cand = _build_with_atoms(
                            k.sig, uni, base_atoms + list(combo)
                        )
                        code = canonical_form(cand)
                        if code in seen:
                            continue
                        if k.new_point_ok(cand, (sort, new_id)):
                            seen[code] = cand
                            if len(out) + len(seen) > max_count:
                                raise BudgetError(
                                    f"age of {k.name!r} exceeds "
                                    f"{max_count} types"
                                )
        layer = [
            seen[c]
            for c in sorted(
                seen, key=lambda c: (seen[c].size_vector(), c)
            )
        ]
        layers.append(layer)
        out.extend(layer)
    result = tuple(out)
    k._age_cache[n] = result
    return result


# ---------------------------------------------------------------------------
# Automorphisms and embedding orbits.


@functools.lru_cache(maxsize=16384)
def automorphisms(s: FinStructure) -> tuple[Embedding, ...]:
    return tuple(enumerate_embeddings(s, s))


def _emb_key(e: Embedding) -> tuple:
    return e.maps


def embeddings_upto_aut(
    a: FinStructure, b: FinStructure
) -> tuple[Embedding, ...]:
    """Embeddings a -> b, one representative per Aut(b) left-orbit."""
    auts = automorphisms(b)
    reps = []
    seen: set[tuple] = set()
    for e in enumerate_embeddings(a, b):
        key = min(_emb_key(compose_embeddings(e, g)) for g in auts)
        if key not in seen:
            seen.add(key)
            reps.append(e)
    return tuple(reps)


# ---------------------------------------------------------------------------
# Amalgamation.


@dataclass(frozen=True)
class AmalgamationWitness:
    base: FinStructure
    left: FinStructure
    right: FinStructure
    into_left: Embedding
    into_right: Embedding


@dataclass(frozen=True)
class AmalgamationReport:
    passed: bool
    strong: bool
    checked_bound: int
    configurations: int
    witness: Optional[AmalgamationWitness] = None


def _side_refs(
    d: FinStructure, g: Embedding, e: Embedding, a: FinStructure,
    b: FinStructure,
) -> set[tuple[str, int]]:
    glued = {
        (sort, g.apply(sort, e.apply(sort, z)))
        for sort in a.sig.sorts
        for z in a.elems(sort)
    }
    return {
        (sort, g.apply(sort, x))
        for sort in b.sig.sorts
        for x in b.elems(sort)
    } - glued


def _cross_atoms(
    sig: Signature,
    universe: Mapping[str, Sequence[int]],
    left: set[tuple[str, int]],
    right: set[tuple[str, int]],
) -> list[Atom]:
    out = []
    for atom in optional_atoms(sig, universe):
        name, t = atom
        prof = sig.relation(name).profile
        refs = {(prof[i], x) for i, x in enumerate(t)}
        if refs & left and refs & right:
            out.append(atom)
    return out


def _atom_full_rows(
    sig: Signature, atom: Atom
) -> list[tuple[int, tuple[Ref, ...]]]:
    """The rows an optional atom contributes once flags are closed."""
    name, t = atom
    ri = sig.rel_index(name)
    decl = sig.relation(name)
    prof = [sig.sort_index(p) for p in decl.profile]
    rows = {(ri, tuple(zip(prof, t)))}
    if "symmetric" in decl.flags and len(t) == 2:
        rows.add((ri, tuple(zip(prof, (t[1], t[0])))))
    return list(rows)


def _completion_dfs(
    k: ClassPresentation,
    uni: Mapping[str, Sequence[int]],
    base_atoms: Iterable[tuple[int, tuple[Ref, ...]]],
    cross: Sequence[Atom],
    side_left: frozenset[Ref],
    side_right: frozenset[Ref],
    max_candidates: int,
    rng=None,
) -> Iterator[frozenset[Atom]]:
    """Cross-atom subsets whose union with the base atoms lies in k.

    Branch-and-prune over the cross atoms, absent branch first (or a
    seeded coin flip per decision when rng is given), so the first leaf
    is the free completion respectively a generic one.  Both sides must
    already be members: then a forbidden pattern can only sit on a subset
    meeting both exclusive regions, and each such subset is checked
    exactly once, at the decision that fixes its last cross atom.  Every
    surviving leaf is therefore a member, with no final scan.

    base_atoms must be flag-closed (both directions of a symmetric
    relation present), which rows taken from FinStructure tables are.
    """
    sig = k.sig
    vectors = [
        (vec, codes)
        for vec, codes in k._codes_by_vec.items()
        if sum(vec) >= 2
    ]
    refs_by_sort: list[tuple[Ref, ...]] = [
        tuple((si, x) for x in sorted(uni.get(sort, ())))
        for si, sort in enumerate(sig.sorts)
    ]
    ref_rank = {
        r: i
        for i, r in enumerate(
            r for blk in refs_by_sort for r in blk
        )
    }
    cross_meta = []
    for atom in cross:
        name, t = atom
        prof = sig.relation(name).profile
        refset = frozenset(
            (sig.sort_index(prof[i]), x) for i, x in enumerate(t)
        )
        cross_meta.append((atom, refset, _atom_full_rows(sig, atom)))
    # decide all atoms among the first k points before any atom touching
    # point k+1, so a subset is complete as soon as its points are
    cross_meta.sort(
        key=lambda m: (
            sorted((ref_rank[r] for r in m[1]), reverse=True),
            m[0],
        )
    )
    row_index: dict = {}
    for j, (_, _, rows) in enumerate(cross_meta):
        for row in rows:
            row_index[row] = j
    base_set = frozenset(base_atoms)
    rel_prof_idx = [
        tuple(sig.sort_index(s) for s in decl.profile)
        for decl in sig.relations
    ]
    lens_by_vec = {
        vec: frozenset(len(code) for code in codes)
        for vec, codes in vectors
    }
    decided: dict[int, bool] = {}
    visited = 0

    def bump():
        nonlocal visited
        visited += 1
        if visited > max_candidates:
            raise BudgetError(
                f"completion search exceeds {max_candidates} states"
            )

    def violated(blocks: list[tuple[Ref, ...]], vec, codes) -> bool:
        in_subset = {r for blk in blocks for r in blk}
        if in_subset <= side_left or in_subset <= side_right:
            return False
        # every possible row over the subset: present ones feed the iso
        # code, an undecided cross row defers the check to a later node
        atoms = set()
        for ri, prof in enumerate(rel_prof_idx):
            for combo in itertools.product(*(blocks[sj] for sj in prof)):
                row = (ri, combo)
                j = row_index.get(row)
                if j is None:
                    if row in base_set:
                        atoms.add(row)
                elif j not in decided:
                    return False
                elif decided[j]:
                    atoms.add(row)
        if len(atoms) not in lens_by_vec[vec]:
            return False
        return _iso_code(blocks, atoms) in codes

    def conflict_through(anchor: frozenset[Ref]) -> bool:
        by_sort: list[list[Ref]] = [[] for _ in sig.sorts]
        for r in anchor:
            by_sort[r[0]].append(r)
        for vec, codes in vectors:
            need = [vec[si] - len(by_sort[si]) for si in range(len(vec))]
            if any(w < 0 for w in need):
                continue
            pools = []
            for si, want in enumerate(need):
                rest = [r for r in refs_by_sort[si] if r not in anchor]
                if want > len(rest):
                    pools = None
                    break
                pools.append(itertools.combinations(rest, want))
            if pools is None:
                continue
            for extra in itertools.product(*pools):
                blocks = [
                    tuple(sorted(by_sort[si] + list(extra[si])))
                    for si in range(len(vec))
                ]
                if violated(blocks, vec, codes):
                    return True
        return False

    # Root scan: a conflict visible before any decision sits on a
    # crossing subset containing no cross row at all, so grow subsets
    # around the cross refsets, blocking any ref that would complete one.
    refset_list = list({rs for _, rs, _ in cross_meta})
    refsets_of: dict[Ref, list] = {}
    for rs in refset_list:
        for r in rs:
            refsets_of.setdefault(r, []).append(rs)
    rex_by_sort: list[list[tuple[int, Ref]]] = [
        [
            (i, r)
            for i, r in enumerate(refs_by_sort[si])
            if r not in side_left
        ]
        for si in range(len(sig.sorts))
    ]
    lex_by_sort: list[list[tuple[int, Ref]]] = [
        [
            (i, r)
            for i, r in enumerate(refs_by_sort[si])
            if r not in side_right
        ]
        for si in range(len(sig.sorts))
    ]

    def root_vec_conflict(vec, codes) -> bool:
        slots: list[int] = []
        for si, c in enumerate(vec):
            slots.extend([si] * c)
        chosen: list[Ref] = []
        chosen_set: set[Ref] = set()
        blocked: set[Ref] = set()
        for rs in refset_list:
            if len(rs) == 1:
                blocked |= rs

        def grow(r: Ref) -> list[Ref]:
            added = []
            chosen.append(r)
            chosen_set.add(r)
            for rs in refsets_of.get(r, ()):
                missing = [q for q in rs if q not in chosen_set]
                if len(missing) == 1 and missing[0] not in blocked:
                    blocked.add(missing[0])
                    added.append(missing[0])
            return added

        def shrink(r: Ref, added: list[Ref]) -> None:
            for q in added:
                blocked.discard(q)
            chosen_set.discard(r)
            chosen.pop()

        def side_feasible(slot_idx: int, min_rank: int, pools) -> bool:
            run_sort = slots[slot_idx]
            for j in range(slot_idx, len(slots)):
                si = slots[j]
                floor = min_rank if si == run_sort else 0
                for rank, r in pools[si]:
                    if rank >= floor and r not in blocked \
                            and r not in chosen_set:
                        return True
            return False

        def rec(slot_idx: int, min_rank: int, tl: bool, tr: bool) -> bool:
            if slot_idx == len(slots):
                if not (tl and tr):
                    return False
                by: list[list[Ref]] = [[] for _ in vec]
                for q in chosen:
                    by[q[0]].append(q)
                blocks = [tuple(sorted(b)) for b in by]
                atoms = set()
                for ri, prof in enumerate(rel_prof_idx):
                    for combo in itertools.product(
                        *(blocks[sj] for sj in prof)
                    ):
                        row = (ri, combo)
                        if row in base_set:
                            atoms.add(row)
                if len(atoms) not in lens_by_vec[vec]:
                    return False
                return _iso_code(blocks, atoms) in codes
            if not tr and not side_feasible(slot_idx, min_rank, rex_by_sort):
                return False
            if not tl and not side_feasible(slot_idx, min_rank, lex_by_sort):
                return False
            si = slots[slot_idx]
            fresh = slot_idx == 0 or slots[slot_idx - 1] != si
            pool = refs_by_sort[si]
            start = 0 if fresh else min_rank
            for idx in range(start, len(pool)):
                r = pool[idx]
                if r in blocked or r in chosen_set:
                    continue
                bump()
                added = grow(r)
                hit = rec(
                    slot_idx + 1,
                    idx + 1,
                    tl or r not in side_right,
                    tr or r not in side_left,
                )
                shrink(r, added)
                if hit:
                    return True
            return False

        return rec(0, 0, False, False)

    for vec, codes in vectors:
        if root_vec_conflict(vec, codes):
            return

    def branch_order() -> tuple[bool, bool]:
        if rng is not None and rng.random() < 0.5:
            return (True, False)
        return (False, True)

    n = len(cross_meta)
    if n == 0:
        yield frozenset()
        return

    # explicit stack; depth can reach thousands of cross atoms
    frames: list[list] = [[0, iter(branch_order()), None]]
    while frames:
        frame = frames[-1]
        i = frame[0]
        if frame[2] is not None:
            del decided[i]
            frame[2] = None
        val = next(frame[1], None)
        if val is None:
            frames.pop()
            continue
        bump()
        decided[i] = val
        frame[2] = val
        if conflict_through(cross_meta[i][1]):
            continue
        if i + 1 == n:
            yield frozenset(
                atom for j, (atom, _, _) in enumerate(cross_meta)
                if decided[j]
            )
            continue
        frames.append([i + 1, iter(branch_order()), None])


def strong_amalgams(
    k: ClassPresentation,
    a: FinStructure,
    b: FinStructure,
    c: FinStructure,
    e: Embedding,
    f: Embedding,
    max_candidates: int = 1 << 20,
) -> Iterator[tuple[FinStructure, Embedding, Embedding]]:
    """Members of k on exactly B union C glued along A; the free amalgam
    is the first candidate tried.  Raises BudgetError only if the search
    actually visits more than max_candidates states."""
    if not (k.contains(b) and k.contains(c)):
        return
    d0, g, h = free_amalgam(a, b, c, e, f)
    left = _side_refs(d0, g, e, a, b)
    right = _side_refs(d0, h, f, a, c)
    uni = d0.universe_dict()
    sig = k.sig
    base_atoms = []
    for ri, (decl, table) in enumerate(zip(d0.sig.relations, d0.tables)):
        prof = [sig.sort_index(p) for p in decl.profile]
        for t in table:
            base_atoms.append((ri, tuple(zip(prof, t))))
    all_refs = {
        (sig.sort_index(sort), x)
        for sort, ids in uni.items()
        for x in ids
    }
    side_left = frozenset(all_refs - {(sig.sort_index(s), x) for s, x in right})
    side_right = frozenset(all_refs - {(sig.sort_index(s), x) for s, x in left})
    cross = _cross_atoms(sig, uni, left, right)
    base_rows = [
        (decl.name, t)
        for decl, table in zip(d0.sig.relations, d0.tables)
        for t in table
    ]
    for chosen in _completion_dfs(
        k, uni, base_atoms, cross, side_left, side_right, max_candidates
    ):
        d = _build_with_atoms(sig, uni, base_rows + list(chosen))
        yield d, g, h


def find_strong_amalgam(k, a, b, c, e, f, max_candidates: int = 1 << 20):
    return next(strong_amalgams(k, a, b, c, e, f, max_candidates), None)


def _matchings(
    b_rest: dict[str, list[int]], c_rest: dict[str, list[int]]
) -> Iterator[dict[str, dict[int, int]]]:
    """Nonempty partial injections b_rest -> c_rest, smallest first."""
    per_sort: list[tuple[str, list[dict[int, int]]]] = []
    for sort in b_rest:
        options: list[dict[int, int]] = [{}]
        xs, ys = b_rest[sort], c_rest[sort]
        for size in range(1, min(len(xs), len(ys)) + 1):
            for chosen in itertools.combinations(xs, size):
                for image in itertools.permutations(ys, size):
                    options.append(dict(zip(chosen, image)))
        per_sort.append((sort, options))
    combos = itertools.product(*(opts for _, opts in per_sort))
    ranked = sorted(
        combos,
        key=lambda ms: (
            sum(len(m) for m in ms),
            [sorted(m.items()) for m in ms],
        ),
    )
    for ms in ranked:
        if sum(len(m) for m in ms) == 0:
            continue
        yield {sort: m for (sort, _), m in zip(per_sort, ms)}


def amalgams_with_identification(
    k: ClassPresentation,
    a: FinStructure,
    b: FinStructure,
    c: FinStructure,
    e: Embedding,
    f: Embedding,
    max_candidates: int = 1 << 20,
) -> Iterator[tuple[FinStructure, Embedding, Embedding]]:
    """Amalgams identifying at least one pair across the two sides."""
    if not (k.contains(b) and k.contains(c)):
        return
    sig = k.sig
    b_rest = {
        sort: [x for x in b.elems(sort) if x not in e.image_set(sort)]
        for sort in sig.sorts
    }
    c_rest = {
        sort: [y for y in c.elems(sort) if y not in f.image_set(sort)]
        for sort in sig.sorts
    }
    for matching in _matchings(b_rest, c_rest):
        g_map: dict[str, dict[int, int]] = {}
        h_map: dict[str, dict[int, int]] = {}
        uni: dict[str, list[int]] = {}
        for sort in sig.sorts:
            nxt = 0
            gm = {}
            for x in b.elems(sort):
                gm[x] = nxt
                nxt += 1
            fa = {
                f.apply(sort, z): e.apply(sort, z) for z in a.elems(sort)
            }
            hm = {}
            matched = {v: x for x, v in matching[sort].items()}
            for y in c.elems(sort):
                if y in fa:
                    hm[y] = gm[fa[y]]
                elif y in matched:
                    hm[y] = gm[matched[y]]
                else:
                    hm[y] = nxt
                    nxt += 1
            g_map[sort] = gm
            h_map[sort] = hm
            uni[sort] = list(range(nxt))
        g = Embedding.from_dict(g_map)
        h = Embedding.from_dict(h_map)
        rows: dict[str, set[tuple[int, ...]]] = {}
        for decl, table in zip(b.sig.relations, b.tables):
            prof = decl.profile
            rows.setdefault(decl.name, set()).update(
                tuple(g_map[prof[i]][x] for i, x in enumerate(t))
                for t in table
            )
        for decl, table in zip(c.sig.relations, c.tables):
            prof = decl.profile
            rows.setdefault(decl.name, set()).update(
                tuple(h_map[prof[i]][y] for i, y in enumerate(t))
                for t in table
            )
        base_rows = [
            (name, t) for name, ts in rows.items() for t in ts
        ]
        try:
            d_base = _build_with_atoms(sig, uni, base_rows)
        except StructureError:
            continue
        if not (
            is_valid_embedding(g, b, d_base)
            and is_valid_embedding(h, c, d_base)
        ):
            # the glued sides disagree somewhere; no completion can fix
            # that, since completions never touch atoms inside a side
            continue
        left = {
            (sort, g_map[sort][x])
            for sort in sig.sorts
            for x in b_rest[sort]
            if x not in matching[sort]
        }
        right = {
            (sort, h_map[sort][y])
            for sort in sig.sorts
            for y in c_rest[sort]
            if y not in {matching[sort][x] for x in matching[sort]}
        }
        base_atoms = []
        for ri, (decl, table) in enumerate(
            zip(d_base.sig.relations, d_base.tables)
        ):
            prof = [sig.sort_index(p) for p in decl.profile]
            for t in table:
                base_atoms.append((ri, tuple(zip(prof, t))))
        all_refs = {
            (sig.sort_index(sort), x)
            for sort, ids in uni.items()
            for x in ids
        }
        side_left = frozenset(
            all_refs - {(sig.sort_index(s), x) for s, x in right}
        )
        side_right = frozenset(
            all_refs - {(sig.sort_index(s), x) for s, x in left}
        )
        cross = _cross_atoms(sig, uni, left, right)
        full_rows = [
            (decl.name, t)
            for decl, table in zip(d_base.sig.relations, d_base.tables)
            for t in table
        ]
        for chosen in _completion_dfs(
            k, uni, base_atoms, cross, side_left, side_right,
            max_candidates,
        ):
            yield (
                _build_with_atoms(sig, uni, full_rows + list(chosen)),
                g,
                h,
            )


def find_amalgam(k, a, b, c, e, f, max_candidates: int = 1 << 20):
    """Strong amalgam if one exists, else any identifying amalgam in k."""
    found = find_strong_amalgam(k, a, b, c, e, f, max_candidates)
    if found is not None:
        return found
    return next(
        amalgams_with_identification(k, a, b, c, e, f, max_candidates), None
    )


def check_amalgamation(
    k: ClassPresentation,
    n: int,
    strong: bool = True,
    max_configs: int = 2000000,
) -> AmalgamationReport:
    """Search every (A, B, C, e, f) configuration over age(k, n).

    A ranges over the age plus the empty structure (joint embedding);
    embeddings are reduced to automorphism orbit representatives on each
    side.  Configurations run in ascending size order so a failure is a
    minimal witness.
    """
    age = enumerate_age(k, n)
    bases = [empty_structure(k.sig)] + list(age)
    count = 0
    for a in bases:
        pairs = [
            (i, j)
            for i in range(len(age))
            for j in range(i, len(age))
            if age[i].total_size >= a.total_size
            and age[j].total_size >= a.total_size
        ]
        pairs.sort(
            key=lambda ij: (
                age[ij[0]].total_size + age[ij[1]].total_size,
                age[ij[0]].total_size,
                ij,
            )
        )
        for i, j in pairs:
            b, c = age[i], age[j]
            for e in embeddings_upto_aut(a, b):
                for f in embeddings_upto_aut(a, c):
                    count += 1
                    if count > max_configs:
                        raise BudgetError(
                            f"amalgamation check exceeds {max_configs} "
                            f"configurations"
                        )
                    if strong:
                        found = find_strong_amalgam(k, a, b, c, e, f)
                    else:
                        found = find_amalgam(k, a, b, c, e, f)
                    if found is None:
                        return AmalgamationReport(
                            passed=False,
                            strong=strong,
                            checked_bound=n,
                            configurations=count,
                            witness=AmalgamationWitness(a, b, c, e, f),
                        )
    return AmalgamationReport(
        passed=True,
        strong=strong,
        checked_bound=n,
        configurations=count,
    )


# ---------------------------------------------------------------------------
# Extension types and tasks.


@dataclass(frozen=True)
class ExtensionType:
    """A one-point extension base < extended, up to marked isomorphism."""

    base: FinStructure
    extended: FinStructure
    new_ref: tuple[str, int]
    key: bytes

    @property
    def size(self) -> int:
        return self.extended.total_size


def extension_types(
    k: ClassPresentation, size_cap: int
) -> tuple[ExtensionType, ...]:
    """All (A < B) with B in age(k, size_cap), deduplicated and ordered."""
    found: dict[bytes, ExtensionType] = {}
    for rep in enumerate_age(k, size_cap):
        for si, x in rep.all_elements():
            sort = k.sig.sorts[si]
            key = canonical_form_with_marks(rep, ((sort, x),))
            if key in found:
                continue
            subset = {
                t: [y for y in rep.elems(t) if (t, y) != (sort, x)]
                for t in k.sig.sorts
            }
            base, _ = induced_substructure(rep, subset)
            found[key] = ExtensionType(base, rep, (sort, x), key)
    return tuple(
        sorted(found.values(), key=lambda t: (t.size, t.key))
    )


@dataclass(frozen=True)
class TaskRecord:
    """One realized (or failed) extension task in a chain log."""

    type_key: str
    embedding: Embedding
    action: str  # "fresh" | "identified" | "failed"
    new_ref: Optional[tuple[str, int]]
    stage_index: int


@dataclass(frozen=True)
class StageChain:
    presentation: ClassPresentation
    seed: int
    size_cap: int
    allow_identifying: bool
    stages: tuple[FinStructure, ...]
    embeddings: tuple[Embedding, ...]
    log: tuple[TaskRecord, ...]

    def current(self) -> FinStructure:
        return self.stages[-1]


def new_chain(
    k: ClassPresentation,
    seed: int,
    size_cap: int,
    allow_identifying: bool = False,
) -> StageChain:
    """Start a chain at the empty structure.

    Callers wanting the no-surprises contract should have run
    check_amalgamation(k, size_cap, strong=True) first; passing
    allow_identifying acknowledges that strong realizations may fail and
    falls back to identifying the new point with an existing one.
    """
    return StageChain(
        presentation=k,
        seed=seed,
        size_cap=size_cap,
        allow_identifying=allow_identifying,
        stages=(empty_structure(k.sig),),
        embeddings=(),
        log=(),
    )


def _task_rng(seed: int, type_key: bytes, emb: Embedding) -> random.Random:
    digest = hashlib.sha256(
        repr((seed, type_key, emb.maps)).encode("ascii")
    ).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _realize(
    k: ClassPresentation,
    m: FinStructure,
    typ: ExtensionType,
    emb: Embedding,
    seed: int,
    stage_index: int,
    allow_identifying: bool,
) -> tuple[FinStructure, TaskRecord]:
    sort_p, p = typ.new_ref
    new_id = _next_id(m, sort_p)
    mapped: dict[str, dict[int, int]] = {
        sort: {x: emb.apply(sort, x) for x in typ.base.elems(sort)}
        for sort in k.sig.sorts
    }
    mapped[sort_p][p] = new_id
    uni = {t: list(m.elems(t)) for t in k.sig.sorts}
    uni[sort_p] = uni[sort_p] + [new_id]
    base_atoms = [
        (decl.name, t)
        for decl, table in zip(m.sig.relations, m.tables)
        for t in table
    ]
    for decl, table in zip(typ.extended.sig.relations, typ.extended.tables):
        prof = decl.profile
        for t in table:
            base_atoms.append(
                (decl.name, tuple(mapped[prof[i]][x] for i, x in enumerate(t)))
            )
    anchor = set(
        (sort, mapped[sort][x])
        for sort in k.sig.sorts
        for x in typ.base.elems(sort)
    ) | {(sort_p, new_id)}
    # optional atoms touching the new point, without sweeping the full
    # row space of the stage
    cross = []
    for decl in k.sig.relations:
        prof = decl.profile
        if sort_p not in prof:
            continue
        if "symmetric" in decl.flags:
            for w in uni[sort_p]:
                if w == new_id and decl.flags & {"reflexive", "irreflexive"}:
                    continue
                pair = (w, new_id) if w < new_id else (new_id, w)
                refs = {(sort_p, pair[0]), (sort_p, pair[1])}
                if not refs <= anchor:
                    cross.append((decl.name, pair))
            continue
        seen_rows = set()
        for p0, s0 in enumerate(prof):
            if s0 != sort_p:
                continue
            pools = [
                (new_id,) if i == p0 else tuple(uni.get(s, ()))
                for i, s in enumerate(prof)
            ]
            for t in itertools.product(*pools):
                if t in seen_rows:
                    continue
                seen_rows.add(t)
                if (
                    len(t) == 2
                    and t[0] == t[1]
                    and decl.flags & {"reflexive", "irreflexive"}
                ):
                    continue
                refs = {(prof[i], x) for i, x in enumerate(t)}
                if not refs <= anchor:
                    cross.append((decl.name, t))
    ref = (sort_p, new_id)
    key_hex = hashlib.sha256(typ.key).hexdigest()[:16]

    def attempt(atoms: list[Atom]) -> Optional[FinStructure]:
        try:
            cand = _build_with_atoms(k.sig, uni, base_atoms + atoms)
        except StructureError:
            return None
        if k.new_point_ok(cand, ref):
            return cand
        return None

    chosen: Optional[FinStructure] = None
    rng = _task_rng(seed, typ.key, emb)
    if not k.forbidden:
        chosen = attempt([a for a in cross if rng.random() < 0.5])
    else:
        # branch-and-prune with a seeded coin per decision: the first
        # leaf is a generic completion, sides = the current stage and
        # the mapped extended type
        sig = k.sig
        typed_base = []
        for name, t in base_atoms:
            prof = [
                sig.sort_index(s)
                for s in sig.relation(name).profile
            ]
            typed_base.append(
                (sig.rel_index(name), tuple(zip(prof, t)))
            )
        all_refs = {
            (sig.sort_index(sort), x)
            for sort, ids in uni.items()
            for x in ids
        }
        side_stage = frozenset(
            all_refs - {(sig.sort_index(sort_p), new_id)}
        )
        side_anchor = frozenset(
            (sig.sort_index(s), x) for s, x in anchor
        )
        for combo in _completion_dfs(
            k, uni, typed_base, cross, side_stage, side_anchor,
            1 << 20, rng=rng,
        ):
            # leaves of the search are members already; no rescan
            chosen = _build_with_atoms(k.sig, uni, base_atoms + list(combo))
            break
    if chosen is not None:
        rec = TaskRecord(key_hex, emb, "fresh", ref, stage_index)
        return chosen, rec
    if allow_identifying:
        image = emb.image_set(sort_p)
        for w in m.elems(sort_p):
            if w in image:
                continue
            cand_map = {
                sort: dict(mapped[sort]) for sort in k.sig.sorts
            }
            cand_map[sort_p][p] = w
            cand_emb = Embedding.from_dict(cand_map)
            if is_valid_embedding(cand_emb, typ.extended, m):
                rec = TaskRecord(
                    key_hex, emb, "identified", (sort_p, w), stage_index
                )
                return m, rec
    failed = TaskRecord(key_hex, emb, "failed", None, stage_index)
    raise AmalgamError(
        f"no strong amalgam for extension task {key_hex} over "
        f"{emb.as_dict()}",
        task=failed,
    )


def build_stage(chain: StageChain, steps: int) -> StageChain:
    """Extend the chain by one stage realizing `steps` extension tasks.

    Tasks pair an extension type with an embedding of its base into the
    stage; each pair is realized exactly once over the chain's lifetime.
    Types take turns round-robin (ordered by size then canonical key) and
    embeddings are served in discovery order.  The task queue is refreshed
    against the growing structure whenever it drains.
    """
    if steps <= 0:
        raise BudgetError("steps must be positive")
    k = chain.presentation
    types = extension_types(k, chain.size_cap)
    if not types:
        raise AmalgamError("the class has no extension tasks at this cap")
    done: set[tuple[str, tuple]] = {
        (rec.type_key, rec.embedding.maps) for rec in chain.log
    }
    key_hex = {
        t.key: hashlib.sha256(t.key).hexdigest()[:16] for t in types
    }
    cur = chain.current()
    stage_index = len(chain.stages)
    log_add: list[TaskRecord] = []

    def fresh_queues(m: FinStructure) -> list[list[Embedding]]:
        return [
            [
                e
                for e in enumerate_embeddings(t.base, m)
                if (key_hex[t.key], e.maps) not in done
            ]
            for t in types
        ]

    queues = fresh_queues(cur)
    realized = 0
    while realized < steps:
        progress = False
        for ti, typ in enumerate(types):
            if realized >= steps:
                break
            if not queues[ti]:
                continue
            emb = queues[ti].pop(0)
            cur, rec = _realize(
                k,
                cur,
                typ,
                emb,
                chain.seed,
                stage_index,
                chain.allow_identifying,
            )
            done.add((rec.type_key, rec.embedding.maps))
            log_add.append(rec)
            realized += 1
            progress = True
        if realized >= steps:
            break
        if not any(queues):
            queues = fresh_queues(cur)
            if not any(queues):
                if not progress:
                    raise AmalgamError(
                        "no unrealized extension tasks remain"
                    )
    prev = chain.current()
    inclusion = Embedding.from_dict(
        {sort: {x: x for x in prev.elems(sort)} for sort in k.sig.sorts}
    )
    return StageChain(
        presentation=k,
        seed=chain.seed,
        size_cap=chain.size_cap,
        allow_identifying=chain.allow_identifying,
        stages=chain.stages + (cur,),
        embeddings=chain.embeddings + (inclusion,),
        log=chain.log + tuple(log_add),
    )


# ---------------------------------------------------------------------------
# Extension-axiom checking.


@dataclass(frozen=True)
class UnmetExtension:
    base_subset: tuple[tuple[str, tuple[int, ...]], ...]
    sort: str
    pattern: tuple[Atom, ...]


@dataclass(frozen=True)
class ExtensionReport:
    passed: bool
    fraction: float
    total: int
    unmet: tuple[UnmetExtension, ...]


def check_extension_axioms(
    s: FinStructure,
    k: ClassPresentation,
    depth: int,
    pool: Optional[Mapping[str, Iterable[int]]] = None,
) -> ExtensionReport:
    """Check every one-point extension task over every <= depth subset of s.

    A task is met when some element of s realizes the extension's atom
    pattern over the subset exactly.  `pool` restricts the witnesses per
    sort; the base subset itself never witnesses its own extension.
    """
    if s.sig != k.sig:
        raise SignatureError("structure signature differs from class")
    if not k.contains(s):
        raise StructureError("structure is not a member of the class")
    pools = {
        sort: tuple(pool[sort]) if pool and sort in pool else s.elems(sort)
        for sort in k.sig.sorts
    }
    for sort, ids in pools.items():
        stray = set(ids) - set(s.elems(sort))
        if stray:
            raise StructureError(
                f"witness pool for {sort!r} leaves the universe: "
                f"{sorted(stray)}"
            )
    total = 0
    unmet: list[UnmetExtension] = []
    per_sort_ids = [list(ids) for ids in s.universe]
    subset_choices = []
    for si, ids in enumerate(per_sort_ids):
        subset_choices.append(
            [
                combo
                for size in range(0, min(depth, len(ids)) + 1)
                for combo in itertools.combinations(ids, size)
            ]
        )
    for chosen in itertools.product(*subset_choices):
        if sum(len(c) for c in chosen) > depth:
            continue
        subset = {
            s.sig.sorts[si]: list(chosen[si]) for si in range(len(chosen))
        }
        base, _ = induced_substructure(s, subset)
        for sort in k.sig.sorts:
            new_id = max(s.elems(sort), default=-1) + 1
            uni = {t: list(base.elems(t)) for t in k.sig.sorts}
            uni[sort] = uni[sort] + [new_id]
            base_atoms = [
                (decl.name, t)
                for decl, table in zip(base.sig.relations, base.tables)
                for t in table
            ]
            slots = [
                a
                for a in optional_atoms(k.sig, uni)
                if _touches(k.sig, a, sort, new_id)
            ]
            chosen_set = set(chosen[s.sig.sort_index(sort)])
            realized_patterns = set()
            for w in pools[sort]:
                if w in chosen_set:
                    continue
                pat = []
                for name, t in slots:
                    witness = tuple(w if x == new_id else x for x in t)
                    if _atom_holds(s, name, witness):
                        pat.append((name, t))
                realized_patterns.add(frozenset(pat))
            for r in range(len(slots) + 1):
                for combo in itertools.combinations(slots, r):
                    try:
                        cand = _build_with_atoms(
                            k.sig, uni, base_atoms + list(combo)
                        )
                    except StructureError:
                        continue
                    if not k.new_point_ok(cand, (sort, new_id)):
                        continue
                    total += 1
                    if frozenset(combo) not in realized_patterns:
                        unmet.append(
                            UnmetExtension(
                                tuple(
                                    (t, tuple(subset[t]))
                                    for t in k.sig.sorts
                                ),
                                sort,
                                tuple(combo),
                            )
                        )
    met = total - len(unmet)
    fraction = met / total if total else 1.0
    return ExtensionReport(
        passed=not unmet, fraction=fraction, total=total, unmet=tuple(unmet)
    )


def _atom_holds(s: FinStructure, name: str, t: tuple[int, ...]) -> bool:
    table = s.table(name)
    if t in table:
        return True
    decl = s.sig.relation(name)
    if "symmetric" in decl.flags and len(t) == 2:
        return (t[1], t[0]) in table
    return False
