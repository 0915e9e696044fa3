"""Finite index trees and the tree-language side of witness checking.

Indices are finite sequences over {0..b-1} ordered by the prefix relation,
the lexicographic order, and binary meet (longest common prefix).  The
quantifier-free type of an index tuple in that language, computed by
tree_qftp, is the grouping key for strong indiscernibility: a labeled tree
is strongly indiscernible over its base when label tuples indexed by
same-type index tuples have the same quantifier-free type in the host.

A tree whose labels parametrize a formula witnesses the two-branching
inconsistency property when every root-to-leaf conjunction is realized and
incomparable label pairs are jointly unrealized; check_sop2_witness and
check_ktp1_witness test the two- and k-wide versions.  power_reindex,
prune_exceptional and extract_sop2 are the finite normalization transforms
that compress repeated-letter blocks, subtract a stabilized exceptional
set, and shift past side branches until a verified witness (or a named
diagnostic) comes out.  search_sop2 looks for a witness labeling from
scratch by backtracking over candidate parameter tuples.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .errors import BudgetError, DocumentError, SortError, TreeError
from .logic import (
    Formula,
    Not,
    Param,
    Var,
    conjunction,
    free_vars,
    qftp_ordered,
    realizations,
    rename_free,
    substitute,
)
from .structures import (
    FinStructure,
    make_signature,
    structure_from_doc,
    structure_to_doc,
)

TreeIndex = tuple[int, ...]
ElemRef = tuple[str, int]

ROOT: TreeIndex = ()


# ---------------------------------------------------------------------------
# Index arithmetic.


def parse_index(text: str) -> TreeIndex:
    """Index from a digit string; the empty string is the root."""
    try:
        return tuple(int(c) for c in text)
    except ValueError as exc:
        raise TreeError(f"bad index string {text!r}") from exc


def format_index(idx: TreeIndex) -> str:
    return "".join(str(c) for c in idx)


def is_prefix(a: TreeIndex, b: TreeIndex) -> bool:
    """Proper prefix: a strictly below b."""
    return len(a) < len(b) and b[: len(a)] == a


def comparable(a: TreeIndex, b: TreeIndex) -> bool:
    return a == b or is_prefix(a, b) or is_prefix(b, a)


def meet(a: TreeIndex, b: TreeIndex) -> TreeIndex:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return a[:n]


def tree_qftp(indices: Sequence[TreeIndex]) -> bytes:
    """Canonical code of the tuple's type in the index-tree language.

    The code captures the meet-closure of the indices with its prefix
    order, its lexicographic order, its meet table, and the positions of
    the originals; node lengths never enter, so tuples at different levels
    with the same branching shape get equal codes.  Sequence comparison of
    tuples is exactly the lexicographic order (a proper prefix sorts
    first), which makes the sorted closure a canonical enumeration.
    """
    originals = [tuple(idx) for idx in indices]
    closure = set(originals)
    for a, b in itertools.combinations(sorted(closure), 2):
        closure.add(meet(a, b))
    ordered = sorted(closure)
    pos = {node: i for i, node in enumerate(ordered)}
    n = len(ordered)
    prefix_pairs = tuple(
        (i, j)
        for i in range(n)
        for j in range(n)
        if is_prefix(ordered[i], ordered[j])
    )
    meet_table = tuple(
        pos[meet(ordered[i], ordered[j])]
        for i in range(n)
        for j in range(i + 1, n)
    )
    doc = (
        tuple(pos[o] for o in originals),
        n,
        prefix_pairs,
        meet_table,
    )
    return repr(doc).encode("ascii")


# ---------------------------------------------------------------------------
# Labeled trees.


@dataclass(frozen=True)
class LabeledTree:
    """Host elements attached to finite indices, over a base set.

    `labels` maps indices (within `branching` and of length at most
    `depth`) to tuples of host element refs sharing one sort profile.
    Checkers that walk root-to-leaf paths require every index of length
    below `depth` to be labeled; the indiscernibility and based-on checks
    accept partial domains.
    """

    host: FinStructure
    branching: int
    depth: int
    labels: Mapping[TreeIndex, tuple[ElemRef, ...]]
    base: tuple[ElemRef, ...] = ()

    def __post_init__(self):
        if self.branching < 2:
            raise TreeError("branching must be at least 2")
        if self.depth < 1:
            raise TreeError("depth must be at least 1")
        norm: dict[TreeIndex, tuple[ElemRef, ...]] = {}
        profile: Optional[tuple[str, ...]] = None
        for idx, label in self.labels.items():
            idx = tuple(idx)
            if len(idx) > self.depth:
                raise TreeError(f"index {format_index(idx)} exceeds depth")
            if any(not 0 <= c < self.branching for c in idx):
                raise TreeError(
                    f"index {format_index(idx)} outside branching"
                )
            label = tuple((s, int(x)) for s, x in label)
            if profile is None:
                profile = tuple(s for s, _ in label)
            elif tuple(s for s, _ in label) != profile:
                raise TreeError("labels must share one sort profile")
            for s, x in label:
                if x not in self.host.elems(s):
                    raise TreeError(f"label element {s}:{x} not in host")
            norm[idx] = label
        if not norm:
            raise TreeError("a labeled tree needs at least one label")
        for s, x in self.base:
            if x not in self.host.elems(s):
                raise TreeError(f"base element {s}:{x} not in host")
        object.__setattr__(self, "labels", norm)
        object.__setattr__(self, "base", tuple(self.base))
        object.__setattr__(self, "profile", profile)

    def domain(self) -> tuple[TreeIndex, ...]:
        return tuple(sorted(self.labels))

    def label(self, idx: TreeIndex) -> tuple[ElemRef, ...]:
        got = self.labels.get(tuple(idx))
        if got is None:
            raise TreeError(f"no label at index {format_index(idx)}")
        return got


def _require_full(t: LabeledTree) -> None:
    for length in range(t.depth):
        for idx in itertools.product(range(t.branching), repeat=length):
            if idx not in t.labels:
                raise TreeError(
                    f"checker needs every node below depth labeled; "
                    f"missing {format_index(idx)!r}"
                )


@dataclass(frozen=True)
class WitnessReport:
    """Outcome of one checker run.

    A failing report carries a certificate with the offending indices and
    the realization counts that decided it, so callers can re-count.
    """

    passed: bool
    kind: str
    thresholds: Mapping[str, int]
    certificate: Optional[Mapping] = None


# ---------------------------------------------------------------------------
# Formula plumbing shared by the checkers.


def _resolve_x(phi: Formula, x: Union[Var, str]) -> Var:
    variables = free_vars(phi)
    if isinstance(x, str):
        matches = [v for v in variables if v.name == x]
        if not matches:
            raise SortError(f"no free variable named {x!r}")
        return matches[0]
    if x not in variables:
        raise SortError(f"{x.name!r} is not free in the formula")
    return x


def _param_vars(phi: Formula, x: Var) -> tuple[Var, ...]:
    return tuple(v for v in free_vars(phi) if v.name != x.name)


def _check_profile(params: Sequence[Var], tree: LabeledTree) -> None:
    want = tuple(v.sort for v in params)
    got = getattr(tree, "profile")
    if want != got:
        raise SortError(
            f"label profile {got} does not match parameter sorts {want}"
        )


class _SetCache:
    """Realization sets of one parametrized formula, keyed by label."""

    def __init__(self, host: FinStructure, phi: Formula, x: Var):
        self.host = host
        self.phi = phi
        self.x = x
        self.params = _param_vars(phi, x)
        self.cache: dict[tuple[ElemRef, ...], frozenset[int]] = {}

    def of(self, label: tuple[ElemRef, ...]) -> frozenset[int]:
        got = self.cache.get(label)
        if got is None:
            if len(label) != len(self.params):
                raise SortError(
                    f"label arity {len(label)} != parameter arity "
                    f"{len(self.params)}"
                )
            mapping = {}
            for v, (sort, ident) in zip(self.params, label):
                if v.sort != sort:
                    raise SortError(
                        f"label element sort {sort!r} does not match "
                        f"parameter {v.name}:{v.sort}"
                    )
                mapping[v.name] = Param(sort, ident)
            inst = substitute(self.phi, mapping)
            got = frozenset(realizations(self.host, inst, self.x))
            self.cache[label] = got
        return got


def _universe_set(host: FinStructure, x: Var) -> frozenset[int]:
    return frozenset(host.elems(x.sort))


def _q_set(
    host: FinStructure, q: Sequence[Formula], x: Var
) -> frozenset[int]:
    out = _universe_set(host, x)
    for part in q:
        extra = [v for v in free_vars(part) if v.name != x.name]
        if extra:
            names = ", ".join(v.name for v in extra)
            raise SortError(f"localizing formulas may only use x; got {names}")
        out &= frozenset(realizations(host, part, x))
    return out


# ---------------------------------------------------------------------------
# Checkers.


def check_strong_indiscernibility(
    t: LabeledTree, w: int, max_tuples: int = 200000
) -> WitnessReport:
    """Same index type implies same label type, for tuples up to width w.

    Tuples run over the labeled domain with repetition; within each
    index-type class the quantifier-free type of the concatenated labels
    over the tree's base must be constant.
    """
    if w < 1:
        raise TreeError("width must be at least 1")
    dom = t.domain()
    total = sum(len(dom) ** k for k in range(1, w + 1))
    if total > max_tuples:
        raise BudgetError(
            f"{total} index tuples exceed the cap of {max_tuples}"
        )
    seen: dict[bytes, tuple[tuple[TreeIndex, ...], bytes]] = {}
    for k in range(1, w + 1):
        for combo in itertools.product(dom, repeat=k):
            code = tree_qftp(combo)
            refs = [r for idx in combo for r in t.labels[idx]]
            fp = qftp_ordered(t.host, refs, t.base)
            prior = seen.get(code)
            if prior is None:
                seen[code] = (combo, fp)
            elif prior[1] != fp:
                return WitnessReport(
                    passed=False,
                    kind="strong-indiscernibility",
                    thresholds={"width": w},
                    certificate={
                        "left": [format_index(i) for i in prior[0]],
                        "right": [format_index(i) for i in combo],
                    },
                )
    return WitnessReport(
        passed=True, kind="strong-indiscernibility", thresholds={"width": w}
    )


def check_sop2_witness(
    t: LabeledTree,
    phi: Formula,
    q: Sequence[Formula] = (),
    threshold: int = 1,
    x: Union[Var, str] = "x",
) -> WitnessReport:
    """Witness check on a binary tree: paths realized, forks jointly empty.

    Passes when every root-to-leaf conjunction of phi instances (restricted
    to the localizing set q) has at least `threshold` realizations and
    every prefix-incomparable label pair has none.
    """
    if threshold < 1:
        raise TreeError("threshold must be at least 1")
    if t.branching != 2:
        raise TreeError("this check expects a binary tree")
    _require_full(t)
    xv = _resolve_x(phi, x)
    sets = _SetCache(t.host, phi, xv)
    _check_profile(sets.params, t)
    localized = _q_set(t.host, q, xv)
    thresholds = {"t": threshold}

    for leaf in itertools.product(range(2), repeat=t.depth):
        running = localized
        for n in range(t.depth):
            running = running & sets.of(t.labels[leaf[:n]])
        if len(running) < threshold:
            return WitnessReport(
                passed=False,
                kind="sop2",
                thresholds=thresholds,
                certificate={
                    "condition": "path",
                    "leaf": format_index(leaf),
                    "count": len(running),
                },
            )
    dom = t.domain()
    for a, b in itertools.combinations(dom, 2):
        if comparable(a, b):
            continue
        joint = localized & sets.of(t.labels[a]) & sets.of(t.labels[b])
        if joint:
            return WitnessReport(
                passed=False,
                kind="sop2",
                thresholds=thresholds,
                certificate={
                    "condition": "incomparable-pair",
                    "pair": [format_index(a), format_index(b)],
                    "count": len(joint),
                },
            )
    return WitnessReport(passed=True, kind="sop2", thresholds=thresholds)


def check_ktp1_witness(
    t: LabeledTree,
    psi: Formula,
    k: int,
    threshold: int = 1,
    x: Union[Var, str] = "x",
    max_tuples: int = 500000,
) -> WitnessReport:
    """Width-b tree check: paths realized, k-wide antichains jointly empty."""
    if k < 2:
        raise TreeError("k must be at least 2")
    if threshold < 1:
        raise TreeError("threshold must be at least 1")
    _require_full(t)
    xv = _resolve_x(psi, x)
    sets = _SetCache(t.host, psi, xv)
    _check_profile(sets.params, t)
    universe = _universe_set(t.host, xv)
    thresholds = {"t": threshold, "k": k}

    if t.branching ** t.depth > max_tuples:
        raise BudgetError("too many leaf paths for the configured cap")
    for leaf in itertools.product(range(t.branching), repeat=t.depth):
        running = universe
        for n in range(t.depth):
            running = running & sets.of(t.labels[leaf[:n]])
        if len(running) < threshold:
            return WitnessReport(
                passed=False,
                kind="ktp1",
                thresholds=thresholds,
                certificate={
                    "condition": "path",
                    "leaf": format_index(leaf),
                    "count": len(running),
                },
            )
    dom = t.domain()
    examined = 0
    for combo in itertools.combinations(dom, k):
        examined += 1
        if examined > max_tuples:
            raise BudgetError("too many antichain candidates for the cap")
        if any(
            comparable(a, b) for a, b in itertools.combinations(combo, 2)
        ):
            continue
        joint = universe
        for idx in combo:
            joint = joint & sets.of(t.labels[idx])
        if joint:
            return WitnessReport(
                passed=False,
                kind="ktp1",
                thresholds=thresholds,
                certificate={
                    "condition": "antichain",
                    "indices": [format_index(i) for i in combo],
                    "count": len(joint),
                },
            )
    return WitnessReport(passed=True, kind="ktp1", thresholds=thresholds)


def check_based_on(
    tb: LabeledTree,
    ta: LabeledTree,
    w: int,
    max_tuples: int = 200000,
) -> WitnessReport:
    """Every width-<=w type realized in tb also occurs somewhere in ta."""
    if w < 1:
        raise TreeError("width must be at least 1")
    if tb.host != ta.host:
        raise TreeError("both trees must live in the same host")
    if getattr(tb, "profile") != getattr(ta, "profile"):
        raise TreeError("both trees must use the same label profile")
    if tb.base != ta.base:
        raise TreeError("both trees must share the base")
    dom_a = ta.domain()
    dom_b = tb.domain()
    total = sum(
        len(dom_a) ** k + len(dom_b) ** k for k in range(1, w + 1)
    )
    if total > max_tuples:
        raise BudgetError(
            f"{total} index tuples exceed the cap of {max_tuples}"
        )
    available: set[tuple[bytes, bytes]] = set()
    for k in range(1, w + 1):
        for combo in itertools.product(dom_a, repeat=k):
            refs = [r for idx in combo for r in ta.labels[idx]]
            available.add(
                (tree_qftp(combo), qftp_ordered(ta.host, refs, ta.base))
            )
    for k in range(1, w + 1):
        for combo in itertools.product(dom_b, repeat=k):
            refs = [r for idx in combo for r in tb.labels[idx]]
            key = (tree_qftp(combo), qftp_ordered(tb.host, refs, tb.base))
            if key not in available:
                return WitnessReport(
                    passed=False,
                    kind="based-on",
                    thresholds={"width": w},
                    certificate={
                        "tuple": [format_index(i) for i in combo],
                    },
                )
    return WitnessReport(
        passed=True, kind="based-on", thresholds={"width": w}
    )


# ---------------------------------------------------------------------------
# Normalization transforms.


def _fresh_copies(
    phi: Formula, x: Var, count: int, prefix: str
) -> tuple[list[Formula], list[list[str]]]:
    """Renamed copies of phi's parameters: copy i gets {prefix}{i:02d}_name.

    Returns the copies and, per copy, the new names in the original sorted
    parameter order.  Collisions with existing variable names are rejected.
    """
    params = _param_vars(phi, x)
    taken = {v.name for v in free_vars(phi)}
    copies = []
    names = []
    for i in range(count):
        mapping = {v.name: f"{prefix}{i:02d}_{v.name}" for v in params}
        clash = set(mapping.values()) & taken
        if clash:
            raise TreeError(
                f"renamed parameters collide with {sorted(clash)}"
            )
        copies.append(rename_free(phi, mapping))
        names.append([mapping[v.name] for v in params])
    return copies, names


def _layout(
    psi: Formula, x: Var, values: Mapping[str, ElemRef]
) -> tuple[ElemRef, ...]:
    """Label tuple for psi: values arranged in sorted parameter order."""
    out = []
    for v in _param_vars(psi, x):
        if v.name not in values:
            raise TreeError(f"no value supplied for parameter {v.name!r}")
        out.append(values[v.name])
    return tuple(out)


def power_reindex(
    t: LabeledTree, phi: Formula, k: int, x: Union[Var, str] = "x"
) -> tuple[LabeledTree, Formula]:
    """Compress K-blocks of repeated letters into one node.

    The node e0..e(m-1) of the new tree carries, for the K parameter
    copies, the old labels along the last block: the repeated-letter
    prefix of length (m-1)K extended by 1..K copies of the final letter.
    The root repeats the old root K times.  New depth is depth // K.
    """
    if k < 1:
        raise TreeError("block size must be at least 1")
    if k == 1:
        return t, phi
    new_depth = t.depth // k
    if new_depth < 1:
        raise TreeError("depth too small for this block size")
    xv = _resolve_x(phi, x)
    params = _param_vars(phi, xv)
    _check_profile(params, t)
    copies, names = _fresh_copies(phi, xv, k, "p")
    psi = conjunction(copies)
    new_labels: dict[TreeIndex, tuple[ElemRef, ...]] = {}
    for length in range(new_depth):
        for idx in itertools.product(range(t.branching), repeat=length):
            values: dict[str, ElemRef] = {}
            for i in range(k):
                if length == 0:
                    src = ROOT
                else:
                    head = tuple(
                        c for bit in idx[:-1] for c in (bit,) * k
                    )
                    src = head + (idx[-1],) * (i + 1)
                label = t.labels.get(src)
                if label is None:
                    raise TreeError(
                        f"missing source label at {format_index(src)!r}"
                    )
                for name, ref in zip(names[i], label):
                    values[name] = ref
            new_labels[idx] = _layout(psi, xv, values)
    out = LabeledTree(
        host=t.host,
        branching=t.branching,
        depth=new_depth,
        labels=new_labels,
        base=t.base,
    )
    return out, psi


def _side_indices(k: int) -> list[TreeIndex]:
    return [(0,) * i + (1,) for i in range(k)]


def prune_exceptional(
    t: LabeledTree, phi: Formula, k: int, x: Union[Var, str] = "x"
) -> tuple[LabeledTree, Formula]:
    """Subtract the stabilized side-branch set from every instance.

    The new formula conjoins phi with the negated K-fold conjunction over
    the side labels at 1, 01, .., 0^(K-1)1; the new node at eta carries the
    old label at 0^K followed by eta, plus those fixed side labels.  K = 0
    is the identity.
    """
    if k < 0:
        raise TreeError("side count must be non-negative")
    if k == 0:
        return t, phi
    new_depth = t.depth - k
    if new_depth < 1:
        raise TreeError("depth too small for this side count")
    xv = _resolve_x(phi, x)
    params = _param_vars(phi, xv)
    _check_profile(params, t)
    copies, names = _fresh_copies(phi, xv, k, "q")
    side_labels = [t.label(s) for s in _side_indices(k)]
    new_phi = conjunction([phi, Not(conjunction(copies))])
    shift = (0,) * k
    new_labels: dict[TreeIndex, tuple[ElemRef, ...]] = {}
    for length in range(new_depth):
        for idx in itertools.product(range(t.branching), repeat=length):
            src = t.labels.get(shift + idx)
            if src is None:
                raise TreeError(
                    f"missing source label at "
                    f"{format_index(shift + idx)!r}"
                )
            values = {v.name: r for v, r in zip(params, src)}
            for i in range(k):
                for name, ref in zip(names[i], side_labels[i]):
                    values[name] = ref
            new_labels[idx] = _layout(new_phi, xv, values)
    out = LabeledTree(
        host=t.host,
        branching=t.branching,
        depth=new_depth,
        labels=new_labels,
        base=t.base,
    )
    return out, new_phi


def _shift_past_sides(
    t: LabeledTree, phi: Formula, n: int, x: Var
) -> tuple[LabeledTree, Formula]:
    """Conjoin n side instances positively and root the tree at 0^n."""
    if n == 0:
        return t, phi
    new_depth = t.depth - n
    if new_depth < 1:
        raise TreeError("depth too small for this shift")
    params = _param_vars(phi, x)
    copies, names = _fresh_copies(phi, x, n, "s")
    side_labels = [t.label(s) for s in _side_indices(n)]
    new_phi = conjunction([phi] + copies)
    shift = (0,) * n
    new_labels: dict[TreeIndex, tuple[ElemRef, ...]] = {}
    for length in range(new_depth):
        for idx in itertools.product(range(t.branching), repeat=length):
            src = t.label(shift + idx)
            values = {v.name: r for v, r in zip(params, src)}
            for i in range(n):
                for name, ref in zip(names[i], side_labels[i]):
                    values[name] = ref
            new_labels[idx] = _layout(new_phi, x, values)
    out = LabeledTree(
        host=t.host,
        branching=t.branching,
        depth=new_depth,
        labels=new_labels,
        base=t.base,
    )
    return out, new_phi


@dataclass(frozen=True)
class ExtractReport:
    """Result of the witness-normalization pipeline.

    `power_constant`, `prune_constant` and `shift` are the three constants
    the pipeline discovered; on failure `failed_stage` names the stage and
    `note` says what to change (usually the depth).
    """

    ok: bool
    tree: Optional[LabeledTree] = None
    formula: Optional[Formula] = None
    power_constant: Optional[int] = None
    prune_constant: Optional[int] = None
    shift: Optional[int] = None
    check: Optional[WitnessReport] = None
    failed_stage: Optional[str] = None
    note: str = ""


def _zeros(n: int) -> TreeIndex:
    return (0,) * n


def extract_sop2(
    t: LabeledTree,
    phi: Formula,
    threshold: int = 1,
    x: Union[Var, str] = "x",
    finite_bound: int = 8,
) -> ExtractReport:
    """Normalize a candidate tree into a verified witness, or say why not.

    Stages: path counts at least `threshold` everywhere; the two-fork set
    at (0),(1) finite (at most finite_bound); block-stabilization constant
    K found and applied; side-branch stabilization constant K' found and
    pruned; maximal consistent shift n located; the final pair re-checked
    with check_sop2_witness.
    """
    if t.branching != 2:
        raise TreeError("the normalization pipeline expects a binary tree")
    if t.depth < 2:
        raise TreeError("depth too small to test stabilization")
    _require_full(t)
    xv = _resolve_x(phi, x)
    sets = _SetCache(t.host, phi, xv)
    _check_profile(sets.params, t)
    universe = _universe_set(t.host, xv)

    def path_floor(tree: LabeledTree, cache: _SetCache) -> int:
        floor = None
        for leaf in itertools.product(range(2), repeat=tree.depth):
            running = universe
            for n in range(tree.depth):
                running = running & cache.of(tree.labels[leaf[:n]])
            if floor is None or len(running) < floor:
                floor = len(running)
        return floor if floor is not None else 0

    floor = path_floor(t, sets)
    if floor < threshold:
        return ExtractReport(
            ok=False,
            failed_stage="path-counts",
            note=f"a leaf path has only {floor} realizations",
        )

    fork = sets.of(t.labels[(0,)]) & sets.of(t.labels[(1,)])
    if len(fork) > finite_bound:
        return ExtractReport(
            ok=False,
            failed_stage="pairwise-finiteness",
            note=f"|A(0,1)| = {len(fork)} exceeds the bound {finite_bound}",
        )

    def fork_counts(tree: LabeledTree, cache: _SetCache) -> dict:
        counts = {}
        for n in range(1, tree.depth):
            for m in range(1, tree.depth):
                left = cache.of(tree.labels[_zeros(n)])
                right = cache.of(tree.labels[(1,) * m])
                counts[(n, m)] = len(left & right)
        return counts

    counts = fork_counts(t, sets)
    top = t.depth - 1
    power_k = None
    for k in range(1, top + 1):
        tail = {
            counts[(n, m)]
            for n in range(k, top + 1)
            for m in range(k, top + 1)
        }
        if len(tail) == 1:
            power_k = k
            break
    if power_k is None:
        return ExtractReport(
            ok=False, failed_stage="power-stabilization", note="increase depth"
        )

    t1, psi1 = power_reindex(t, phi, power_k, xv)
    sets1 = _SetCache(t1.host, psi1, xv)
    if t1.depth >= 2:
        verify = set(fork_counts(t1, sets1).values())
        if len(verify) != 1:
            return ExtractReport(
                ok=False,
                failed_stage="power-verify",
                note="increase depth",
                power_constant=power_k,
            )

    # decreasing side-branch counts c_j = |A({1, 01, .., 0^(j-1)1})|
    side_top = t1.depth - 1
    if side_top < 2:
        return ExtractReport(
            ok=False,
            failed_stage="prune-stabilization",
            note="increase depth",
            power_constant=power_k,
        )
    running = universe
    c = [len(running)]
    for j in range(side_top):
        running = running & sets1.of(t1.labels[_zeros(j) + (1,)])
        c.append(len(running))
    if c[side_top] == 0:
        prune_k = 0
    else:
        prune_k = None
        for j in range(1, side_top):
            if all(c[i] == c[side_top] for i in range(j, side_top + 1)):
                prune_k = j
                break
        if prune_k is None:
            return ExtractReport(
                ok=False,
                failed_stage="prune-stabilization",
                note="increase depth",
                power_constant=power_k,
            )

    t2, phi2 = prune_exceptional(t1, psi1, prune_k, xv)
    sets2 = _SetCache(t2.host, phi2, xv)
    leftover = universe
    for j in range(t2.depth - 1):
        leftover = leftover & sets2.of(t2.labels[_zeros(j) + (1,)])
    if t2.depth >= 2 and leftover:
        return ExtractReport(
            ok=False,
            failed_stage="prune-verify",
            note="increase depth",
            power_constant=power_k,
            prune_constant=prune_k,
        )

    shift_n = None
    for n in range(t2.depth - 1, -1, -1):
        joint = universe
        for i in range(n):
            joint = joint & sets2.of(t2.labels[_zeros(i) + (1,)])
        for j in range(n, t2.depth):
            joint = joint & sets2.of(t2.labels[_zeros(j)])
        if joint:
            shift_n = n
            break
    if shift_n is None:
        return ExtractReport(
            ok=False,
            failed_stage="shift",
            note="every shifted path is empty",
            power_constant=power_k,
            prune_constant=prune_k,
        )

    t3, phi3 = _shift_past_sides(t2, phi2, shift_n, xv)
    report = check_sop2_witness(t3, phi3, (), threshold, xv)
    if not report.passed:
        return ExtractReport(
            ok=False,
            failed_stage="final-check",
            note="normalized tree failed the witness check",
            power_constant=power_k,
            prune_constant=prune_k,
            shift=shift_n,
            check=report,
        )
    return ExtractReport(
        ok=True,
        tree=t3,
        formula=phi3,
        power_constant=power_k,
        prune_constant=prune_k,
        shift=shift_n,
        check=report,
    )


# ---------------------------------------------------------------------------
# Witness search.


@dataclass(frozen=True)
class SearchResult:
    tree: LabeledTree
    formula: Formula
    template_index: int
    conj_width: int
    check: WitnessReport


def search_sop2(
    host: FinStructure,
    templates: Sequence[Formula],
    depth: int,
    branching: int = 2,
    threshold: int = 1,
    conj_width: int = 1,
    x: Union[Var, str] = "x",
    budget: int = 500000,
) -> Optional[SearchResult]:
    """Backtracking search for a witness labeling over the index tree.

    Templates are tried in order, each widened into 1..conj_width-fold
    conjunctions over renamed parameter copies.  Nodes are labeled in
    breadth-first order with candidate tuples in ascending element order;
    a partial labeling is pruned when a running path intersection drops
    below the threshold or two incomparable nodes overlap.  The first
    complete labeling (in that fixed order) that passes the final check
    wins; exhausting the budget returns None.
    """
    if depth < 1:
        raise TreeError("depth must be at least 1")
    if branching < 2:
        raise TreeError("branching must be at least 2")
    nodes: list[TreeIndex] = []
    for length in range(depth):
        nodes.extend(
            itertools.product(range(branching), repeat=length)
        )
    parent_pos = {}
    incomparable_pos: dict[int, list[int]] = {}
    for i, idx in enumerate(nodes):
        parent_pos[i] = nodes.index(idx[:-1]) if idx else None
        incomparable_pos[i] = [
            j for j in range(i) if not comparable(nodes[j], idx)
        ]

    spent = 0

    def attempt(psi: Formula, xv: Var) -> Optional[dict[TreeIndex, tuple]]:
        nonlocal spent
        params = _param_vars(psi, xv)
        pools = [host.elems(v.sort) for v in params]
        if any(not pool for pool in pools):
            return None
        count = 1
        for pool in pools:
            count *= len(pool)
        if count > budget:
            raise BudgetError(
                f"{count} candidate labels exceed the budget {budget}"
            )
        sets = _SetCache(host, psi, xv)
        candidates = []
        for combo in itertools.product(*pools):
            label = tuple(
                (v.sort, value) for v, value in zip(params, combo)
            )
            if len(sets.of(label)) >= threshold:
                candidates.append(label)
        chosen: list[Optional[tuple]] = [None] * len(nodes)
        paths: list[frozenset[int]] = [frozenset()] * len(nodes)
        universe = _universe_set(host, xv)

        def walk(i: int) -> bool:
            nonlocal spent
            if i == len(nodes):
                return True
            above = (
                universe
                if parent_pos[i] is None
                else paths[parent_pos[i]]
            )
            for label in candidates:
                spent += 1
                if spent > budget:
                    return False
                here = sets.of(label)
                running = above & here
                if len(running) < threshold:
                    continue
                if any(
                    sets.of(chosen[j]) & here
                    for j in incomparable_pos[i]
                ):
                    continue
                chosen[i] = label
                paths[i] = running
                if walk(i + 1):
                    return True
            chosen[i] = None
            return False

        if walk(0):
            return {idx: chosen[i] for i, idx in enumerate(nodes)}
        return None

    for ti, template in enumerate(templates):
        xv = _resolve_x(template, x)
        for width in range(1, conj_width + 1):
            if width == 1:
                psi = template
            else:
                copies, _ = _fresh_copies(template, xv, width, "w")
                psi = conjunction(copies)
            found = attempt(psi, xv)
            if spent > budget:
                return None
            if found is None:
                continue
            tree = LabeledTree(
                host=host,
                branching=branching,
                depth=depth,
                labels=found,
            )
            if branching == 2:
                report = check_sop2_witness(
                    tree, psi, (), threshold, xv
                )
            else:
                report = check_ktp1_witness(
                    tree, psi, 2, threshold, xv
                )
            if report.passed:
                return SearchResult(
                    tree=tree,
                    formula=psi,
                    template_index=ti,
                    conj_width=width,
                    check=report,
                )
    return None


# ---------------------------------------------------------------------------
# Fixtures.


_NODE_SIG = make_signature(
    ("V",), [("R", ("V", "V"), ("symmetric", "irreflexive"))]
)


def _heap_id(idx: TreeIndex, branching: int) -> int:
    base = 0
    for length in range(len(idx)):
        base += branching ** length
    offset = 0
    for c in idx:
        offset = offset * branching + c
    return base + offset


def tree_code_structure(depth: int, junk: int = 0) -> LabeledTree:
    """Canonical witness host: one vertex per index of length <= depth.

    Leaves (full-length indices) are joined to each of their proper
    prefixes, so the realizations of a root-to-leaf path conjunction of
    R(x, node) are exactly the leaves extending the path's last node, and
    incomparable nodes share no leaf.  `junk` extra vertices adjacent to
    every non-leaf vertex land in every instance uniformly; the canonical
    labeling maps each index below the leaf level to its own vertex.
    """
    if depth < 1:
        raise TreeError("depth must be at least 1")
    if junk < 0:
        raise TreeError("junk count must be non-negative")
    ids = {}
    for length in range(depth + 1):
        for idx in itertools.product(range(2), repeat=length):
            ids[idx] = _heap_id(idx, 2)
    junk_start = max(ids.values()) + 1
    rows = []
    for leaf in itertools.product(range(2), repeat=depth):
        for n in range(depth):
            rows.append((ids[leaf], ids[leaf[:n]]))
    for j in range(junk):
        for idx, ident in ids.items():
            if len(idx) < depth:
                rows.append((junk_start + j, ident))
    host = FinStructure.build(
        _NODE_SIG,
        {"V": list(ids.values()) + [junk_start + j for j in range(junk)]},
        {"R": rows},
    )
    labels = {
        idx: (("V", ident),)
        for idx, ident in ids.items()
        if len(idx) < depth
    }
    return LabeledTree(host=host, branching=2, depth=depth, labels=labels)


def pairwise_consistent_triple_empty(
    depth: int, branching: int = 3
) -> LabeledTree:
    """Fixture whose antichains of size two are realized but never three.

    Besides one vertex per index below the leaf level, every root-to-leaf
    path gets a dedicated realizer adjacent to all its nodes, and every
    incomparable node pair gets a realizer adjacent to just those two.
    The node labeling then passes the k=3 antichain condition and fails
    k=2 with that pair realizer as the certificate.
    """
    if depth < 1:
        raise TreeError("depth must be at least 1")
    if branching < 2:
        raise TreeError("branching must be at least 2")
    ids = {}
    for length in range(depth):
        for idx in itertools.product(range(branching), repeat=length):
            ids[idx] = _heap_id(idx, branching)
    nxt = max(ids.values()) + 1
    rows = []
    for leaf in itertools.product(range(branching), repeat=depth):
        realizer = nxt
        nxt += 1
        for n in range(depth):
            rows.append((realizer, ids[leaf[:n]]))
    for a, b in itertools.combinations(sorted(ids), 2):
        if comparable(a, b):
            continue
        realizer = nxt
        nxt += 1
        rows.append((realizer, ids[a]))
        rows.append((realizer, ids[b]))
    host = FinStructure.build(
        _NODE_SIG, {"V": list(range(nxt))}, {"R": rows}
    )
    labels = {idx: (("V", ident),) for idx, ident in ids.items()}
    return LabeledTree(
        host=host, branching=branching, depth=depth, labels=labels
    )


# ---------------------------------------------------------------------------
# External JSON documents.


def labeled_tree_to_doc(t: LabeledTree) -> dict:
    """JSON document with the host inlined; single-sort refs stay plain."""
    single = len(t.host.sig.sorts) == 1
    labels = {}
    for idx in t.domain():
        label = t.labels[idx]
        labels[format_index(idx)] = [
            x if single else [s, x] for s, x in label
        ]
    return {
        "branching": t.branching,
        "depth": t.depth,
        "profile": list(getattr(t, "profile")),
        "labels": labels,
        "base": [x if single else [s, x] for s, x in t.base],
        "host": structure_to_doc(t.host),
    }


def labeled_tree_from_doc(
    doc: Mapping, host: Optional[FinStructure] = None
) -> LabeledTree:
    try:
        if host is None:
            host = structure_from_doc(doc["host"])
        branching = int(doc["branching"])
        depth = int(doc["depth"])
        profile = doc.get("profile")
        if profile is None:
            profile = [host.sig.sorts[0]] * max(
                (len(v) for v in doc["labels"].values()), default=0
            )

        def ref(entry, position):
            if isinstance(entry, (list, tuple)):
                return (entry[0], int(entry[1]))
            return (profile[position], int(entry))

        labels = {}
        for key, values in doc["labels"].items():
            labels[parse_index(key)] = tuple(
                ref(v, i) for i, v in enumerate(values)
            )
        base = tuple(
            ref(v, i) if isinstance(v, (list, tuple)) else
            (host.sig.sorts[0], int(v))
            for i, v in enumerate(doc.get("base", []))
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DocumentError(f"malformed labeled-tree document: {exc}") from exc
    return LabeledTree(
        host=host,
        branching=branching,
        depth=depth,
        labels=labels,
        base=base,
    )
