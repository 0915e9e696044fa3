"""First-order formulas over a signature: AST, text syntax, evaluation.

Concrete syntax
    variables      x, y, node  (optionally annotated: x:V)
    parameters     #V:3        (element 3 of sort V)
    atoms          R(x, y)     x = y      H(x)
    connectives    !a   a & b   a | b   a -> b      (! binds tightest)
    quantifiers    exists v:s. body      forall v:s. body
Quantifier bodies extend maximally to the right; parentheses group.

`H` is a reserved one-place predicate evaluated against caller-supplied
per-sort element sets, not against the signature, unless the signature
itself declares a relation named H.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

from .errors import EvaluationError, ParseError, SignatureError, SortError
from .structures import FinStructure, Signature, dumps_canonical


@dataclass(frozen=True)
class Var:
    name: str
    sort: Optional[str] = None


@dataclass(frozen=True)
class Param:
    sort: str
    ident: int


Term = Union[Var, Param]


@dataclass(frozen=True)
class Rel:
    name: str
    args: tuple[Term, ...]


@dataclass(frozen=True)
class Eq:
    left: Term
    right: Term


@dataclass(frozen=True)
class HAtom:
    arg: Term


@dataclass(frozen=True)
class Not:
    sub: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Exists:
    var: Var
    body: "Formula"


@dataclass(frozen=True)
class Forall:
    var: Var
    body: "Formula"


Formula = Union[Rel, Eq, HAtom, Not, And, Or, Implies, Exists, Forall]

_BINARY = {And: " & ", Or: " | ", Implies: " -> "}


def conjunction(parts: Sequence[Formula]) -> Formula:
    """Left-associated conjunction of a nonempty formula list."""
    if not parts:
        raise ValueError("conjunction of nothing")
    out = parts[0]
    for p in parts[1:]:
        out = And(out, p)
    return out


def free_vars(phi: Formula) -> tuple[Var, ...]:
    """Free variables sorted by name; sorts must already be resolved."""
    out: dict[str, str] = {}

    def walk(node: Formula, bound: frozenset[str]) -> None:
        if isinstance(node, Rel):
            for a in node.args:
                if isinstance(a, Var) and a.name not in bound:
                    out[a.name] = a.sort
        elif isinstance(node, Eq):
            for a in (node.left, node.right):
                if isinstance(a, Var) and a.name not in bound:
                    out[a.name] = a.sort
        elif isinstance(node, HAtom):
            if isinstance(node.arg, Var) and node.arg.name not in bound:
                out[node.arg.name] = node.arg.sort
        elif isinstance(node, Not):
            walk(node.sub, bound)
        elif isinstance(node, (And, Or, Implies)):
            walk(node.left, bound)
            walk(node.right, bound)
        elif isinstance(node, (Exists, Forall)):
            walk(node.body, bound | {node.var.name})
        else:
            raise TypeError(f"not a formula node: {node!r}")

    walk(phi, frozenset())
    return tuple(Var(n, out[n]) for n in sorted(out))


def mentions_h(phi: Formula) -> bool:
    if isinstance(phi, HAtom):
        return True
    if isinstance(phi, (Rel, Eq)):
        return False
    if isinstance(phi, Not):
        return mentions_h(phi.sub)
    if isinstance(phi, (And, Or, Implies)):
        return mentions_h(phi.left) or mentions_h(phi.right)
    return mentions_h(phi.body)


# ---------------------------------------------------------------------------
# Parsing.

_TOKEN_RE = re.compile(
    r"\s*(?:(->)|([()=.,:#!&|])|([A-Za-z_][A-Za-z0-9_']*)|([0-9]+))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {text[at]!r}", position=at)
        arrow, punct, ident, num = m.groups()
        if arrow:
            out.append(("->", arrow, m.start(1)))
        elif punct:
            out.append((punct, punct, m.start(2)))
        elif ident:
            kind = ident if ident in ("exists", "forall") else "ident"
            out.append((kind, ident, m.start(3)))
        elif num:
            out.append(("num", num, m.start(4)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self, kind: str) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        if tok[0] != kind:
            raise ParseError(
                f"expected {kind!r}, found {tok[1] or 'end of input'!r}",
                position=tok[2],
            )
        self.i += 1
        return tok

    def formula(self) -> Formula:
        return self.implies()

    def implies(self) -> Formula:
        left = self.disjunct()
        if self.peek()[0] == "->":
            self.take("->")
            return Implies(left, self.implies())
        return left

    def disjunct(self) -> Formula:
        out = self.conjunct()
        while self.peek()[0] == "|":
            self.take("|")
            out = Or(out, self.conjunct())
        return out

    def conjunct(self) -> Formula:
        out = self.unary()
        while self.peek()[0] == "&":
            self.take("&")
            out = And(out, self.unary())
        return out

    def unary(self) -> Formula:
        kind, _, _ = self.peek()
        if kind == "!":
            self.take("!")
            return Not(self.unary())
        if kind in ("exists", "forall"):
            return self.quantifier()
        return self.atom()

    def quantifier(self) -> Formula:
        kind, _, _ = self.peek()
        self.take(kind)
        name = self.take("ident")[1]
        self.take(":")
        sort = self.take("ident")[1]
        self.take(".")
        body = self.formula()
        var = Var(name, sort)
        return Exists(var, body) if kind == "exists" else Forall(var, body)

    def atom(self) -> Formula:
        kind, value, at = self.peek()
        if kind == "(":
            self.take("(")
            inner = self.formula()
            self.take(")")
            return inner
        first = self.term()
        if isinstance(first, Var) and self.peek()[0] == "(":
            if first.sort is not None:
                raise ParseError(
                    "relation names take no sort annotation", position=at
                )
            self.take("(")
            args = [self.term()]
            while self.peek()[0] == ",":
                self.take(",")
                args.append(self.term())
            self.take(")")
            return Rel(first.name, tuple(args))
        if self.peek()[0] == "=":
            self.take("=")
            return Eq(first, self.term())
        raise ParseError(
            f"expected an atom near {value or 'end of input'!r}", position=at
        )

    def term(self) -> Term:
        kind, value, at = self.peek()
        if kind == "#":
            self.take("#")
            sort = self.take("ident")[1]
            self.take(":")
            num = self.take("num")[1]
            return Param(sort, int(num))
        if kind != "ident":
            raise ParseError(
                f"expected a term, found {value or 'end of input'!r}",
                position=at,
            )
        self.take("ident")
        if self.peek()[0] == ":" and self.tokens[self.i + 1][0] == "ident":
            self.take(":")
            sort = self.take("ident")[1]
            return Var(value, sort)
        return Var(value, None)


def _raw_parse(text: str) -> Formula:
    p = _Parser(text)
    out = p.formula()
    kind, value, at = p.peek()
    if kind != "end":
        raise ParseError(f"trailing input {value!r}", position=at)
    return out


# ---------------------------------------------------------------------------
# Sort resolution and well-formedness.


class _Sorter:
    """Union-find over free variable names with sort assignments."""

    def __init__(self, sig: Signature):
        self.sig = sig
        self.parent: dict[str, str] = {}
        self.sort: dict[str, Optional[str]] = {}

    def root(self, name: str) -> str:
        self.parent.setdefault(name, name)
        self.sort.setdefault(name, None)
        while self.parent[name] != name:
            self.parent[name] = self.parent[self.parent[name]]
            name = self.parent[name]
        return name

    def assign(self, name: str, sort: str, where: str) -> None:
        if sort not in self.sig.sorts:
            raise SortError(f"unknown sort {sort!r} in {where}")
        r = self.root(name)
        if self.sort[r] is None:
            self.sort[r] = sort
        elif self.sort[r] != sort:
            raise SortError(
                f"variable {name!r} used at sorts "
                f"{self.sort[r]!r} and {sort!r} in {where}"
            )

    def union(self, a: str, b: str, where: str) -> None:
        ra, rb = self.root(a), self.root(b)
        if ra == rb:
            return
        sa, sb = self.sort[ra], self.sort[rb]
        if sa and sb and sa != sb:
            raise SortError(
                f"variables {a!r}:{sa} and {b!r}:{sb} equated in {where}"
            )
        self.parent[ra] = rb
        self.sort[rb] = sb or sa

    def resolved(self, name: str) -> Optional[str]:
        return self.sort[self.root(name)]


def _atom_text(node: Formula) -> str:
    def term(t: Term) -> str:
        if isinstance(t, Param):
            return f"#{t.sort}:{t.ident}"
        return t.name if t.sort is None else f"{t.name}:{t.sort}"

    if isinstance(node, Rel):
        return f"{node.name}({', '.join(term(a) for a in node.args)})"
    if isinstance(node, Eq):
        return f"{term(node.left)} = {term(node.right)}"
    if isinstance(node, HAtom):
        return f"H({term(node.arg)})"
    return repr(node)


def _adopt_h(phi: Formula, sig: Signature) -> Formula:
    """Rewrite H(...) atoms into HAtom unless the signature declares H."""
    if sig.has_relation("H"):
        return phi

    def walk(node: Formula) -> Formula:
        if isinstance(node, Rel):
            if node.name == "H":
                if len(node.args) != 1:
                    raise SortError(
                        f"H takes one argument, got {_atom_text(node)}"
                    )
                return HAtom(node.args[0])
            return node
        if isinstance(node, (Eq, HAtom)):
            return node
        if isinstance(node, Not):
            return Not(walk(node.sub))
        if isinstance(node, (And, Or, Implies)):
            return type(node)(walk(node.left), walk(node.right))
        if isinstance(node, (Exists, Forall)):
            if node.var.name == "H":
                raise SortError("H is reserved and cannot be a variable")
            return type(node)(node.var, walk(node.body))
        raise SortError(f"not a formula node: {node!r}")

    return walk(phi)


def check_formula(phi: Formula, sig: Signature) -> Formula:
    """Validate against sig and return a copy with every sort filled in.

    Free variable sorts are inferred from relation positions, equalities,
    and explicit annotations; a lone unconstrained variable defaults to the
    signature's sort only when there is exactly one.  Quantifier shadowing
    and reuse of a bound name as a free name are rejected.
    """
    phi = _adopt_h(phi, sig)
    sorter = _Sorter(sig)
    binders: list[str] = []
    free_names: set[str] = set()

    def scan_term(t: Term, expected: Optional[str], bound: dict[str, str],
                  where: str) -> None:
        if isinstance(t, Param):
            if t.sort not in sig.sorts:
                raise SortError(f"unknown sort {t.sort!r} in {where}")
            if expected and t.sort != expected:
                raise SortError(
                    f"parameter #{t.sort}:{t.ident} where sort "
                    f"{expected!r} is needed in {where}"
                )
            return
        if t.name in bound:
            declared = bound[t.name]
            if t.sort and t.sort != declared:
                raise SortError(
                    f"bound variable {t.name!r} annotated {t.sort!r} "
                    f"but declared {declared!r} in {where}"
                )
            if expected and declared != expected:
                raise SortError(
                    f"bound variable {t.name!r}:{declared} where sort "
                    f"{expected!r} is needed in {where}"
                )
            return
        free_names.add(t.name)
        if t.sort:
            sorter.assign(t.name, t.sort, where)
        if expected:
            sorter.assign(t.name, expected, where)

    def scan(node: Formula, bound: dict[str, str]) -> None:
        if isinstance(node, Rel):
            where = _atom_text(node)
            try:
                decl = sig.relation(node.name)
            except SignatureError:
                raise SortError(
                    f"unknown relation {node.name!r} in {where}"
                ) from None
            if len(node.args) != decl.arity:
                raise SortError(
                    f"arity mismatch: {decl.name} takes {decl.arity} "
                    f"arguments in {where}"
                )
            for arg, sort in zip(node.args, decl.profile):
                scan_term(arg, sort, bound, where)
        elif isinstance(node, HAtom):
            scan_term(node.arg, None, bound, _atom_text(node))
        elif isinstance(node, Eq):
            where = _atom_text(node)
            scan_term(node.left, None, bound, where)
            scan_term(node.right, None, bound, where)
            l, r = node.left, node.right
            if isinstance(l, Param) and isinstance(r, Param):
                if l.sort != r.sort:
                    raise SortError(f"sort mismatch in {where}")
            elif isinstance(l, Param) or isinstance(r, Param):
                p = l if isinstance(l, Param) else r
                v = r if isinstance(l, Param) else l
                if v.name in bound:
                    if bound[v.name] != p.sort:
                        raise SortError(f"sort mismatch in {where}")
                else:
                    sorter.assign(v.name, p.sort, where)
            else:
                ls = bound.get(l.name)
                rs = bound.get(r.name)
                if ls and rs:
                    if ls != rs:
                        raise SortError(f"sort mismatch in {where}")
                elif ls:
                    scan_term(Var(r.name, None), ls, bound, where)
                elif rs:
                    scan_term(Var(l.name, None), rs, bound, where)
                else:
                    sorter.union(l.name, r.name, where)
        elif isinstance(node, Not):
            scan(node.sub, bound)
        elif isinstance(node, (And, Or, Implies)):
            scan(node.left, bound)
            scan(node.right, bound)
        elif isinstance(node, (Exists, Forall)):
            v = node.var
            if v.sort is None or v.sort not in sig.sorts:
                raise SortError(
                    f"quantifier must declare a known sort, got "
                    f"{v.name}:{v.sort}"
                )
            if v.name in bound:
                raise SortError(f"shadowed bound variable {v.name!r}")
            binders.append(v.name)
            inner = dict(bound)
            inner[v.name] = v.sort
            scan(node.body, inner)
        else:
            raise SortError(f"not a formula node: {node!r}")

    scan(phi, {})
    clashes = free_names & set(binders)
    if clashes:
        raise SortError(
            f"names used both bound and free: {sorted(clashes)}"
        )

    def fill(node: Formula, bound: dict[str, str]) -> Formula:
        if isinstance(node, Rel):
            return Rel(node.name, tuple(
                fill_term(a, bound) for a in node.args
            ))
        if isinstance(node, Eq):
            return Eq(fill_term(node.left, bound), fill_term(node.right, bound))
        if isinstance(node, HAtom):
            return HAtom(fill_term(node.arg, bound))
        if isinstance(node, Not):
            return Not(fill(node.sub, bound))
        if isinstance(node, (And, Or, Implies)):
            return type(node)(fill(node.left, bound), fill(node.right, bound))
        inner = dict(bound)
        inner[node.var.name] = node.var.sort
        return type(node)(node.var, fill(node.body, inner))

    def fill_term(t: Term, bound: dict[str, str]) -> Term:
        if isinstance(t, Param):
            return t
        if t.name in bound:
            return Var(t.name, bound[t.name])
        sort = sorter.resolved(t.name)
        if sort is None:
            if len(sig.sorts) == 1:
                sort = sig.sorts[0]
            else:
                raise SortError(
                    f"cannot infer a sort for free variable {t.name!r}"
                )
        return Var(t.name, sort)

    return fill(phi, {})


def parse_formula(text: str, sig: Signature) -> Formula:
    return check_formula(_raw_parse(text), sig)


# ---------------------------------------------------------------------------
# Printing.

_PREC = {Implies: 1, Or: 2, And: 3, Not: 4}


def format_formula(phi: Formula) -> str:
    """Normalized text: parse(format(ast)) == ast for checked formulas.

    Bound occurrences print bare; free occurrences carry their sort so the
    text stands alone.
    """

    def term(t: Term, bound: frozenset[str]) -> str:
        if isinstance(t, Param):
            return f"#{t.sort}:{t.ident}"
        if t.name in bound:
            return t.name
        if t.sort is None:
            return t.name
        return f"{t.name}:{t.sort}"

    def render(node: Formula, prec: int, bound: frozenset[str]) -> str:
        if isinstance(node, Rel):
            args = ", ".join(term(a, bound) for a in node.args)
            return f"{node.name}({args})"
        if isinstance(node, HAtom):
            return f"H({term(node.arg, bound)})"
        if isinstance(node, Eq):
            body = f"{term(node.left, bound)} = {term(node.right, bound)}"
            return body if prec < 5 else f"({body})"
        if isinstance(node, Not):
            return "!" + render(node.sub, 5, bound)
        if isinstance(node, (And, Or, Implies)):
            mine = _PREC[type(node)]
            if isinstance(node, Implies):
                left = render(node.left, mine + 1, bound)
                right = render(node.right, mine, bound)
            else:
                left = render(node.left, mine, bound)
                right = render(node.right, mine + 1, bound)
            body = f"{left}{_BINARY[type(node)]}{right}"
            return body if mine >= prec else f"({body})"
        if isinstance(node, (Exists, Forall)):
            word = "exists" if isinstance(node, Exists) else "forall"
            inner = render(node.body, 0, bound | {node.var.name})
            body = f"{word} {node.var.name}:{node.var.sort}. {inner}"
            return body if prec == 0 else f"({body})"
        raise TypeError(f"not a formula node: {node!r}")

    return render(phi, 0, frozenset())


# ---------------------------------------------------------------------------
# Substitution helpers.


def substitute(phi: Formula, mapping: Mapping[str, Term]) -> Formula:
    """Replace free variables by terms; bound names are never touched."""

    def sub_term(t: Term, bound: frozenset[str]) -> Term:
        if isinstance(t, Var) and t.name not in bound and t.name in mapping:
            return mapping[t.name]
        return t

    def walk(node: Formula, bound: frozenset[str]) -> Formula:
        if isinstance(node, Rel):
            return Rel(node.name, tuple(sub_term(a, bound) for a in node.args))
        if isinstance(node, Eq):
            return Eq(sub_term(node.left, bound), sub_term(node.right, bound))
        if isinstance(node, HAtom):
            return HAtom(sub_term(node.arg, bound))
        if isinstance(node, Not):
            return Not(walk(node.sub, bound))
        if isinstance(node, (And, Or, Implies)):
            return type(node)(walk(node.left, bound), walk(node.right, bound))
        return type(node)(node.var, walk(node.body, bound | {node.var.name}))

    return walk(phi, frozenset())


def rename_free(phi: Formula, mapping: Mapping[str, str]) -> Formula:
    """Rename free variables, carrying each old variable's sort along."""
    old_sorts = {v.name: v.sort for v in free_vars(phi)}
    renamed = substitute(
        phi, {old: Var(new, None) for old, new in mapping.items()}
    )

    def walk(node: Formula, bound: frozenset[str]) -> Formula:
        def term(t: Term) -> Term:
            if (
                isinstance(t, Var)
                and t.sort is None
                and t.name not in bound
            ):
                for old, new in mapping.items():
                    if new == t.name:
                        return Var(t.name, old_sorts[old])
            return t

        if isinstance(node, Rel):
            return Rel(node.name, tuple(term(a) for a in node.args))
        if isinstance(node, Eq):
            return Eq(term(node.left), term(node.right))
        if isinstance(node, HAtom):
            return HAtom(term(node.arg))
        if isinstance(node, Not):
            return Not(walk(node.sub, bound))
        if isinstance(node, (And, Or, Implies)):
            return type(node)(walk(node.left, bound), walk(node.right, bound))
        return type(node)(node.var, walk(node.body, bound | {node.var.name}))

    return walk(renamed, frozenset())


# ---------------------------------------------------------------------------
# Evaluation.

HSets = Mapping[str, frozenset[int]]


def _freeze_h(h_sets: Optional[Mapping[str, Iterable[int]]]) -> Optional[dict]:
    if h_sets is None:
        return None
    return {s: frozenset(v) for s, v in h_sets.items()}


def evaluate(
    s: FinStructure,
    phi: Formula,
    assignment: Mapping[str, int],
    h_sets: Optional[Mapping[str, Iterable[int]]] = None,
) -> bool:
    """Tarskian truth of phi in s under the given free-variable assignment.

    `h_sets` supplies the extension of the reserved predicate H per sort and
    must be present exactly when phi mentions H.
    """
    h = _freeze_h(h_sets)

    def term_val(t: Term, env: Mapping[str, int]) -> tuple[str, int]:
        if isinstance(t, Param):
            if t.ident not in s.elems(t.sort):
                raise EvaluationError(
                    f"parameter #{t.sort}:{t.ident} outside the universe"
                )
            return (t.sort, t.ident)
        if t.name not in env:
            raise EvaluationError(f"unassigned variable {t.name!r}")
        return (t.sort, env[t.name])

    def rec(node: Formula, env: dict[str, int]) -> bool:
        if isinstance(node, Rel):
            vals = tuple(term_val(a, env)[1] for a in node.args)
            return vals in s.table(node.name)
        if isinstance(node, Eq):
            return term_val(node.left, env)[1] == term_val(node.right, env)[1]
        if isinstance(node, HAtom):
            if h is None:
                raise EvaluationError(
                    "formula mentions H but no H sets were supplied"
                )
            sort, val = term_val(node.arg, env)
            return val in h.get(sort, frozenset())
        if isinstance(node, Not):
            return not rec(node.sub, env)
        if isinstance(node, And):
            return rec(node.left, env) and rec(node.right, env)
        if isinstance(node, Or):
            return rec(node.left, env) or rec(node.right, env)
        if isinstance(node, Implies):
            return (not rec(node.left, env)) or rec(node.right, env)
        if isinstance(node, Exists):
            for x in s.elems(node.var.sort):
                env2 = dict(env)
                env2[node.var.name] = x
                if rec(node.body, env2):
                    return True
            return False
        if isinstance(node, Forall):
            for x in s.elems(node.var.sort):
                env2 = dict(env)
                env2[node.var.name] = x
                if not rec(node.body, env2):
                    return False
            return True
        raise EvaluationError(f"not a formula node: {node!r}")

    return rec(phi, dict(assignment))


def realizations(
    s: FinStructure,
    phi: Formula,
    x: Var,
    assignment: Mapping[str, int] = (),
    h_sets: Optional[Mapping[str, Iterable[int]]] = None,
) -> tuple[int, ...]:
    """Ids of sort x.sort whose substitution for x makes phi true."""
    if x.sort is None:
        raise SortError(f"solution variable {x.name!r} needs a sort")
    base = dict(assignment or {})
    hits = []
    for cand in s.elems(x.sort):
        env = dict(base)
        env[x.name] = cand
        if evaluate(s, phi, env, h_sets):
            hits.append(cand)
    return tuple(hits)


def all_assignments(
    s: FinStructure, variables: Sequence[Var]
) -> Iterator[dict[str, int]]:
    """Every assignment of the given variables to elements, in id order."""
    pools = [s.elems(v.sort) for v in variables]
    for combo in itertools.product(*pools):
        yield {v.name: x for v, x in zip(variables, combo)}


# ---------------------------------------------------------------------------
# Quantifier-free types over a base.

ElemRef = tuple[str, int]


def qftp_ordered(
    s: FinStructure,
    refs: Sequence[ElemRef],
    base: Sequence[ElemRef],
) -> bytes:
    """Fingerprint of the atomic diagram of refs over an ordered base.

    Base elements are named by their position in `base`; two fingerprints
    agree exactly when mapping one tuple onto the other coordinatewise,
    fixing the base pointwise, matches every relation tuple and equality
    over the combined elements.  Callers comparing across structures must
    use corresponding base orders.
    """
    base = list(base)
    if len(set(base)) != len(base):
        raise EvaluationError("base contains repeated elements")
    for sort, x in list(refs) + base:
        if x not in s.elems(sort):
            raise EvaluationError(f"element ({sort},{x}) outside the universe")
    base_pos = {ref: j for j, ref in enumerate(base)}
    token: dict[ElemRef, tuple] = {}
    for ref in base:
        token[ref] = ("b", base_pos[ref])
    for i, ref in enumerate(refs):
        token.setdefault(ref, ("t", i))

    eq_tt = sorted(
        (i, j)
        for i in range(len(refs))
        for j in range(i + 1, len(refs))
        if refs[i] == refs[j]
    )
    eq_tb = sorted(
        (i, base_pos[refs[i]])
        for i in range(len(refs))
        if refs[i] in base_pos
    )
    atoms = {}
    member_by_sort: dict[str, list[ElemRef]] = {}
    for ref in token:
        member_by_sort.setdefault(ref[0], []).append(ref)
    for decl, table in zip(s.sig.relations, s.tables):
        pools = [member_by_sort.get(sort, ()) for sort in decl.profile]
        rows = []
        for combo in itertools.product(*pools):
            t = tuple(x for _, x in combo)
            if t in table:
                rows.append([list(token[ref]) for ref in combo])
        rows.sort()
        atoms[decl.name] = rows
    doc = {
        "sorts": [sort for sort, _ in refs],
        "base_sorts": [sort for sort, _ in base],
        "eq": [list(p) for p in eq_tt],
        "eqb": [list(p) for p in eq_tb],
        "atoms": atoms,
    }
    return dumps_canonical(doc).encode("ascii")


def qftp(
    s: FinStructure,
    refs: Sequence[ElemRef],
    base: Iterable[ElemRef] = (),
) -> bytes:
    """Fingerprint over an unordered base, normalised to (sort, id) order."""
    ordered = sorted(set(base), key=lambda r: (s.sig.sort_index(r[0]), r[1]))
    return qftp_ordered(s, refs, ordered)


@dataclass(frozen=True)
class FormulaSet:
    """A finite set of formulas sharing one free-variable tuple."""

    formulas: tuple[Formula, ...]

    def __post_init__(self):
        if self.formulas:
            first = free_vars(self.formulas[0])
            for phi in self.formulas[1:]:
                if free_vars(phi) != first:
                    raise SortError(
                        "formula set members must share free variables"
                    )

    @property
    def variables(self) -> tuple[Var, ...]:
        if not self.formulas:
            return ()
        return free_vars(self.formulas[0])

    def conjoined(self) -> Optional[Formula]:
        if not self.formulas:
            return None
        return conjunction(list(self.formulas))
