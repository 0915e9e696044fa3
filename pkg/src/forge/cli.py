"""Project-driven command line front end.

`forge run PROJECT` executes the task list of a JSON project file; the
remaining verbs run a single operation by building a one-task project on
the fly, so both paths share resolution, dispatch, and reporting.  Reports
are JSON documents in canonical key order; replaying a project produces
byte-identical report payloads, which is why wall-clock timing appears
only in the text rendering and never in the serialized report.

Exit status: 0 when every requested verdict passes, 1 when some check
fails, 2 on errors (bad project, unknown task, budget exhaustion).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import ForgeError, ProjectError
from .fraisse import (
    ClassPresentation,
    StageChain,
    build_stage,
    builtin_presentation,
    check_amalgamation,
    check_extension_axioms,
    enumerate_age,
    new_chain,
    presentation_from_doc,
)
from .constructions import (
    acl_estimate,
    classify_formula_growth,
    imaginary_cover_class,
    pfc_class,
)
from .logic import format_formula, parse_formula
from .pairs import (
    PairExpansion,
    build_mu,
    build_pair_stage,
    check_codensity,
    check_density,
    check_h_agreement,
    pair_from_doc,
    pair_to_doc,
)
from .structures import dumps_canonical
from .trees import (
    LabeledTree,
    check_based_on,
    check_ktp1_witness,
    check_sop2_witness,
    check_strong_indiscernibility,
    extract_sop2,
    labeled_tree_from_doc,
    labeled_tree_to_doc,
    pairwise_consistent_triple_empty,
    search_sop2,
    tree_code_structure,
)

BUNDLED_DIR = Path(__file__).resolve().parent / "projects"

TREE_FIXTURES = {
    "tree_code_structure": tree_code_structure,
    "pairwise_consistent_triple_empty": pairwise_consistent_triple_empty,
}


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Project loading and resolution.


@dataclass
class ProjectSpec:
    seed: int
    classes: dict
    chains: dict
    trees: dict
    pairs: dict
    tasks: list
    base_dir: Path


class Project:
    """A loaded spec plus lazily built, cached artifacts."""

    def __init__(self, spec: ProjectSpec):
        self.spec = spec
        self._classes: dict[str, ClassPresentation] = {}
        self._chains: dict[str, StageChain] = {}
        self._trees: dict[str, LabeledTree] = {}
        self._pairs: dict[str, PairExpansion] = {}
        self._lock = threading.Lock()

    def klass(self, name: str, _trail: tuple = ()) -> ClassPresentation:
        if name in self._classes:
            return self._classes[name]
        if name in _trail:
            raise ProjectError(f"class {name!r} is defined in terms of itself")
        entry = self.spec.classes.get(name)
        if entry is None:
            raise ProjectError(f"undefined class {name!r}")
        if isinstance(entry, str):
            entry = {"builtin": entry}
        if "builtin" in entry:
            k = builtin_presentation(entry["builtin"])
        elif "file" in entry:
            doc = _read_json(self.spec.base_dir / entry["file"])
            k = presentation_from_doc(doc)
        elif "cover" in entry:
            k = imaginary_cover_class(
                self.klass(entry["cover"], _trail + (name,))
            )
        elif "pfc" in entry:
            k = pfc_class(self.klass(entry["pfc"], _trail + (name,)))
        else:
            raise ProjectError(
                f"class {name!r} needs builtin, file, cover, or pfc"
            )
        self._classes[name] = k
        return k

    def chain_spec(self, name: str) -> dict:
        entry = self.spec.chains.get(name)
        if entry is None:
            raise ProjectError(f"undefined chain {name!r}")
        return entry

    def chain(self, name: str) -> StageChain:
        with self._lock:
            if name in self._chains:
                return self._chains[name]
            entry = self.chain_spec(name)
            k = self.klass(entry["class"])
            seed = entry.get(
                "seed", derive_seed(self.spec.seed, f"chain:{name}")
            )
            ch = new_chain(
                k,
                seed=seed,
                size_cap=int(entry["size_cap"]),
                allow_identifying=bool(entry.get("allow_identifying", False)),
            )
            for steps in entry.get("schedule", ()):
                ch = build_stage(ch, int(steps))
            self._chains[name] = ch
            return ch

    def tree(self, name: str) -> LabeledTree:
        with self._lock:
            if name in self._trees:
                return self._trees[name]
            entry = self.spec.trees.get(name)
            if entry is None:
                raise ProjectError(f"undefined tree {name!r}")
            if "file" in entry:
                t = labeled_tree_from_doc(
                    _read_json(self.spec.base_dir / entry["file"])
                )
            elif "fixture" in entry:
                t = _build_fixture(entry)
            else:
                raise ProjectError(f"tree {name!r} needs file or fixture")
            self._trees[name] = t
            return t

    def pair(self, name: str) -> PairExpansion:
        with self._lock:
            if name in self._pairs:
                return self._pairs[name]
            entry = self.spec.pairs.get(name)
            if entry is None:
                raise ProjectError(f"undefined pair {name!r}")
            if "file" in entry:
                k = self.klass(entry["class"])
                p = pair_from_doc(
                    _read_json(self.spec.base_dir / entry["file"]), k
                )
            elif "build" in entry:
                b = entry["build"]
                p = build_pair_stage(
                    self.klass(b["class"]),
                    seed=b.get(
                        "seed", derive_seed(self.spec.seed, f"pair:{name}")
                    ),
                    steps=int(b["steps"]),
                    k_cap=int(b["k_cap"]),
                    h_mode=b.get("h_mode", "independent"),
                )
            else:
                raise ProjectError(f"pair {name!r} needs file or build")
            self._pairs[name] = p
            return p

    def pair_sig(self, name: str):
        entry = self.spec.pairs.get(name)
        if entry is None:
            raise ProjectError(f"undefined pair {name!r}")
        if "build" in entry:
            return self.klass(entry["build"]["class"]).sig
        return self.pair(name).host.sig


def _build_fixture(entry: Mapping) -> LabeledTree:
    kind = entry["fixture"]
    fn = TREE_FIXTURES.get(kind)
    if fn is None:
        raise ProjectError(f"unknown tree fixture {kind!r}")
    if kind == "tree_code_structure":
        return fn(int(entry["depth"]), int(entry.get("junk", 0)))
    return fn(int(entry["depth"]), int(entry.get("branching", 3)))


def _read_json(path: Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ProjectError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProjectError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}"
        ) from exc


def load_project(path) -> Project:
    """Read, parse, and cross-validate a project file."""
    path = Path(path)
    if not path.exists():
        bundled = BUNDLED_DIR / f"{path}.json"
        if bundled.exists():
            path = bundled
        else:
            raise ProjectError(f"no such project file: {path}")
    doc = _read_json(path)
    return project_from_doc(doc, base_dir=path.parent)


def project_from_doc(doc: Mapping, base_dir: Path = Path(".")) -> Project:
    spec = ProjectSpec(
        seed=int(doc.get("seed", 0)),
        classes=dict(doc.get("classes", {})),
        chains=dict(doc.get("chains", {})),
        trees=dict(doc.get("trees", {})),
        pairs=dict(doc.get("pairs", {})),
        tasks=list(doc.get("tasks", [])),
        base_dir=Path(base_dir),
    )
    project = Project(spec)
    _validate(project)
    return project


def _validate(project: Project) -> None:
    spec = project.spec
    seen_ids = set()
    for entry in spec.chains.values():
        if entry.get("class") not in spec.classes:
            raise ProjectError(
                f"chain references undefined class {entry.get('class')!r}"
            )
    for name, entry in spec.pairs.items():
        ref = entry.get("build", {}).get("class", entry.get("class"))
        if "file" in entry and "class" not in entry:
            raise ProjectError(f"pair {name!r} from file needs a class")
        if ref is not None and ref not in spec.classes:
            raise ProjectError(
                f"pair {name!r} references undefined class {ref!r}"
            )
    for task in spec.tasks:
        tid = task.get("id")
        if not tid or tid in seen_ids:
            raise ProjectError(f"missing or duplicate task id: {tid!r}")
        seen_ids.add(tid)
        op = task.get("op")
        if op not in OPS:
            raise ProjectError(f"task {tid!r}: unknown operation {op!r}")
        args = task.get("args", {})
        for key, section in (
            ("class", spec.classes),
            ("chain", spec.chains),
            ("tree", spec.trees),
            ("base_tree", spec.trees),
            ("host_tree", spec.trees),
            ("pair", spec.pairs),
        ):
            ref = args.get(key)
            if ref is not None and ref not in section:
                raise ProjectError(
                    f"task {tid!r}: dangling {key} reference {ref!r}"
                )
        texts = [args[key] for key in ("formula", "phi", "psi", "theta")
                 if key in args]
        for key in ("templates", "q"):
            if isinstance(args.get(key), list):
                texts.extend(args[key])
        for text in texts:
            _early_parse(project, task, text)


def _task_sig(project: Project, task: Mapping):
    args = task.get("args", {})
    if "chain" in args:
        entry = project.chain_spec(args["chain"])
        return project.klass(entry["class"]).sig
    if "class" in args:
        return project.klass(args["class"]).sig
    if "pair" in args:
        return project.pair_sig(args["pair"])
    for key in ("tree", "host_tree", "base_tree"):
        if key in args:
            return project.tree(args[key]).host.sig
    return None


def _early_parse(project: Project, task: Mapping, text: str) -> None:
    sig = _task_sig(project, task)
    if sig is None:
        return
    try:
        parse_formula(text, sig)
    except ForgeError as exc:
        raise ProjectError(
            f"task {task.get('id')!r}: bad formula {text!r}: {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# Task reports.


@dataclass
class TaskReport:
    task_id: str
    op: str
    args: dict
    seed: Optional[int]
    verdict: str  # "pass" | "fail" | "error"
    payload: dict
    wall_ms: int

    def doc(self) -> dict:
        """Serializable form; timing stays out so replays compare equal."""
        return {
            "task": self.task_id,
            "op": self.op,
            "args": self.args,
            "seed": self.seed,
            "verdict": self.verdict,
            "payload": self.payload,
        }

    def text(self) -> str:
        note = ""
        if self.verdict == "error":
            note = "  " + str(self.payload.get("error", ""))
        return (
            f"{self.task_id:<18} {self.op:<20} "
            f"{self.verdict.upper():<5} {self.wall_ms:>7} ms{note}"
        )


def _verdict(passed: Optional[bool], expect: str = "pass") -> str:
    if passed is None:
        return "pass"
    want = expect == "pass"
    return "pass" if passed == want else "fail"


# ---------------------------------------------------------------------------
# Operation handlers.  Each returns (verdict, payload).


def _refs_doc(refs) -> list:
    return [[sort, int(x)] for sort, x in refs]


def _witness_doc(rep) -> dict:
    return {
        "passed": rep.passed,
        "kind": rep.kind,
        "thresholds": dict(rep.thresholds),
        "certificate": dict(rep.certificate) if rep.certificate else None,
    }


def _extension_doc(rep) -> dict:
    shown = [
        {
            "base": [[sort, list(ids)] for sort, ids in un.base_subset],
            "sort": un.sort,
            "pattern": [[name, list(t)] for name, t in un.pattern],
        }
        for un in rep.unmet[:5]
    ]
    return {
        "passed": rep.passed,
        "fraction": rep.fraction,
        "total": rep.total,
        "unmet_count": len(rep.unmet),
        "unmet_sample": shown,
    }


def op_check_class(project: Project, args: Mapping, seed: int):
    k = project.klass(args["class"])
    rep = check_amalgamation(
        k,
        int(args["bound"]),
        strong=bool(args.get("strong", True)),
    )
    witness = None
    if rep.witness is not None:
        witness = {
            "base": rep.witness.base.total_size,
            "left": rep.witness.left.total_size,
            "right": rep.witness.right.total_size,
        }
    payload = {
        "class": k.name,
        "passed": rep.passed,
        "strong": rep.strong,
        "checked_bound": rep.checked_bound,
        "configurations": rep.configurations,
        "witness_sizes": witness,
    }
    return _verdict(rep.passed, args.get("expect", "pass")), payload


def op_enumerate_age(project: Project, args: Mapping, seed: int):
    k = project.klass(args["class"])
    reps = enumerate_age(k, int(args["bound"]))
    sizes: dict[str, int] = {}
    for rep in reps:
        key = str(rep.total_size)
        sizes[key] = sizes.get(key, 0) + 1
    return None, {
        "class": k.name,
        "count": len(reps),
        "by_size": sizes,
    }


def op_build_stage(project: Project, args: Mapping, seed: int):
    ch = project.chain(args["chain"])
    return None, {
        "chain": args["chain"],
        "stage_sizes": [s.total_size for s in ch.stages],
        "tasks": len(ch.log),
        "size_cap": ch.size_cap,
        "seed": ch.seed,
    }


def op_check_extension(project: Project, args: Mapping, seed: int):
    ch = project.chain(args["chain"])
    stage = int(args.get("stage", len(ch.stages) - 1))
    rep = check_extension_axioms(
        ch.stages[stage], ch.presentation, int(args["depth"])
    )
    payload = {"chain": args["chain"], "stage": stage}
    payload.update(_extension_doc(rep))
    return _verdict(rep.passed, args.get("expect", "pass")), payload


def op_apply(project: Project, args: Mapping, seed: int):
    kind = args["kind"]
    k = project.klass(args["class"])
    if kind == "cover":
        derived = imaginary_cover_class(k)
    elif kind == "pfc":
        derived = pfc_class(k)
    else:
        raise ProjectError(f"apply kind must be cover or pfc, not {kind!r}")
    return None, {
        "kind": kind,
        "source": k.name,
        "name": derived.name,
        "sorts": list(derived.sig.sorts),
        "relations": [d.name for d in derived.sig.relations],
        "forbidden": len(derived.forbidden),
    }


def op_acl_estimate(project: Project, args: Mapping, seed: int):
    ch = project.chain(args["chain"])
    a = (args["a"][0], int(args["a"][1]))
    base = [(s, int(x)) for s, x in args["base"]]
    verdict = acl_estimate(ch, a, base, [int(i) for i in args["stages"]])
    payload = {
        "a": list(a),
        "base": _refs_doc(base),
        "kind": verdict.kind,
        "bound": verdict.bound,
        "counts": list(verdict.counts),
        "stages": list(verdict.stages),
    }
    expect = args.get("expect")
    return _verdict(verdict.kind == expect if expect else None), payload


def op_classify_growth(project: Project, args: Mapping, seed: int):
    ch = project.chain(args["chain"])
    phi = parse_formula(args["formula"], ch.presentation.sig)
    rep = classify_formula_growth(
        ch,
        phi,
        args.get("x", "x"),
        [int(i) for i in args["stages"]],
        int(args.get("k_max", 2)),
    )
    instances = [
        {
            "params": [[name, int(x)] for name, x in inst.params],
            "kind": inst.verdict.kind,
            "bound": inst.verdict.bound,
            "counts": list(inst.verdict.counts),
        }
        for inst in rep.instances
    ]
    payload = {
        "formula": args["formula"],
        "instances": instances,
        "growing": rep.growing,
        "algebraic": rep.algebraic,
        "inconclusive": rep.inconclusive,
        "uniform_bound": rep.uniform_bound,
        "bound_found": rep.bound_found,
        "k_max": rep.k_max,
        "stages": list(rep.stages),
    }
    expect = args.get("expect_all")
    if expect:
        ok = all(i.verdict.kind == expect for i in rep.instances)
        return _verdict(ok), payload
    return None, payload


def op_tree_check_indisc(project: Project, args: Mapping, seed: int):
    t = project.tree(args["tree"])
    rep = check_strong_indiscernibility(t, int(args["width"]))
    return (
        _verdict(rep.passed, args.get("expect", "pass")),
        {"tree": args["tree"], **_witness_doc(rep)},
    )


def op_tree_check_sop2(project: Project, args: Mapping, seed: int):
    t = project.tree(args["tree"])
    phi = parse_formula(args["formula"], t.host.sig)
    q = tuple(
        parse_formula(text, t.host.sig) for text in args.get("q", ())
    )
    rep = check_sop2_witness(
        t, phi, q, int(args.get("threshold", 1)), args.get("x", "x")
    )
    return (
        _verdict(rep.passed, args.get("expect", "pass")),
        {"tree": args["tree"], **_witness_doc(rep)},
    )


def op_tree_check_ktp1(project: Project, args: Mapping, seed: int):
    t = project.tree(args["tree"])
    psi = parse_formula(args["formula"], t.host.sig)
    rep = check_ktp1_witness(
        t,
        psi,
        int(args["k"]),
        int(args.get("threshold", 1)),
        args.get("x", "x"),
    )
    return (
        _verdict(rep.passed, args.get("expect", "pass")),
        {"tree": args["tree"], **_witness_doc(rep)},
    )


def op_tree_extract_sop2(project: Project, args: Mapping, seed: int):
    t = project.tree(args["tree"])
    phi = parse_formula(args["formula"], t.host.sig)
    rep = extract_sop2(
        t,
        phi,
        int(args.get("threshold", 1)),
        args.get("x", "x"),
        int(args.get("finite_bound", 8)),
    )
    payload = {
        "tree": args["tree"],
        "ok": rep.ok,
        "power_constant": rep.power_constant,
        "prune_constant": rep.prune_constant,
        "shift": rep.shift,
        "failed_stage": rep.failed_stage,
        "note": rep.note,
        "check": _witness_doc(rep.check) if rep.check else None,
        "witness_depth": rep.tree.depth if rep.tree else None,
        "witness_formula": format_formula(rep.formula) if rep.formula else None,
        "witness_tree": labeled_tree_to_doc(rep.tree) if rep.ok else None,
    }
    return _verdict(rep.ok, args.get("expect", "pass")), payload


def op_tree_search_sop2(project: Project, args: Mapping, seed: int):
    if "host_tree" in args:
        host = project.tree(args["host_tree"]).host
        sig = host.sig
    else:
        ch = project.chain(args["chain"])
        host = ch.stages[int(args.get("stage", len(ch.stages) - 1))]
        sig = ch.presentation.sig
    templates = [parse_formula(text, sig) for text in args["templates"]]
    result = search_sop2(
        host,
        templates,
        int(args["depth"]),
        branching=int(args.get("branching", 2)),
        threshold=int(args.get("threshold", 1)),
        conj_width=int(args.get("conj_width", 1)),
        x=args.get("x", "x"),
        budget=int(args.get("budget", 500000)),
    )
    if result is None:
        payload = {"found": False}
    else:
        payload = {
            "found": True,
            "template_index": result.template_index,
            "conj_width": result.conj_width,
            "formula": format_formula(result.formula),
            "labels": {
                "".join(str(c) for c in idx): _refs_doc(label)
                for idx, label in sorted(result.tree.labels.items())
            },
            "check": _witness_doc(result.check),
        }
    expect = args.get("expect_found")
    if expect is None:
        return None, payload
    return _verdict((result is not None) == bool(expect)), payload


def op_tree_based_on(project: Project, args: Mapping, seed: int):
    tb = project.tree(args["tree"])
    ta = project.tree(args["base_tree"])
    rep = check_based_on(tb, ta, int(args["width"]))
    return (
        _verdict(rep.passed, args.get("expect", "pass")),
        {
            "tree": args["tree"],
            "base_tree": args["base_tree"],
            **_witness_doc(rep),
        },
    )


def op_pair_build(project: Project, args: Mapping, seed: int):
    k = project.klass(args["class"])
    p = build_pair_stage(
        k,
        seed=int(args.get("seed", seed)),
        steps=int(args["steps"]),
        k_cap=int(args["k_cap"]),
        h_mode=args.get("h_mode", "independent"),
    )
    payload = {
        "class": k.name,
        "sizes": {sort: len(p.host.elems(sort)) for sort in k.sig.sorts},
        "h_sizes": {sort: len(p.h_sets[sort]) for sort in k.sig.sorts},
        "tasks": len(p.log),
        "provenance": dict(p.provenance),
        "pair_doc": pair_to_doc(p),
    }
    return None, payload


def op_pair_check(project: Project, args: Mapping, seed: int):
    p = project.pair(args["pair"])
    k = int(args["k"])
    which = args.get("which", "both")
    payload: dict = {"pair": args["pair"], "k": k}
    outcomes = []
    if which in ("both", "density"):
        rep = check_density(p, k)
        payload["density"] = _extension_doc(rep)
        outcomes.append(rep.passed)
    if which in ("both", "codensity"):
        rep = check_codensity(p, k)
        payload["codensity"] = _extension_doc(rep)
        outcomes.append(rep.passed)
    return _verdict(all(outcomes), args.get("expect", "pass")), payload


def op_pair_agreement(project: Project, args: Mapping, seed: int):
    p = project.pair(args["pair"])
    phi = parse_formula(args["phi"], p.host.sig)
    psi = parse_formula(args["psi"], p.host.sig)
    params = {name: int(x) for name, x in args.get("params", {}).items()}
    rep = check_h_agreement(p, phi, psi, params, args.get("x", "x"))
    payload = {
        "pair": args["pair"],
        "h_restriction": rep.h_restriction,
        "small_difference": rep.small_difference,
        "h_witness": rep.h_witness,
        "difference_witness": rep.difference_witness,
        "passed": rep.passed,
    }
    return _verdict(rep.passed, args.get("expect", "pass")), payload


def op_pair_mu(project: Project, args: Mapping, seed: int):
    if "pair" in args:
        sig = project.pair_sig(args["pair"])
    else:
        sig = project.klass(args["class"]).sig
    theta = parse_formula(args["theta"], sig)
    phi = parse_formula(args["phi"], sig)
    mu = build_mu(theta, phi, args.get("x", "x"), args.get("z", "z"))
    return None, {"formula": format_formula(mu)}


OPS = {
    "check-class": op_check_class,
    "enumerate-age": op_enumerate_age,
    "build-stage": op_build_stage,
    "check-extension": op_check_extension,
    "apply": op_apply,
    "acl-estimate": op_acl_estimate,
    "classify-growth": op_classify_growth,
    "tree check-indisc": op_tree_check_indisc,
    "tree check-sop2": op_tree_check_sop2,
    "tree check-ktp1": op_tree_check_ktp1,
    "tree extract-sop2": op_tree_extract_sop2,
    "tree search-sop2": op_tree_search_sop2,
    "tree based-on": op_tree_based_on,
    "pair build": op_pair_build,
    "pair check": op_pair_check,
    "pair agreement": op_pair_agreement,
    "pair mu": op_pair_mu,
}


# ---------------------------------------------------------------------------
# Execution.


def run_task(project: Project, task: Mapping) -> TaskReport:
    tid = task["id"]
    op = task["op"]
    args = dict(task.get("args", {}))
    seed = derive_seed(project.spec.seed, f"task:{tid}")
    start = time.monotonic()
    try:
        verdict, payload = OPS[op](project, args, seed)
        if verdict is None:
            verdict = "pass"
    except ForgeError as exc:
        verdict = "error"
        payload = {"error": str(exc), "type": exc.__class__.__name__}
    except (KeyError, TypeError, ValueError) as exc:
        verdict = "error"
        payload = {
            "error": f"bad arguments: {exc!r}",
            "type": exc.__class__.__name__,
        }
    wall_ms = int((time.monotonic() - start) * 1000)
    return TaskReport(
        task_id=tid,
        op=op,
        args=args,
        seed=seed,
        verdict=verdict,
        payload=payload,
        wall_ms=wall_ms,
    )


def run_project(
    project: Project,
    task_ids: Optional[Sequence[str]] = None,
    out_dir: Optional[Path] = None,
    budget_ms: Optional[int] = None,
    parallel: bool = False,
    stream=None,
) -> list[TaskReport]:
    tasks = project.spec.tasks
    if task_ids:
        by_id = {t["id"]: t for t in tasks}
        missing = [tid for tid in task_ids if tid not in by_id]
        if missing:
            raise ProjectError(f"unknown task ids: {missing}")
        tasks = [by_id[tid] for tid in task_ids]
    deadline = (
        time.monotonic() + budget_ms / 1000.0
        if budget_ms is not None
        else None
    )

    def gate(task) -> Optional[TaskReport]:
        if deadline is not None and time.monotonic() > deadline:
            return TaskReport(
                task_id=task["id"],
                op=task["op"],
                args=dict(task.get("args", {})),
                seed=None,
                verdict="error",
                payload={"error": "budget exceeded", "type": "BudgetError"},
                wall_ms=0,
            )
        return None

    reports: list[TaskReport]
    if parallel:
        with ThreadPoolExecutor() as pool:
            futures = []
            for task in tasks:
                skipped = gate(task)
                if skipped is not None:
                    futures.append(skipped)
                else:
                    futures.append(pool.submit(run_task, project, task))
            reports = [
                f if isinstance(f, TaskReport) else f.result()
                for f in futures
            ]
    else:
        reports = []
        for task in tasks:
            skipped = gate(task)
            reports.append(
                skipped if skipped is not None else run_task(project, task)
            )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            path = out_dir / f"{rep.task_id}.json"
            path.write_text(dumps_canonical(rep.doc()) + "\n")
            for key, suffix in (
                ("pair_doc", "pair"), ("witness_tree", "witness"),
            ):
                side = rep.payload.get(key)
                if side is not None:
                    side_path = out_dir / f"{rep.task_id}-{suffix}.json"
                    side_path.write_text(dumps_canonical(side) + "\n")
    if stream is not None:
        for rep in reports:
            print(rep.text(), file=stream)
    return reports


def exit_code(reports: Sequence[TaskReport]) -> int:
    if any(r.verdict == "error" for r in reports):
        return 2
    if any(r.verdict == "fail" for r in reports):
        return 1
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.


def _add_common(sub):
    sub.add_argument("--out", default=None, help="report output directory")
    sub.add_argument("--seed", type=int, default=0, help="project seed")
    sub.add_argument(
        "--budget-ms",
        type=int,
        default=None,
        help="wall-clock budget; FORGE_BUDGET_MS is the fallback",
    )
    sub.add_argument(
        "--args",
        default=None,
        metavar="JSON",
        help="extra task arguments merged over the flag-built ones",
    )


def _classes_for(ref: str) -> tuple[dict, str]:
    """Classes section for one CLI class flag.

    `cover:` and `pfc:` prefixes stack, a `.json` suffix loads a file,
    anything else is a builtin name.
    """
    classes: dict = {}
    i = 0
    while True:
        name = f"cli_class{i}"
        if ref.endswith(".json"):
            classes[name] = {"file": ref}
            break
        if ref.startswith(("cover:", "pfc:")):
            kind, rest = ref.split(":", 1)
            classes[name] = {kind: f"cli_class{i + 1}"}
            i += 1
            ref = rest
            continue
        classes[name] = {"builtin": ref}
        break
    return classes, "cli_class0"


def _tree_entry(ref: str) -> dict:
    if ref.startswith("fixture:"):
        body = ref.split(":", 1)[1]
        name, _, rest = body.partition("(")
        nums = [int(x) for x in rest.rstrip(")").split(",") if x.strip()]
        entry = {"fixture": name, "depth": nums[0] if nums else 2}
        if name == "tree_code_structure" and len(nums) > 1:
            entry["junk"] = nums[1]
        if name == "pairwise_consistent_triple_empty" and len(nums) > 1:
            entry["branching"] = nums[1]
        return entry
    return {"file": ref}


def _single_task_project(
    args, op: str, task_args: dict, sections: Optional[dict] = None
) -> Project:
    doc = {
        "seed": args.seed,
        "classes": {},
        "chains": {},
        "trees": {},
        "pairs": {},
        "tasks": [{"id": op.replace(" ", "-"), "op": op, "args": task_args}],
    }
    if sections:
        for key, value in sections.items():
            doc[key].update(value)
    if getattr(args, "args", None):
        try:
            merged = json.loads(args.args)
        except json.JSONDecodeError as exc:
            raise ProjectError(f"--args is not valid JSON: {exc}") from exc
        doc["tasks"][0]["args"].update(merged)
    return project_from_doc(doc, base_dir=Path("."))


def _chain_sections(args) -> tuple[dict, dict]:
    classes, cname = _classes_for(args.klass)
    schedule = [int(x) for x in args.schedule.split(",") if x.strip()]
    chains = {
        "cli_chain": {
            "class": cname,
            "seed": args.chain_seed,
            "size_cap": args.size_cap,
            "schedule": schedule,
        }
    }
    return {"classes": classes, "chains": chains}, "cli_chain"


def _refs_arg(text: str) -> list:
    out = []
    for chunk in text.split(","):
        sort, _, ident = chunk.strip().partition(":")
        out.append([sort, int(ident)])
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="finite model theory workbench",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="run a project file")
    run.add_argument("project", help="path to a project JSON file")
    run.add_argument(
        "--task", action="append", default=None, help="run only this task id"
    )
    run.add_argument("--parallel", action="store_true")
    _add_common(run)

    cc = subs.add_parser("check-class", help="amalgamation check")
    cc.add_argument("--class", dest="klass", required=True)
    cc.add_argument("--bound", type=int, required=True)
    cc.add_argument("--not-strong", action="store_true")
    cc.add_argument("--expect", choices=("pass", "fail"), default="pass")
    _add_common(cc)

    ea = subs.add_parser("enumerate-age", help="count age members")
    ea.add_argument("--class", dest="klass", required=True)
    ea.add_argument("--bound", type=int, required=True)
    _add_common(ea)

    for name, extra in (
        ("build-stage", ()),
        ("check-extension", ("depth",)),
        ("acl-estimate", ("acl",)),
        ("classify-growth", ("growth",)),
    ):
        sub = subs.add_parser(name, help=f"chain operation: {name}")
        sub.add_argument("--class", dest="klass", required=True)
        sub.add_argument("--chain-seed", type=int, default=11)
        sub.add_argument("--size-cap", type=int, default=2)
        sub.add_argument(
            "--schedule", default="12", help="comma-separated steps per stage"
        )
        if "depth" in extra:
            sub.add_argument("--depth", type=int, required=True)
        if "acl" in extra:
            sub.add_argument("--a", required=True, help="sort:id")
            sub.add_argument(
                "--base", required=True, help="sort:id,sort:id,..."
            )
            sub.add_argument("--stages", required=True)
            sub.add_argument("--expect", default=None)
        if "growth" in extra:
            sub.add_argument("--formula", required=True)
            sub.add_argument("--x", default="x")
            sub.add_argument("--stages", required=True)
            sub.add_argument("--k-max", type=int, default=2)
            sub.add_argument("--expect-all", default=None)
        _add_common(sub)

    ap = subs.add_parser("apply", help="derive cover or pfc class")
    ap.add_argument("kind", choices=("cover", "pfc"))
    ap.add_argument("--class", dest="klass", required=True)
    _add_common(ap)

    tree = subs.add_parser("tree", help="labeled tree operations")
    tree_subs = tree.add_subparsers(dest="tree_command", required=True)
    for name in (
        "check-indisc",
        "check-sop2",
        "check-ktp1",
        "extract-sop2",
        "search-sop2",
        "based-on",
    ):
        sub = tree_subs.add_parser(name)
        sub.add_argument(
            "--tree",
            required=name != "search-sop2",
            help="tree file or fixture:name(depth[,extra])",
        )
        if name == "check-indisc":
            sub.add_argument("--width", type=int, required=True)
        if name in ("check-sop2", "check-ktp1", "extract-sop2"):
            sub.add_argument("--formula", required=True)
        if name == "check-ktp1":
            sub.add_argument("--k", type=int, required=True)
        if name == "search-sop2":
            sub.add_argument("--template", action="append", required=True)
            sub.add_argument("--depth", type=int, required=True)
            sub.add_argument("--branching", type=int, default=2)
            sub.add_argument("--conj-width", type=int, default=1)
        if name == "based-on":
            sub.add_argument("--base-tree", required=True)
            sub.add_argument("--width", type=int, required=True)
        sub.add_argument("--expect", choices=("pass", "fail"), default="pass")
        _add_common(sub)

    pair = subs.add_parser("pair", help="dense pair operations")
    pair_subs = pair.add_subparsers(dest="pair_command", required=True)
    pb = pair_subs.add_parser("build")
    pb.add_argument("--class", dest="klass", required=True)
    pb.add_argument("--pair-seed", type=int, default=5)
    pb.add_argument("--steps", type=int, required=True)
    pb.add_argument("--k-cap", type=int, required=True)
    pb.add_argument(
        "--h-mode", choices=("independent", "substructure"),
        default="independent",
    )
    _add_common(pb)
    pc = pair_subs.add_parser("check")
    pc.add_argument("--pair", required=True, help="pair file")
    pc.add_argument("--class", dest="klass", required=True)
    pc.add_argument("--k", type=int, required=True)
    pc.add_argument("--which", choices=("both", "density", "codensity"),
                    default="both")
    pc.add_argument("--expect", choices=("pass", "fail"), default="pass")
    _add_common(pc)
    pa = pair_subs.add_parser("agreement")
    pa.add_argument("--pair", required=True, help="pair file")
    pa.add_argument("--class", dest="klass", required=True)
    pa.add_argument("--phi", required=True)
    pa.add_argument("--psi", required=True)
    pa.add_argument(
        "--param", action="append", default=[], help="name=id, repeatable"
    )
    pa.add_argument("--expect", choices=("pass", "fail"), default="pass")
    _add_common(pa)
    pm = pair_subs.add_parser("mu")
    pm.add_argument("--class", dest="klass", required=True)
    pm.add_argument("--theta", required=True)
    pm.add_argument("--phi", required=True)
    pm.add_argument("--x", default="x")
    pm.add_argument("--z", default="z")
    _add_common(pm)

    return parser


def _dispatch_single(args) -> Project:
    command = args.command
    if command == "check-class":
        classes, cname = _classes_for(args.klass)
        task_args = {
            "class": cname,
            "bound": args.bound,
            "strong": not args.not_strong,
            "expect": args.expect,
        }
        project = _single_task_project(
            args, "check-class", task_args, {"classes": classes}
        )
    elif command == "enumerate-age":
        classes, cname = _classes_for(args.klass)
        project = _single_task_project(
            args,
            "enumerate-age",
            {"class": cname, "bound": args.bound},
            {"classes": classes},
        )
    elif command in (
        "build-stage", "check-extension", "acl-estimate", "classify-growth"
    ):
        sections, chain_name = _chain_sections(args)
        task_args: dict = {"chain": chain_name}
        if command == "check-extension":
            task_args["depth"] = args.depth
        if command == "acl-estimate":
            task_args["a"] = _refs_arg(args.a)[0]
            task_args["base"] = _refs_arg(args.base)
            task_args["stages"] = [int(x) for x in args.stages.split(",")]
            if args.expect:
                task_args["expect"] = args.expect
        if command == "classify-growth":
            task_args.update(
                {
                    "formula": args.formula,
                    "x": args.x,
                    "stages": [int(x) for x in args.stages.split(",")],
                    "k_max": args.k_max,
                }
            )
            if args.expect_all:
                task_args["expect_all"] = args.expect_all
        project = _single_task_project(args, command, task_args, sections)
    elif command == "apply":
        classes, cname = _classes_for(args.klass)
        project = _single_task_project(
            args,
            "apply",
            {"kind": args.kind, "class": cname},
            {"classes": classes},
        )
    elif command == "tree":
        op = f"tree {args.tree_command}"
        trees = {}
        task_args = {"expect": args.expect} if hasattr(args, "expect") else {}
        if getattr(args, "tree", None):
            trees["cli_tree"] = _tree_entry(args.tree)
            key = "host_tree" if args.tree_command == "search-sop2" else "tree"
            task_args[key] = "cli_tree"
        if args.tree_command == "check-indisc":
            task_args["width"] = args.width
        if args.tree_command in ("check-sop2", "check-ktp1", "extract-sop2"):
            task_args["formula"] = args.formula
        if args.tree_command == "check-ktp1":
            task_args["k"] = args.k
        if args.tree_command == "search-sop2":
            task_args.pop("expect", None)
            task_args.update(
                {
                    "templates": args.template,
                    "depth": args.depth,
                    "branching": args.branching,
                    "conj_width": args.conj_width,
                }
            )
        if args.tree_command == "based-on":
            trees["cli_base_tree"] = _tree_entry(args.base_tree)
            task_args["base_tree"] = "cli_base_tree"
            task_args["width"] = args.width
        project = _single_task_project(args, op, task_args, {"trees": trees})
    elif command == "pair":
        op = f"pair {args.pair_command}"
        classes, cname = _classes_for(args.klass)
        sections: dict = {"classes": classes}
        if args.pair_command == "build":
            task_args = {
                "class": cname,
                "seed": args.pair_seed,
                "steps": args.steps,
                "k_cap": args.k_cap,
                "h_mode": args.h_mode,
            }
        elif args.pair_command == "check":
            sections["pairs"] = {
                "cli_pair": {"file": args.pair, "class": cname}
            }
            task_args = {
                "pair": "cli_pair",
                "k": args.k,
                "which": args.which,
                "expect": args.expect,
            }
        elif args.pair_command == "agreement":
            sections["pairs"] = {
                "cli_pair": {"file": args.pair, "class": cname}
            }
            params = {}
            for item in args.param:
                name, _, value = item.partition("=")
                params[name] = int(value)
            task_args = {
                "pair": "cli_pair",
                "phi": args.phi,
                "psi": args.psi,
                "params": params,
                "expect": args.expect,
            }
        else:
            task_args = {
                "class": cname,
                "theta": args.theta,
                "phi": args.phi,
                "x": args.x,
                "z": args.z,
            }
        project = _single_task_project(args, op, task_args, sections)
    else:
        raise ProjectError(f"unknown command {command!r}")
    return project


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    budget = args.budget_ms
    if budget is None:
        env = os.environ.get("FORGE_BUDGET_MS")
        budget = int(env) if env else None
    try:
        if args.command == "run":
            project = load_project(args.project)
            if args.seed:
                project.spec.seed = args.seed
            reports = run_project(
                project,
                task_ids=args.task,
                out_dir=Path(args.out) if args.out else None,
                budget_ms=budget,
                parallel=args.parallel,
                stream=sys.stdout,
            )
        else:
            project = _dispatch_single(args)
            reports = run_project(
                project,
                out_dir=Path(args.out) if args.out else None,
                budget_ms=budget,
                stream=sys.stdout,
            )
    except ProjectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return exit_code(reports)


if __name__ == "__main__":
    sys.exit(main())
