"""Workbench for finite combinatorial model theory.

Finite multi-sorted structures, a small first-order language over them,
amalgamation classes presented by forbidden patterns, approximation chains
toward generic limits, cover and parametrized-fiber constructions, labeled
trees of parameters with consistency-pattern checkers, and dense pair
expansions.  The `forge` console script drives the same machinery from
project files.
"""

from .errors import (
    AmalgamError,
    BudgetError,
    DocumentError,
    EmbeddingError,
    EvaluationError,
    ForgeError,
    ParseError,
    ProjectError,
    QuotientError,
    SignatureError,
    SortError,
    StructureError,
    TreeError,
)
from .structures import (
    Embedding,
    FinStructure,
    RelationDecl,
    Signature,
    canonical_form,
    dumps_canonical,
    empty_structure,
    enumerate_embeddings,
    free_amalgam,
    induced_substructure,
    is_isomorphic,
    make_signature,
    quotient_by_equivalence,
    structure_from_doc,
    structure_to_doc,
)
from .logic import (
    evaluate,
    format_formula,
    free_vars,
    parse_formula,
    qftp,
    qftp_ordered,
    realizations,
)
from .fraisse import (
    ClassPresentation,
    StageChain,
    build_stage,
    builtin_presentation,
    check_amalgamation,
    check_extension_axioms,
    class_membership,
    enumerate_age,
    new_chain,
)
from .constructions import (
    acl_estimate,
    classify_formula_growth,
    fiber_structure,
    imaginary_cover_class,
    imaginary_cover_structure,
    pfc_class,
    pfc_signature,
)
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
    tree_qftp,
)
from .pairs import (
    PairExpansion,
    build_mu,
    build_pair_stage,
    check_codensity,
    check_density,
    check_h_agreement,
    h_independent,
    pair_from_doc,
    pair_to_doc,
    small_closure,
)

__version__ = "0.1.0"

__all__ = [
    "AmalgamError",
    "BudgetError",
    "ClassPresentation",
    "DocumentError",
    "Embedding",
    "EmbeddingError",
    "EvaluationError",
    "FinStructure",
    "ForgeError",
    "LabeledTree",
    "PairExpansion",
    "ParseError",
    "ProjectError",
    "QuotientError",
    "RelationDecl",
    "Signature",
    "SignatureError",
    "SortError",
    "StageChain",
    "StructureError",
    "TreeError",
    "acl_estimate",
    "build_mu",
    "build_pair_stage",
    "build_stage",
    "builtin_presentation",
    "canonical_form",
    "check_amalgamation",
    "check_based_on",
    "check_codensity",
    "check_density",
    "check_extension_axioms",
    "check_h_agreement",
    "check_ktp1_witness",
    "check_sop2_witness",
    "check_strong_indiscernibility",
    "class_membership",
    "classify_formula_growth",
    "dumps_canonical",
    "empty_structure",
    "enumerate_age",
    "enumerate_embeddings",
    "evaluate",
    "extract_sop2",
    "fiber_structure",
    "format_formula",
    "free_amalgam",
    "free_vars",
    "h_independent",
    "imaginary_cover_class",
    "imaginary_cover_structure",
    "induced_substructure",
    "is_isomorphic",
    "labeled_tree_from_doc",
    "labeled_tree_to_doc",
    "make_signature",
    "new_chain",
    "pair_from_doc",
    "pair_to_doc",
    "pairwise_consistent_triple_empty",
    "parse_formula",
    "pfc_class",
    "pfc_signature",
    "qftp",
    "qftp_ordered",
    "quotient_by_equivalence",
    "realizations",
    "search_sop2",
    "small_closure",
    "structure_from_doc",
    "structure_to_doc",
    "tree_code_structure",
    "tree_qftp",
]
