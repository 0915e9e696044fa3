"""Exception types shared across the package."""


class ForgeError(Exception):
    """Base class for all errors raised by this package."""


class SignatureError(ForgeError):
    """Malformed signature: bad sort names, profiles, or flags."""


class StructureError(ForgeError):
    """Structure violates its declared signature or flags."""


class EmbeddingError(ForgeError):
    """Map is not an induced embedding between the given structures."""


class QuotientError(ForgeError):
    """Relation cannot be pushed through the equivalence.

    `witness` holds (relation name, tuple in table, equivalent tuple missing
    from table) when the failure is an invariance violation.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ParseError(ForgeError):
    """Formula text rejected; `position` is a character offset."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class SortError(ForgeError):
    """Formula is not well-sorted against the signature."""


class EvaluationError(ForgeError):
    """Evaluation hit an unassigned variable or a missing predicate set."""


class BudgetError(ForgeError):
    """A configured enumeration or time cap was exceeded."""


class AmalgamError(ForgeError):
    """No acceptable amalgam exists for a scheduled extension task.

    `task` describes the failing (extension type, embedding) pair.
    """

    def __init__(self, message, task=None):
        super().__init__(message)
        self.task = task


class TreeError(ForgeError):
    """Labeled tree is malformed or too shallow for the requested transform."""


class DocumentError(ForgeError):
    """External JSON document is malformed or inconsistent."""


class ProjectError(ForgeError):
    """Project file is malformed or references unknown resources."""
