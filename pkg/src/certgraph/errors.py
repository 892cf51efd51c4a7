"""Exception hierarchy shared by every certgraph module.

The CLI maps any ``CertGraphError`` to a nonzero exit code, so library code
raises these rather than bare ``ValueError`` for contract violations.
"""

from __future__ import annotations


class CertGraphError(Exception):
    """Base class for all certgraph errors."""


# graph-dsl
class ProgramSyntaxError(CertGraphError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UndefinedNode(CertGraphError):
    pass


class DuplicateNode(CertGraphError):
    pass


class MissingReturn(CertGraphError):
    pass


class MultipleReturn(CertGraphError):
    pass


class UnknownTool(CertGraphError):
    pass


class CycleDetected(CertGraphError):
    pass


class DanglingParent(CertGraphError):
    pass


class InvalidGraph(CertGraphError):
    pass


class UnknownNode(CertGraphError):
    pass


class ExpandOnAnswerNode(CertGraphError):
    pass


class ExpandDepthExceeded(CertGraphError):
    pass


class RetryCapExceeded(CertGraphError):
    pass


class InvalidMutation(CertGraphError):
    pass


# synth-world
class RegionOutOfBounds(CertGraphError):
    pass


class UnknownKind(CertGraphError):
    pass


class Unresolvable(CertGraphError):
    pass


# certify
class TypeMismatch(CertGraphError):
    pass


class DegenerateBox(CertGraphError):
    pass


class EmptyPool(CertGraphError):
    pass


class WrongVariant(CertGraphError):
    pass


class StaleCalibrator(CertGraphError):
    pass


# engine
class MissingCalibrator(CertGraphError):
    pass


class ParentNotExecuted(CertGraphError):
    pass


class UnsupportedQueryKind(CertGraphError):
    pass


# controller
class AllActionsMasked(CertGraphError):
    pass


class EmptyBatch(CertGraphError):
    pass


class BudgetExceeded(CertGraphError):
    pass


# selfplay
class FrozenBundle(CertGraphError):
    pass


# bench
class UnknownVariant(CertGraphError):
    pass


class EmptyTestSet(CertGraphError):
    pass
