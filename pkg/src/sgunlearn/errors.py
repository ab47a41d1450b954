"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SGUnlearnError(Exception):
    """Base class for every error raised by sgunlearn."""


# scene graphs -----------------------------------------------------------


class GraphValidationError(SGUnlearnError):
    pass


class DuplicateId(GraphValidationError):
    pass


class DanglingEdge(GraphValidationError):
    pass


class BadBBox(GraphValidationError):
    pass


class UnknownLabel(GraphValidationError):
    pass


class UnknownId(GraphValidationError):
    pass


class TooManyObjects(GraphValidationError):
    pass


class DegenerateBox(SGUnlearnError):
    pass


class ParseError(SGUnlearnError):
    pass


# data / config ----------------------------------------------------------


class ConfigError(SGUnlearnError):
    pass


class MissingArtifact(SGUnlearnError):
    def __init__(self, path, what: str = "artifact"):
        super().__init__(f"missing {what}: expected {path}")
        self.path = path


# numerics ---------------------------------------------------------------


class ShapeMismatch(SGUnlearnError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.shapes = (tuple(a), tuple(b))


class NoTrace(SGUnlearnError):
    pass


class DimensionMismatch(SGUnlearnError):
    pass


class NaNEncountered(SGUnlearnError):
    pass


class NonFiniteLoss(SGUnlearnError):
    pass


class TooSmall(SGUnlearnError):
    pass


# unlearning -------------------------------------------------------------


class UnknownObjectId(SGUnlearnError):
    pass


class RoiOutOfBounds(SGUnlearnError):
    pass


class IncompatibleScope(SGUnlearnError):
    pass


class NotApplicable(SGUnlearnError):
    pass
