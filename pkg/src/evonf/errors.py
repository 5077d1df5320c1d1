"""Exception types raised across the package."""


class EvoNFError(Exception):
    """Base class for all package errors."""


class MalformedRule(EvoNFError):
    pass


class UnsupportedFisKind(EvoNFError):
    pass


class EmptyDataset(EvoNFError):
    pass


class NoActiveRules(EvoNFError):
    pass


class InvalidCount(EvoNFError):
    pass


class AngleOutOfRange(EvoNFError):
    pass


class NotRepresentable(EvoNFError):
    pass


class SpecMismatch(EvoNFError):
    pass


class NonDifferentiablePoint(EvoNFError):
    pass


class InsufficientLength(EvoNFError):
    pass


class ParseError(EvoNFError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class MissingColumn(EvoNFError):
    pass


class ConstantColumn(EvoNFError):
    pass


class DegenerateSplit(EvoNFError):
    pass


class ConfigError(EvoNFError):
    pass


class FitnessError(EvoNFError):
    """A fitness function failed; carries the offending genome."""

    def __init__(self, message, genome=None):
        super().__init__(message)
        self.genome = genome
