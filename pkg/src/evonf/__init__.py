"""Evolutionary neuro-fuzzy systems: Takagi-Sugeno inference whose
membership functions, rules, operators and learning rate are evolved, with
optional gradient fine-tuning."""

from evonf.errors import EvoNFError
from evonf.fuzzy_core import (
    BellMF,
    FisKind,
    FuzzyInferenceSystem,
    FuzzyRule,
    FuzzyVariable,
    GaussianMF,
    OperatorParams,
    Shape,
    rmse,
    ts_evaluate,
)

__version__ = "0.1.0"

__all__ = [
    "BellMF",
    "EvoNFError",
    "FisKind",
    "FuzzyInferenceSystem",
    "FuzzyRule",
    "FuzzyVariable",
    "GaussianMF",
    "OperatorParams",
    "Shape",
    "rmse",
    "ts_evaluate",
]
