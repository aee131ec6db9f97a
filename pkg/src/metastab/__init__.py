"""Metastability of non-reversible overdamped diffusions on polynomial landscapes."""

__version__ = "0.1.0"

from .errors import MetastabError, ModelError, NumericError, SpecParseError, StaleArtifactError  # noqa: E402
from .potential import FieldEval, PotentialSpec, load_spec, parse_spec  # noqa: E402

__all__ = [
    "FieldEval",
    "MetastabError",
    "ModelError",
    "NumericError",
    "PotentialSpec",
    "SpecParseError",
    "StaleArtifactError",
    "load_spec",
    "parse_spec",
]
