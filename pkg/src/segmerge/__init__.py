"""Toolkit for merging semantic-segmentation datasets into one label-space."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ParseError, SegmergeError
from .taxonomy import (
    IGNORE_ID,
    UNIVERSAL,
    ClassDef,
    ClassMap,
    DatasetTaxonomy,
    Directive,
    Lut,
    UniversalClass,
    UniversalLabelSpace,
    build_lut,
    merge_label_spaces,
    parse_directives,
    parse_taxonomy,
)

__version__ = "0.1.0"


def fixture_path(name: str) -> Path:
    """Path of a taxonomy or directive file shipped with the package."""
    path = resources.files("segmerge") / "fixtures" / name
    return Path(str(path))


__all__ = [
    "IGNORE_ID",
    "UNIVERSAL",
    "ClassDef",
    "ClassMap",
    "DatasetTaxonomy",
    "Directive",
    "Lut",
    "ParseError",
    "SegmergeError",
    "UniversalClass",
    "UniversalLabelSpace",
    "build_lut",
    "fixture_path",
    "merge_label_spaces",
    "parse_directives",
    "parse_taxonomy",
]
