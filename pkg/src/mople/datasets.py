"""Bundled example data."""

from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path

from ._types import load_dataset

PRESTIGE_COLUMNS = {"y": "prestige", "x": ["education"], "u": "income"}


def prestige_path() -> Path:
    """Path of the Canadian occupational prestige table (102 occupations).

    Columns: occupation, prestige, education, income, women, type; ``type``
    (bc / prof / wc) is empty for four occupations.
    """
    return Path(str(resources.files("mople") / "data" / "prestige.csv"))


def load_prestige():
    """Return the prestige ~ education + g(income) dataset and the occupation types."""
    path = prestige_path()
    data = load_dataset(path, PRESTIGE_COLUMNS["y"], PRESTIGE_COLUMNS["x"], PRESTIGE_COLUMNS["u"])
    with path.open(newline="", encoding="utf-8") as fh:
        types = [rec["type"] or None for rec in csv.DictReader(fh)]
    return data, types
