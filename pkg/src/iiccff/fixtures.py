"""Shipped data sets and benchmark scenarios.

``fixture_path("skulls")`` resolves a bare name against the package data
directory (``.csv`` first, then ``.json``); explicit file names work too.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import InputError

__all__ = ["fixture_path", "list_fixtures"]


def _data_dir() -> Path:
    return Path(str(resources.files("iiccff") / "data"))


def list_fixtures() -> list:
    return sorted(p.name for p in _data_dir().iterdir() if p.suffix in (".csv", ".json"))


def fixture_path(name: str) -> Path:
    d = _data_dir()
    for cand in (name, f"{name}.csv", f"{name}.json"):
        p = d / cand
        if p.is_file():
            return p
    raise InputError(f"no shipped fixture named {name!r}; available: {', '.join(list_fixtures())}")
