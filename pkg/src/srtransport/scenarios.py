"""Shipped scenario files and helpers to read them.

A scenario is a JSON object holding an inline ``structure`` (or a path to a
structure file, relative to the scenario) plus per-command parameter blocks
such as ``flow``, ``distance`` and ``contract``.
"""

import json
from importlib import resources
from pathlib import Path

from .errors import InputError
from .structure import DomainBox, Frame, load_structure, parse_structure

SHIPPED = ("engel", "cubic", "contracting")


def data_path(name: str) -> Path:
    """Filesystem path of a file under the package ``data`` directory."""
    return Path(str(resources.files("srtransport") / "data" / name))


def shipped_scenario_path(name: str) -> Path:
    return data_path(f"scenarios/{name}.json")


def load_scenario(path) -> dict:
    """Read a scenario file; a bare name picks the shipped scenario of that name."""
    p = Path(path)
    if not p.exists() and str(path) in SHIPPED:
        p = shipped_scenario_path(str(path))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"scenario {path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise InputError(f"scenario {path}: expected a JSON object")
    data.setdefault("_dir", str(p.resolve().parent))
    return data


def scenario_frame(sc: dict) -> Frame | None:
    s = sc.get("structure")
    if s is None:
        return None
    if isinstance(s, str):
        p = Path(s)
        if not p.is_absolute():
            p = Path(sc.get("_dir", ".")) / p
        return load_structure(p)
    return parse_structure(json.dumps(s))


def region_box(region) -> DomainBox:
    """Box from ``{"center": [...], "half": [...]}`` or a ``"c1,c2,c3,c4:h1,h2,h3,h4"`` string."""
    try:
        if isinstance(region, str):
            c, h = region.split(":")
            center = [float(v) for v in c.split(",")]
            half = [float(v) for v in h.split(",")]
        else:
            center, half = list(map(float, region["center"])), list(map(float, region["half"]))
        return DomainBox(tuple(center), tuple(half))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad region {region!r}: {exc}") from None
