"""Loader for the shipped prompt vocabulary and description templates."""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Tuple

from .errors import InvalidConfigError

PROPERTY_KEYS = ("Cv", "mu", "alpha", "eps_homo", "eps_lumo", "gap")
FLAGS = ("chain", "ring", "polycyclic", "aromatic", "carboxyl", "nitrogen_rich", "water_soluble")
UNITS = {"Cv": "cal/mol K", "mu": "D", "alpha": "Bohr^3", "eps_homo": "meV", "eps_lumo": "meV", "gap": "meV"}


@dataclass
class Vocabulary:
    version: int
    names: List[Tuple[str, str]] = field(default_factory=list)  # (key, phrase)
    units: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    quals: List[Tuple[str, float, str]] = field(default_factory=list)  # (key, percentile, phrase)
    flags: List[Tuple[str, str]] = field(default_factory=list)  # (flag, phrase)

    def flag_phrase(self, flag: str) -> str:
        for f, phrase in self.flags:
            if f == flag:
                return phrase
        raise KeyError(flag)


def _read_asset(name: str, path=None) -> str:
    if path is not None:
        with open(path) as fh:
            return fh.read()
    return resources.files("molguide.assets").joinpath(name).read_text()


def load_vocabulary(path=None) -> Vocabulary:
    vocab = Vocabulary(version=0)
    for lineno, raw in enumerate(_read_asset("synonyms.txt", path).splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("version"):
            vocab.version = int(line.split()[1])
            continue
        parts = [p.strip() for p in line.split("|")]
        kind = parts[0]
        try:
            if kind == "name":
                vocab.names.append((_key(parts[1]), parts[2]))
            elif kind == "unit":
                vocab.units.setdefault(_key(parts[1]), []).append((parts[2], float(parts[3])))
            elif kind == "qual":
                vocab.quals.append((_key(parts[1]), float(parts[2]), parts[3]))
            elif kind == "flag":
                if parts[1] not in FLAGS:
                    raise InvalidConfigError(f"unknown flag {parts[1]!r}")
                vocab.flags.append((parts[1], parts[2]))
            else:
                raise InvalidConfigError(f"unknown entry kind {kind!r}")
        except IndexError:
            raise InvalidConfigError(f"synonyms line {lineno}: too few fields") from None
    return vocab


def _key(k: str) -> str:
    if k not in PROPERTY_KEYS:
        raise InvalidConfigError(f"unknown property key {k!r}")
    return k


def load_templates(path=None) -> Dict[str, List[str]]:
    """Map property key to its clause templates; each template names exactly one key."""
    out: Dict[str, List[str]] = {}
    for line in _read_asset("templates.txt", path).splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        keys = {f[1] for f in string.Formatter().parse(line) if f[1]}
        if len(keys) != 1:
            raise InvalidConfigError(f"template must reference one property: {line!r}")
        out.setdefault(_key(keys.pop()), []).append(line)
    return out
