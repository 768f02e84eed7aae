"""Corpus ingestion, structural annotation, splits, descriptions and toy datasets."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence

import networkx as nx
import numpy as np

from . import metrics
from .errors import IngestionError, InvalidConfigError, InvalidInputError, ParseError, UnknownElementError
from .geom import MolecularGeometry, center_of_mass_project, pairwise_distances, read_xyz, write_xyz
from .vocab import FLAGS, PROPERTY_KEYS, UNITS, Vocabulary, load_templates, load_vocabulary

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
SPLIT_RATIO = (100, 18, 13)  # train / val / test
ACCEPTED_UNITS = {
    "Cv": {"cal/mol K", "cal/molK", "cal/(mol K)", "cal/mol/K"},
    "mu": {"D", "Debye"},
    "alpha": {"Bohr^3", "Bohr3", "a0^3"},
    "eps_homo": {"meV"},
    "eps_lumo": {"meV"},
    "gap": {"meV"},
}


@dataclass
class AnnotatedCorpus:
    ids: List[str]
    geometries: List[MolecularGeometry]
    properties: List[Dict[str, float]]
    flags: List[FrozenSet[str]]
    descriptions: List[List[str]] = field(default_factory=list)
    splits: List[str] = field(default_factory=list)  # "train" / "val" / "test"
    halves: List[str] = field(default_factory=list)  # "D_a" / "D_b" for train members, "" otherwise
    warnings: int = 0

    def __post_init__(self):
        n = len(self.ids)
        if not self.descriptions:
            self.descriptions = [[] for _ in range(n)]
        for name in ("geometries", "properties", "flags", "descriptions"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"corpus field {name} has wrong length")
        if self.splits and (len(self.splits) != n or len(self.halves) != n):
            raise InvalidInputError("split labels have wrong length")

    def __len__(self):
        return len(self.ids)

    def indices(self, label: Optional[str] = None) -> List[int]:
        """Indices carrying a split label ("train", "val", "test") or half ("D_a", "D_b")."""
        if label is None or label == "all":
            return list(range(len(self)))
        if not self.splits:
            raise InvalidInputError("corpus has no split labels")
        pool = self.halves if label in ("D_a", "D_b") else self.splits
        return [i for i, lab in enumerate(pool) if lab == label]

    def select(self, label: Optional[str] = None) -> List[MolecularGeometry]:
        return [self.geometries[i] for i in self.indices(label)]

    def property_array(self, key: str, indices=None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.array([self.properties[i][key] for i in idx], dtype=float)


# --- structural flags -----------------------------------------------------------

def structural_flags(g: MolecularGeometry) -> FrozenSet[str]:
    """Flags from the perceived bond graph; heuristics, not a cheminformatics toolkit."""
    G = metrics.bond_graph(g)
    syms = g.symbols
    heavy = [i for i, s in enumerate(syms) if s != "H"]
    cycles = nx.minimum_cycle_basis(G) if G.number_of_edges() else []
    flags = set()
    if cycles:
        flags.add("ring")
        if len(cycles) >= 2:
            flags.add("polycyclic")
    elif len(heavy) >= 2:
        flags.add("chain")
    for cyc in cycles:
        if len(cyc) in (5, 6) and all(syms[i] in ("C", "N", "O") for i in cyc):
            ring_edges = [(a, b) for a in cyc for b in cyc if a < b and G.has_edge(a, b)]
            if sum(G.edges[e]["order"] == "2" for e in ring_edges) >= len(cyc) // 2 - (len(cyc) == 5):
                flags.add("aromatic")
                break
    for c in (i for i, s in enumerate(syms) if s == "C"):
        os_ = [(j, G.edges[c, j]["order"]) for j in G.neighbors(c) if syms[j] == "O"]
        double = any(o == "2" for _, o in os_)
        hydroxyl = any(o == "1" and any(syms[k] == "H" for k in G.neighbors(j)) for j, o in os_)
        if double and hydroxyl:
            flags.add("carboxyl")
            break
    if syms.count("N") >= 2:
        flags.add("nitrogen_rich")
    if heavy and sum(syms[i] in ("N", "O") for i in heavy) / len(heavy) >= 0.25:
        flags.add("water_soluble")
    return frozenset(flags)


# --- ingestion -------------------------------------------------------------------

def _read_property_csv(path: Path) -> Dict[str, Dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise IngestionError(f"{path}: needs a header and a unit row")
    header, units = rows[0], rows[1]
    if header[0] != "id" or set(header[1:]) != set(PROPERTY_KEYS):
        raise IngestionError(f"{path}: header must be id,{','.join(PROPERTY_KEYS)}")
    for key, unit in zip(header[1:], units[1:]):
        if unit.strip() not in ACCEPTED_UNITS[key]:
            raise IngestionError(f"{path}: unit {unit!r} for {key} not accepted (expected {UNITS[key]})")
    out = {}
    for row in rows[2:]:
        if not row:
            continue
        out[row[0]] = {k: float(v) for k, v in zip(header[1:], row[1:])}
    return out


def load_qm9_like(directory) -> AnnotatedCorpus:
    """Read ``*.xyz`` molecules plus ``properties.csv`` keyed by file stem.

    Molecules with elements outside H, C, N, O, F are skipped and counted in
    ``corpus.warnings``.
    """
    directory = Path(directory)
    props = _read_property_csv(directory / "properties.csv")
    files = sorted(directory.glob("*.xyz"))
    if not files:
        files = sorted((directory / "molecules").glob("*.xyz"))
    ids, geoms, prop_list, flags = [], [], [], []
    skipped = 0
    for f in files:
        try:
            frames = read_xyz(f, max_frames=1)
        except UnknownElementError as exc:
            skipped += 1
            log.warning("skipping %s: %s", f.name, exc)
            continue
        except ParseError as exc:
            raise IngestionError(f"{f}: {exc}") from exc
        if f.stem not in props:
            raise IngestionError(f"no property row for {f.name}")
        g = center_of_mass_project(frames[0])
        ids.append(f.stem)
        geoms.append(g)
        prop_list.append(props[f.stem])
        flags.append(structural_flags(g))
    return AnnotatedCorpus(ids, geoms, prop_list, flags, warnings=skipped)


# --- split -----------------------------------------------------------------------

def split(corpus: AnnotatedCorpus, seed: int) -> AnnotatedCorpus:
    """Seeded train/val/test split in 100:18:13 proportion; train halved into D_a / D_b."""
    n = len(corpus)
    if n < 4:
        raise InvalidInputError("corpus too small to split")
    total = sum(SPLIT_RATIO)
    n_val = n * SPLIT_RATIO[1] // total
    n_test = n * SPLIT_RATIO[2] // total
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    splits = [""] * n
    halves = [""] * n
    for rank, i in enumerate(perm):
        if rank < n_train:
            splits[i] = "train"
            halves[i] = "D_a" if rank < n_train // 2 else "D_b"
        elif rank < n_train + n_val:
            splits[i] = "val"
        else:
            splits[i] = "test"
    return replace(corpus, splits=splits, halves=halves)


# --- descriptions ------------------------------------------------------------------

def generate_description(props: Dict[str, float], flags, templates: Dict[str, List[str]],
                         rng: np.random.Generator, vocab: Optional[Vocabulary] = None,
                         max_clauses: int = 3) -> str:
    """Fill 1 to ``max_clauses`` clauses into a single sentence.

    Example: ``{"mu": 2.5}`` gives "This molecule has a dipole moment of 2.50 D."
    """
    vocab = vocab or load_vocabulary()
    options = [("flag", f) for f in FLAGS if f in flags] + [("prop", k) for k in PROPERTY_KEYS if k in props]
    if not options:
        raise InvalidInputError("nothing to describe")
    n = int(rng.integers(1, min(max_clauses, len(options)) + 1))
    chosen = sorted(rng.choice(len(options), size=n, replace=False))
    clauses = []
    for i in chosen:
        kind, name = options[i]
        if kind == "flag":
            clauses.append(vocab.flag_phrase(name))
        else:
            opts = templates[name]
            clauses.append(opts[int(rng.integers(len(opts)))].format(**{name: props[name]}))
    body = clauses[0] if len(clauses) == 1 else ", ".join(clauses[:-1]) + " and " + clauses[-1]
    return f"This molecule has {body}."


def describe_corpus(corpus: AnnotatedCorpus, seed: int) -> AnnotatedCorpus:
    templates, vocab = load_templates(), load_vocabulary()
    descriptions = []
    for i in range(len(corpus)):
        rng = np.random.default_rng([seed, i])
        descriptions.append([generate_description(corpus.properties[i], corpus.flags[i], templates, rng, vocab)])
    return replace(corpus, descriptions=descriptions)


# --- toy datasets ------------------------------------------------------------------

TOY_KINDS = ("diatomic_clusters", "chain5", "hydrides")

_HYDRIDES = {
    "H2O": (["O", "H", "H"], [[0, 0, 0], [0.9572, 0, 0], [-0.2400, 0.9266, 0]]),
    "NH3": (["N", "H", "H", "H"], [[0, 0, 0.1173], [0, 0.9377, -0.2737], [0.8121, -0.4689, -0.2737], [-0.8121, -0.4689, -0.2737]]),
    "CH4": (["C", "H", "H", "H", "H"], [[0, 0, 0], [0.6291, 0.6291, 0.6291], [-0.6291, -0.6291, 0.6291], [-0.6291, 0.6291, -0.6291], [0.6291, -0.6291, -0.6291]]),
    "HF": (["F", "H"], [[0, 0, 0], [0.9168, 0, 0]]),
}


def pseudo_properties(g: MolecularGeometry) -> Dict[str, float]:
    """Analytic stand-ins for the six properties; only for synthetic corpora.

    ``alpha`` grows with molecular size (10 x mean interatomic distance), so a
    polarizability prompt selects by bond length in the diatomic set.
    """
    M = g.atom_count
    d = pairwise_distances(g.coords)
    mean_d = float(d[np.triu_indices(M, 1)].mean()) if M > 1 else 0.0
    dipole = float(np.linalg.norm((g.charges[:, None] * g.coords).sum(0)))
    gap = 8000.0 / (1.0 + mean_d)
    homo = -4000.0 - gap / 2
    return {"Cv": 3.0 * M, "mu": dipole, "alpha": 10.0 * mean_d, "eps_homo": homo, "eps_lumo": homo + gap, "gap": gap}


def _random_unit(rng):
    u = rng.standard_normal(3)
    return u / np.linalg.norm(u)


def make_toy_dataset(kind: str, n: int, seed: int) -> AnnotatedCorpus:
    """Synthetic corpora with known structure.

    diatomic_clusters: C-C pairs, first half short (1.0 +/- 0.05 A), second
    half long (2.0 +/- 0.05 A), random orientation. chain5: five-carbon zigzag
    chains, 1.54 A bonds with jitter. hydrides: H2O/NH3/CH4/HF round-robin with
    small coordinate jitter.
    """
    if kind not in TOY_KINDS:
        raise InvalidConfigError(f"unknown toy dataset {kind!r}; choose from {TOY_KINDS}")
    if n < 1:
        raise InvalidInputError("n must be positive")
    rng = np.random.default_rng(seed)
    geoms = []
    for i in range(n):
        if kind == "diatomic_clusters":
            base = 1.0 if i < (n + 1) // 2 else 2.0
            d = base + rng.uniform(-0.05, 0.05)
            u = _random_unit(rng)
            g = MolecularGeometry.from_symbols(["C", "C"], [u * d / 2, -u * d / 2])
        elif kind == "chain5":
            angle = np.deg2rad(109.5)
            pts = [np.zeros(3)]
            for j in range(1, 5):
                b = 1.54 + rng.uniform(-0.03, 0.03)
                direction = np.array([np.sin(angle / 2), (-1) ** j * np.cos(angle / 2), 0.0])
                pts.append(pts[-1] + b * direction)
            coords = np.array(pts) + rng.normal(0, 0.02, (5, 3))
            q = _random_rotation(rng)
            g = MolecularGeometry.from_symbols(["C"] * 5, coords @ q.T)
        else:
            name = list(_HYDRIDES)[i % len(_HYDRIDES)]
            syms, coords = _HYDRIDES[name]
            coords = np.array(coords) + rng.normal(0, 0.02, (len(syms), 3))
            g = MolecularGeometry.from_symbols(syms, coords @ _random_rotation(rng).T)
        geoms.append(center_of_mass_project(g))
    ids = [f"{kind}_{i:05d}" for i in range(n)]
    props = [pseudo_properties(g) for g in geoms]
    flags = [structural_flags(g) for g in geoms]
    return AnnotatedCorpus(ids, geoms, props, flags)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# --- bundle I/O --------------------------------------------------------------------

def save_bundle(corpus: AnnotatedCorpus, out_dir, source: str = "") -> Path:
    """Write ``molecules/<id>.xyz``, ``properties.csv`` and ``annotations.json``."""
    out = Path(out_dir)
    (out / "molecules").mkdir(parents=True, exist_ok=True)
    for cid, g in zip(corpus.ids, corpus.geometries):
        write_xyz([g], out / "molecules" / f"{cid}.xyz")
    with open(out / "properties.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *PROPERTY_KEYS])
        w.writerow(["unit", *(UNITS[k] for k in PROPERTY_KEYS)])
        for cid, p in zip(corpus.ids, corpus.properties):
            w.writerow([cid, *(repr(float(p[k])) for k in PROPERTY_KEYS)])
    ann = {
        "version": BUNDLE_VERSION,
        "source": source,
        "warnings": corpus.warnings,
        "molecules": [
            {
                "id": cid,
                "flags": sorted(corpus.flags[i]),
                "descriptions": corpus.descriptions[i],
                "split": corpus.splits[i] if corpus.splits else "",
                "half": corpus.halves[i] if corpus.halves else "",
            }
            for i, cid in enumerate(corpus.ids)
        ],
    }
    (out / "annotations.json").write_text(json.dumps(ann, indent=1, sort_keys=True) + "\n")
    return out


def load_bundle(directory) -> AnnotatedCorpus:
    directory = Path(directory)
    ann_path = directory / "annotations.json"
    if not ann_path.exists():
        raise IngestionError(f"{directory} is not a corpus bundle (no annotations.json)")
    ann = json.loads(ann_path.read_text())
    if ann.get("version") != BUNDLE_VERSION:
        raise IngestionError(f"unsupported bundle version {ann.get('version')}")
    props = _read_property_csv(directory / "properties.csv")
    ids, geoms, prop_list, flags, descs, splits, halves = [], [], [], [], [], [], []
    for m in ann["molecules"]:
        cid = m["id"]
        if cid not in props:
            raise IngestionError(f"no property row for {cid}")
        ids.append(cid)
        # bundles store centered coordinates at 6 decimals; re-center exactly
        geoms.append(center_of_mass_project(read_xyz(directory / "molecules" / f"{cid}.xyz")[0]))
        prop_list.append(props[cid])
        flags.append(frozenset(m["flags"]))
        descs.append(list(m["descriptions"]))
        splits.append(m["split"])
        halves.append(m["half"])
    labeled = any(splits)
    return AnnotatedCorpus(ids, geoms, prop_list, flags, descs, splits if labeled else [], halves if labeled else [],
                           warnings=ann.get("warnings", 0))
