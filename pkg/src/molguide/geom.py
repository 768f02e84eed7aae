"""Molecular geometries, rigid motions and XYZ file I/O.

A geometry pairs atom coordinates ``coords`` (M x 3, Angstrom) with atom
features ``feats`` (M x 6): a one-hot atom type over H, C, N, O, F followed
by an integer-valued formal charge.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError, UnknownElementError

ELEMENTS = ("H", "C", "N", "O", "F")
ELEMENT_INDEX = {sym: i for i, sym in enumerate(ELEMENTS)}
NUM_TYPES = len(ELEMENTS)
FEATURE_WIDTH = NUM_TYPES + 1
CHARGE_COLUMN = NUM_TYPES

CENTER_TOL = 1e-9
ORTHO_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MolecularGeometry:
    coords: np.ndarray
    feats: np.ndarray
    centered: bool = False

    def __post_init__(self):
        coords = _frozen(self.coords)
        feats = _frozen(self.feats)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvalidInputError(f"coords must be M x 3, got {coords.shape}")
        if feats.ndim != 2 or feats.shape != (coords.shape[0], FEATURE_WIDTH):
            raise InvalidInputError(
                f"feats must be {coords.shape[0]} x {FEATURE_WIDTH}, got {feats.shape}"
            )
        if self.centered and coords.shape[0] and np.abs(coords.sum(axis=0)).max() > CENTER_TOL:
            raise InvalidInputError("geometry flagged centered but coordinate sums are nonzero")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    @property
    def atom_count(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_symbols(cls, symbols: Sequence[str], coords, charges=None, centered=False):
        return cls(np.asarray(coords, dtype=float), encode_features(symbols, charges), centered)

    @property
    def symbols(self) -> List[str]:
        return [ELEMENTS[i] for i in np.argmax(self.feats[:, :NUM_TYPES], axis=1)]

    @property
    def charges(self) -> np.ndarray:
        return np.rint(self.feats[:, CHARGE_COLUMN]).astype(int)

    def is_decoded(self) -> bool:
        onehot = self.feats[:, :NUM_TYPES]
        return bool(
            np.all((onehot == 0) | (onehot == 1))
            and np.all(onehot.sum(axis=1) == 1)
            and np.all(self.feats[:, CHARGE_COLUMN] == np.rint(self.feats[:, CHARGE_COLUMN]))
        )

    def with_coords(self, coords, centered: Optional[bool] = None) -> "MolecularGeometry":
        return MolecularGeometry(coords, self.feats, self.centered if centered is None else centered)

    def __repr__(self):
        return f"MolecularGeometry(M={self.atom_count}, formula={formula(self)!r}, centered={self.centered})"


def encode_features(symbols: Sequence[str], charges=None) -> np.ndarray:
    feats = np.zeros((len(symbols), FEATURE_WIDTH))
    for i, sym in enumerate(symbols):
        if sym not in ELEMENT_INDEX:
            raise InvalidInputError(f"unsupported element {sym!r}")
        feats[i, ELEMENT_INDEX[sym]] = 1.0
    if charges is not None:
        feats[:, CHARGE_COLUMN] = np.asarray(charges, dtype=float)
    return feats


def decode_features(feats: np.ndarray) -> np.ndarray:
    """Snap latent features to a valid one-hot block and integer charge.

    Works on any leading batch shape.
    """
    feats = np.asarray(feats, dtype=float)
    out = np.zeros_like(feats)
    idx = np.argmax(feats[..., :NUM_TYPES], axis=-1)
    np.put_along_axis(out[..., :NUM_TYPES], idx[..., None], 1.0, axis=-1)
    out[..., CHARGE_COLUMN] = np.rint(feats[..., CHARGE_COLUMN])
    return out


def formula(g: MolecularGeometry) -> str:
    syms = g.symbols
    return "".join(f"{s}{syms.count(s) if syms.count(s) > 1 else ''}" for s in ELEMENTS if s in syms)


def center_of_mass_project(g: MolecularGeometry) -> MolecularGeometry:
    """Subtract the coordinate mean so that every column sums to zero."""
    if g.atom_count == 0:
        raise InvalidInputError("cannot center an empty geometry")
    return MolecularGeometry(remove_mean(g.coords), g.feats, centered=True)


def remove_mean(x: np.ndarray) -> np.ndarray:
    """Zero-mean projection over the atom axis (second to last) of a batch of coordinates."""
    return x - x.mean(axis=-2, keepdims=True)


@dataclass(frozen=True, eq=False)
class Rotation:
    """A 3 x 3 orthogonal matrix (proper or improper)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3 x 3, got {m.shape}")
        if np.abs(m.T @ m - np.eye(3)).max() > ORTHO_TOL or abs(abs(np.linalg.det(m)) - 1) > ORTHO_TOL:
            raise InvalidInputError("matrix is not orthogonal")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def random(cls, rng: np.random.Generator, proper: bool = True) -> "Rotation":
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q * np.sign(np.diag(r))
        if proper and np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        return cls(q)

    @classmethod
    def about_axis(cls, axis, angle: float) -> "Rotation":
        k = np.asarray(axis, dtype=float)
        k = k / np.linalg.norm(k)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        return cls(np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx)

    @property
    def T(self) -> "Rotation":
        return Rotation(self.matrix.T)


def apply_rotation(g: MolecularGeometry, r: Rotation) -> MolecularGeometry:
    if not isinstance(r, Rotation):
        r = Rotation(r)
    # rotation fixes the origin, so a centered geometry stays centered up to rounding
    return MolecularGeometry(g.coords @ r.matrix.T, g.feats, g.centered)


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[..., :, None, :] - x[..., None, :, :]
    return np.sqrt((diff**2).sum(-1))


def rmsd(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum(-1).mean()))


def kabsch_align(reference: MolecularGeometry, target: MolecularGeometry) -> Rotation:
    """Proper rotation R minimizing RMSD between ``reference.coords @ R.T`` and ``target.coords``.

    Degenerate inputs (collinear or coincident atoms) return one of the
    minimizers; only RMSD optimality is guaranteed there.
    """
    if reference.atom_count != target.atom_count:
        raise InvalidInputError(
            f"atom counts differ: {reference.atom_count} vs {target.atom_count}"
        )
    return Rotation(kabsch_matrix(reference.coords, target.coords))


def kabsch_matrix(ref: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    cov = ref.T @ tgt
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def kabsch_matrices(ref: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Batched Kabsch over leading axis: ref, tgt are (B, M, 3); returns (B, 3, 3)."""
    cov = np.einsum("bmi,bmj->bij", ref, tgt)
    u, _, vt = np.linalg.svd(cov)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    diag = np.zeros((len(d), 3, 3))
    diag[:, 0, 0] = 1.0
    diag[:, 1, 1] = 1.0
    diag[:, 2, 2] = d
    return v @ diag @ ut


# --- XYZ I/O ---------------------------------------------------------------

_CHARGE_RE = re.compile(r"charge=([-+0-9,]*)")


def write_xyz(gs: Iterable[MolecularGeometry], path, comments: Optional[Sequence[str]] = None) -> None:
    gs = list(gs)
    lines = []
    for n, g in enumerate(gs):
        charges = ",".join(str(c) for c in g.charges)
        comment = f"charge={charges}"
        if comments is not None and comments[n]:
            comment += f" {comments[n]}"
        lines.append(str(g.atom_count))
        lines.append(comment)
        for sym, (x, y, z) in zip(g.symbols, g.coords):
            lines.append(f"{sym:<2s} {x:.6f} {y:.6f} {z:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path, allowed=ELEMENTS, max_frames: Optional[int] = None) -> List[MolecularGeometry]:
    """Read the frames of a (multi-frame) XYZ file.

    With ``max_frames`` reading stops early, so trailing non-XYZ lines (as in
    QM9 source files) are never parsed.
    """
    lines = Path(path).read_text().splitlines()
    frames = []
    i = 0
    while i < len(lines) and (max_frames is None or len(frames) < max_frames):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise ParseError(f"{path}:{i + 1}: expected atom count, got {lines[i]!r}") from None
        comment = lines[i + 1] if i + 1 < len(lines) else ""
        body = lines[i + 2 : i + 2 + n]
        atom_lines = [ln for ln in body if ln.strip()]
        if len(atom_lines) != n:
            raise ParseError(f"{path}:{i + 1}: header says {n} atoms, found {len(atom_lines)}")
        symbols, coords, col_charges = [], [], []
        for j, ln in enumerate(body):
            parts = ln.split()
            lineno = i + 3 + j
            if len(parts) < 4:
                raise ParseError(f"{path}:{lineno}: malformed atom line {ln!r}")
            sym = parts[0].capitalize()
            if sym not in allowed:
                raise UnknownElementError(f"{path}:{lineno}: unknown element {parts[0]!r}", parts[0])
            try:
                coords.append([float(v.replace("*^", "e")) for v in parts[1:4]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad coordinate in {ln!r}") from None
            symbols.append(sym)
            col_charges.append(_maybe_int(parts[4]) if len(parts) > 4 else None)
        charges = _comment_charges(comment, n)
        if charges is None:
            charges = [c if c is not None else 0 for c in col_charges]
        frames.append(MolecularGeometry.from_symbols(symbols, coords, charges))
        i += 2 + n
    return frames


def _maybe_int(tok: str):
    try:
        return int(tok)
    except ValueError:
        return None


def _comment_charges(comment: str, n: int):
    m = _CHARGE_RE.search(comment)
    if not m or not m.group(1).strip():
        return None
    vals = [int(v) for v in m.group(1).split(",") if v]
    if len(vals) != n:
        raise ParseError(f"charge list has {len(vals)} entries for {n} atoms")
    return vals
