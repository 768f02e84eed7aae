"""Generation metrics: bond perception, stability, novelty and property MAE."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Set

import networkx as nx
import numpy as np

from . import autodiff as ad
from . import net
from .errors import InvalidConfigError, InvalidInputError
from .geom import ELEMENTS, FEATURE_WIDTH, MolecularGeometry, formula, pairwise_distances

PROPERTY_KEYS = ("Cv", "mu", "alpha", "eps_homo", "eps_lumo", "gap")


@dataclass(frozen=True)
class BondTable:
    radii: Dict[str, float]
    valences: Dict[str, frozenset]
    max_order: Dict[str, int]
    single_margin: float = 0.40
    double_offset: float = -0.11
    triple_offset: float = -0.22
    version: int = 1

    def __post_init__(self):
        if not self.single_margin > self.double_offset > self.triple_offset:
            raise InvalidConfigError("need single > double > triple thresholds")
        for a in self.radii:
            for b in self.radii:
                if self.radii[a] + self.radii[b] + self.triple_offset <= 0:
                    raise InvalidConfigError(f"non-positive triple threshold for {a}-{b}")

    def thresholds(self, a: str, b: str):
        base = self.radii[a] + self.radii[b]
        return base + self.single_margin, base + self.double_offset, base + self.triple_offset


def load_bond_table(path=None) -> BondTable:
    text = (
        open(path).read()
        if path is not None
        else resources.files("molguide.assets").joinpath("bond_table.txt").read_text()
    )
    radii, valences, max_order, extra = {}, {}, {}, {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] in ELEMENTS:
            radii[parts[0]] = float(parts[1])
            valences[parts[0]] = frozenset(int(v) for v in parts[2].split(","))
            max_order[parts[0]] = int(parts[3])
        elif parts[0] == "version":
            extra["version"] = int(parts[1])
        else:
            extra[parts[0]] = float(parts[1])
    return BondTable(radii, valences, max_order, **extra)


_DEFAULT_TABLE: Optional[BondTable] = None


def default_table() -> BondTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_bond_table()
    return _DEFAULT_TABLE


def bond_orders(g: MolecularGeometry, table: Optional[BondTable] = None) -> np.ndarray:
    """Symmetric M x M matrix of perceived bond orders (0 to 3) from distances alone."""
    table = table or default_table()
    syms = g.symbols
    d = pairwise_distances(g.coords)
    M = g.atom_count
    orders = np.zeros((M, M), dtype=int)
    for i in range(M):
        for j in range(i + 1, M):
            single, double, triple = table.thresholds(syms[i], syms[j])
            dij = d[i, j]
            if dij >= single:
                continue
            order = 3 if dij < triple else 2 if dij < double else 1
            order = min(order, table.max_order[syms[i]], table.max_order[syms[j]])
            orders[i, j] = orders[j, i] = order
    return orders


def perceive_bonds(g: MolecularGeometry, table: Optional[BondTable] = None) -> np.ndarray:
    """Total perceived bond order per atom."""
    return bond_orders(g, table).sum(axis=1)


def stable_atoms(g: MolecularGeometry, table: Optional[BondTable] = None) -> np.ndarray:
    table = table or default_table()
    val = perceive_bonds(g, table)
    return np.array([int(v) in table.valences[s] for v, s in zip(val, g.symbols)], dtype=bool)


def _nonempty(gs):
    gs = list(gs)
    if not gs:
        raise InvalidInputError("empty molecule list")
    return gs


def atom_stability(gs: Sequence[MolecularGeometry], table: Optional[BondTable] = None) -> float:
    """Fraction of all atoms whose perceived valence is allowed for their element."""
    gs = _nonempty(gs)
    stable = sum(int(stable_atoms(g, table).sum()) for g in gs)
    return stable / sum(g.atom_count for g in gs)


def molecule_stability(gs: Sequence[MolecularGeometry], table: Optional[BondTable] = None) -> float:
    gs = _nonempty(gs)
    return sum(bool(stable_atoms(g, table).all()) for g in gs) / len(gs)


def bond_graph(g: MolecularGeometry, table: Optional[BondTable] = None) -> nx.Graph:
    orders = bond_orders(g, table)
    G = nx.Graph()
    for i, s in enumerate(g.symbols):
        G.add_node(i, element=s)
    for i, j in zip(*np.nonzero(np.triu(orders))):
        G.add_edge(int(i), int(j), order=str(orders[i, j]))
    return G


def canonical_key(g: MolecularGeometry, table: Optional[BondTable] = None) -> str:
    """Element formula plus a Weisfeiler-Lehman hash of the perceived bond graph.

    Identical molecules always share a key; distinct graphs may collide.
    """
    h = nx.weisfeiler_lehman_graph_hash(bond_graph(g, table), node_attr="element", edge_attr="order", iterations=3)
    return f"{formula(g)}|{h}"


def novelty(gs: Sequence[MolecularGeometry], train_keys: Set[str], table: Optional[BondTable] = None) -> float:
    """Fraction of generated molecules whose key is absent from ``train_keys``."""
    gs = _nonempty(gs)
    return sum(canonical_key(g, table) not in train_keys for g in gs) / len(gs)


# --- property regressor -------------------------------------------------------

@dataclass(frozen=True)
class RegressorConfig:
    layers: int = 3
    hidden: int = 32
    feature_width: int = FEATURE_WIDTH

    def to_dict(self):
        return asdict(self)


def regressor_layout(cfg: RegressorConfig) -> net.ParamLayout:
    from collections import OrderedDict

    shapes, fans = OrderedDict(), {}
    H = cfg.hidden
    shapes["embed.w"], fans["embed.w"] = (cfg.feature_width, H), (cfg.feature_width, H)
    shapes["embed.b"], fans["embed.b"] = (H,), None
    net._egnn_shapes(cfg.layers, H, shapes, fans)
    shapes["head.w1"], fans["head.w1"] = (H, H), (H, H)
    shapes["head.b1"], fans["head.b1"] = (H,), None
    shapes["head.w2"], fans["head.w2"] = (H, 1), (H, 1)
    shapes["head.b2"], fans["head.b2"] = (1,), None
    return net.ParamLayout(shapes, fans)


def regressor_forward(blocks, cfg: RegressorConfig, x, h):
    """Invariant scalar readout: EGNN trunk, sum over atoms, two-layer head. Returns (B,)."""
    hid = h @ blocks["embed.w"] + blocks["embed.b"]
    _, hid = net.egnn(blocks, cfg.layers, x, hid)
    pooled = ad.sum_(hid, axis=1)
    out = ad.silu(pooled @ blocks["head.w1"] + blocks["head.b1"]) @ blocks["head.w2"] + blocks["head.b2"]
    return ad.sum_(out, axis=-1)


@dataclass
class PropertyRegressor:
    key: str
    cfg: RegressorConfig
    params: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0
    val_mae: float = float("nan")

    def predict(self, gs: Sequence[MolecularGeometry]) -> np.ndarray:
        layout = regressor_layout(self.cfg)
        blocks = layout.unpack(self.params)
        out = np.zeros(len(gs))
        for M, idx in _groups_by_size(gs).items():
            x = np.stack([gs[i].coords - gs[i].coords.mean(0) for i in idx])
            h = np.stack([gs[i].feats for i in idx])
            out[idx] = regressor_forward(blocks, self.cfg, x, h) * self.target_std + self.target_mean
        return out

    __call__ = predict


def _groups_by_size(gs) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for i, g in enumerate(gs):
        groups.setdefault(g.atom_count, []).append(i)
    return groups


def train_property_regressor(geometries: Sequence[MolecularGeometry], targets: Sequence[float], key: str,
                             cfg: RegressorConfig = RegressorConfig(), epochs: int = 50, batch_size: int = 32,
                             lr: float = 1e-3, seed: int = 0, val_fraction: float = 0.1) -> PropertyRegressor:
    """Fit a property regressor on one half of the training split.

    The last ``val_fraction`` of a seeded permutation is held out and its MAE
    is stored on the returned regressor.
    """
    if key not in PROPERTY_KEYS:
        raise InvalidConfigError(f"unknown property {key!r}")
    targets = np.asarray(targets, dtype=float)
    if len(geometries) != len(targets) or len(geometries) < 2:
        raise InvalidInputError("need at least two geometries with matching targets")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(geometries))
    n_val = max(1, int(round(val_fraction * len(perm))))
    train_idx, val_idx = perm[:-n_val], perm[-n_val:]
    mean_, std_ = float(targets[train_idx].mean()), float(targets[train_idx].std() or 1.0)
    layout = regressor_layout(cfg)
    params = net.init_params(layout, rng)
    state = net.AdamState.zeros(layout.size)
    hp = net.AdamConfig(lr=lr)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(train_idx)
        for b in range(0, len(order), batch_size):
            batch = order[b : b + batch_size]
            leaves = {n: ad.Tensor(a, requires_grad=True) for n, a in layout.unpack(params).items()}
            total = None
            for M, idx in _groups_by_size([geometries[i] for i in batch]).items():
                sel = [batch[i] for i in idx]
                x = np.stack([geometries[i].coords - geometries[i].coords.mean(0) for i in sel])
                h = np.stack([geometries[i].feats for i in sel])
                y = (targets[sel] - mean_) / std_
                r = regressor_forward(leaves, cfg, x, h) - y
                term = ad.sum_(r * r)
                total = term if total is None else total + term
            loss = total * (1.0 / len(batch))
            loss.backward()
            grad = layout.pack({n: (t.grad if t.grad is not None else np.zeros(t.shape)) for n, t in leaves.items()})
            params, state = net.adam_step(params, grad, state, hp, layout)
    reg = PropertyRegressor(key, cfg, params, mean_, std_)
    reg.val_mae = mae([geometries[i] for i in val_idx], targets[val_idx], reg)
    return reg


def mae(gs: Sequence[MolecularGeometry], targets: Sequence[float], regressor) -> float:
    """Mean absolute error between regressor predictions and the requested targets."""
    gs = _nonempty(gs)
    targets = np.asarray(targets, dtype=float)
    if len(targets) != len(gs):
        raise InvalidInputError("targets and molecules differ in length")
    pred = np.asarray(regressor(gs), dtype=float)
    return float(np.abs(pred - targets).mean())


# --- report -------------------------------------------------------------------

@dataclass
class MetricsReport:
    mae: Dict[str, float]
    novelty: float
    atom_stability: float
    molecule_stability: float
    sample_count: int
    method: str = "generated"

    def __post_init__(self):
        for name in ("novelty", "atom_stability", "molecule_stability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} = {v} outside [0, 1]")
        if any(v < 0 for v in self.mae.values()):
            raise InvalidInputError("negative MAE")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        """Plain-text table: one method row, MAE columns then Novel / A. Stable / M. Stable (%)."""
        mae_cols = [k for k in PROPERTY_KEYS if k in self.mae]
        header = ["Method"] + [f"MAE {k}" for k in mae_cols] + ["Novel", "A. Stable", "M. Stable"]
        row = [self.method] + [f"{self.mae[k]:.4g}" for k in mae_cols] + [
            f"{100 * self.novelty:.2f}",
            f"{100 * self.atom_stability:.2f}",
            f"{100 * self.molecule_stability:.2f}",
        ]
        widths = [max(len(a), len(b)) for a, b in zip(header, row)]
        fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        return "\n".join([fmt(header), fmt(["-" * w for w in widths]), fmt(row)]) + "\n"


def evaluate(gs: Sequence[MolecularGeometry], train_keys: Set[str], regressors=None, targets=None,
             method: str = "generated", table: Optional[BondTable] = None) -> MetricsReport:
    """All four metrics; ``regressors``/``targets`` map property key to regressor / per-molecule targets."""
    gs = _nonempty(gs)
    maes = {}
    for key, reg in (regressors or {}).items():
        maes[key] = mae(gs, targets[key], reg)
    return MetricsReport(
        mae=maes,
        novelty=novelty(gs, train_keys, table),
        atom_stability=atom_stability(gs, table),
        molecule_stability=molecule_stability(gs, table),
        sample_count=len(gs),
        method=method,
    )
