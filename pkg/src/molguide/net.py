"""E(n)-equivariant graph network used as the noise predictor.

Parameters live in one flat float64 vector; a :class:`ParamLayout` maps named
blocks (``egnn0.edge.w_i`` and so on) to slices of it. The same forward code
runs on plain arrays for inference and on :class:`~molguide.autodiff.Tensor`
blocks when a gradient is needed.
"""
from __future__ import annotations

from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, TrainingDivergedError
from .geom import FEATURE_WIDTH, MolecularGeometry, remove_mean
from .schedule import NoiseSchedule

CENTER_CHECK_TOL = 1e-6
_DIST_EPS = 1e-12


@dataclass(frozen=True)
class NoisePredictorConfig:
    layers: int = 4
    hidden: int = 64
    feature_width: int = FEATURE_WIDTH
    condition_width: int = 0
    # time enters as t / steps appended to every node's input features
    steps: int = 1000

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise InvalidInputError("layers and hidden must be >= 1")
        if self.condition_width < 0 or self.feature_width < 1 or self.steps < 1:
            raise InvalidInputError("bad feature/condition width or steps")

    def to_dict(self) -> dict:
        return asdict(self)


class ParamLayout:
    """Ordered mapping from block name to (slice, shape) inside the flat vector."""

    def __init__(self, shapes: "OrderedDict[str, Tuple[int, ...]]", fans: Dict[str, Tuple[int, int]] = None):
        self.shapes = OrderedDict(shapes)
        self.fans = fans or {}
        self.slices = OrderedDict()
        offset = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + n)
            offset += n
        self.size = offset

    def __iter__(self):
        return iter(self.shapes)

    def __len__(self):
        return len(self.shapes)

    def unpack(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise InvalidInputError(f"parameter vector has length {flat.shape}, layout needs {self.size}")
        return {name: flat[sl].reshape(self.shapes[name]) for name, sl in self.slices.items()}

    def pack(self, blocks: Dict[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, sl in self.slices.items():
            flat[sl] = np.asarray(blocks[name]).ravel()
        return flat

    def block_of(self, index: int) -> str:
        for name, sl in self.slices.items():
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)


def _egnn_shapes(layers: int, hidden: int, shapes: OrderedDict, fans: dict, prefix: str = "egnn"):
    H = hidden
    for l in range(layers):
        p = f"{prefix}{l}"
        for name, shape, fan in [
            ("edge.w_i", (H, H), (2 * H + 1, H)),
            ("edge.w_j", (H, H), (2 * H + 1, H)),
            ("edge.w_d", (1, H), (2 * H + 1, H)),
            ("edge.b1", (H,), None),
            ("edge.w2", (H, H), (H, H)),
            ("edge.b2", (H,), None),
            ("coord.w1", (H, H), (H, H)),
            ("coord.b1", (H,), None),
            ("coord.w2", (H, 1), "zero"),
            ("node.w_h", (H, H), (2 * H, H)),
            ("node.w_m", (H, H), (2 * H, H)),
            ("node.b1", (H,), None),
            ("node.w2", (H, H), (H, H)),
            ("node.b2", (H,), None),
        ]:
            shapes[f"{p}.{name}"] = shape
            fans[f"{p}.{name}"] = fan


def predictor_layout(cfg: NoisePredictorConfig) -> ParamLayout:
    shapes, fans = OrderedDict(), {}
    n_in = cfg.feature_width + 1 + cfg.condition_width
    shapes["embed.w"], fans["embed.w"] = (n_in, cfg.hidden), (n_in, cfg.hidden)
    shapes["embed.b"], fans["embed.b"] = (cfg.hidden,), None
    _egnn_shapes(cfg.layers, cfg.hidden, shapes, fans)
    shapes["out.w"], fans["out.w"] = (cfg.hidden, cfg.feature_width), (cfg.hidden, cfg.feature_width)
    shapes["out.b"], fans["out.b"] = (cfg.feature_width,), None
    return ParamLayout(shapes, fans)


def init_params(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, zero final coordinate head."""
    blocks = {}
    for name, shape in layout.shapes.items():
        fan = layout.fans.get(name)
        if fan is None or fan == "zero":
            blocks[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (fan[0] + fan[1]))
            blocks[name] = rng.uniform(-bound, bound, size=shape)
    return layout.pack(blocks)


# --- forward ---------------------------------------------------------------

def egnn(blocks, layers: int, x, h, prefix: str = "egnn"):
    """Run ``layers`` equivariant message-passing layers on a fully connected graph.

    x: (B, M, 3) coordinates, h: (B, M, H) hidden node states.
    Returns updated (x, h).
    """
    M = ad.value(x).shape[1]
    mask = (1.0 - np.eye(M))[:, :, None]
    for l in range(layers):
        p = lambda name: blocks[f"{prefix}{l}.{name}"]
        diff = ad.unsqueeze(x, 2) - ad.unsqueeze(x, 1)  # (B, M, M, 3), x_i - x_j
        d2 = ad.sum_(diff * diff, axis=-1, keepdims=True)
        pre = (
            ad.unsqueeze(h @ p("edge.w_i"), 2)
            + ad.unsqueeze(h @ p("edge.w_j"), 1)
            + d2 @ p("edge.w_d")
            + p("edge.b1")
        )
        m = ad.silu(ad.silu(pre) @ p("edge.w2") + p("edge.b2")) * mask
        s = ad.silu(m @ p("coord.w1") + p("coord.b1")) @ p("coord.w2")
        norm = ad.sqrt(d2 + _DIST_EPS)
        x = x + ad.sum_(diff * (s * mask / (norm + 1.0)), axis=2)
        agg = ad.sum_(m, axis=2)
        h = h + ad.silu(h @ p("node.w_h") + agg @ p("node.w_m") + p("node.b1")) @ p("node.w2") + p("node.b2")
    return x, h


def node_inputs(h: np.ndarray, t_frac, cond=None) -> np.ndarray:
    B, M, _ = h.shape
    t_col = np.broadcast_to(np.asarray(t_frac, dtype=float).reshape(-1, 1, 1), (B, M, 1))
    parts = [h, t_col]
    if cond is not None:
        cond = np.asarray(cond, dtype=float).reshape(B, 1, -1) if np.ndim(cond) > 1 else np.asarray(cond, dtype=float).reshape(1, 1, -1)
        parts.append(np.broadcast_to(cond, (B, M, cond.shape[-1])))
    return np.concatenate(parts, axis=-1)


def forward(blocks, cfg: NoisePredictorConfig, x: np.ndarray, h: np.ndarray, t, cond=None):
    """Batched noise prediction; returns (coordinate displacement, feature output)."""
    t_frac = np.asarray(t, dtype=float) / cfg.steps
    if cfg.condition_width and cond is None:
        cond = np.zeros(cfg.condition_width)
    if not cfg.condition_width:
        cond = None
    hid = node_inputs(h, t_frac, cond) @ blocks["embed.w"] + blocks["embed.b"]
    x_out, hid = egnn(blocks, cfg.layers, x, hid)
    disp = x_out - x
    ax = disp - ad.mean(disp, axis=1, keepdims=True)
    ah = hid @ blocks["out.w"] + blocks["out.b"]
    return ax, ah


class NoisePredictor:
    """A parameter vector bound to its config; callable on batched arrays."""

    def __init__(self, cfg: NoisePredictorConfig, params: Optional[np.ndarray] = None, rng=None):
        self.cfg = cfg
        self.layout = predictor_layout(cfg)
        if params is None:
            params = init_params(self.layout, rng if rng is not None else np.random.default_rng(0))
        self.params = np.asarray(params, dtype=np.float64)
        self.layout.unpack(self.params)  # length check

    def __call__(self, x, h, t, cond=None):
        return forward(self.layout.unpack(self.params), self.cfg, x, h, t, cond)


def predict_noise(params, cfg: NoisePredictorConfig, g_t: MolecularGeometry, t: int, cond=None) -> MolecularGeometry:
    """Single-geometry noise prediction (a^x, a^h)."""
    if g_t.atom_count < 1:
        raise InvalidInputError("empty geometry")
    if np.abs(g_t.coords.sum(axis=0)).max() > CENTER_CHECK_TOL:
        raise InvalidInputError("input coordinates are not centered")
    layout = predictor_layout(cfg)
    ax, ah = forward(layout.unpack(np.asarray(params, dtype=float)), cfg, g_t.coords[None], g_t.feats[None], t, cond)
    return MolecularGeometry(remove_mean(ax[0]), ah[0], centered=True)


# --- loss and gradient -----------------------------------------------------

def _leaf_blocks(layout: ParamLayout, params: np.ndarray) -> Dict[str, ad.Tensor]:
    return {name: ad.Tensor(arr, requires_grad=True) for name, arr in layout.unpack(params).items()}


def _flat_grad(layout: ParamLayout, leaves: Dict[str, ad.Tensor]) -> np.ndarray:
    return layout.pack({n: (t.grad if t.grad is not None else np.zeros(t.shape)) for n, t in leaves.items()})


def group_loss(blocks, cfg, sched: NoiseSchedule, x0, h0, t, eps_x, eps_h, cond=None):
    """Summed per-molecule mean squared error for one same-size group.

    Shapes: x0/eps_x (B, M, 3), h0/eps_h (B, M, k), t (B,).
    """
    xt = sched.marginal(x0, t, eps_x)
    ht = sched.marginal(h0, t, eps_h)
    ax, ah = forward(blocks, cfg, xt, ht, t, cond)
    rx, rh = ax - eps_x, ah - eps_h
    per_elem = x0.shape[1] * (3 + h0.shape[2])
    return (ad.sum_(rx * rx) + ad.sum_(rh * rh)) * (1.0 / per_elem)


def loss_and_gradient_arrays(params, cfg, sched, groups, n_total: Optional[int] = None):
    """Loss and flat gradient over pre-grouped arrays.

    ``groups`` yields tuples (x0, h0, t, eps_x, eps_h, cond) of equal atom count.
    """
    layout = predictor_layout(cfg)
    leaves = _leaf_blocks(layout, params)
    total = None
    count = 0
    for x0, h0, t, eps_x, eps_h, cond in groups:
        term = group_loss(leaves, cfg, sched, x0, h0, t, eps_x, eps_h, cond)
        total = term if total is None else total + term
        count += x0.shape[0]
    if total is None:
        raise InvalidInputError("empty batch")
    n = n_total or count
    loss = total * (1.0 / n)
    loss.backward()
    return float(loss.data), _flat_grad(layout, leaves)


def group_batch(items: Sequence[tuple]):
    """Group (g_0, t, noise, cond) items by atom count, preserving first-seen order."""
    buckets = defaultdict(list)
    for item in items:
        buckets[item[0].atom_count].append(item)
    for M, its in buckets.items():
        x0 = np.stack([g.coords for g, *_ in its])
        h0 = np.stack([g.feats for g, *_ in its])
        t = np.array([int(it[1]) for it in its])
        ex = np.stack([it[2].coords for it in its])
        eh = np.stack([it[2].feats for it in its])
        conds = [it[3] if len(it) > 3 else None for it in its]
        cond = None if all(c is None for c in conds) else np.stack([np.asarray(c, dtype=float) for c in conds])
        yield x0, h0, t, ex, eh, cond


def loss_and_gradient(params, cfg: NoisePredictorConfig, sched: NoiseSchedule, batch: Sequence[tuple]):
    """Mean simplified denoising loss over ``batch`` of (g_0, t, noise[, cond]) and its gradient."""
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    return loss_and_gradient_arrays(np.asarray(params, dtype=float), cfg, sched, group_batch(batch))


# --- optimizers ------------------------------------------------------------

def check_finite(grad: np.ndarray, layout: Optional[ParamLayout] = None, step=None):
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        block = layout.block_of(int(bad[0])) if layout is not None else None
        raise TrainingDivergedError(
            f"non-finite gradient in block {block or '?'}" + (f" at step {step}" if step is not None else ""),
            step=step,
            block=block,
        )


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, layout: Optional[ParamLayout] = None) -> np.ndarray:
    if grad.shape != params.shape:
        raise InvalidInputError("gradient and parameter lengths differ")
    check_finite(grad, layout)
    return params - lr * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grad, state: AdamState, hp: AdamConfig = AdamConfig(), layout: Optional[ParamLayout] = None):
    """One bias-corrected Adam update. Returns (new params, new state)."""
    if grad.shape != params.shape:
        raise InvalidInputError("gradient and parameter lengths differ")
    check_finite(grad, layout)
    step = state.step + 1
    m = hp.beta1 * state.m + (1 - hp.beta1) * grad
    v = hp.beta2 * state.v + (1 - hp.beta2) * grad * grad
    m_hat = m / (1 - hp.beta1**step)
    v_hat = v / (1 - hp.beta2**step)
    return params - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps), AdamState(m, v, step)
