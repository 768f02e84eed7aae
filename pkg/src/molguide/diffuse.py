"""Forward noising, ancestral reverse sampling, training and ELBO diagnostics.

Sampling runs on batched arrays of equal atom count. Every molecule owns its
own random stream, derived from ``(seed, index)``, so results do not depend on
how molecules are grouped into batches or distributed over worker processes.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import net
from .errors import InvalidInputError, SamplingDivergedError, StateError, TrainingDivergedError
from .geom import FEATURE_WIDTH, MolecularGeometry, decode_features, remove_mean
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

# predictor(x (B,M,3), h (B,M,k), t, cond) -> (eps_x, eps_h)
Predictor = Callable[..., Tuple[np.ndarray, np.ndarray]]


def draw_noise(rng: np.random.Generator, M: int, k: int = FEATURE_WIDTH) -> Tuple[np.ndarray, np.ndarray]:
    """Standard normal noise with the coordinate block projected to zero center of mass."""
    z = rng.standard_normal((M, 3 + k))
    return remove_mean(z[:, :3]), z[:, 3:]


def forward_noise(sched: NoiseSchedule, g_0: MolecularGeometry, t: int, rng: np.random.Generator):
    """Return (G_t, eps) with G_t drawn from q(G_t | G_0)."""
    sched.check_step(t)
    ex, eh = draw_noise(rng, g_0.atom_count, g_0.feats.shape[1])
    eps = MolecularGeometry(ex, eh, centered=True)
    xt = remove_mean(sched.marginal(g_0.coords, t, ex)) if g_0.centered else sched.marginal(g_0.coords, t, ex)
    g_t = MolecularGeometry(xt, sched.marginal(g_0.feats, t, eh), centered=g_0.centered)
    return g_t, eps


# --- reverse process ----------------------------------------------------------

def reverse_step_arrays(predictor: Predictor, sched: NoiseSchedule, x, h, t: int, noise=None, cond=None):
    """One ancestral step on a batch. ``noise`` is (nx, nh) and is ignored at t == 1."""
    ex, eh = predictor(x, h, t, cond)
    mx = sched.model_mean(x, remove_mean(ex), t)
    mh = sched.model_mean(h, eh, t)
    if t > 1:
        sigma = np.sqrt(sched.posterior_betas[t])
        nx, nh = noise
        mx = mx + sigma * nx
        mh = mh + sigma * nh
    return remove_mean(mx), mh


def reverse_step(predictor: Predictor, sched: NoiseSchedule, g_t: MolecularGeometry, t: int,
                 rng: Optional[np.random.Generator] = None, cond=None) -> MolecularGeometry:
    """Sample G_{t-1} from the reverse kernel; the t == 1 decoder step adds no noise."""
    sched.check_step(t)
    if np.abs(g_t.coords.sum(axis=0)).max() > net.CENTER_CHECK_TOL:
        raise InvalidInputError("reverse_step needs a centered geometry")
    noise = None
    if t > 1:
        if rng is None:
            raise InvalidInputError("rng required for t > 1")
        nx, nh = draw_noise(rng, g_t.atom_count, g_t.feats.shape[1])
        noise = (nx[None], nh[None])
    c = None if cond is None else np.asarray(cond, dtype=float)[None]
    x, h = reverse_step_arrays(predictor, sched, g_t.coords[None], g_t.feats[None], t, noise, c)
    return MolecularGeometry(x[0], h[0], centered=True)


class MoleculeNoise:
    """Draws batch noise from one generator per molecule, in a fixed order."""

    def __init__(self, rngs: Sequence[np.random.Generator], M: int, k: int = FEATURE_WIDTH):
        self.rngs = list(rngs)
        self.M, self.k = M, k

    def __call__(self, t: int, tag: str):
        draws = [draw_noise(r, self.M, self.k) for r in self.rngs]
        return np.stack([d[0] for d in draws]), np.stack([d[1] for d in draws])


def run_chain(predictor: Predictor, sched: NoiseSchedule, noise: Callable, cond=None, mixer=None,
              t_start: Optional[int] = None, init=None, trace: Optional[Callable] = None):
    """Iterate the reverse chain from ``t_start`` (default T) down to 0.

    ``noise(t, tag)`` supplies (nx, nh) batches for tags "init", "step" and,
    via ``mixer``, "ref". ``mixer(t, x, h, noise)`` post-processes every
    proposal G~_{t-1}. Returns the final latent (x_0, h_0), undecoded.
    """
    T = sched.T if t_start is None else t_start
    x, h = noise(T, "init") if init is None else init
    x = remove_mean(x)
    for t in range(T, 0, -1):
        step_noise = noise(t, "step") if t > 1 else None
        with np.errstate(over="ignore", invalid="ignore"):
            x, h = reverse_step_arrays(predictor, sched, x, h, t, step_noise, cond)
        if not (np.isfinite(x).all() and np.isfinite(h).all()):
            raise SamplingDivergedError(f"reverse chain became non-finite at step {t}", step=t)
        if mixer is not None:
            x, h = mixer(t, x, h, noise)
        if trace is not None:
            trace(t - 1, x, h)
    return x, h


@dataclass
class SamplerConfig:
    schedule: NoiseSchedule
    predictor: Optional[Predictor]
    atom_counts: Dict[int, float]
    seed: int
    batch_size: int = 64

    def __post_init__(self):
        probs = np.array(list(self.atom_counts.values()), dtype=float)
        if len(probs) == 0 or abs(probs.sum() - 1.0) > 1e-12 or np.any(probs < 0):
            raise InvalidInputError("atom-count histogram must be a probability distribution")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    @staticmethod
    def histogram(geometries: Sequence[MolecularGeometry]) -> Dict[int, float]:
        counts: Dict[int, int] = {}
        for g in geometries:
            counts[g.atom_count] = counts.get(g.atom_count, 0) + 1
        n = sum(counts.values())
        keys = sorted(counts)
        probs = [counts[k] / n for k in keys]
        # absorb rounding so the probabilities sum to one exactly
        probs[-1] = 1.0 - sum(probs[:-1])
        return dict(zip(keys, probs))


def molecule_streams(seed: int, index: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(chain stream, atom-count stream) for molecule ``index`` of a seeded run."""
    chain, count = np.random.SeedSequence([int(seed), int(index)]).spawn(2)
    return np.random.default_rng(chain), np.random.default_rng(count)


def draw_atom_count(hist: Dict[int, float], rng: np.random.Generator) -> int:
    keys = sorted(hist)
    return int(keys[rng.choice(len(keys), p=[hist[k] for k in keys])])


def decode(x: np.ndarray, h: np.ndarray) -> List[MolecularGeometry]:
    feats = decode_features(h)
    return [MolecularGeometry(remove_mean(xi), fi, centered=True) for xi, fi in zip(x, feats)]


def _run_group(predictor, sched, M, rngs, cond=None, mixer_factory=None):
    noise = MoleculeNoise(rngs, M)
    mixer = mixer_factory(len(rngs)) if mixer_factory is not None else None
    x, h = run_chain(predictor, sched, noise, cond=cond, mixer=mixer)
    return decode(x, h)


def _sample_chunk(predictor, sched, seed, indices, sizes, cond=None, mixer_factory=None):
    """Sample the molecules ``indices`` (atom counts ``sizes``), grouped by size."""
    out: Dict[int, MolecularGeometry] = {}
    for M in sorted(set(sizes)):
        idx = [i for i, m in zip(indices, sizes) if m == M]
        rngs = [molecule_streams(seed, i)[0] for i in idx]
        for i, g in zip(idx, _run_group(predictor, sched, M, rngs, cond, mixer_factory)):
            out[i] = g
    return [out[i] for i in indices]


def run_chunks(predictor, sched, seed, sizes: Sequence[int], batch_size: int, workers: int = 1,
               cond=None, mixer_factory=None, start: int = 0) -> List[MolecularGeometry]:
    """Fixed chunking of molecule indices; identical output for any ``workers``."""
    n = len(sizes)
    chunks = [list(range(s, min(s + batch_size, n))) for s in range(0, n, batch_size)]
    args = [(predictor, sched, seed, [start + i for i in c], [sizes[i] for i in c], cond, mixer_factory) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sample_chunk, *zip(*args)))
    else:
        parts = [_sample_chunk(*a) for a in args]
    return [g for part in parts for g in part]


def sample_unconditional(cfg: SamplerConfig, n: int, workers: int = 1, start: int = 0) -> List[MolecularGeometry]:
    """Draw ``n`` molecules: atom count from the histogram, then the full reverse chain."""
    if cfg.predictor is None:
        raise StateError("no predictor loaded")
    if n <= 0:
        return []
    sizes = [draw_atom_count(cfg.atom_counts, molecule_streams(cfg.seed, start + i)[1]) for i in range(n)]
    return run_chunks(cfg.predictor, cfg.schedule, cfg.seed, sizes, cfg.batch_size, workers, start=start)


# --- reference predictors ------------------------------------------------------

class OraclePredictor:
    """Returns the exact noise that maps a fixed G_0 to the current latent."""

    def __init__(self, sched: NoiseSchedule, g_0: MolecularGeometry):
        self.sched = sched
        self.x0 = g_0.coords
        self.h0 = g_0.feats

    def __call__(self, x, h, t, cond=None):
        s = self.sched
        t = np.asarray(t)
        x0 = np.broadcast_to(self.x0, x.shape)
        h0 = np.broadcast_to(self.h0, h.shape)
        ex = (x - s.marginal(x0, t, 0.0 * x)) / _col(s.sqrt_one_minus_alpha_bars[t], x)
        eh = (h - s.marginal(h0, t, 0.0 * h)) / _col(s.sqrt_one_minus_alpha_bars[t], h)
        return ex, eh


class ZeroPredictor:
    def __call__(self, x, h, t, cond=None):
        return np.zeros_like(x), np.zeros_like(h)


def _col(c, like):
    c = np.asarray(c, dtype=float)
    return c if c.ndim == 0 else c.reshape(c.shape + (1,) * (like.ndim - c.ndim))


# --- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: np.ndarray
    losses: List[float]
    state: net.AdamState
    epochs_done: int
    ema: Optional[np.ndarray] = None


def train(predictor: net.NoisePredictor, sched: NoiseSchedule, dataset: Sequence[MolecularGeometry],
          opt: net.AdamConfig = net.AdamConfig(), epochs: int = 1, seed: int = 0, batch_size: int = 32,
          shuffle: bool = True, state: Optional[net.AdamState] = None, start_epoch: int = 0,
          draws_per_molecule: int = 1, on_epoch: Optional[Callable[[int, float], None]] = None,
          ema_decay: float = 0.0, ema: Optional[np.ndarray] = None) -> TrainResult:
    """Minimize the simplified denoising loss with Adam.

    Per epoch ``e`` all random draws come from generators seeded by
    ``(seed, e)``: step indices and noise are drawn in dataset order and the
    minibatch permutation from a separate stream, so resuming at any epoch
    reproduces an uninterrupted run and toggling ``shuffle`` never changes the
    per-molecule draws. With ``draws_per_molecule`` > 1 an epoch visits every
    molecule that many times, each with its own step index and noise.

    With ``ema_decay`` > 0 an exponential moving average of the parameters is
    kept (seeded from ``ema`` when resuming) and returned as ``result.ema``;
    ``predictor.params`` always holds the raw optimizer iterate.
    """
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    for g in dataset:
        if np.abs(g.coords.sum(axis=0)).max() > net.CENTER_CHECK_TOL:
            raise InvalidInputError("training geometries must be centered")
    cfg, layout = predictor.cfg, predictor.layout
    params = predictor.params.copy()
    state = state or net.AdamState.zeros(layout.size)
    losses: List[float] = []
    if draws_per_molecule < 1:
        raise InvalidInputError("draws_per_molecule must be >= 1")
    if not 0.0 <= ema_decay < 1.0:
        raise InvalidInputError("ema_decay must lie in [0, 1)")
    if ema_decay > 0:
        ema = params.copy() if ema is None else np.array(ema, dtype=float)
    views = [g for _ in range(draws_per_molecule) for g in dataset]
    n = len(views)
    step = state.step
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([int(seed), epoch])
        ts = rng.integers(1, sched.T + 1, size=n)
        noises = [draw_noise(rng, g.atom_count, g.feats.shape[1]) for g in views]
        order = np.random.default_rng([int(seed), epoch, 1]).permutation(n) if shuffle else np.arange(n)
        total = 0.0
        for b in range(0, n, batch_size):
            # evaluate each minibatch in dataset order so shuffling only changes batch membership
            idx = np.sort(order[b : b + batch_size])
            items = [(views[i], ts[i], MolecularGeometry(*noises[i])) for i in idx]
            loss, grad = net.loss_and_gradient(params, cfg, sched, items)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {step}", step=step)
            net.check_finite(grad, layout, step)
            params, state = net.adam_step(params, grad, state, opt, layout)
            if ema_decay > 0:
                ema = ema_decay * ema + (1.0 - ema_decay) * params
            step += 1
            total += loss * len(idx)
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    predictor.params = params
    return TrainResult(params, losses, state, start_epoch + epochs, ema if ema_decay > 0 else None)


# --- ELBO diagnostics ------------------------------------------------------------

def gaussian_kl_equal_var(mu_q, mu_p, var: float) -> float:
    """KL between two Gaussians sharing isotropic variance ``var``."""
    d = np.asarray(mu_q, dtype=float) - np.asarray(mu_p, dtype=float)
    return float((d * d).sum() / (2.0 * var))


def elbo_terms(predictor: Predictor, sched: NoiseSchedule, g_0: MolecularGeometry, cond=None,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-step bound terms; entry 0 is L_0, entry t-1 is L_{t-1} for t >= 2.

    L_{t-1} is the closed-form KL between q(G_{t-1}|G_t,G_0) and the model
    kernel, with G_t drawn once from q(G_t|G_0). L_0 is the Gaussian negative
    log-likelihood of G_0 under the t = 1 kernel with variance beta_1, a
    stand-in for the discrete decoder; it is a diagnostic only.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    T, M, k = sched.T, g_0.atom_count, g_0.feats.shape[1]
    ts = np.arange(1, T + 1)
    noises = [draw_noise(rng, M, k) for _ in ts]
    ex = np.stack([a for a, _ in noises])
    eh = np.stack([b for _, b in noises])
    x0 = np.broadcast_to(g_0.coords, (T, M, 3))
    h0 = np.broadcast_to(g_0.feats, (T, M, k))
    xt = sched.marginal(x0, ts, ex)
    ht = sched.marginal(h0, ts, eh)
    c = None if cond is None else np.broadcast_to(np.asarray(cond, dtype=float), (T, len(cond)))
    px, ph = predictor(xt, ht, ts, c)
    mu_x = sched.model_mean(xt, remove_mean(px), ts)
    mu_h = sched.model_mean(ht, ph, ts)
    terms = np.zeros(T)
    for i, t in enumerate(ts):
        if t == 1:
            var = sched.betas[1]
            n_dims = 3 * (M - 1) + M * k
            sq = ((g_0.coords - mu_x[i]) ** 2).sum() + ((g_0.feats - mu_h[i]) ** 2).sum()
            terms[0] = 0.5 * sq / var + 0.5 * n_dims * np.log(2 * np.pi * var)
        else:
            tx = sched.posterior(xt[i], g_0.coords, t)
            th = sched.posterior(ht[i], g_0.feats, t)
            var = sched.posterior_betas[t]
            terms[t - 1] = gaussian_kl_equal_var(tx, mu_x[i], var) + gaussian_kl_equal_var(th, mu_h[i], var)
    return terms
