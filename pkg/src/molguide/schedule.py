"""Variance schedules and closed-form forward-process quantities.

Sequences are stored with a leading sentinel so that ``alpha_bars[t]`` is the
value at step ``t`` for ``t = 0..T`` (``alpha_bars[0] == 1``, ``betas[0] == 0``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Union

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .geom import MolecularGeometry

DEFAULT_KIND = "polynomial"
DEFAULT_STEPS = 1000
DEFAULT_PARAMS = {"polynomial": {"exponent": 2.0, "s": 1e-5}, "linear": {"beta_start": 1e-4, "beta_end": 2e-2}}


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    params: Dict[str, float]
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_betas: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "posterior_betas"):
            getattr(self, name).setflags(write=False)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        one_minus = 1.0 - self.alpha_bars
        one_minus[0] = 1.0  # t = 0 entries are unused; avoid 0/0
        derived = {
            "sqrt_alpha_bars": np.sqrt(self.alpha_bars),
            "sqrt_one_minus_alpha_bars": np.sqrt(1.0 - self.alpha_bars),
            # posterior mean coefficients on G_0 and G_t
            "coef_x0": np.sqrt(prev) * self.betas / one_minus,
            "coef_xt": np.sqrt(self.alphas) * (1.0 - prev) / one_minus,
            "eps_coef": self.betas / np.sqrt(one_minus),
        }
        for name, arr in derived.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "params": dict(self.params), "alpha_bar_T": float(self.alpha_bars[self.T])}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        sched = build_schedule(d["kind"], int(d["T"]), d.get("params", {}))
        stored = d.get("alpha_bar_T")
        if stored is not None and abs(sched.alpha_bars[sched.T] - stored) > 1e-12:
            raise InvalidConfigError(
                f"rederived alpha_bar_T {sched.alpha_bars[sched.T]!r} disagrees with stored {stored!r}"
            )
        return sched

    def check_step(self, t: int, lo: int = 1):
        if not (lo <= int(t) <= self.T):
            raise InvalidInputError(f"step {t} outside [{lo}, {self.T}]")

    def marginal(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t scalar or per-row array."""
        a = _bcast(self.sqrt_alpha_bars[t], x0)
        b = _bcast(self.sqrt_one_minus_alpha_bars[t], x0)
        return a * x0 + b * eps

    def posterior(self, xt: np.ndarray, x0: np.ndarray, t) -> np.ndarray:
        return _bcast(self.coef_x0[t], x0) * x0 + _bcast(self.coef_xt[t], xt) * xt

    def model_mean(self, xt: np.ndarray, eps_hat: np.ndarray, t) -> np.ndarray:
        """Reverse-kernel mean from a noise prediction."""
        return (xt - _bcast(self.eps_coef[t], xt) * eps_hat) / _bcast(np.sqrt(self.alphas[t]), xt)


def _bcast(coef, like: np.ndarray):
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def build_schedule(kind: str = DEFAULT_KIND, T: int = DEFAULT_STEPS, params=None) -> NoiseSchedule:
    """Precompute every schedule sequence for ``kind`` in {"linear", "polynomial"}.

    linear: betas evenly spaced in [beta_start, beta_end] (for T == 2 the
    endpoints themselves). polynomial: abar_t = (1 - (t/T)**exponent)**2,
    squeezed into [s, 1 - s], with betas from consecutive ratios.
    """
    if int(T) != T or T < 2:
        raise InvalidConfigError(f"T must be an integer >= 2, got {T}")
    T = int(T)
    p = dict(DEFAULT_PARAMS.get(kind, {}))
    p.update(params or {})
    if kind == "linear":
        lo, hi = float(p["beta_start"]), float(p["beta_end"])
        if not (0 < lo < hi < 1):
            raise InvalidConfigError(f"need 0 < beta_start < beta_end < 1, got {lo}, {hi}")
        betas = np.linspace(lo, hi, T)
        alpha_bars = np.cumprod(1.0 - betas)
    elif kind == "polynomial":
        power, s = float(p["exponent"]), float(p["s"])
        if power < 1 or not (0 < s < 0.5):
            raise InvalidConfigError(f"need exponent >= 1 and 0 < s < 0.5, got {power}, {s}")
        steps = np.arange(1, T + 1) / T
        alpha_bars = (1 - 2 * s) * (1 - steps**power) ** 2 + s
        ratio = alpha_bars / np.concatenate([[1.0], alpha_bars[:-1]])
        betas = 1.0 - ratio
    else:
        raise InvalidConfigError(f"unknown schedule kind {kind!r}")

    if not np.all((betas > 0) & (betas < 1)):
        raise InvalidConfigError("schedule produced betas outside (0, 1)")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], alpha_bars])
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_betas = np.zeros(T + 1)
    posterior_betas[1:] = (1.0 - prev[1:]) / (1.0 - alpha_bars[1:]) * betas[1:]
    return NoiseSchedule(kind, T, p, betas, alphas, alpha_bars, posterior_betas)


def _check_same_shape(a: MolecularGeometry, b: MolecularGeometry):
    if a.coords.shape != b.coords.shape or a.feats.shape != b.feats.shape:
        raise InvalidInputError(f"shape mismatch: M={a.atom_count} vs M={b.atom_count}")


def posterior_mean(sched: NoiseSchedule, g_t: MolecularGeometry, g_0: MolecularGeometry, t: int) -> MolecularGeometry:
    """Mean of q(G_{t-1} | G_t, G_0), applied to coordinates and features alike."""
    sched.check_step(t, lo=2)
    _check_same_shape(g_t, g_0)
    coords = sched.posterior(g_t.coords, g_0.coords, t)
    feats = sched.posterior(g_t.feats, g_0.feats, t)
    return MolecularGeometry(coords, feats)


def marginal_sample(sched: NoiseSchedule, g_0: MolecularGeometry, t: int, noise: MolecularGeometry) -> MolecularGeometry:
    """Draw from q(G_t | G_0) given an explicit standard-normal ``noise``."""
    sched.check_step(t, lo=0)
    _check_same_shape(g_0, noise)
    coords = sched.marginal(g_0.coords, t, noise.coords)
    centered = g_0.centered and noise.centered
    if centered:
        coords = coords - coords.mean(axis=0)
    return MolecularGeometry(coords, sched.marginal(g_0.feats, t, noise.feats), centered)
