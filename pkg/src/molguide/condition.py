"""Text prompts to structured conditions, reference retrieval and reference mixing.

A prompt is parsed by a fixed grammar (see ``assets/prompt_grammar.md``) into
a :class:`ConditionRecord`. :func:`build_reference` retrieves the corpus
molecule closest to the record, and the reverse chain is pulled toward that
molecule by mixing a noised copy of it into every proposal while the mixing
weight is positive.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .diffuse import SamplerConfig, draw_noise, run_chunks
from .errors import InvalidConfigError, InvalidInputError, StateError, UnparseablePromptError
from .geom import MolecularGeometry, center_of_mass_project, kabsch_matrices, remove_mean
from .schedule import NoiseSchedule
from .vocab import FLAGS, PROPERTY_KEYS, UNITS, Vocabulary, load_vocabulary

NUMBER = r"[-+−]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
LINKERS = r"(?:\s+(?:of|is|equal\s+to|around|about|approximately|near|close\s+to|roughly))*\s*(?:[:=~]\s*)?"
# words that carry no condition; what is left after removing them is reported as ignored
FILLER = {
    "this", "the", "a", "an", "molecule", "molecules", "compound", "has", "have", "having", "with", "and",
    "is", "are", "be", "it", "its", "that", "which", "also", "of", "contains", "containing", "features",
    "featuring", "generate", "design", "give", "me", "please", "show", "shows", "exhibits", "as", "well",
    "both", "plus", "in", "to", "or", "should",
}


@dataclass(frozen=True)
class Target:
    """A property target, either a value in the canonical unit or a corpus percentile."""

    value: Optional[float] = None
    percentile: Optional[float] = None
    unit: str = ""

    def __post_init__(self):
        if (self.value is None) == (self.percentile is None):
            raise InvalidInputError("a target has exactly one of value or percentile")


@dataclass(frozen=True)
class ConditionRecord:
    targets: Dict[str, Target]
    flags: FrozenSet[str]
    raw: str
    ignored: Tuple[str, ...] = ()
    ignored_at: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.targets and not self.flags:
            raise InvalidInputError("a condition needs at least one target or flag")
        for k, t in self.targets.items():
            if k not in PROPERTY_KEYS:
                raise InvalidInputError(f"unknown property {k!r}")
            if t.unit != UNITS[k]:
                raise InvalidInputError(f"{k} must be in {UNITS[k]}")
        if not set(self.flags) <= set(FLAGS):
            raise InvalidInputError(f"unknown flags {sorted(set(self.flags) - set(FLAGS))}")

    def to_dict(self) -> dict:
        return {
            "targets": {
                k: ({"value": t.value} if t.value is not None else {"percentile": t.percentile}) | {"unit": t.unit}
                for k, t in sorted(self.targets.items())
            },
            "flags": sorted(self.flags),
            "raw": self.raw,
            "ignored": list(self.ignored),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionRecord":
        targets = {k: Target(v.get("value"), v.get("percentile"), v["unit"]) for k, v in d["targets"].items()}
        return cls(targets, frozenset(d["flags"]), d["raw"], tuple(d.get("ignored", ())))


# --- grammar ------------------------------------------------------------------

def _alt(phrases) -> str:
    # longest first so that "HOMO-LUMO gap" wins over "gap"
    return "|".join(_phrase(p) for p in sorted(set(phrases), key=len, reverse=True))


def _phrase(p: str) -> str:
    return r"\s+".join(re.escape(w) for w in p.split())


class PromptGrammar:
    """Compiled matchers for numeric, qualitative and flag clauses."""

    def __init__(self, vocab: Optional[Vocabulary] = None):
        self.vocab = vocab or load_vocabulary()
        v = self.vocab
        self.numeric = []
        for key in PROPERTY_KEYS:
            names = [p for k, p in v.names if k == key]
            units = v.units.get(key, [])
            if not names:
                continue
            pat = rf"(?<![\w-])(?:{_alt(names)}){LINKERS}(?P<num>{NUMBER})(?:\s*(?P<unit>{_alt(u for u, _ in units)})(?![\w^/]))?"
            self.numeric.append((key, re.compile(pat, re.I), {u.lower(): s for u, s in units}))
        all_units = {u for us in v.units.values() for u, _ in us}
        self.foreign_unit = re.compile(rf"\s*(?:{_alt(all_units)})(?![\w^/])", re.I)
        self.phrases = [(len(p), "qual", (k, pct), re.compile(rf"(?<![\w-]){_phrase(p)}(?![\w-])", re.I))
                        for k, pct, p in v.quals]
        self.phrases += [(len(p), "flag", f, re.compile(rf"(?<![\w-]){_phrase(p)}(?![\w-])", re.I)) for f, p in v.flags]
        self.phrases.sort(key=lambda e: -e[0])

    def parse(self, text: str) -> ConditionRecord:
        if not isinstance(text, str) or not text.strip():
            raise InvalidInputError("prompt must be a non-empty string")
        claimed = np.zeros(len(text), dtype=bool)
        targets: Dict[str, Target] = {}
        flags = set()

        def free(s, e):
            return not claimed[s:e].any()

        for key, rx, scales in self.numeric:
            for m in rx.finditer(text):
                if not free(m.start(), m.end()):
                    continue
                unit = m.group("unit")
                if unit is None and self.foreign_unit.match(text, m.end()):
                    continue  # number followed by a unit belonging to another property
                value = float(m.group("num").replace("−", "-"))
                value *= scales[unit.lower()] if unit else 1.0
                claimed[m.start():m.end()] = True
                targets.setdefault(key, Target(value=value, unit=UNITS[key]))
        for _, kind, payload, rx in self.phrases:
            for m in rx.finditer(text):
                if not free(m.start(), m.end()):
                    continue
                claimed[m.start():m.end()] = True
                if kind == "flag":
                    flags.add(payload)
                else:
                    key, pct = payload
                    targets.setdefault(key, Target(percentile=pct, unit=UNITS[key]))
        spans = _leftover_spans(text, claimed)
        if not targets and not flags:
            raise UnparseablePromptError(text)
        return ConditionRecord(targets, frozenset(flags), text, tuple(text[s:e] for s, e in spans), tuple(spans))


def _leftover_spans(text: str, claimed: np.ndarray) -> List[Tuple[int, int]]:
    """Unclaimed stretches (split at punctuation) that contain a non-filler word."""
    spans = []
    for m in re.finditer(r"[^,;.!?()]+", text):
        run_start = None
        for i in range(m.start(), m.end() + 1):
            inside = i < m.end() and not claimed[i]
            if inside and run_start is None:
                run_start = i
            elif not inside and run_start is not None:
                spans.extend(_trim(text, run_start, i))
                run_start = None
    return spans


def _trim(text, s, e):
    words = [(w.start() + s, w.end() + s) for w in re.finditer(r"\S+", text[s:e])]
    keep = [(a, b) for a, b in words if text[a:b].lower().strip("\"'") not in FILLER]
    if not keep:
        return []
    return [(keep[0][0], keep[-1][1])]


_DEFAULT_GRAMMAR: Optional[PromptGrammar] = None


def parse_prompt(text: str, grammar: Optional[PromptGrammar] = None) -> ConditionRecord:
    """Parse ``text`` into targets and flags.

    >>> parse_prompt("This molecule has a dipole moment of 2.5 D.").targets["mu"].value
    2.5
    """
    global _DEFAULT_GRAMMAR
    if grammar is None:
        if _DEFAULT_GRAMMAR is None:
            _DEFAULT_GRAMMAR = PromptGrammar()
        grammar = _DEFAULT_GRAMMAR
    return grammar.parse(text)


# --- reference retrieval ---------------------------------------------------------

@dataclass(frozen=True)
class ReferenceGeometry:
    geometry: MolecularGeometry
    provenance: str
    score: float

    def __post_init__(self):
        if not self.geometry.centered:
            raise InvalidInputError("reference geometry must be centered")


def resolve_targets(record: ConditionRecord, corpus, indices: Sequence[int]) -> Dict[str, float]:
    """Concrete target values; percentile targets are read off the indexed molecules."""
    out = {}
    for k, t in record.targets.items():
        if t.value is not None:
            out[k] = t.value
        else:
            out[k] = float(np.percentile(corpus.property_array(k, indices), t.percentile))
    return out


def reference_scores(record: ConditionRecord, corpus, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Distance of every indexed molecule to the record (lower is closer)."""
    idx = list(range(len(corpus))) if indices is None else list(indices)
    if not idx:
        raise StateError("reference corpus is empty")
    targets = resolve_targets(record, corpus, idx)
    score = np.zeros(len(idx))
    for k, v in targets.items():
        vals = corpus.property_array(k, idx)
        q75, q25 = np.percentile(vals, [75, 25])
        iqr = q75 - q25
        score += np.abs(vals - v) / (iqr if iqr > 0 else 1.0)
    for f in record.flags:
        score += np.array([0.0 if f in corpus.flags[i] else 1.0 for i in idx])
    return score


def build_reference(record: ConditionRecord, corpus, indices: Optional[Sequence[int]] = None) -> ReferenceGeometry:
    """Closest indexed corpus molecule; ties go to the smallest corpus index."""
    idx = list(range(len(corpus))) if indices is None else sorted(indices)
    score = reference_scores(record, corpus, idx)
    best = int(np.argmin(score))  # first minimum, i.e. smallest index
    g = corpus.geometries[idx[best]]
    return ReferenceGeometry(center_of_mass_project(g), corpus.ids[idx[best]], float(score[best]))


# --- mixing -----------------------------------------------------------------------

@dataclass(frozen=True)
class MixSchedule:
    """Mixing weights; ``lambdas[t - 1]`` is the weight applied at step t."""

    lambdas: Tuple[float, ...]
    t_stop: int

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        T = len(lam)
        if T < 1 or not 0 <= self.t_stop <= T:
            raise InvalidConfigError("t_stop must lie in [0, T]")
        if np.any(lam < 0) or np.any(lam > 1):
            raise InvalidConfigError("mixing weights must lie in [0, 1]")
        if np.any(lam[: self.t_stop] != 0):
            raise InvalidConfigError("mixing weights must vanish for t <= t_stop")
        if np.any(np.diff(lam) < 0):
            raise InvalidConfigError("mixing weights may not grow as t decreases")

    @classmethod
    def constant(cls, T: int, lam: float = 0.3, t_stop: Optional[int] = None) -> "MixSchedule":
        t_stop = T // 10 if t_stop is None else t_stop
        return cls(tuple(float(lam) if t > t_stop else 0.0 for t in range(1, T + 1)), t_stop)

    @property
    def T(self) -> int:
        return len(self.lambdas)

    def at(self, t: int) -> float:
        return self.lambdas[t - 1]


def mix_arrays(px, ph, rx, rh, lam: float):
    """Convex combination of proposal and (noised, aligned) reference."""
    return remove_mean((1.0 - lam) * px + lam * rx), (1.0 - lam) * ph + lam * rh


def noised_reference(sched: NoiseSchedule, ref_x, ref_h, proposal_x, t: int, noise):
    """Align the reference onto each proposal, then noise it to level t - 1.

    ``ref_x`` is (M,3); ``proposal_x`` is (B,M,3); ``noise`` is (nx, nh) of
    shape (B,M,3) and (B,M,k), ignored when t == 1.
    """
    B = proposal_x.shape[0]
    refs = np.broadcast_to(ref_x, (B,) + ref_x.shape)
    R = kabsch_matrices(refs, proposal_x)
    aligned = np.einsum("bmj,bij->bmi", refs, R)
    hs = np.broadcast_to(ref_h, (B,) + ref_h.shape)
    if t - 1 == 0:
        return aligned, np.array(hs)
    nx, nh = noise
    return remove_mean(sched.marginal(aligned, t - 1, nx)), sched.marginal(hs, t - 1, nh)


def mix_step(proposal: MolecularGeometry, ref: ReferenceGeometry, sched: NoiseSchedule, mix: MixSchedule,
             t: int, rng: Optional[np.random.Generator] = None) -> MolecularGeometry:
    """Pull the proposal G~_{t-1} toward the reference noised to level t - 1."""
    sched.check_step(t)
    if mix.T != sched.T:
        raise InvalidConfigError("mix schedule and noise schedule disagree on T")
    r = ref.geometry
    if r.atom_count != proposal.atom_count:
        raise StateError("reference and proposal atom counts differ")
    lam = mix.at(t)
    if lam == 0.0:
        return proposal
    noise = None
    if t > 1:
        if rng is None:
            raise InvalidInputError("rng required for t > 1")
        nx, nh = draw_noise(rng, r.atom_count, r.feats.shape[1])
        noise = (nx[None], nh[None])
    rx, rh = noised_reference(sched, r.coords, r.feats, proposal.coords[None], t, noise)
    x, h = mix_arrays(proposal.coords[None], proposal.feats[None], rx, rh, lam)
    return MolecularGeometry(x[0], h[0], centered=True)


class ReferenceMixer:
    """Batched mixing inside the reverse chain; draws reference noise only when the weight is positive."""

    def __init__(self, sched: NoiseSchedule, mix: MixSchedule, ref_x, ref_h):
        self.sched, self.mix = sched, mix
        self.ref_x, self.ref_h = np.asarray(ref_x), np.asarray(ref_h)

    def __call__(self, t, x, h, noise):
        lam = self.mix.at(t)
        if lam == 0.0:
            return x, h
        if x.shape[1] != self.ref_x.shape[0]:
            raise StateError("reference and proposal atom counts differ")
        n = noise(t, "ref") if t > 1 else None
        rx, rh = noised_reference(self.sched, self.ref_x, self.ref_h, x, t, n)
        return mix_arrays(x, h, rx, rh, lam)


@dataclass(frozen=True)
class MixerFactory:
    """Picklable builder handed to sampling workers."""

    sched: NoiseSchedule
    mix: MixSchedule
    ref_x: np.ndarray
    ref_h: np.ndarray

    def __call__(self, batch: int) -> ReferenceMixer:
        return ReferenceMixer(self.sched, self.mix, self.ref_x, self.ref_h)


def sample_conditional(cfg: SamplerConfig, record: ConditionRecord, mix: MixSchedule, n: int, corpus,
                       indices: Optional[Sequence[int]] = None, workers: int = 1, start: int = 0):
    """Sample ``n`` molecules pulled toward the reference retrieved for ``record``.

    Returns (geometries, reference). The atom count of every sample equals the
    reference's. With all weights zero the output equals unconditional
    sampling at that atom count, bit for bit.
    """
    if cfg.predictor is None:
        raise StateError("no predictor loaded")
    if mix.T != cfg.schedule.T:
        raise InvalidConfigError("mix schedule and noise schedule disagree on T")
    ref = build_reference(record, corpus, indices)
    if n <= 0:
        return [], ref
    g = ref.geometry
    factory = MixerFactory(cfg.schedule, mix, np.array(g.coords), np.array(g.feats))
    sizes = [g.atom_count] * n
    out = run_chunks(cfg.predictor, cfg.schedule, cfg.seed, sizes, cfg.batch_size, workers,
                     mixer_factory=factory, start=start)
    return out, ref
