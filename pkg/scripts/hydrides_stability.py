"""Atom and molecule stability of a model trained on the small hydrides toy set."""
import argparse

import numpy as np

from molguide import data, diffuse, metrics, net
from molguide.schedule import build_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--n", type=int, default=100)
    args = ap.parse_args()

    corpus = data.make_toy_dataset("hydrides", 200, 3)
    print(f"corpus: atom {metrics.atom_stability(corpus.geometries):.1%}, "
          f"molecule {metrics.molecule_stability(corpus.geometries):.1%}")
    sched = build_schedule()
    cfg = net.NoisePredictorConfig(layers=3, hidden=32)
    res = diffuse.train(net.NoisePredictor(cfg, rng=np.random.default_rng(args.seed)), sched, corpus.geometries,
                        net.AdamConfig(lr=2e-3), epochs=args.epochs, seed=args.seed, batch_size=16,
                        draws_per_molecule=4, ema_decay=0.999)
    hist = diffuse.SamplerConfig.histogram(corpus.geometries)
    sampler = diffuse.SamplerConfig(sched, net.NoisePredictor(cfg, res.ema), hist, seed=5, batch_size=50)
    gs = diffuse.sample_unconditional(sampler, args.n)
    keys = {metrics.canonical_key(g) for g in corpus.geometries}
    print(f"samples: atom {metrics.atom_stability(gs):.1%}, molecule {metrics.molecule_stability(gs):.1%}, "
          f"novelty {metrics.novelty(gs, keys):.1%}")


if __name__ == "__main__":
    main()
