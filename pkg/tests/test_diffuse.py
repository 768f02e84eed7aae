import numpy as np
import pytest

from conftest import TamePredictor, random_geometry, random_rotation
from molguide import diffuse, net
from molguide.errors import InvalidInputError, SamplingDivergedError, StateError, TrainingDivergedError
from molguide.geom import MolecularGeometry, remove_mean
from molguide.schedule import build_schedule, posterior_mean


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def toy_predictor(layers=2, hidden=8, seed=0, coord_scale=0.3):
    cfg = net.NoisePredictorConfig(layers=layers, hidden=hidden)
    layout = net.predictor_layout(cfg)
    rng = np.random.default_rng(seed)
    blocks = layout.unpack(net.init_params(layout, rng))
    for l in range(layers):
        w = blocks[f"egnn{l}.coord.w2"]
        blocks[f"egnn{l}.coord.w2"] = rng.normal(0, coord_scale, w.shape)
    # a small feature head keeps an untrained network from blowing up over a long chain
    blocks["out.w"] = 0.05 * blocks["out.w"]
    return net.NoisePredictor(cfg, layout.pack(blocks))


class TestForward:
    def test_noise_reconstructs(self, sched, rng):
        g0 = random_geometry(rng, 5)
        for t in (1, 37, 500, 1000):
            gt, eps = diffuse.forward_noise(sched, g0, t, rng)
            rec = (gt.coords - np.sqrt(sched.alpha_bars[t]) * g0.coords) / np.sqrt(1 - sched.alpha_bars[t])
            assert np.abs(rec - eps.coords).max() < 1e-10
            rec_h = (gt.feats - np.sqrt(sched.alpha_bars[t]) * g0.feats) / np.sqrt(1 - sched.alpha_bars[t])
            assert np.abs(rec_h - eps.feats).max() < 1e-10
            assert gt.centered and np.abs(eps.coords.sum(0)).max() < 1e-12

    def test_first_step_stays_close(self, sched, rng):
        g0 = random_geometry(rng, 4)
        gt, _ = diffuse.forward_noise(sched, g0, 1, rng)
        assert np.abs(gt.coords - g0.coords).max() < 6 * np.sqrt(sched.betas[1]) + 1e-6

    def test_last_step_decorrelates(self, sched):
        rng = np.random.default_rng(5)
        g0 = random_geometry(rng, 3)
        a, b = [], []
        for _ in range(10**4):
            x0 = random_geometry(rng, 3)
            gt, _ = diffuse.forward_noise(sched, x0, sched.T, rng)
            a.append(x0.coords.ravel())
            b.append(gt.coords.ravel())
        a, b = np.concatenate(a), np.concatenate(b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.05
        assert g0.centered

    def test_step_range(self, sched, rng):
        with pytest.raises(InvalidInputError):
            diffuse.forward_noise(sched, random_geometry(rng, 2), 0, rng)
        with pytest.raises(InvalidInputError):
            diffuse.forward_noise(sched, random_geometry(rng, 2), sched.T + 1, rng)


class TestReverseStep:
    def test_zero_predictor_monte_carlo(self, sched):
        rng = np.random.default_rng(11)
        N, M, t = 10**5, 2, 400
        x = np.zeros((N, M, 3))
        h = np.zeros((N, M, 6))
        nx = remove_mean(rng.standard_normal((N, M, 3)))
        nh = rng.standard_normal((N, M, 6))
        ox, oh = diffuse.reverse_step_arrays(diffuse.ZeroPredictor(), sched, x, h, t, (nx, nh))
        sigma = np.sqrt(sched.posterior_betas[t])
        assert np.abs(ox.mean(0)).max() < 4 * sigma / np.sqrt(N)
        assert np.abs(oh.mean(0)).max() < 4 * sigma / np.sqrt(N)
        assert oh.std() == pytest.approx(sigma, rel=0.01)

    @pytest.mark.parametrize("t", [2, 10, 300, 1000])
    def test_exact_noise_gives_posterior_mean(self, sched, t):
        rng = np.random.default_rng(t)
        g0 = MolecularGeometry(rng.normal(size=(1, 3)), rng.normal(size=(1, 6)))
        ex, eh = rng.standard_normal((1, 3)), rng.standard_normal((1, 6))
        gt = MolecularGeometry(sched.marginal(g0.coords, t, ex), sched.marginal(g0.feats, t, eh))
        expected = posterior_mean(sched, gt, g0, t)
        assert np.abs(sched.model_mean(gt.coords, ex, t) - expected.coords).max() < 1e-8
        assert np.abs(sched.model_mean(gt.feats, eh, t) - expected.feats).max() < 1e-8

    def test_oracle_mean_matches_posterior(self, sched, rng):
        g0 = random_geometry(rng, 4)
        gt, _ = diffuse.forward_noise(sched, g0, 250, rng)
        oracle = diffuse.OraclePredictor(sched, g0)
        out = diffuse.reverse_step_arrays(oracle, sched, gt.coords[None], gt.feats[None], 250,
                                          (np.zeros((1, 4, 3)), np.zeros((1, 4, 6))))
        ref = posterior_mean(sched, gt, g0, 250)
        assert np.abs(out[0][0] - ref.coords).max() < 1e-8
        assert np.abs(out[1][0] - ref.feats).max() < 1e-8

    def test_last_step_is_deterministic(self, sched, rng):
        pred = toy_predictor()
        g = random_geometry(rng, 3)
        a = diffuse.reverse_step(pred, sched, g, 1, np.random.default_rng(1))
        b = diffuse.reverse_step(pred, sched, g, 1, np.random.default_rng(2))
        assert np.array_equal(a.coords, b.coords) and np.array_equal(a.feats, b.feats)

    def test_output_centered(self, sched, rng):
        pred = toy_predictor()
        out = diffuse.reverse_step(pred, sched, random_geometry(rng, 5), 700, rng)
        assert np.abs(out.coords.sum(0)).max() < 1e-9

    def test_validation(self, sched, rng):
        g = random_geometry(rng, 3)
        with pytest.raises(InvalidInputError):
            diffuse.reverse_step(diffuse.ZeroPredictor(), sched, g, 0, rng)
        with pytest.raises(InvalidInputError):
            diffuse.reverse_step(diffuse.ZeroPredictor(), sched, g, 1001, rng)
        with pytest.raises(InvalidInputError):
            diffuse.reverse_step(diffuse.ZeroPredictor(), sched, g, 5)
        with pytest.raises(InvalidInputError):
            diffuse.reverse_step(diffuse.ZeroPredictor(), sched, random_geometry(rng, 3, centered=False, scale=4), 5, rng)


class TestChain:
    def test_oracle_chain_tracks_forward_marginals(self, sched):
        rng = np.random.default_rng(21)
        N, M = 10**4, 2
        g0 = MolecularGeometry.from_symbols(["C", "O"], [[-0.6, 0, 0], [0.6, 0, 0]], centered=True)
        seen = {}

        def trace(t, x, h):
            if t in (800, 500, 100):
                seen[t] = (x.copy(), h.copy())

        def noise(t, tag):
            return remove_mean(rng.standard_normal((N, M, 3))), rng.standard_normal((N, M, 6))

        diffuse.run_chain(diffuse.OraclePredictor(sched, g0), sched, noise, trace=trace)
        for t, (x, h) in seen.items():
            ab = sched.alpha_bars[t]
            mean_x, mean_h = np.sqrt(ab) * g0.coords, np.sqrt(ab) * g0.feats
            sd = np.sqrt(1 - ab)
            assert np.abs(x.mean(0) - mean_x).max() < 0.03 * max(np.abs(mean_x).max(), sd)
            assert np.abs(h.mean(0) - mean_h).max() < 0.03 * max(np.abs(mean_h).max(), sd)
            # centering removes one of M degrees of freedom per axis
            np.testing.assert_allclose(x.var(0), (1 - ab) * (1 - 1 / M), rtol=0.03)
            np.testing.assert_allclose(h.var(0), 1 - ab, rtol=0.03)

    def test_latents_stay_centered(self, sched):
        pred = TamePredictor(toy_predictor(), sched)
        worst = [0.0]

        def trace(t, x, h):
            worst[0] = max(worst[0], np.abs(x.sum(axis=1)).max())

        rngs = [np.random.default_rng(i) for i in range(4)]
        diffuse.run_chain(pred, sched, diffuse.MoleculeNoise(rngs, 5), trace=trace)
        assert worst[0] < 1e-6

    def test_generation_is_equivariant(self):
        sched = build_schedule("polynomial", 60)
        pred = TamePredictor(toy_predictor(), sched)
        R = random_rotation(np.random.default_rng(4))

        def noise_source(rotate):
            rng = np.random.default_rng(8)

            def noise(t, tag):
                nx, nh = remove_mean(rng.standard_normal((3, 4, 3))), rng.standard_normal((3, 4, 6))
                return (nx @ R.T if rotate else nx), nh
            return noise

        ax, ah = diffuse.run_chain(pred, sched, noise_source(False))
        bx, bh = diffuse.run_chain(pred, sched, noise_source(True))
        scale = np.abs(ax).max()
        assert np.abs(bx - ax @ R.T).max() <= 1e-4 * scale
        assert np.abs(bh - ah).max() <= 1e-4 * np.abs(ah).max()

    def test_divergence_is_reported(self, sched):
        class Exploding:
            def __call__(self, x, h, t, cond=None):
                return np.full_like(x, 1e308), np.full_like(h, 1e308)

        rngs = [np.random.default_rng(0)]
        with pytest.raises(SamplingDivergedError) as exc:
            diffuse.run_chain(Exploding(), sched, diffuse.MoleculeNoise(rngs, 2))
        assert exc.value.step == sched.T


class TestSampleUnconditional:
    def cfg(self, seed=3, batch_size=4, hist=None):
        sched = build_schedule("polynomial", 40)
        return diffuse.SamplerConfig(sched, TamePredictor(toy_predictor(), sched),
                                     hist or {2: 0.5, 3: 0.25, 5: 0.25}, seed, batch_size)

    def test_empty(self):
        assert diffuse.sample_unconditional(self.cfg(), 0) == []

    def test_reproducible(self):
        a = diffuse.sample_unconditional(self.cfg(), 6)
        b = diffuse.sample_unconditional(self.cfg(), 6)
        assert all(np.array_equal(x.coords, y.coords) and np.array_equal(x.feats, y.feats) for x, y in zip(a, b))
        assert all(g.centered and g.is_decoded() for g in a)

    def test_independent_of_batching_and_workers(self):
        a = diffuse.sample_unconditional(self.cfg(batch_size=4), 7)
        b = diffuse.sample_unconditional(self.cfg(batch_size=2), 7, workers=2)
        c = diffuse.sample_unconditional(self.cfg(batch_size=7), 7)
        for x, y, z in zip(a, b, c):
            assert np.array_equal(x.coords, y.coords) and np.array_equal(x.coords, z.coords)

    def test_offset_start_matches_tail(self):
        full = diffuse.sample_unconditional(self.cfg(), 5)
        tail = diffuse.sample_unconditional(self.cfg(), 2, start=3)
        assert all(np.array_equal(x.coords, y.coords) for x, y in zip(full[3:], tail))

    def test_different_seed_differs(self):
        a = diffuse.sample_unconditional(self.cfg(seed=1), 2)
        b = diffuse.sample_unconditional(self.cfg(seed=2), 2)
        assert not all(x.atom_count == y.atom_count and np.allclose(x.coords, y.coords) for x, y in zip(a, b))

    def test_histogram_drives_sizes(self):
        gs = diffuse.sample_unconditional(self.cfg(hist={3: 1.0}), 3)
        assert [g.atom_count for g in gs] == [3, 3, 3]

    def test_no_predictor(self):
        cfg = diffuse.SamplerConfig(build_schedule(), None, {2: 1.0}, 0)
        with pytest.raises(StateError):
            diffuse.sample_unconditional(cfg, 1)

    def test_histogram_validation(self):
        with pytest.raises(InvalidInputError):
            diffuse.SamplerConfig(build_schedule(), None, {2: 0.5, 3: 0.4}, 0)
        hist = diffuse.SamplerConfig.histogram([random_geometry(np.random.default_rng(i), 2 + i % 3) for i in range(7)])
        assert sum(hist.values()) == 1.0 and sorted(hist) == [2, 3, 4]


class TestTrain:
    def dataset(self, n=6, M=5, seed=0):
        rng = np.random.default_rng(seed)
        return [random_geometry(rng, M) for _ in range(n)]

    def test_initial_loss_near_one(self, sched):
        cfg = net.NoisePredictorConfig(layers=1, hidden=4)
        pred = net.NoisePredictor(cfg, np.zeros(net.predictor_layout(cfg).size))
        data = self.dataset(n=200, M=9)
        res = diffuse.train(pred, sched, data, net.AdamConfig(lr=0.0), epochs=1, batch_size=200)
        # centering leaves 3(M - 1) of 3M coordinate degrees of freedom
        M = 9
        expected = (3 * (M - 1) + 6 * M) / (9 * M)
        assert res.losses[0] == pytest.approx(expected, abs=0.05)
        assert abs(res.losses[0] - 1.0) < 0.1

    def test_single_geometry_overfits(self, sched):
        pred = net.NoisePredictor(net.NoisePredictorConfig(layers=2, hidden=16), rng=np.random.default_rng(0))
        data = self.dataset(n=1, M=3)
        res = diffuse.train(pred, sched, data, net.AdamConfig(lr=3e-3), epochs=200, draws_per_molecule=16,
                            batch_size=16)
        assert np.mean(res.losses[-10:]) < 0.5 * res.losses[0]

    def test_shuffle_irrelevant_for_single_batch(self, sched):
        cfg = net.NoisePredictorConfig(layers=1, hidden=8)
        p0 = net.init_params(net.predictor_layout(cfg), np.random.default_rng(1))
        data = self.dataset(n=5, M=3)
        runs = [diffuse.train(net.NoisePredictor(cfg, p0), sched, data, epochs=3, seed=4, batch_size=8, shuffle=s)
                for s in (True, False)]
        assert runs[0].losses == runs[1].losses
        assert np.array_equal(runs[0].params, runs[1].params)

    def test_resume_matches_uninterrupted(self, sched):
        cfg = net.NoisePredictorConfig(layers=1, hidden=8)
        p0 = net.init_params(net.predictor_layout(cfg), np.random.default_rng(2))
        data = self.dataset(n=7, M=3)
        kw = dict(seed=9, batch_size=3, draws_per_molecule=2, ema_decay=0.9)
        full = diffuse.train(net.NoisePredictor(cfg, p0), sched, data, epochs=4, **kw)
        first = diffuse.train(net.NoisePredictor(cfg, p0), sched, data, epochs=2, **kw)
        second = diffuse.train(net.NoisePredictor(cfg, first.params), sched, data, epochs=2, state=first.state,
                               start_epoch=2, ema=first.ema, **kw)
        assert full.losses == first.losses + second.losses
        assert np.array_equal(full.params, second.params)
        assert np.array_equal(full.ema, second.ema)
        assert second.epochs_done == 4 and second.state.step == full.state.step

    def test_ema_tracks_params(self, sched):
        cfg = net.NoisePredictorConfig(layers=1, hidden=4)
        p0 = net.init_params(net.predictor_layout(cfg), np.random.default_rng(3))
        res = diffuse.train(net.NoisePredictor(cfg, p0), sched, self.dataset(n=2, M=2), epochs=1, batch_size=1,
                            ema_decay=0.5)
        assert res.ema is not None and not np.array_equal(res.ema, res.params)
        assert diffuse.train(net.NoisePredictor(cfg, p0), sched, self.dataset(n=2, M=2)).ema is None

    def test_validation(self, sched, rng):
        pred = toy_predictor()
        with pytest.raises(InvalidInputError):
            diffuse.train(pred, sched, [])
        with pytest.raises(InvalidInputError):
            diffuse.train(pred, sched, [random_geometry(rng, 3, centered=False, scale=5)])
        with pytest.raises(InvalidInputError):
            diffuse.train(pred, sched, self.dataset(n=1), ema_decay=1.0)
        with pytest.raises(InvalidInputError):
            diffuse.train(pred, sched, self.dataset(n=1), draws_per_molecule=0)

    def test_divergence_names_step(self, sched):
        cfg = net.NoisePredictorConfig(layers=1, hidden=4)
        pred = net.NoisePredictor(cfg, np.full(net.predictor_layout(cfg).size, 1e200))
        with pytest.raises(TrainingDivergedError) as exc:
            with np.errstate(all="ignore"):
                diffuse.train(pred, sched, self.dataset(n=2, M=3), epochs=1, batch_size=1)
        assert exc.value.step == 0


class TestElbo:
    def test_oracle_terms_vanish(self, sched, rng):
        g0 = random_geometry(rng, 3)
        terms = diffuse.elbo_terms(diffuse.OraclePredictor(sched, g0), sched, g0)
        assert terms.shape == (sched.T,)
        assert np.abs(terms[1:]).max() < 1e-12

    def test_nonnegative_for_random_predictor(self, sched, rng):
        g0 = random_geometry(rng, 3)
        terms = diffuse.elbo_terms(toy_predictor(), sched, g0, rng=rng)
        assert np.all(terms[1:] >= 0) and np.all(np.isfinite(terms))

    def test_one_dimensional_kl(self):
        assert diffuse.gaussian_kl_equal_var([1.0], [0.0], 0.5) == pytest.approx(1.0)
