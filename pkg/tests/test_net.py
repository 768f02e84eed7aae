import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_geometry, random_rotation
from molguide import net
from molguide.errors import InvalidInputError, TrainingDivergedError
from molguide.geom import MolecularGeometry
from molguide.schedule import build_schedule


def small(layers=2, hidden=8, cond=0):
    cfg = net.NoisePredictorConfig(layers=layers, hidden=hidden, condition_width=cond)
    return cfg, net.init_params(net.predictor_layout(cfg), np.random.default_rng(layers * 100 + hidden))


def with_coord_head(cfg, params, rng):
    # the coordinate head starts at zero; give it weights so the coordinate path is exercised
    layout = net.predictor_layout(cfg)
    blocks = layout.unpack(params.copy())
    for l in range(cfg.layers):
        blocks[f"egnn{l}.coord.w2"] = rng.normal(0, 0.3, blocks[f"egnn{l}.coord.w2"].shape)
    return layout.pack(blocks)


class TestLayout:
    def test_slices_partition_vector(self):
        layout = net.predictor_layout(net.NoisePredictorConfig(layers=3, hidden=16))
        covered = np.zeros(layout.size, dtype=int)
        for name in layout:
            covered[layout.slices[name]] += 1
        assert np.all(covered == 1)

    @given(st.integers(1, 4), st.integers(1, 32), st.integers(0, 3))
    def test_size_is_function_of_hyperparameters(self, L, H, c):
        cfg = net.NoisePredictorConfig(layers=L, hidden=H, condition_width=c)
        k = cfg.feature_width
        # edge: w_i, w_j (H x H), w_d (1 x H), b1, w2, b2; coord: w1, b1, w2 (H x 1); node: w_h, w_m, b1, w2, b2
        per_layer = (2 * H * H + H + H + H * H + H) + (H * H + H + H) + (2 * H * H + H + H * H + H)
        expected = (k + 1 + c) * H + H + L * per_layer + H * k + k
        assert net.predictor_layout(cfg).size == expected

    def test_pack_unpack(self):
        cfg, p = small()
        layout = net.predictor_layout(cfg)
        np.testing.assert_array_equal(layout.pack(layout.unpack(p)), p)
        assert layout.block_of(0) == "embed.w"
        with pytest.raises(InvalidInputError):
            layout.unpack(p[:-1])

    def test_bad_config(self):
        with pytest.raises(InvalidInputError):
            net.NoisePredictorConfig(layers=0)


class TestForward:
    def test_zero_network(self, rng):
        cfg, p = small()
        g = random_geometry(rng, 4)
        out = net.predict_noise(np.zeros_like(p), cfg, g, 10)
        assert not out.coords.any() and not out.feats.any()

    def test_rejects_uncentered(self, rng):
        cfg, p = small()
        with pytest.raises(InvalidInputError):
            net.predict_noise(p, cfg, random_geometry(rng, 3, centered=False, scale=5) , 1)

    def test_fresh_network_predicts_no_displacement(self, rng):
        cfg, p = small()
        out = net.predict_noise(p, cfg, random_geometry(rng, 5), 500)
        assert not out.coords.any()

    @pytest.mark.parametrize("layers", [1, 2, 3])
    @pytest.mark.parametrize("M", [2, 3, 4, 5, 6])
    def test_equivariance(self, layers, M):
        rng = np.random.default_rng(layers * 10 + M)
        cfg, p = small(layers=layers)
        p = with_coord_head(cfg, p, rng)
        g = random_geometry(rng, M)
        R = random_rotation(rng)
        a = net.predict_noise(p, cfg, g, 321)
        b = net.predict_noise(p, cfg, g.with_coords(g.coords @ R.T), 321)
        scale = np.abs(a.coords).max()
        assert scale > 0
        assert np.abs(b.coords - a.coords @ R.T).max() <= 1e-5 * scale
        assert np.abs(b.feats - a.feats).max() <= 1e-9

    def test_permutation(self, rng):
        cfg, p = small()
        p = with_coord_head(cfg, p, rng)
        g = random_geometry(rng, 5)
        perm = rng.permutation(5)
        a = net.predict_noise(p, cfg, g, 77)
        b = net.predict_noise(p, cfg, MolecularGeometry(g.coords[perm], g.feats[perm], centered=True), 77)
        np.testing.assert_allclose(b.coords, a.coords[perm], atol=1e-12)
        np.testing.assert_allclose(b.feats, a.feats[perm], atol=1e-12)

    def test_translation_invariance_through_centering(self, rng):
        cfg, p = small()
        p = with_coord_head(cfg, p, rng)
        g = random_geometry(rng, 4)
        shifted = g.coords + np.array([3.0, -1.0, 2.0])
        a = net.forward(net.predictor_layout(cfg).unpack(p), cfg, g.coords[None], g.feats[None], 5)
        b = net.forward(net.predictor_layout(cfg).unpack(p), cfg, shifted[None], g.feats[None], 5)
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_deterministic(self, rng):
        cfg, p = small()
        g = random_geometry(rng, 4)
        a, b = net.predict_noise(p, cfg, g, 9), net.predict_noise(p, cfg, g, 9)
        assert np.array_equal(a.feats, b.feats) and np.array_equal(a.coords, b.coords)

    def test_condition_changes_output(self, rng):
        cfg, p = small(cond=2)
        g = random_geometry(rng, 3)
        a = net.predict_noise(p, cfg, g, 9, cond=[0.0, 0.0])
        b = net.predict_noise(p, cfg, g, 9, cond=[1.0, -1.0])
        assert not np.allclose(a.feats, b.feats)

    def test_batched_matches_single(self, rng):
        cfg, p = small()
        p = with_coord_head(cfg, p, rng)
        gs = [random_geometry(rng, 3) for _ in range(4)]
        pred = net.NoisePredictor(cfg, p)
        ts = np.array([1, 10, 100, 999])
        bx, bh = pred(np.stack([g.coords for g in gs]), np.stack([g.feats for g in gs]), ts)
        for i, g in enumerate(gs):
            single = net.predict_noise(p, cfg, g, ts[i])
            np.testing.assert_allclose(bx[i], single.coords, atol=1e-12)
            np.testing.assert_allclose(bh[i], single.feats, atol=1e-12)


class TestLoss:
    def batch(self, rng, sizes=(3,), sched=None):
        sched = sched or build_schedule()
        out = []
        for M in sizes:
            g = random_geometry(rng, M)
            ex = rng.standard_normal((M, 3))
            noise = MolecularGeometry(ex - ex.mean(0), rng.standard_normal((M, 6)), centered=True)
            out.append((g, int(rng.integers(1, sched.T + 1)), noise))
        return sched, out

    def test_finite_differences(self, rng):
        cfg, p = small(layers=2, hidden=8)
        p = with_coord_head(cfg, p, rng)
        sched, batch = self.batch(rng, sizes=(3,))
        loss, grad = net.loss_and_gradient(p, cfg, sched, batch)
        idx = rng.choice(p.size, 50, replace=False)
        h = 1e-5
        for i in idx:
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            fd = (net.loss_and_gradient(pp, cfg, sched, batch)[0] - net.loss_and_gradient(pm, cfg, sched, batch)[0]) / (2 * h)
            assert abs(fd - grad[i]) <= 1e-3 * max(abs(fd), abs(grad[i])) + 1e-9

    def test_exact_fit_single_atom(self):
        cfg, p = small()
        sched = build_schedule()
        g = MolecularGeometry.from_symbols(["C"], [[0, 0, 0]], centered=True)
        zero = MolecularGeometry(np.zeros((1, 3)), np.zeros((1, 6)), centered=True)
        loss, grad = net.loss_and_gradient(np.zeros_like(p), cfg, sched, [(g, 10, zero)])
        assert loss == 0.0
        layout = net.predictor_layout(cfg)
        blocks = layout.unpack(grad)
        assert all(not blocks[n].any() for n in blocks if ".coord." in n)

    def test_rotation_invariance(self, rng):
        cfg, p = small()
        p = with_coord_head(cfg, p, rng)
        sched, batch = self.batch(rng, sizes=(4, 2))
        R = random_rotation(rng)
        rot = [(g.with_coords(g.coords @ R.T), t, n.with_coords(n.coords @ R.T)) for g, t, n in batch]
        a = net.loss_and_gradient(p, cfg, sched, batch)[0]
        b = net.loss_and_gradient(p, cfg, sched, rot)[0]
        assert abs(a - b) < 1e-6

    def test_mixed_sizes_equal_mean_of_singles(self, rng):
        cfg, p = small()
        sched, batch = self.batch(rng, sizes=(2, 4, 2))
        full = net.loss_and_gradient(p, cfg, sched, batch)
        singles = [net.loss_and_gradient(p, cfg, sched, [b]) for b in batch]
        assert full[0] == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-12)
        np.testing.assert_allclose(full[1], np.mean([s[1] for s in singles], axis=0), rtol=1e-9, atol=1e-14)

    def test_empty_batch(self):
        cfg, p = small()
        with pytest.raises(InvalidInputError):
            net.loss_and_gradient(p, cfg, build_schedule(), [])


class TestOptimizers:
    def test_sgd_arithmetic(self):
        assert net.sgd_step(np.array([1.0]), np.array([2.0]), 0.1)[0] == pytest.approx(0.8)

    def test_adam_first_step(self):
        hp = net.AdamConfig(lr=0.01)
        g = np.array([0.5, -2.0, 1e-3])
        p, s = net.adam_step(np.zeros(3), g, net.AdamState.zeros(3), hp)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert s.step == 1
        np.testing.assert_allclose(s.m, 0.1 * g)
        np.testing.assert_allclose(s.v, 0.001 * g * g)

    def test_adam_zero_gradient(self):
        state = net.AdamState(np.array([0.2]), np.array([0.04]), 3)
        p, s = net.adam_step(np.array([1.0]), np.zeros(1), net.AdamState(np.zeros(1), np.zeros(1), 0))
        assert p[0] == 1.0
        _, s2 = net.adam_step(np.array([1.0]), np.zeros(1), state)
        assert s2.m[0] == pytest.approx(0.9 * 0.2) and s2.v[0] == pytest.approx(0.999 * 0.04)

    def test_non_finite_names_block(self):
        cfg, p = small()
        layout = net.predictor_layout(cfg)
        g = np.zeros_like(p)
        g[layout.slices["egnn1.node.w2"].start + 3] = np.nan
        with pytest.raises(TrainingDivergedError) as exc:
            net.adam_step(p, g, net.AdamState.zeros(p.size), layout=layout)
        assert exc.value.block == "egnn1.node.w2"
        with pytest.raises(TrainingDivergedError):
            net.sgd_step(p, g, 0.1, layout)
