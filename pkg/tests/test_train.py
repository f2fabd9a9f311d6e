"""Training: schedule/optimizer fixtures, mask sampling, loop behavior."""

import numpy as np
import pytest

from mctseg import data as D
from mctseg import model as M
from mctseg import train as TR
from mctseg.config import RunConfig
from mctseg.errors import NaNLoss
from mctseg.model import MODALITIES, ModalityMask


def tiny_cfg(**kw):
    defaults = dict(seed=5, grid=16, crop=8, n_train=2, n_eval=2, noise_sigma=0.05,
                    widths=(2, 2, 4, 4, 8), num_heads=2, ffn_mult=2,
                    epochs=2, initial_lr=1e-3, augment=True, mask_dist="uniform15")
    defaults.update(kw)
    return RunConfig(**defaults).validate()


def tiny_phantoms(cfg, n=2):
    spec = D.PhantomSpec(grid=cfg.grid, wt_radii=(4.0, 5.0), tc_radii=(2.5, 3.0),
                         et_radii=(1.5, 2.0), noise_sigma=cfg.noise_sigma, seed=cfg.seed)
    return D.generate_phantom(spec, n)


class TestPolyLr:
    def test_endpoints(self):
        assert TR.poly_lr(0, 1e-4, 100) == 1e-4
        assert TR.poly_lr(100, 1e-4, 100) == 0.0

    def test_midpoint(self):
        assert abs(TR.poly_lr(50, 1e-4, 100, p=0.9) - 5.3589e-5) < 1e-9

    def test_monotone_nonincreasing(self):
        vals = [TR.poly_lr(e, 1e-4, 200, p=0.9) for e in range(201)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            TR.poly_lr(101, 1e-4, 100)


class FakeStore:
    def __init__(self, arrays):
        self.arrays = arrays

    def keys(self):
        return sorted(self.arrays)


class TestAdam:
    def test_first_step_fixture(self):
        # t=1, g=1, wd=0: m=0.1, v=0.001, mhat=1, vhat=1, delta ~ -lr
        theta = np.array([0.5])
        store = FakeStore({"w": theta})
        state = TR.init_optim(store, weight_decay=0.0)
        TR.adam_step(store, {"w": np.array([1.0])}, state, lr=1e-2)
        assert abs(state.m["w"][0] - 0.1) < 1e-15
        assert abs(state.v["w"][0] - 0.001) < 1e-15
        delta = store.arrays["w"][0] - 0.5
        assert abs(delta + 1e-2) < 1e-7 * 1e-2

    def test_zero_gradient_no_motion(self):
        theta = np.array([1.0, -2.0])
        store = FakeStore({"w": theta})
        state = TR.init_optim(store, weight_decay=0.0)
        TR.adam_step(store, {"w": np.zeros(2)}, state, lr=1e-2)
        assert np.array_equal(store.arrays["w"], [1.0, -2.0])

    def test_weight_decay_shrinks(self):
        theta = np.array([1.0, -1.0])
        store = FakeStore({"w": theta})
        state = TR.init_optim(store, weight_decay=0.1)
        TR.adam_step(store, {"w": np.zeros(2)}, state, lr=1e-2)
        assert abs(store.arrays["w"][0]) < 1.0
        assert abs(store.arrays["w"][1]) < 1.0
        assert store.arrays["w"][0] > 0 > store.arrays["w"][1]

    def test_sign_sgd_limit(self):
        # beta1 = beta2 = 0, eps -> 0, wd = 0: step is lr * sign(g)
        store = FakeStore({"w": np.array([0.0, 0.0, 0.0])})
        state = TR.init_optim(store, beta1=0.0, beta2=0.0, eps=1e-300, weight_decay=0.0)
        g = np.array([3.0, -0.2, 1e-5])
        TR.adam_step(store, {"w": g}, state, lr=1e-2)
        assert np.allclose(store.arrays["w"], -1e-2 * np.sign(g), rtol=1e-10)

    def test_missing_grads_treated_as_zero(self):
        store = FakeStore({"a": np.array([1.0]), "b": np.array([2.0])})
        state = TR.init_optim(store, weight_decay=0.0)
        TR.adam_step(store, {"a": np.array([1.0])}, state, lr=1e-3)
        assert store.arrays["b"][0] == 2.0


class TestMaskSampling:
    def test_never_empty(self):
        rng = np.random.default_rng(0)
        for _ in range(100_000):
            assert TR.sample_modality_mask(rng).n_available >= 1

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        n = 15_000
        counts = {}
        for _ in range(n):
            m = TR.sample_modality_mask(rng)
            counts[m.delta] = counts.get(m.delta, 0) + 1
        assert len(counts) == 15
        p = 1.0 / 15.0
        sigma = np.sqrt(n * p * (1 - p))
        for c in counts.values():
            assert abs(c - n * p) < 3 * sigma

    def test_reproducible(self):
        a = [TR.sample_modality_mask(np.random.default_rng(2)).delta for _ in range(1)]
        b = [TR.sample_modality_mask(np.random.default_rng(2)).delta for _ in range(1)]
        assert a == b

    def test_bernoulli_rejects_empty(self):
        rng = np.random.default_rng(3)
        for _ in range(2000):
            assert TR.sample_modality_mask(rng, "bernoulli:0.3").n_available >= 1

    def test_full(self):
        assert TR.sample_modality_mask(np.random.default_rng(4), "full").n_available == 4


class TestClassWeights:
    def test_mean_one_and_clamped(self):
        cfg = tiny_cfg()
        w = TR.class_weights(tiny_phantoms(cfg))
        assert w.shape == (4,)
        assert np.all(w >= 0.1) and np.all(w <= 10.0)
        # tumor classes are rarer than background
        assert w[0] == w.min()


class TestTrainLoop:
    def test_deterministic_in_f64(self):
        cfg = tiny_cfg(f64=True, epochs=1)
        phantoms = tiny_phantoms(cfg)

        def run():
            store = M.build_params(cfg.arch(), cfg.seed, dtype=np.float64)
            TR.train_loop(cfg, phantoms, store)
            return store

        s1, s2 = run(), run()
        for k in s1.keys():
            assert np.array_equal(s1.arrays[k], s2.arrays[k]), k

    def test_loss_log_format(self):
        cfg = tiny_cfg(epochs=1)
        phantoms = tiny_phantoms(cfg)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        _, rows = TR.train_loop(cfg, phantoms, store)
        assert len(rows) == cfg.epochs * len(phantoms)
        first = rows[0].split(",")
        assert len(first) == 9
        assert first[0] == "0" and first[1] == "0"
        floats = [float(x) for x in first[2:]]
        assert all(np.isfinite(floats))

    def test_overfit_smoke_decreases_seg_loss(self):
        cfg = tiny_cfg(epochs=40, n_train=1, augment=False, mask_dist="full",
                       initial_lr=3e-3, max_epoch=40)
        phantom = tiny_phantoms(cfg, n=1)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        _, rows = TR.train_loop(cfg, phantom, store)
        first_seg = float(rows[0].split(",")[4])
        last_seg = float(rows[-1].split(",")[4])
        assert last_seg < first_seg

    def test_nan_loss_aborts_with_step(self):
        cfg = tiny_cfg(epochs=1)
        phantoms = tiny_phantoms(cfg)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=np.float32)
        store.arrays["enc.flair.l1.conv.w"][:] = 1e38  # force an overflow
        with pytest.raises(NaNLoss) as exc:
            TR.train_loop(cfg, phantoms, store)
        assert exc.value.step == 0

    def test_resume_continues_step_counter(self, tmp_path):
        cfg = tiny_cfg(epochs=2)
        phantoms = tiny_phantoms(cfg)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        optim, rows = TR.train_loop(cfg, phantoms, store)
        assert optim.t == len(rows)
        TR.save_optim(tmp_path / "opt.npz", optim, epoch=cfg.epochs)
        restored, epoch = TR.load_optim(tmp_path / "opt.npz", store)
        assert restored.t == optim.t and epoch == cfg.epochs
        cfg2 = tiny_cfg(epochs=3)
        _, rows2 = TR.train_loop(cfg2, phantoms, store, optim=restored, start_epoch=epoch)
        steps = [int(r.split(",")[1]) for r in rows2]
        assert steps[0] == optim.t
        assert steps == sorted(steps)


class TestEvalMatrix:
    def test_shape_and_average(self):
        cfg = tiny_cfg()
        phantoms = tiny_phantoms(cfg)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        matrix = TR.eval_matrix(store, cfg, phantoms)
        assert len(matrix.rows) == 15
        arr = np.array([[et, tc, wt] for _, et, tc, wt in matrix.rows])
        assert np.allclose(matrix.average, arr.mean(axis=0))
        assert np.all(arr >= 0) and np.all(arr <= 1)

    def test_ground_truth_oracle_scores_all_ones(self):
        cfg = tiny_cfg()
        phantoms = tiny_phantoms(cfg)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        truth = {s.sample_id: D.center_crop(s, cfg.crop).labels for s in phantoms}
        calls = {"n": 0}

        def oracle(images, mask):
            calls["n"] += 1
            # match the prepared sample by its cropped first-modality volume
            for s in phantoms:
                ref = D.center_crop(
                    D.VolumeSample(images=D.normalized_images(s), labels=s.labels,
                                   sample_id=s.sample_id), cfg.crop)
                if np.array_equal(ref.images[MODALITIES[0]], images[MODALITIES[0]]):
                    return truth[s.sample_id]
            raise AssertionError("unknown sample")

        matrix = TR.eval_matrix(store, cfg, phantoms, predictor=oracle)
        assert calls["n"] == 15 * len(phantoms)
        for _, et, tc, wt in matrix.rows:
            assert (et, tc, wt) == (1.0, 1.0, 1.0)
        assert matrix.average == (1.0, 1.0, 1.0)

    def test_order_invariant(self):
        cfg = tiny_cfg()
        phantoms = tiny_phantoms(cfg, n=3)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        m1 = TR.eval_matrix(store, cfg, phantoms)
        m2 = TR.eval_matrix(store, cfg, list(reversed(phantoms)))
        for (mask1, *s1), (mask2, *s2) in zip(m1.rows, m2.rows):
            assert mask1.delta == mask2.delta
            assert np.allclose(s1, s2, atol=1e-12)

    def test_csv_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        phantoms = tiny_phantoms(cfg)
        store = M.build_params(cfg.arch(), cfg.seed, dtype=cfg.dtype())
        matrix = TR.eval_matrix(store, cfg, phantoms)
        p = tmp_path / "matrix.csv"
        TR.write_matrix_csv(p, matrix)
        lines = p.read_text().splitlines()
        assert len(lines) == 17  # header + 15 masks + average
        rows, avg = TR.read_matrix_csv(p)
        assert len(rows) == 15
        assert np.allclose(avg, matrix.average, atol=1e-6)
        # canonical order: singles, pairs, triples, full
        sizes = [sum(delta) for delta, *_ in rows]
        assert sizes == [1] * 4 + [2] * 6 + [3] * 4 + [4]
