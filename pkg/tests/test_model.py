"""Model graph: shapes, distillation fixture, fusion masking, checkpoints."""

import numpy as np
import pytest

from mctseg import model as M
from mctseg import tensor as T
from mctseg.errors import (
    AllModalitiesMissing,
    ConfigError,
    MaskInputMismatch,
    ShapeError,
)
from mctseg.model import ModalityId, ModalityMask
from mctseg.tensor import Tensor

F64 = np.float64

TINY = M.ArchConfig(widths=(2, 2, 2, 2, 4), num_heads=2, ffn_mult=2)


def tiny_setup(seed=0, cfg=TINY, dtype=F64):
    store = M.build_params(cfg, seed, dtype=dtype)
    return store, cfg


def rand_images(rng, crop, dtype=F64):
    return {m: Tensor(rng.normal(size=(1, crop, crop, crop)), dtype=dtype)
            for m in M.MODALITIES}


class TestModalityMask:
    def test_empty_rejected(self):
        with pytest.raises(AllModalitiesMissing):
            ModalityMask((False, False, False, False))

    def test_canonical_order(self):
        masks = M.canonical_masks()
        assert len(masks) == 15
        sizes = [m.n_available for m in masks]
        assert sizes == [1] * 4 + [2] * 6 + [3] * 4 + [4]
        assert len({m.delta for m in masks}) == 15
        assert masks[0].available == (ModalityId.FLAIR,)
        assert masks[-1].n_available == 4


class TestEncode:
    def test_default_width_bottleneck_shape(self):
        cfg = M.ArchConfig()
        store = M.build_params(cfg, 0, dtype=np.float32)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 32, 32, 32)).astype(np.float32))
        feats = M.encode(store.view(False), cfg, "enc.multi", x)
        assert len(feats) == 5
        # four stride-2 halvings of 32
        assert feats[4].shape == (128, 2, 2, 2)
        assert [f.shape[0] for f in feats] == [8, 16, 32, 64, 128]

    def test_uni_and_multi_same_layerwise_shapes(self):
        store, cfg = tiny_setup()
        rng = np.random.default_rng(1)
        single = rng.normal(size=(1, 16, 16, 16))
        v = store.view(False)
        f_uni = M.encode(v, cfg, "enc.t1", Tensor(single, dtype=F64))
        f_multi = M.encode(v, cfg, "enc.multi", Tensor(np.repeat(single, 4, axis=0), dtype=F64))
        assert [f.shape for f in f_uni] == [f.shape for f in f_multi]

    def test_non_divisible_dims_rejected(self):
        store, cfg = tiny_setup()
        with pytest.raises(ShapeError):
            M.encode(store.view(False), cfg, "enc.t1", Tensor(np.zeros((1, 30, 30, 30))))

    def test_tiny_power_of_two_dims_allowed(self):
        store, cfg = tiny_setup()
        feats = M.encode(store.view(False), cfg, "enc.t1", Tensor(np.zeros((1, 4, 4, 4))))
        assert feats[4].shape[1:] == (1, 1, 1)


class TestMfdLoss:
    @staticmethod
    def _feats(shapes, value):
        return [Tensor(np.full(s, value, dtype=F64)) for s in shapes]

    def test_equal_features_zero(self):
        shapes = [(2, 8, 8, 8), (2, 4, 4, 4), (4, 2, 2, 2), (4, 1, 1, 1), (8, 1, 1, 1)]
        teacher = self._feats(shapes, 1.5)
        students = {m: self._feats(shapes, 1.5) for m in M.MODALITIES}
        out = M.mfd_loss(teacher, students, ModalityMask.full())
        assert float(out.data) == 0.0

    def test_ones_vs_zeros_counts_midlayer_elements(self):
        # default widths at crop 32: layers 3..5 hold 32*8^3 + 64*4^3 + 128*2^3
        shapes = [(8, 32, 32, 32), (16, 16, 16, 16), (32, 8, 8, 8),
                  (64, 4, 4, 4), (128, 2, 2, 2)]
        teacher = self._feats(shapes, 1.0)
        students = {m: self._feats(shapes, 1.0) for m in M.MODALITIES}
        students[ModalityId.T1] = self._feats(shapes, 0.0)
        out = M.mfd_loss(teacher, students, ModalityMask.full())
        assert float(out.data) == 21504.0

    def test_masked_modality_contributes_nothing(self):
        shapes = [(2, 4, 4, 4)] * 5
        teacher = self._feats(shapes, 1.0)
        students = {m: self._feats(shapes, 1.0) for m in M.MODALITIES}
        students[ModalityId.T2] = self._feats(shapes, 123.0)
        mask = ModalityMask((True, True, True, False))
        assert float(M.mfd_loss(teacher, students, mask).data) == 0.0

    def test_grads_flow_into_students_only(self):
        shapes = [(2, 2, 2, 2)] * 5
        teacher = [Tensor(np.ones(s), requires_grad=True, dtype=F64) for s in shapes]
        students = {m: [Tensor(np.zeros(s), requires_grad=True, dtype=F64) for s in shapes]
                    for m in M.MODALITIES}
        with T.GradTape():
            loss = M.mfd_loss(teacher, students, ModalityMask.full())
            T.backward(loss)
        assert all(t.grad is None for t in teacher)
        assert students[ModalityId.FLAIR][2].grad is not None


class TestCmf:
    def _features(self, rng, cfg, spatial=(2, 2, 2)):
        c = cfg.widths[4]
        return {m: Tensor(rng.normal(size=(c,) + spatial), dtype=F64)
                for m in M.MODALITIES}

    def test_masked_modality_content_irrelevant(self):
        store, cfg = tiny_setup(seed=3)
        # randomize the zero-initialized projections so the test is not vacuous
        rng = np.random.default_rng(4)
        for k in store.keys():
            if k.startswith("cmf."):
                store.arrays[k] = rng.normal(size=store.arrays[k].shape) * 0.3
        feats = self._features(rng, cfg)
        mask = ModalityMask((True, False, True, True))  # t1ce dropped
        v = store.view(False)
        ref = M.cmf_forward(v, cfg, feats, mask).data
        for _ in range(5):
            feats2 = dict(feats)
            feats2[ModalityId.T1CE] = Tensor(rng.normal(scale=100.0, size=feats[ModalityId.T1CE].shape), dtype=F64)
            got = M.cmf_forward(store.view(False), cfg, feats2, mask).data
            assert np.array_equal(got, ref)

    def test_equal_features_match_single_modality_trans(self):
        # with all modalities equal and zero embeddings, joint attention over
        # the duplicated tokens equals attention over one copy
        cfg = M.ArchConfig(widths=(2, 2, 2, 2, 4), num_heads=2, ffn_mult=2,
                           no_convblock=True)
        store = M.build_params(cfg, 5, dtype=F64)
        rng = np.random.default_rng(6)
        for k in store.keys():
            if k.startswith("cmf.attn"):
                store.arrays[k] = rng.normal(size=store.arrays[k].shape) * 0.3
            if k.startswith("cmf.embed"):
                store.arrays[k] = np.zeros_like(store.arrays[k])
        shared = rng.normal(size=(4, 2, 2, 2))
        feats = {m: Tensor(shared, dtype=F64) for m in M.MODALITIES}
        full = M.cmf_forward(store.view(False), cfg, feats, ModalityMask.full()).data
        single_feats = {m: Tensor(shared if m == ModalityId.T2 else np.zeros_like(shared), dtype=F64)
                        for m in M.MODALITIES}
        single = M.cmf_forward(store.view(False), cfg, single_feats,
                               ModalityMask.single(ModalityId.T2)).data
        assert np.allclose(full, single, atol=1e-10)

    def test_gradient_vs_finite_differences(self):
        store, cfg = tiny_setup(seed=7)
        rng = np.random.default_rng(8)
        for k in store.keys():
            if k.startswith("cmf."):
                store.arrays[k] = rng.normal(size=store.arrays[k].shape) * 0.3
        fixed = self._features(rng, cfg)
        mask = ModalityMask((True, True, False, True))
        cvec = rng.normal(size=(cfg.widths[4], 2, 2, 2))

        def f(x):
            feats = dict(fixed)
            feats[ModalityId.FLAIR] = x
            out = M.cmf_forward(store.view(False), cfg, feats, mask)
            return T.tsum(T.cmul(out, cvec))

        err = T.finite_diff_check(f, fixed[ModalityId.FLAIR], h=1e-4)
        assert err < 1e-5

    def test_pairwise_variant_runs_and_masks(self):
        cfg = M.ArchConfig(widths=(2, 2, 2, 2, 4), num_heads=2, ffn_mult=2,
                           pairwise_cmf=True)
        store = M.build_params(cfg, 9, dtype=F64)
        rng = np.random.default_rng(10)
        feats = self._features(rng, cfg)
        mask = ModalityMask((True, True, False, True))
        ref = M.cmf_forward(store.view(False), cfg, feats, mask).data
        feats2 = dict(feats)
        feats2[ModalityId.T1] = Tensor(rng.normal(size=feats[ModalityId.T1].shape), dtype=F64)
        got = M.cmf_forward(store.view(False), cfg, feats2, mask).data
        assert np.array_equal(got, ref)


class TestDecode:
    def test_default_width_full_resolution(self):
        cfg = M.ArchConfig()
        store = M.build_params(cfg, 0, dtype=np.float32)
        rng = np.random.default_rng(11)
        skips = [Tensor(rng.normal(size=(cfg.widths[l], 32 >> l, 32 >> l, 32 >> l)).astype(np.float32))
                 for l in range(4)]
        bottleneck = Tensor(rng.normal(size=(128, 2, 2, 2)).astype(np.float32))
        logits, aux = M.decode(store.view(False), cfg, "dec.seg", bottleneck, skips, with_aux=True)
        assert logits.shape == (4, 32, 32, 32)
        # deep-supervision head l=1 sits one halving below full resolution
        assert aux[1].shape == (4, 16, 16, 16)
        assert aux[2].shape == (4, 8, 8, 8)
        assert aux[3].shape == (4, 4, 4, 4)
        assert aux[4].shape == (4, 2, 2, 2)

    def test_zero_weights_uniform_softmax(self):
        store, cfg = tiny_setup()
        for k in store.keys():
            store.arrays[k] = np.zeros_like(store.arrays[k])
        rng = np.random.default_rng(12)
        skips = [Tensor(rng.normal(size=(cfg.widths[l], 16 >> l, 16 >> l, 16 >> l)), dtype=F64)
                 for l in range(4)]
        bottleneck = Tensor(rng.normal(size=(cfg.widths[4], 1, 1, 1)), dtype=F64)
        logits = M.decode(store.view(False), cfg, "dec.multi", bottleneck, skips)
        assert np.all(logits.data == 0.0)
        probs = T.softmax(logits, axis=0).data
        assert np.allclose(probs, 0.25)


class TestModelForward:
    def test_infer_single_modality(self):
        store, cfg = tiny_setup(seed=13)
        rng = np.random.default_rng(14)
        mask = ModalityMask.single(ModalityId.FLAIR)
        x = {ModalityId.FLAIR: Tensor(rng.normal(size=(1, 16, 16, 16)), dtype=F64)}
        store.reset_access_log()
        out = M.model_forward(store.view(False), cfg, x, mask, "infer")
        assert out.seg_logits.shape == (4, 16, 16, 16)
        assert out.aux_logits is None and out.multi_logits is None
        # the teacher and per-modality decoders are never read at inference
        touched = store.accessed
        assert not any(k.startswith("enc.multi") for k in touched)
        assert not any(k.startswith("dec.multi") for k in touched)
        for m in M.MODALITIES:
            assert not any(k.startswith(f"dec.{m.key}") for k in touched)

    def test_train_full_mask_branch_count(self):
        store, cfg = tiny_setup(seed=15)
        rng = np.random.default_rng(16)
        x = rand_images(rng, 16)
        out = M.model_forward(store.view(True), cfg, x, ModalityMask.full(), "train")
        assert len(out.uni_logits) == 4
        assert out.multi_logits is not None
        assert out.seg_logits is not None
        assert sorted(out.aux_logits) == [1, 2, 3, 4]

    def test_deterministic_outputs(self):
        store, cfg = tiny_setup(seed=17)
        rng = np.random.default_rng(18)
        x = rand_images(rng, 16)
        mask = ModalityMask((True, False, True, False))
        a = M.model_forward(store.view(True), cfg, x, mask, "train").seg_logits.data
        b = M.model_forward(store.view(True), cfg, x, mask, "train").seg_logits.data
        assert np.array_equal(a, b)

    def test_mask_input_mismatch(self):
        store, cfg = tiny_setup(seed=19)
        rng = np.random.default_rng(20)
        x = rand_images(rng, 16)
        with pytest.raises(MaskInputMismatch):
            M.model_forward(store.view(False), cfg, x,
                            ModalityMask.single(ModalityId.T1), "infer")
        del x[ModalityId.T2]
        with pytest.raises(MaskInputMismatch):
            M.model_forward(store.view(True), cfg, x, ModalityMask.full(), "train")

    def test_masking_invariance_train_mode(self):
        store, cfg = tiny_setup(seed=21)
        rng = np.random.default_rng(22)
        x = rand_images(rng, 16)
        mask = ModalityMask((True, False, False, True))
        ref = M.model_forward(store.view(False), cfg, x, mask, "train").seg_logits.data
        for _ in range(5):
            x2 = dict(x)
            for m in (ModalityId.T1CE, ModalityId.T1):
                x2[m] = Tensor(rng.normal(scale=30.0, size=(1, 16, 16, 16)), dtype=F64)
            got = M.model_forward(store.view(False), cfg, x2, mask, "train").seg_logits.data
            assert np.array_equal(got, ref)

    def test_infer_matches_train_seg_path(self):
        store, cfg = tiny_setup(seed=23)
        rng = np.random.default_rng(24)
        x = rand_images(rng, 16)
        mask = ModalityMask((False, True, True, False))
        train_out = M.model_forward(store.view(False), cfg, x, mask, "train").seg_logits.data
        infer_in = {m: x[m] for m in mask.available}
        infer_out = M.model_forward(store.view(False), cfg, infer_in, mask, "infer").seg_logits.data
        assert np.array_equal(train_out, infer_out)

    def test_ablation_key_sets(self):
        base = set(M.build_params(TINY, 0).keys())
        no_cmf = set(M.build_params(M.ArchConfig(widths=TINY.widths, num_heads=2,
                                                 ffn_mult=2, no_cmf=True), 0).keys())
        assert any(k.startswith("cmf.") for k in base)
        assert not any(k.startswith("cmf.") for k in no_cmf)
        no_ufe = set(M.build_params(M.ArchConfig(widths=TINY.widths, num_heads=2,
                                                 ffn_mult=2, no_ufe=True), 0).keys())
        assert not any(k.startswith("ufe.") for k in no_ufe)
        no_cb = set(M.build_params(M.ArchConfig(widths=TINY.widths, num_heads=2,
                                                ffn_mult=2, no_convblock=True), 0).keys())
        assert not any(".cb" in k for k in no_cb)

    def test_ablated_forward_runs(self):
        rng = np.random.default_rng(25)
        for kwargs in ({"no_ufe": True}, {"no_cmf": True}, {"no_convblock": True}):
            cfg = M.ArchConfig(widths=TINY.widths, num_heads=2, ffn_mult=2, **kwargs)
            store = M.build_params(cfg, 26, dtype=F64)
            x = rand_images(rng, 16)
            out = M.model_forward(store.view(False), cfg, x,
                                  ModalityMask((True, False, True, False)), "train")
            assert out.seg_logits.shape == (4, 16, 16, 16)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        store, cfg = tiny_setup(seed=27, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, store, cfg.digest())
        arrays, digest = M.load_checkpoint(path)
        assert digest == cfg.digest()
        assert set(arrays) == set(store.arrays)
        for k in arrays:
            assert np.array_equal(arrays[k], store.arrays[k])
        # byte-stable: saving the loaded params reproduces the same file
        store2 = M.build_params(cfg, 99, dtype=np.float32)
        M.restore_params(store2, arrays)
        path2 = tmp_path / "model2.ckpt"
        M.save_checkpoint(path2, store2, digest)
        assert path.read_bytes() == path2.read_bytes()

    def test_key_set_mismatch_rejected(self, tmp_path):
        store, cfg = tiny_setup(seed=28, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(path, store, cfg.digest())
        arrays, _ = M.load_checkpoint(path)
        other = M.build_params(M.ArchConfig(widths=TINY.widths, num_heads=2,
                                            ffn_mult=2, no_cmf=True), 0)
        with pytest.raises(ConfigError):
            M.restore_params(other, arrays)

    def test_corrupt_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        from mctseg.errors import BadMagic
        with pytest.raises(BadMagic):
            M.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        store, cfg = tiny_setup(seed=29, dtype=np.float32)
        path = tmp_path / "full.ckpt"
        M.save_checkpoint(path, store, cfg.digest())
        data = path.read_bytes()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(data[: len(data) // 2])
        from mctseg.errors import TruncatedFile
        with pytest.raises(TruncatedFile):
            M.load_checkpoint(cut)
