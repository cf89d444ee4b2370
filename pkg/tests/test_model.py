import math

import numpy as np
import pytest

from milforge import tensor as T
from milforge.data import ConfigurationError
from milforge.model import (
    MILModel,
    ModelConfig,
    attention_pool,
    checkpoint_bytes,
    fc_embed,
    forward,
    gated_scores,
    instance_probs,
    load_checkpoint,
    model_from_bytes,
    normalize_coords,
    parameter_shapes,
    positional_offsets,
    save_checkpoint,
    sinusoid,
    transformer_forward,
    two_d_pos_enc,
)
from milforge.tensor import Tensor


def small(kind="pathmil", pe="none", c=3, d=6, e=16, heads=4, dtype=np.float64, seed=0):
    cfg = ModelConfig(kind=kind, num_classes=c, feature_dim=d, pe=pe, heads=heads, embed_dim=e, attn_dim=8)
    return MILModel.init(cfg, seed=seed, dtype=dtype)


def direct_gated(h, V, bV, U, bU, W, bW):
    """Gated attention written out per instance and class with plain loops."""
    k = h.shape[0]
    c = W.shape[0]
    s = np.zeros((k, c))
    for i in range(k):
        a = np.tanh(V @ h[i] + bV) * (1 / (1 + np.exp(-(U @ h[i] + bU))))
        for j in range(c):
            s[i, j] = W[j] @ a + bW[j]
    alpha = np.zeros_like(s)
    for j in range(c):
        e = np.exp(s[:, j] - s[:, j].max())
        alpha[:, j] = e / e.sum()
    return s, alpha


class TestConfig:
    def test_default_widths(self):
        shapes = parameter_shapes(ModelConfig("pathmil", num_classes=4, feature_dim=784))
        assert shapes["attn.U"] == (256, 512) and shapes["attn.V"] == (256, 512)
        assert shapes["attn.W"] == (4, 256) and shapes["fc.W"] == (512, 784)
        assert shapes["head.W"] == (4, 512 + 4 * 512) and shapes["cls"] == (512,)
        assert shapes["tf1.Wq"] == (512, 512)

    @pytest.mark.parametrize(
        "kw",
        [dict(kind="bogus"), dict(pe="1d"), dict(kind="clamsb", pe="2d"), dict(kind="pathmil", embed_dim=10, heads=4), dict(embed_dim=9, heads=1)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            ModelConfig(**kw)

    def test_abmil_has_no_gate(self):
        assert "attn.U" not in parameter_shapes(ModelConfig("abmil", num_classes=2, feature_dim=3))

    def test_init_ranges(self):
        m = small()
        bound = 1 / math.sqrt(6)
        assert np.abs(m["fc.W"].data).max() <= bound and np.abs(m["fc.b"].data).max() <= bound
        np.testing.assert_array_equal(m["tf1.ln.g"].data, 1.0)
        assert abs(m["cls"].data.std() - 0.02) < 0.02


class TestBlocks:
    def test_fc_embed(self, rng):
        m = small()
        m["fc.W"].data[:] = 0
        m["fc.b"].data[:] = 0
        assert not fc_embed(Tensor(rng.standard_normal((3, 6))), m).data.any()
        m2 = small(seed=1)
        x = rng.standard_normal((5, 6))
        perm = rng.permutation(5)
        np.testing.assert_array_equal(fc_embed(Tensor(x[perm]), m2).data, fc_embed(Tensor(x), m2).data[perm])
        assert fc_embed(Tensor(x[:1]), m2).shape == (1, 16)
        with pytest.raises(T.DimensionError):
            fc_embed(Tensor(np.zeros((2, 5))), m2)

    def test_gated_scores_match_direct_transcription(self, rng):
        m = small(seed=3)
        h = rng.standard_normal((6, 16))
        sc = gated_scores(Tensor(h), m)
        p = {k: m[k].data for k in ("attn.V", "attn.bV", "attn.U", "attn.bU", "attn.W", "attn.bW")}
        s, alpha = direct_gated(h, *p.values())
        np.testing.assert_allclose(sc.s.data, s, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(sc.alpha.data, alpha, rtol=1e-12, atol=1e-12)

    def test_zero_branches_give_uniform(self, rng):
        m = small()
        m["attn.W"].data[:] = 0
        m["attn.bW"].data[:] = 0
        sc = gated_scores(Tensor(rng.standard_normal((4, 16))), m)
        assert not sc.s.data.any()
        np.testing.assert_allclose(sc.alpha.data, 0.25)

    def test_singleton_alpha_is_one(self, rng):
        np.testing.assert_array_equal(gated_scores(Tensor(rng.standard_normal((1, 16))), small()).alpha.data, 1.0)

    def test_single_branch_reduction(self, rng):
        full = small(c=3, seed=2)
        h = Tensor(rng.standard_normal((5, 16)))
        sc = gated_scores(h, full)
        params = dict(full.params)
        params["attn.W"] = Tensor(full["attn.W"].data[1:2])
        params["attn.bW"] = Tensor(full["attn.bW"].data[1:2])
        single = MILModel(ModelConfig("clamsb", 1, 6, embed_dim=16, attn_dim=8), params)
        one = gated_scores(h, single)
        np.testing.assert_allclose(one.s.data[:, 0], sc.s.data[:, 1], rtol=1e-14)
        np.testing.assert_allclose(one.alpha.data[:, 0], sc.alpha.data[:, 1], rtol=1e-14)

    def test_attention_pool(self, rng):
        h = rng.standard_normal((4, 5))
        onehot = np.zeros((4, 2))
        onehot[2] = 1
        np.testing.assert_allclose(attention_pool(Tensor(h), Tensor(onehot)).data, [h[2], h[2]])
        np.testing.assert_allclose(attention_pool(Tensor(h), Tensor(np.full((4, 2), 0.25))).data[0], h.mean(0))
        np.testing.assert_allclose(attention_pool(Tensor(h[:1]), Tensor(np.ones((1, 3)))).data, np.tile(h[:1], (3, 1)))
        with pytest.raises(T.DimensionError):
            attention_pool(Tensor(h), Tensor(np.ones((3, 2))))

    def test_instance_probs(self):
        np.testing.assert_array_equal(instance_probs(Tensor(np.zeros((2, 3)))).data, 0.5)
        p = instance_probs(Tensor(np.array([[-1.0, 0.0, 2.0]]))).data[0]
        assert p[0] < p[1] < p[2]

    def test_instance_locality_exact(self, rng):
        m = small(dtype=np.float32)
        for _ in range(20):
            k = int(rng.integers(2, 12))
            feats = rng.standard_normal((k, 6)).astype(np.float32)
            j = int(rng.integers(k))
            other = rng.standard_normal((k, 6)).astype(np.float32)
            other[j] = feats[j]
            a = instance_probs(gated_scores(fc_embed(Tensor(feats), m), m).s).data
            b = instance_probs(gated_scores(fc_embed(Tensor(other), m), m).s).data
            np.testing.assert_array_equal(a[j], b[j])


class TestPositionalEncoding:
    def test_normalize_example(self):
        np.testing.assert_allclose(normalize_coords([[0, 0], [2, 4]]), [[0, 0], [0.5, 1.0]])

    def test_degenerate(self):
        np.testing.assert_array_equal(normalize_coords([[3, 3], [3, 3]]), 0)
        off = positional_offsets(np.array([[7.0, -2.0]]), 8, 100.0)
        np.testing.assert_array_equal(off[0], 0)
        np.testing.assert_allclose(off[1], [0, 2, 0, 2, 0, 2, 0, 2])

    def test_sinusoid_formula(self):
        pos = np.array([0.0, 3.7, 55.0])
        d = 8
        enc = sinusoid(pos, d)
        for p_i, p in enumerate(pos):
            for i in range(d // 2):
                assert enc[p_i, 2 * i] == pytest.approx(math.sin(p / 10000 ** (2 * i / d)))
                assert enc[p_i, 2 * i + 1] == pytest.approx(math.cos(p / 10000 ** (2 * i / d)))

    def test_translation_invariance(self, rng):
        x = Tensor(rng.standard_normal((5, 16)))
        c = rng.uniform(0, 100, (4, 2))
        a = two_d_pos_enc(x, c).data
        b = two_d_pos_enc(x, c + np.array([1000.0, -37.0])).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_cls_row_untouched(self, rng):
        x = Tensor(rng.standard_normal((4, 16)))
        np.testing.assert_array_equal(two_d_pos_enc(x, rng.uniform(size=(3, 2))).data[0], x.data[0])

    def test_row_count_checked(self, rng):
        with pytest.raises(T.DimensionError):
            two_d_pos_enc(Tensor(np.zeros((3, 4))), np.zeros((3, 2)))


class TestTransformer:
    def test_zero_projections(self, rng):
        m = small(seed=4)
        for name in m.params:
            if name.startswith("tf1.W") or name.startswith("tf2.W") or name.startswith("tf1.b") or name.startswith("tf2.b"):
                m[name].data[:] = 0
        m["tf.ln.g"].data[:] = 1
        m["tf.ln.b"].data[:] = 0
        out = transformer_forward(Tensor(rng.standard_normal((3, 16))), None, m).data[0]
        cls = m["cls"].data
        expected = (cls - cls.mean()) / np.sqrt(cls.var() + 1e-5)
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_permutation_invariant_without_coords(self, rng):
        m = small(seed=5)
        h = rng.standard_normal((6, 16))
        perm = rng.permutation(6)
        a = transformer_forward(Tensor(h), None, m).data
        b = transformer_forward(Tensor(h[perm]), None, m).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        m = small(seed=6, pe="2d")
        keep = {}
        transformer_forward(Tensor(rng.standard_normal((5, 16))), rng.uniform(size=(5, 2)), m, keep)
        maps = [a for layer in keep["attention_maps"] for a in layer]
        assert len(maps) == 2 * 4
        for a in maps:
            assert a.shape == (6, 6)
            np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)

    def test_head_scaling(self):
        cfg = ModelConfig("pathmil", num_classes=2, feature_dim=4)
        assert cfg.embed_dim // cfg.heads == 64


class TestForward:
    def test_pathmil_singleton_bag(self, rng):
        m = small()
        keep = {}
        out = forward(m, rng.standard_normal((1, 6)), keep=keep)
        assert out.logits.shape == (3,) and np.isfinite(out.logits.data).all()
        np.testing.assert_array_equal(out.scores.alpha.data, 1.0)

    def test_zero_head(self, rng):
        m = small()
        m["head.W"].data[:] = 0
        np.testing.assert_array_equal(forward(m, rng.standard_normal((4, 6))).logits.data, m["head.b"].data)

    def test_deterministic(self, rng):
        m = small(pe="2d", dtype=np.float32)
        x, c = rng.standard_normal((5, 6)), rng.uniform(size=(5, 2))
        assert forward(m, x, c).logits.data.tobytes() == forward(m, x, c).logits.data.tobytes()

    def test_spatial_needs_coords(self, rng):
        with pytest.raises(ConfigurationError):
            forward(small(pe="2d"), rng.standard_normal((3, 6)))

    @pytest.mark.parametrize("kind", ["maxpool", "meanpool", "abmil", "clamsb", "pathmil"])
    def test_permutation_invariance_float32(self, rng, kind):
        m = small(kind=kind, dtype=np.float32)
        x = rng.standard_normal((7, 6)).astype(np.float32)
        perm = rng.permutation(7)
        np.testing.assert_allclose(forward(m, x[perm]).logits.data, forward(m, x).logits.data, atol=1e-5)

    def test_2dpe_permutation_with_coords(self, rng):
        m = small(pe="2d")
        x, c = rng.standard_normal((7, 6)), rng.uniform(0, 50, (7, 2))
        perm = rng.permutation(7)
        np.testing.assert_allclose(forward(m, x[perm], c[perm]).logits.data, forward(m, x, c).logits.data, atol=1e-10)

    def test_2dpe_uses_coordinates(self, rng):
        m = small(pe="2d")
        x = rng.standard_normal((5, 6))
        a = forward(m, x, rng.uniform(size=(5, 2))).logits.data
        b = forward(m, x, rng.uniform(size=(5, 2))).logits.data
        assert not np.allclose(a, b)

    def test_mean_pool_identical_instances(self, rng):
        m = small(kind="meanpool")
        row = rng.standard_normal((1, 6))
        np.testing.assert_allclose(forward(m, np.repeat(row, 4, 0)).logits.data, forward(m, row).logits.data)

    def test_max_pool_duplicate_invariant(self, rng):
        m = small(kind="maxpool")
        x = rng.standard_normal((4, 6))
        np.testing.assert_array_equal(forward(m, np.vstack([x, x[[2]]])).logits.data, forward(m, x).logits.data)

    def test_clamsb_uniform_alpha_equals_meanpool(self, rng):
        clam = small(kind="clamsb", seed=8)
        clam["attn.W"].data[:] = 0
        clam["attn.bW"].data[:] = 0
        mean = small(kind="meanpool", seed=9)
        for name in ("fc.W", "fc.b", "head.W", "head.b"):
            mean[name].data[:] = clam[name].data
        x = rng.standard_normal((5, 6))
        np.testing.assert_allclose(forward(clam, x).logits.data, forward(mean, x).logits.data, atol=1e-12)

    def test_pathmil_end_to_end_gradcheck(self, rng):
        from milforge.gradcheck import gradcheck

        cfg = ModelConfig("pathmil", num_classes=3, feature_dim=16, pe="2d", heads=2, embed_dim=8, attn_dim=6)
        init = MILModel.init(cfg, seed=1, dtype=np.float64)
        x, c = rng.standard_normal((5, 16)), rng.uniform(size=(5, 2))

        def fn(d):
            return T.cross_entropy(forward(MILModel(cfg, d), x, c).logits, 2)

        assert gradcheck(fn, {k: v.data for k, v in init.params.items()}).passed


class TestCheckpoint:
    def test_roundtrip_and_bytes(self, tmp_path):
        m = small(kind="pathmil", pe="2d", dtype=np.float32, seed=3)
        save_checkpoint(tmp_path / "a.milw", m)
        back = load_checkpoint(tmp_path / "a.milw")
        assert back.config == m.config
        for k in m.params:
            assert back[k].data.tobytes() == m[k].data.tobytes()
        assert checkpoint_bytes(back) == (tmp_path / "a.milw").read_bytes()
        assert (tmp_path / "a.milw").read_bytes()[:4] == b"MILW"

    def test_bad_magic(self):
        raw = checkpoint_bytes(small(dtype=np.float32))
        with pytest.raises(ValueError):
            model_from_bytes(b"NOPE" + raw[4:])

    def test_truncated(self):
        raw = checkpoint_bytes(small(dtype=np.float32))
        with pytest.raises(ValueError):
            model_from_bytes(raw[:-3])
