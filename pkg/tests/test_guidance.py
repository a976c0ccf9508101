"""Captions, text encoding, semantic MLP, and modulation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldfuse import autodiff as ad
from ldfuse.errors import DomainError, ParameterError, ShapeError
from ldfuse.guidance import (Caption, GuidanceMLP, SemanticParams, TEMPLATE_WORDS,
                             TextEmbedding, ZeroGuidance, caption_scene,
                             encode_text, modulate, predict_params)
from ldfuse.imageio import DepthMap, synth_scene


def scene_inputs(seed=7):
    scene = synth_scene(seed, 32, 32, 4, 0.25, 0.25)
    vis = scene.vis.to_unit()
    ir = scene.ir.to_unit()
    depth = DepthMap(scene.gt_depth.depth, scene.gt_depth.valid)
    return vis, ir, depth


class TestCaption:
    def test_deterministic(self):
        vis, ir, depth = scene_inputs(7)
        a = caption_scene(vis, ir, depth, depth)
        b = caption_scene(vis, ir, depth, depth)
        assert a.tokens == b.tokens

    def test_all_black_vis_is_dark(self):
        _, ir, depth = scene_inputs(1)
        cap = caption_scene(np.zeros((32, 32, 3)), ir, depth, depth)
        assert "dark" in cap.tokens

    def test_invalid_depth_reported(self):
        vis, ir, _ = scene_inputs(2)
        empty = DepthMap(np.ones((32, 32), dtype=np.float32),
                         np.zeros((32, 32), dtype=bool))
        cap = caption_scene(vis, ir, empty, empty)
        assert "unavailable" in cap.tokens
        assert "depth" in cap.tokens

    def test_quantiles_in_caption(self):
        vis, ir, depth = scene_inputs(3)
        cap = caption_scene(vis, ir, depth, depth)
        vals = depth.depth[depth.valid]
        lo = str(int(round(float(np.quantile(vals, 0.05)))))
        hi = str(int(round(float(np.quantile(vals, 0.95)))))
        assert lo in cap.tokens and hi in cap.tokens

    def test_tokens_lowercase_words(self):
        vis, ir, depth = scene_inputs(4)
        cap = caption_scene(vis, ir, depth, depth)
        assert all(t == t.lower() and " " not in t for t in cap.tokens)
        assert len(cap.tokens) > 0

    def test_registration_check(self):
        vis, ir, depth = scene_inputs(5)
        with pytest.raises(ShapeError):
            caption_scene(vis[:16], ir, depth, depth)

    def test_empty_caption_rejected(self):
        with pytest.raises(ParameterError):
            Caption(())


class TestEncodeText:
    def test_unit_norm(self):
        for tokens in (("dark",), ("the", "scene", "is", "dim"), tuple("abcdef")):
            emb = encode_text(Caption(tokens))
            assert abs(np.linalg.norm(emb.vector) - 1.0) <= 1e-6

    def test_deterministic(self):
        cap = Caption(("bright", "scene", "7", "meters"))
        assert np.array_equal(encode_text(cap).vector, encode_text(cap).vector)

    def test_one_token_difference_changes_vector(self):
        base = Caption(("the", "scene", "is", "dark"))
        other = Caption(("the", "scene", "is", "dim"))
        assert not np.array_equal(encode_text(base).vector, encode_text(other).vector)

    def test_template_vocabulary_pairwise_distinct(self):
        # brute force over every template word and the numeric tokens 0..128
        vocab = list(TEMPLATE_WORDS) + [str(i) for i in range(129)]
        embs = [encode_text(Caption((tok,))).vector for tok in vocab]
        for i in range(len(vocab)):
            for j in range(i + 1, len(vocab)):
                assert not np.array_equal(embs[i], embs[j]), (vocab[i], vocab[j])

    def test_single_token_captions_differ_pairwise_in_any_position(self):
        # swapping one token inside a fixed context changes the embedding
        vocab = list(TEMPLATE_WORDS)[:8]
        ctx = ("the", "scene")
        embs = [encode_text(Caption(ctx + (tok,))).vector for tok in vocab]
        for i in range(len(vocab)):
            for j in range(i + 1, len(vocab)):
                assert not np.array_equal(embs[i], embs[j])

    def test_custom_dimension(self):
        emb = encode_text(Caption(("dark",)), dim=512)
        assert emb.vector.shape == (512,)
        assert abs(np.linalg.norm(emb.vector) - 1.0) <= 1e-6

    def test_embedding_validation(self):
        with pytest.raises(ParameterError):
            TextEmbedding(np.array([3.0, 4.0]))  # not unit norm


class TestGuidanceMLP:
    def test_fresh_mlp_outputs_exact_zeros(self):
        mlp = GuidanceMLP(embed_dim=16, channels=8, seed=0)
        emb = encode_text(Caption(("dark", "scene")), dim=16)
        params = predict_params(mlp, emb)
        assert np.all(params.sigma_hat == 0.0)
        assert np.all(params.mu_hat == 0.0)

    def test_deterministic(self):
        mlp = GuidanceMLP(embed_dim=16, channels=8, seed=1)
        for t in mlp.params():
            t.data = np.random.default_rng(0).normal(size=t.data.shape) * 0.1
        emb = encode_text(Caption(("dim", "scene")), dim=16)
        a, b = predict_params(mlp, emb), predict_params(mlp, emb)
        assert np.array_equal(a.sigma_hat, b.sigma_hat)
        assert np.array_equal(a.mu_hat, b.mu_hat)

    def test_dimension_mismatch(self):
        mlp = GuidanceMLP(embed_dim=16, channels=8, seed=0)
        with pytest.raises(ShapeError):
            mlp.forward(ad.Tensor(np.zeros((1, 12))))

    def test_gradient_matches_finite_differences(self):
        mlp = GuidanceMLP(embed_dim=6, channels=3, hidden_mult=2, seed=2)
        rng = np.random.default_rng(0)
        for t in mlp.params():
            t.data = rng.normal(size=t.data.shape) * 0.3
        emb = rng.normal(size=(1, 6))
        emb /= np.linalg.norm(emb)
        target_s = rng.normal(size=(1, 3))
        target_m = rng.normal(size=(1, 3))

        def loss():
            s, m = mlp.forward(ad.Tensor(emb))
            ds = s - ad.Tensor(target_s)
            dm = m - ad.Tensor(target_m)
            return ad.tsum(ds * ds) + ad.tsum(dm * dm)

        val = loss()
        for p in mlp.params():
            p.grad = None
        val.backward()
        eps = 1e-6
        for p in mlp.params():
            flat = p.data.ravel()
            ana = (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for k in range(min(flat.size, 8)):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(loss().data)
                flat[k] = orig - eps
                dn = float(loss().data)
                flat[k] = orig
                fd = (up - dn) / (2 * eps)
                denom = max(abs(fd), abs(ana[k]), 1e-8)
                assert abs(ana[k] - fd) / denom < 1e-3

    def test_checkpoint_roundtrip(self, tmp_path):
        mlp = GuidanceMLP(embed_dim=16, channels=8, seed=3)
        rng = np.random.default_rng(1)
        for t in mlp.params():
            t.data = rng.normal(size=t.data.shape) * 0.2
        emb = encode_text(Caption(("bright",)), dim=16)
        before = predict_params(mlp, emb)
        mlp.save_checkpoint(tmp_path / "mlp")
        back = GuidanceMLP.from_checkpoint(tmp_path / "mlp")
        after = predict_params(back, emb)
        assert np.array_equal(before.sigma_hat, after.sigma_hat)
        assert np.array_equal(before.mu_hat, after.mu_hat)

    def test_zero_guidance_stub(self):
        zg = ZeroGuidance(channels=8)
        params = zg.predict(None)
        assert np.all(params.sigma_hat == 0.0) and np.all(params.mu_hat == 0.0)
        assert zg.params() == []


class TestModulate:
    def test_identity_bitwise(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(6, 6, 5))
        out = modulate(feats, SemanticParams.identity(5))
        assert out.tobytes() == feats.tobytes()

    def test_scale_annihilation(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(4, 4, 3))
        mu = np.array([0.1, -0.2, 0.3])
        out = modulate(feats, SemanticParams(np.full(3, -1.0), mu))
        assert np.allclose(out, np.broadcast_to(mu, out.shape))

    def test_hand_value(self):
        feats = np.full((2, 2, 2), 0.25)
        out = modulate(feats, SemanticParams(np.ones(2), np.full(2, 0.5)))
        assert np.allclose(out, 1.0)  # (1+1)*0.25 + 0.5

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            modulate(np.zeros((4, 4, 3)), SemanticParams(np.zeros(2), np.zeros(2)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_affine_in_features(self, seed):
        # modulate(aX + bY) = a modulate(X) + b modulate(Y) - (a+b-1) mu
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(5, 5, 4))
        Y = rng.normal(size=(5, 5, 4))
        sig = rng.normal(size=4)
        mu = rng.normal(size=4)
        a, b = float(rng.normal()), float(rng.normal())
        p = SemanticParams(sig, mu)
        lhs = modulate(a * X + b * Y, p)
        rhs = a * modulate(X, p) + b * modulate(Y, p) - (a + b - 1.0) * mu
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_tensor_path_gradients(self):
        rng = np.random.default_rng(2)
        feats = ad.Tensor(rng.normal(size=(1, 4, 4, 3)), requires_grad=True)
        sig = ad.Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        mu = ad.Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        out = modulate(feats, SemanticParams(sig, mu))
        ad.tsum(out * out).backward()
        assert feats.grad is not None and sig.grad is not None and mu.grad is not None
