"""Objective checks: InfoNCE closed forms and invariances, loss gradients vs
finite differences, the label-smoothed LM loss against a brute-force oracle,
and the weighted combination contract."""

import math

import numpy as np
import pytest

from conftest import fd_gradcheck, make_side
from senselign import losses
from senselign import tensor as T
from senselign.errors import DegenerateVectorError
from senselign.model import BackpackLM, ModelConfig
from senselign.schedule import PhaseWeights

LN_1_PLUS_E_INV = 0.31326168751822286   # ln(1 + e^-1)


def weights(w_sns=1.0, w_ctx=1.0, w_lm=1.0, tau_sns=0.5, tau_ctx=0.5):
    return PhaseWeights(phase="joint", w_sns=w_sns, w_ctx=w_ctx, w_lm=w_lm,
                        tau_sns=tau_sns, tau_ctx=tau_ctx,
                        freeze_sense_machinery=False)


class TestInfoNCE:
    def test_identical_pairs_give_log_batch(self, rng):
        for B in (2, 4, 8):
            u = rng.standard_normal(6)
            u /= np.linalg.norm(u)
            v = rng.standard_normal(6)
            v /= np.linalg.norm(v)
            us = T.Tensor(np.tile(u, (B, 1)))
            ut = T.Tensor(np.tile(v, (B, 1)))
            loss = losses.info_nce_symmetric(us, ut, tau=0.07)
            assert abs(loss.item() - math.log(B)) <= 1e-9

    def test_orthonormal_pair_closed_form(self):
        e = np.eye(2)
        loss = losses.info_nce_symmetric(T.Tensor(e), T.Tensor(e), tau=1.0)
        assert abs(loss.item() - LN_1_PLUS_E_INV) <= 1e-6

    def test_swap_symmetry(self, rng):
        u = rng.standard_normal((5, 8))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = rng.standard_normal((5, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        a = losses.info_nce_symmetric(T.Tensor(u), T.Tensor(v), tau=0.2).item()
        b = losses.info_nce_symmetric(T.Tensor(v), T.Tensor(u), tau=0.2).item()
        assert abs(a - b) <= 1e-12

    def test_joint_permutation_invariance(self, rng):
        u = rng.standard_normal((6, 5))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = rng.standard_normal((6, 5))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        a = losses.info_nce_symmetric(T.Tensor(u), T.Tensor(v), tau=0.3).item()
        perm = rng.permutation(6)
        b = losses.info_nce_symmetric(T.Tensor(u[perm]), T.Tensor(v[perm]), tau=0.3).item()
        assert abs(a - b) <= 1e-12

    def test_common_rotation_invariance(self, rng):
        from senselign.geometry import random_orthogonal
        u = rng.standard_normal((5, 7))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = rng.standard_normal((5, 7))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        q = random_orthogonal(7, rng)
        a = losses.info_nce_symmetric(T.Tensor(u), T.Tensor(v), tau=0.3).item()
        b = losses.info_nce_symmetric(T.Tensor(u @ q), T.Tensor(v @ q), tau=0.3).item()
        assert abs(a - b) <= 1e-9

    def test_non_negative(self, rng):
        for _ in range(20):
            u = rng.standard_normal((4, 6))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            v = rng.standard_normal((4, 6))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            assert losses.info_nce_symmetric(T.Tensor(u), T.Tensor(v), tau=0.5).item() >= 0.0

    def test_rejects_small_batch_and_bad_norms(self, rng):
        u = rng.standard_normal((1, 4))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        with pytest.raises(ValueError):
            losses.info_nce_symmetric(T.Tensor(u), T.Tensor(u), tau=1.0)
        bad = np.ones((3, 4))
        with pytest.raises(ValueError):
            losses.info_nce_symmetric(T.Tensor(bad), T.Tensor(bad), tau=1.0)


class TestSenseLoss:
    def test_identical_pair_batches(self, tiny_model):
        batch = make_side([[3, 4, 5], [3, 4, 5], [3, 4, 5], [3, 4, 5]])
        loss = losses.sense_loss(tiny_model, batch, batch, tau_sns=0.05, tau_pool=0.7)
        assert abs(loss.item() - math.log(4)) <= 1e-9

    def test_orthogonal_engineered_pairs(self):
        # single-sense identity model whose two sentences pool to e1 and e2
        cfg = ModelConfig(vocab_size=4, d_model=4, n_layers=1, n_heads=1,
                          n_senses=1, max_positions=4)
        model = BackpackLM.init(cfg, seed=5)
        model.params.named["sense_proj"].data = np.eye(4)[None].copy()
        emb = np.zeros((4, 4))
        emb[1, 0] = 2.0
        emb[2, 1] = 2.0
        model.params.named["tok_emb"].data = emb
        batch = make_side([[1], [2]])
        loss = losses.sense_loss(model, batch, batch, tau_sns=1.0, tau_pool=0.7)
        assert abs(loss.item() - LN_1_PLUS_E_INV) <= 1e-6

    def test_gradient_finite_differences(self, tiny_model, rng):
        src = make_side([[1, 2, 3], [4, 5, 0], [6, 7, 8]])
        src.mask[1, 2] = 0.0
        tgt = make_side([[8, 7], [6, 5], [4, 3]])
        params = [tiny_model.params["tok_emb"], tiny_model.params["sense_proj"]]

        def loss():
            return losses.sense_loss(tiny_model, src, tgt, tau_sns=0.5, tau_pool=0.7)

        assert fd_gradcheck(loss, params, rng, n_coords=25) <= 1e-4

    def test_degenerate_sentence_reported(self, tiny_model):
        tiny_model.params.named["tok_emb"].data[9] = 0.0
        batch = make_side([[1, 2], [9, 9]])
        with pytest.raises(DegenerateVectorError) as exc:
            losses.sense_loss(tiny_model, batch, batch, tau_sns=0.5, tau_pool=0.7)
        assert exc.value.index == 1


class TestContextLoss:
    def test_identical_pair_batches(self, tiny_model):
        batch = make_side([[3, 4], [3, 4], [3, 4]])
        loss = losses.context_loss(tiny_model, batch, batch, tau_ctx=0.07)
        assert abs(loss.item() - math.log(3)) <= 1e-9

    def test_pad_append_leaves_embedding_unchanged(self, tiny_model):
        short = make_side([[3, 4, 5], [6, 7, 1]])
        padded = make_side([[3, 4, 5, 0, 0], [6, 7, 1, 0, 0]])
        padded.mask[:, 3:] = 0.0
        padded.last_index[:] = 2
        a = losses.context_embedding(tiny_model, short).data
        b = losses.context_embedding(tiny_model, padded).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient_finite_differences(self, tiny_model, rng):
        src = make_side([[1, 2, 3], [4, 5, 6]])
        tgt = make_side([[6, 5], [4, 3]])
        params = [tiny_model.params["tok_emb"],
                  tiny_model.params["layers.0.attn.w_qkv"],
                  tiny_model.params["ln_f.g"]]

        def loss():
            return losses.context_loss(tiny_model, src, tgt, tau_ctx=0.5)

        assert fd_gradcheck(loss, params, rng, n_coords=20) <= 1e-4


class TestLMLoss:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((1, 3, 4)))
        ids = np.array([[1, 2, 3]])
        mask = np.ones((1, 3))
        loss = losses.lm_loss(logits, ids, mask, epsilon=0.0)
        assert abs(loss.item() - math.log(4)) <= 1e-12

    def test_smoothed_target_masses(self):
        # eps = 0.05, V = 4: q_gold = 0.9625, q_other = 0.0125
        eps, V = 0.05, 4
        q_gold = 1 - eps + eps / V
        q_other = eps / V
        assert abs(q_gold - 0.9625) <= 1e-12
        assert abs(q_other - 0.0125) <= 1e-12
        assert abs(q_gold + 3 * q_other - 1.0) <= 1e-12
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((2, 3, V))
        ids = rng.integers(0, V, size=(2, 3))
        mask = np.ones((2, 3))
        got = losses.lm_loss(T.Tensor(raw), ids, mask, epsilon=eps).item()
        ls = raw - np.log(np.exp(raw - raw.max(-1, keepdims=True)).sum(-1, keepdims=True)) \
            - raw.max(-1, keepdims=True)
        manual = 0.0
        for b in range(2):
            for t in range(3):
                q = np.full(V, q_other)
                q[ids[b, t]] = q_gold
                manual += -(q * ls[b, t]).sum()
        assert abs(got - manual / 6.0) <= 1e-9

    def test_unsmoothed_matches_cross_entropy_oracle(self, rng):
        for _ in range(10):
            V = int(rng.integers(3, 9))
            B, TT = 2, int(rng.integers(2, 6))
            raw = rng.standard_normal((B, TT, V)) * 2
            ids = rng.integers(0, V, size=(B, TT))
            mask = (rng.uniform(size=(B, TT)) > 0.2).astype(float)
            mask[:, 0] = 1.0
            got = losses.lm_loss(T.Tensor(raw), ids, mask, epsilon=0.0).item()
            # independent oracle: direct -log softmax at the gold ids
            total, n = 0.0, 0
            for b in range(B):
                for t in range(TT):
                    if mask[b, t] == 0:
                        continue
                    p = np.exp(raw[b, t]) / np.exp(raw[b, t]).sum()
                    total += -math.log(p[ids[b, t]])
                    n += 1
            assert abs(got - total / n) <= 1e-9

    def test_gradient_finite_differences(self, tiny_model, rng):
        batch = make_side([[1, 2, 3, 4], [5, 6, 7, 8]])
        params = [tiny_model.params["tok_emb"], tiny_model.params["wh_sense"],
                  tiny_model.params["sense_proj"]]

        def loss():
            return losses.next_token_lm_loss(tiny_model, batch, epsilon=0.05)

        assert fd_gradcheck(loss, params, rng, n_coords=20) <= 1e-4

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            losses.lm_loss(T.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int),
                           np.ones((1, 2)), epsilon=1.0)


class TestTotalLoss:
    def test_lm_only(self, tiny_model):
        src = make_side([[1, 2, 3], [4, 5, 6]])
        tgt = make_side([[6, 5, 4], [3, 2, 1]])
        bd = losses.total_loss(tiny_model, src, tgt, weights(0.0, 0.0, 1.0), 0.05, 0.7)
        assert math.isnan(bd.l_sns) and math.isnan(bd.l_ctx)
        assert abs(bd.l_total - bd.l_lm) <= 1e-12

    def test_combination_and_linearity(self, tiny_model):
        src = make_side([[1, 2, 3], [4, 5, 6]])
        tgt = make_side([[6, 5, 4], [3, 2, 1]])
        bd = losses.total_loss(tiny_model, src, tgt, weights(0.54, 0.44, 0.02), 0.05, 0.7)
        expect = 0.54 * bd.l_sns + 0.44 * bd.l_ctx + 0.02 * bd.l_lm
        assert abs(bd.l_total - expect) <= 1e-12
        bd2 = losses.total_loss(tiny_model, src, tgt, weights(1.08, 0.88, 0.04), 0.05, 0.7)
        assert abs(bd2.l_total - 2.0 * bd.l_total) <= 1e-12

    def test_alignment_weight_arithmetic(self):
        # the combination rule applied to fixed per-term values (1, 2, 3)
        assert abs((0.54 * 1 + 0.44 * 2 + 0.02 * 3) - 1.48) <= 1e-12

    def test_continuity_in_weights(self, tiny_model):
        src = make_side([[1, 2, 3], [4, 5, 6]])
        tgt = make_side([[6, 5, 4], [3, 2, 1]])
        at_zero = losses.total_loss(tiny_model, src, tgt, weights(1.0, 1.0, 0.0), 0.05, 0.7)
        eps = 1e-9
        near = losses.total_loss(tiny_model, src, tgt, weights(1.0, 1.0, eps), 0.05, 0.7)
        assert abs(near.l_total - at_zero.l_total) <= 10 * eps * max(near.l_lm, 1.0)

    def test_negative_weight_rejected(self, tiny_model):
        src = make_side([[1, 2], [3, 4]])
        with pytest.raises(ValueError):
            losses.total_loss(tiny_model, src, src, weights(-0.1, 0.5, 0.5), 0.05, 0.7)

    def test_total_gradient_finite_differences(self, tiny_model, rng):
        src = make_side([[1, 2, 3], [4, 5, 6]])
        tgt = make_side([[6, 5], [3, 2]])
        params = [tiny_model.params["tok_emb"], tiny_model.params["sense_proj"],
                  tiny_model.params["wh_query"]]

        def loss():
            return losses.total_loss(tiny_model, src, tgt,
                                     weights(0.54, 0.44, 0.02), 0.05, 0.7).total

        assert fd_gradcheck(loss, params, rng, n_coords=20) <= 1e-4


def test_contextual_pooling_switch(tiny_model):
    """The alternative sense-loss pooling (contextual mixture h) is wired up
    and differs from the norm-pooled default on a generic batch."""
    src = make_side([[1, 2, 3], [4, 5, 6]])
    tgt = make_side([[6, 5, 4], [3, 2, 1]])
    a = losses.sense_loss(tiny_model, src, tgt, 0.5, 0.7, pooling="norm").item()
    b = losses.sense_loss(tiny_model, src, tgt, 0.5, 0.7, pooling="context").item()
    assert a != b
    with pytest.raises(ValueError):
        losses.sense_loss(tiny_model, src, tgt, 0.5, 0.7, pooling="bogus")
