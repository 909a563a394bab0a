"""Baseline head contracts and their consistency with the reconstruction head."""

import math

import numpy as np
import pytest

from frn import baselines
from frn.baselines import (
    CtxParams,
    ProjectionConfig,
    ctx_attention,
    ctx_distances,
    ctx_scores,
    dsn_distances,
    dsn_residual,
    dsn_scores,
    proto_distances,
    proto_prototype,
    proto_scores,
)
from frn.head import FeatureMap, HeadParams, SupportPool, frn_distances


class TestProto:
    def test_single_shot_prototype_is_pooled_support(self):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((3, 4))
        pool = SupportPool(class_id=0, k=1, values=vals)
        np.testing.assert_allclose(proto_prototype(pool), vals.mean(axis=0))

    def test_query_at_prototype_wins(self):
        rng = np.random.default_rng(1)
        pools = [
            SupportPool(class_id=c, k=2, values=rng.standard_normal((4, 3)))
            for c in range(3)
        ]
        proto0 = proto_prototype(pools[0])
        q = FeatureMap(values=np.tile(proto0, (2, 1)))
        dists = proto_distances(q, pools)
        assert dists[0] == pytest.approx(0.0, abs=1e-12)
        scores = proto_scores(q, pools, gamma=1.0)
        assert np.argmax(scores.probs) == 0

    def test_nearer_prototype_wins(self):
        pools = [
            SupportPool(class_id=0, k=1, values=np.zeros((1, 2))),
            SupportPool(class_id=1, k=1, values=np.array([[2.0, 0.0]])),
        ]
        q = FeatureMap(values=np.array([[1.1, 0.0]]))
        dists = proto_distances(q, pools)
        assert dists[1] < dists[0]
        np.testing.assert_allclose(dists, [1.1**2, 0.9**2], atol=1e-12)

    def test_logit_normalized_by_channels(self):
        pools = [
            SupportPool(class_id=0, k=1, values=np.zeros((1, 4))),
            SupportPool(class_id=1, k=1, values=np.ones((1, 4))),
        ]
        q = FeatureMap(values=np.ones((1, 4)) * 2.0)
        scores = proto_scores(q, pools, gamma=1.0)
        np.testing.assert_allclose(scores.logits, -proto_distances(q, pools) / 4)

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(2)
        vals = rng.standard_normal((4, 3))
        pool = SupportPool(class_id=0, k=1, values=vals)
        q = FeatureMap(values=rng.standard_normal((4, 3)))
        q_perm = FeatureMap(values=q.values[rng.permutation(4)])
        d1 = proto_distances(q, [pool])
        d2 = proto_distances(q_perm, [pool])
        np.testing.assert_allclose(d1, d2, atol=1e-12)


class TestDsn:
    def test_query_in_span_has_tiny_residual(self):
        rng = np.random.default_rng(3)
        supports = rng.standard_normal((3, 6))
        q = 0.3 * supports[0] - 1.2 * supports[2]
        assert dsn_residual(q, supports, lam=1e-8) <= 1e-6

    def test_orthogonal_query(self):
        supports = np.array([[1.0, 0.0]])
        q = np.array([0.0, 1.0])
        assert dsn_residual(q, supports, lam=1e-8) == pytest.approx(1.0, abs=1e-6)

    def test_projection_oracle_in_r3(self):
        # supports e1, e2; q = (1,1,1): residual -> ||(0,0,1)||^2 = 1 as lam -> 0
        supports = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        q = np.ones(3)
        assert dsn_residual(q, supports, lam=1e-8) == pytest.approx(1.0, abs=1e-6)

    def test_matches_svd_projection_oracle(self):
        # oracle: orthonormal basis for the row space via SVD, then the
        # squared norm of the component outside that subspace
        rng = np.random.default_rng(4)
        for _ in range(50):
            k, d = int(rng.integers(1, 5)), int(rng.integers(5, 12))
            supports = rng.standard_normal((k, d))
            q = rng.standard_normal(d)
            _, sv, vt = np.linalg.svd(supports, full_matrices=False)
            basis = vt[sv > 1e-12]
            resid_oracle = float(np.sum((q - basis.T @ (basis @ q)) ** 2))
            assert dsn_residual(q, supports, lam=1e-8) == pytest.approx(resid_oracle, abs=1e-5)

    def test_consistency_with_reconstruction_head_at_r1(self):
        # pooled r=1 maps make the two heads solve the same ridge problem
        rng = np.random.default_rng(5)
        for _ in range(50):
            k, d = int(rng.integers(1, 5)), int(rng.integers(2, 9))
            lam_fixed = 0.01
            vals = rng.standard_normal((k, d))
            pool = SupportPool(class_id=0, k=k, values=vals)
            q = FeatureMap(values=rng.standard_normal((1, d)))
            alpha = math.log(lam_fixed * d / k)  # makes (k*1/d) e^alpha = lam_fixed
            params = HeadParams(alpha=alpha, beta=0.0)
            frn_err = frn_distances(q, [pool], params)[0, 0]
            dsn_err = dsn_distances(q, [pool], ProjectionConfig(lambda_fixed=lam_fixed))[0]
            assert abs(frn_err - dsn_err) <= 1e-10

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProjectionConfig(lambda_fixed=0.0)
        with pytest.raises(ValueError):
            ProjectionConfig(include_origin=False)

    def test_scores_shape(self):
        rng = np.random.default_rng(6)
        pools = [SupportPool(class_id=c, k=2, values=rng.standard_normal((4, 5))) for c in range(3)]
        q = FeatureMap(values=rng.standard_normal((2, 5)))
        scores = dsn_scores(q, pools, gamma=2.0)
        assert scores.probs.shape == (3,)
        assert abs(scores.probs.sum() - 1.0) <= 1e-6


class TestCtx:
    def test_single_key_softmax(self):
        rng = np.random.default_rng(7)
        s = rng.standard_normal((1, 4))
        pool = SupportPool(class_id=0, k=1, values=s)
        q = FeatureMap(values=rng.standard_normal((3, 4)))
        q2, q2_bar = baselines.ctx_reconstruct(q.values, pool.values, CtxParams.identity())
        np.testing.assert_allclose(q2_bar, np.tile(s, (3, 1)), atol=1e-12)

    def test_attention_concentrates_on_matching_row(self):
        scale = 20.0
        rows = scale * np.array([[1.0, 0.0], [0.0, 1.0]])
        pool = SupportPool(class_id=0, k=2, values=rows)
        q = np.array([rows[1]])
        attn = ctx_attention(q, pool.values)
        assert attn[0, 1] > 0.999

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        attn = ctx_attention(rng.standard_normal((5, 3)), rng.standard_normal((7, 3)))
        assert np.all(attn >= 0)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)

    def test_identity_mode_rejects_projections(self):
        with pytest.raises(ValueError):
            CtxParams(identity_mode=True, key_proj=np.eye(2), value_proj=np.eye(2))
        with pytest.raises(ValueError):
            CtxParams()

    def test_projected_scores_run(self):
        rng = np.random.default_rng(9)
        params = CtxParams.random(d=5, rng=rng)
        pools = [SupportPool(class_id=c, k=2, values=rng.standard_normal((4, 5))) for c in range(3)]
        q = FeatureMap(values=rng.standard_normal((2, 5)))
        scores = ctx_scores(q, pools, params, gamma=1.0)
        assert abs(scores.probs.sum() - 1.0) <= 1e-6

    def test_matching_support_scores_best(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((4, 6))
        pools = [
            SupportPool(class_id=0, k=2, values=np.vstack([a, a]) / 1.0),
            SupportPool(class_id=1, k=2, values=rng.standard_normal((8, 6))),
        ]
        q = FeatureMap(values=a)
        dists = ctx_distances(q, pools, CtxParams.identity())
        assert dists[0] < dists[1]
