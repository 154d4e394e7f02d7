import dataclasses

import numpy as np
import pytest

from armmt import tensor as T
from armmt.data import Item
from armmt.model import (
    CafuConfig,
    ModelConfig,
    cafu,
    encoder_stack,
    forward_batch,
    forward_session,
    init_model,
    run_forward,
)
from armmt.params import ParamStore
from armmt.tensor import ShapeError, Tensor

from conftest import build_model


def cafu_oracle(x, c, w1, w2):
    """Straight-line re-evaluation of the fusion equations, one item at a time."""
    n, d, m = x.shape
    fused = np.zeros((n, d))
    weights = np.zeros((n, m))
    for i in range(n):
        z = np.array([x[i, :, mm].mean() for mm in range(m)])
        zc = np.concatenate([z, c])
        hidden = np.maximum(w1 @ zc, 0.0)
        logits = w2 @ hidden
        e = np.exp(logits - logits.max())
        s = e / e.sum()
        weights[i] = s
        fused[i] = sum(s[mm] * x[i, :, mm] for mm in range(m))
    return fused, weights


def make_cafu(m=2, j=6, r=2, seed=0):
    store = ParamStore(seed)
    hidden = (m + j) // r
    return CafuConfig(
        modalities=m,
        context_dim=j,
        reduction=r,
        w1=store.matrix("w1", hidden, m + j),
        w2=store.matrix("w2", m, hidden),
    )


class TestCafu:
    def test_equal_modalities_pass_through(self):
        cfg = make_cafu()
        rng = np.random.default_rng(0)
        v = rng.normal(size=(4, 5))
        x = np.stack([v, v], axis=2)
        fused, _ = cafu(Tensor(x), Tensor(rng.normal(size=6)), cfg)
        np.testing.assert_allclose(fused.data, v, atol=1e-12)

    def test_single_modality_degenerates_to_identity(self):
        cfg = make_cafu(m=1, j=5, r=2)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4, 1))
        fused, weights = cafu(Tensor(x), Tensor(rng.normal(size=5)), cfg)
        np.testing.assert_allclose(weights.data, 1.0)
        np.testing.assert_allclose(fused.data, x[:, :, 0], atol=1e-12)

    def test_oracle_equivalence_100_instances(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            cfg = make_cafu(j=6, seed=trial)
            x = rng.normal(size=(5, 4, 2))
            c = rng.normal(size=6)
            fused, weights = cafu(Tensor(x), Tensor(c), cfg)
            exp_fused, exp_w = cafu_oracle(x, c, cfg.w1.data, cfg.w2.data)
            np.testing.assert_allclose(fused.data, exp_fused, atol=1e-12)
            np.testing.assert_allclose(weights.data, exp_w, atol=1e-12)

    def test_weight_rows_sum_to_one_and_convex_hull(self):
        rng = np.random.default_rng(9)
        cfg = make_cafu()
        x = rng.normal(size=(6, 4, 2))
        fused, weights = cafu(Tensor(x), Tensor(rng.normal(size=6)), cfg)
        np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-9)
        lo = np.minimum(x[:, :, 0], x[:, :, 1])
        hi = np.maximum(x[:, :, 0], x[:, :, 1])
        assert np.all(fused.data >= lo - 1e-12)
        assert np.all(fused.data <= hi + 1e-12)

    def test_shape_mismatch(self):
        cfg = make_cafu(j=6)
        with pytest.raises(ShapeError):
            cafu(Tensor(np.zeros((3, 4, 2))), Tensor(np.zeros(5)), cfg)


class TestEncoderStack:
    def test_single_item_attention_is_identity(self, small_model):
        probe = []
        x = Tensor(np.random.default_rng(0).normal(size=(1, 16)))
        out = encoder_stack(x, small_model.store, "enc_mo", small_model.enc_cfg, probe=probe)
        assert np.all(np.isfinite(out.data))
        for name, p in probe:
            np.testing.assert_allclose(p, 1.0)

    def test_permutation_equivariance(self, small_model):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 16))
        perm = rng.permutation(30)
        out = encoder_stack(Tensor(x), small_model.store, "enc_mo", small_model.enc_cfg)
        out_p = encoder_stack(Tensor(x[perm]), small_model.store, "enc_mo", small_model.enc_cfg)
        np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-9)

    def test_attention_rows_sum_to_one(self, small_model):
        probe = []
        x = Tensor(np.random.default_rng(4).normal(size=(30, 16)))
        encoder_stack(x, small_model.store, "enc_mo", small_model.enc_cfg, probe=probe)
        assert probe
        for name, p in probe:
            np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


class TestForwardSession:
    def test_scores_normalized(self, small_dataset, small_model):
        for s in small_dataset.sessions[:5]:
            trace = run_forward(s, small_model)
            np.testing.assert_allclose(trace.y_hat.data.sum(), 1.0, atol=1e-9)
            assert np.all(trace.y_hat_ctr.data > 0)
            assert np.all(trace.y_hat_ctr.data < 1)
            np.testing.assert_allclose(trace.s_item.data.sum(axis=1), 1.0, atol=1e-9)
            np.testing.assert_allclose(trace.s_pers.data.sum(axis=1), 1.0, atol=1e-9)

    def test_full_and_no_aux_identical_forward(self, small_dataset):
        full = build_model(small_dataset, "full", seed=5)
        noaux = build_model(small_dataset, "no_aux", seed=5)
        s = small_dataset.sessions[0]
        a, b = run_forward(s, full), run_forward(s, noaux)
        np.testing.assert_array_equal(a.y_hat.data, b.y_hat.data)
        np.testing.assert_array_equal(a.y_hat_ctr.data, b.y_hat_ctr.data)

    @pytest.mark.parametrize("variant", ["no_cafu_no_aux", "no_image"])
    def test_variants_produce_valid_traces(self, small_dataset, variant):
        model = build_model(small_dataset, variant, seed=6)
        trace = run_forward(small_dataset.sessions[1], model)
        np.testing.assert_allclose(trace.y_hat.data.sum(), 1.0, atol=1e-9)
        np.testing.assert_allclose(trace.s_item.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.isfinite(trace.y_hat_ctr.data))

    def test_batch_matches_single(self, small_dataset, small_model):
        sessions = small_dataset.sessions[:4]
        bt = forward_batch(sessions, small_model)
        for i, s in enumerate(sessions):
            single = run_forward(s, small_model)
            np.testing.assert_allclose(bt.y_hat.data[i], single.y_hat.data, atol=1e-12)
            np.testing.assert_allclose(bt.y_hat_ctr.data[i], single.y_hat_ctr.data, atol=1e-12)

    def test_zeroed_images_stay_finite_and_normalized(self, small_dataset, small_model):
        s = small_dataset.sessions[2]
        blank = [
            dataclasses.replace(it, image_embedding=[0.0] * 32) for it in s.candidates
        ]
        s2 = dataclasses.replace(s, candidates=blank)
        model = init_model(
            small_model.config, small_dataset.meta, small_dataset.catalog, "full", seed=5
        )
        # zero the frozen rows outright: worst-case missing modality
        model.image_table.values[:] = 0.0
        trace = run_forward(s2, model)
        assert np.all(np.isfinite(trace.y_hat.data))
        np.testing.assert_allclose(trace.y_hat.data.sum(), 1.0, atol=1e-9)

    def test_forward_gradients_match_finite_differences(self, small_dataset):
        # spot-check a handful of parameters end to end; the full sweep runs
        # in the acceptance suite on the reduced model
        model = build_model(small_dataset, "full", seed=8)
        s = small_dataset.sessions[0]
        y = np.zeros(30)
        y[s.conversion_labels.index(1)] = 1.0

        def f():
            trace = run_forward(s, model)
            return T.scale(T.sum_all(T.mul(trace.y_hat, Tensor(y))), -1.0)

        names = ["cafu_item/w1", "mlp_mo/w2", "enc_main/layer0/wq", "din_id/w2", "head_score/w2"]
        for name in names:
            p = model.store[name]
            rng = np.random.default_rng(hash(name) % 2**32)
            flat_idx = rng.integers(0, p.data.size, size=4)
            grads = T.backward(f())
            analytic = grads[name].reshape(-1)
            eps = 1e-5
            for i in flat_idx:
                flat = p.data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                denom = max(abs(analytic[i]), abs(num), 1e-8)
                assert abs(analytic[i] - num) / denom < 1e-4, name
