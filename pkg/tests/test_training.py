import math

import numpy as np
import pytest

from armmt import tensor as T
from armmt.data import DatasetError
from armmt.model import forward_batch, run_forward
from armmt.params import ParamStore
from armmt.tensor import Parameter, ShapeError, Tensor
from armmt.training import (
    BadMagicError,
    Checkpoint,
    NumericError,
    PayloadSizeError,
    TrainConfig,
    VersionMismatchError,
    adagrad_step,
    aux_loss,
    batch_objective,
    load_checkpoint,
    main_loss,
    save_checkpoint,
    total_loss,
    train,
)

from conftest import build_model


class TestMainLoss:
    def test_perfect_prediction(self):
        y = np.zeros(30)
        y[4] = 1
        y_hat = np.full(30, 1e-9)
        y_hat[4] = 1.0
        assert float(main_loss(y, Tensor(y_hat)).data) == 0.0

    def test_half_probability(self):
        y = [1, 0]
        np.testing.assert_allclose(
            float(main_loss(y, Tensor([0.5, 0.5])).data), math.log(2), atol=1e-12
        )

    def test_uniform_over_30(self):
        y = np.zeros(30)
        y[7] = 1
        loss = float(main_loss(y, Tensor(np.full(30, 1 / 30))).data)
        np.testing.assert_allclose(loss, math.log(30), atol=1e-12)

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError, match="one-hot"):
            main_loss([1, 1, 0], Tensor([0.3, 0.3, 0.4]))
        with pytest.raises(ValueError, match="one-hot"):
            main_loss([0, 0, 0], Tensor([0.3, 0.3, 0.4]))

    def test_normalized_form_flag(self):
        y = np.zeros(30)
        y[0] = 1
        summed = float(main_loss(y, Tensor(np.full(30, 1 / 30))).data)
        mean = float(main_loss(y, Tensor(np.full(30, 1 / 30)), normalize=True).data)
        np.testing.assert_allclose(mean, summed / 30, atol=1e-15)


class TestAuxLoss:
    def test_perfect_predictions(self):
        y = [1.0, 0.0, 1.0]
        y_hat = [1.0, 0.0, 1.0]
        assert float(aux_loss(y, Tensor(y_hat)).data) == 0.0

    def test_all_half(self):
        loss = float(aux_loss([1, 0, 1, 0], Tensor([0.5] * 4)).data)
        np.testing.assert_allclose(loss, math.log(2), atol=1e-12)

    def test_hand_computed_two_item_case(self):
        loss = float(aux_loss([1, 0], Tensor([0.9, 0.1])).data)
        np.testing.assert_allclose(loss, -(math.log(0.9) + math.log(0.9)) / 2, atol=1e-12)
        np.testing.assert_allclose(loss, 0.10536, atol=1e-5)

    def test_mean_vs_sum_asymmetry(self):
        # same numbers through the listwise loss (sum) vs the click loss (mean)
        y = [1, 0]
        listwise = float(main_loss(y, Tensor([0.5, 0.5])).data)
        pointwise = float(aux_loss(y, Tensor([0.5, 0.5])).data)
        np.testing.assert_allclose(listwise, math.log(2), atol=1e-12)
        np.testing.assert_allclose(pointwise, math.log(2), atol=1e-12)
        # with a non-uniform case the sum form scales with N, the mean does not
        y4 = [1, 0, 0, 0]
        listwise4 = float(main_loss(y4, Tensor([0.25] * 4)).data)
        pointwise4 = float(aux_loss(y4, Tensor([0.25] * 4)).data)
        np.testing.assert_allclose(listwise4, math.log(4), atol=1e-12)
        assert pointwise4 < listwise4

    def test_rejects_out_of_range_probabilities(self):
        with pytest.raises(ValueError, match="outside"):
            aux_loss([1, 0], Tensor([1.5, 0.2]))


class TestTotalLoss:
    def test_paper_lambda(self):
        assert total_loss(1.0, 2.0, 1.0) == 3.0

    def test_lambda_zero(self):
        assert total_loss(1.5, 99.0, 0.0) == 1.5

    def test_zero_losses(self):
        assert total_loss(0.0, 0.0, 7.0) == 0.0

    def test_graph_tensors(self):
        out = total_loss(Tensor(1.0), Tensor(2.0), 0.5)
        assert float(out.data) == 2.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -0.1)


class TestAdagrad:
    def test_hand_computed_first_step(self):
        p = Parameter("p", [1.0])
        cfg = TrainConfig(lr=0.07)
        adagrad_step([p], {"p": np.array([0.5])}, cfg)
        np.testing.assert_allclose(p.accum, [0.25])
        np.testing.assert_allclose(p.data, [1.0 - 0.07 * 0.5 / (0.5 + 1e-8)], atol=1e-12)
        np.testing.assert_allclose(p.data, [0.93], atol=1e-6)

    def test_hand_computed_second_step(self):
        p = Parameter("p", [1.0])
        cfg = TrainConfig(lr=0.07)
        adagrad_step([p], {"p": np.array([0.5])}, cfg)
        adagrad_step([p], {"p": np.array([0.5])}, cfg)
        np.testing.assert_allclose(p.accum, [0.5])
        np.testing.assert_allclose(p.data, [0.88050], atol=1e-5)

    def test_zero_gradient_is_noop(self):
        p = Parameter("p", [2.0])
        adagrad_step([p], {"p": np.array([0.0])}, TrainConfig())
        np.testing.assert_array_equal(p.data, [2.0])
        np.testing.assert_array_equal(p.accum, [0.0])

    def test_missing_gradient_skips(self):
        p = Parameter("p", [2.0])
        adagrad_step([p], {}, TrainConfig())
        np.testing.assert_array_equal(p.data, [2.0])

    def test_shape_mismatch(self):
        p = Parameter("p", [1.0, 2.0])
        with pytest.raises(ShapeError):
            adagrad_step([p], {"p": np.zeros((3,))}, TrainConfig())

    def test_accumulator_monotone(self):
        rng = np.random.default_rng(0)
        p = Parameter("p", rng.normal(size=(4,)))
        cfg = TrainConfig(lr=0.01)
        prev = p.accum.copy()
        for _ in range(5):
            adagrad_step([p], {"p": rng.normal(size=(4,))}, cfg)
            assert np.all(p.accum >= prev)
            prev = p.accum.copy()


class TestBatchObjective:
    def test_matches_mean_of_per_session_losses(self, small_dataset, small_model):
        sessions = small_dataset.sessions[:3]
        bt = forward_batch(sessions, small_model)
        batched = float(batch_objective(
            bt,
            np.array([s.conversion_labels for s in sessions], dtype=float),
            np.array([s.click_labels for s in sessions], dtype=float),
            lam=1.0,
        ).data)
        singles = []
        for s in sessions:
            tr = run_forward(s, small_model)
            m = main_loss(s.conversion_labels, tr.y_hat)
            a = aux_loss(s.click_labels, tr.y_hat_ctr)
            singles.append(float(total_loss(m, a, 1.0).data))
        np.testing.assert_allclose(batched, np.mean(singles), atol=1e-12)


class TestTrain:
    def test_zero_epochs_changes_nothing(self, small_dataset):
        model = build_model(small_dataset, "full", seed=1)
        before = {p.name: p.data.copy() for p in model.store}
        ckpt, log = train(small_dataset, model, TrainConfig(epochs=0, seed=1))
        assert log == []
        assert ckpt.step == 0
        for p in model.store:
            np.testing.assert_array_equal(p.data, before[p.name])

    def test_empty_dataset_rejected(self, small_dataset):
        model = build_model(small_dataset, "full", seed=1)
        with pytest.raises(DatasetError, match="empty"):
            train([], model, TrainConfig(epochs=1))

    def test_variant_mismatch_rejected(self, small_dataset):
        model = build_model(small_dataset, "full", seed=1)
        with pytest.raises(ValueError, match="variant"):
            train(small_dataset, model, TrainConfig(epochs=1), variant="no_aux")

    def test_loss_decreases_on_memorization(self, small_dataset):
        model = build_model(small_dataset, "full", seed=2)
        sessions = small_dataset.sessions[:8]
        _, log = train(sessions, model, TrainConfig(epochs=6, batch_size=8, seed=3))
        assert log[-1][1] < log[0][1]

    def test_determinism_identical_checkpoints(self, small_dataset, tmp_path):
        paths = []
        logs = []
        for run in range(2):
            model = build_model(small_dataset, "full", seed=4)
            ckpt, log = train(
                small_dataset.sessions[:6], model, TrainConfig(epochs=2, batch_size=4, seed=9)
            )
            p = tmp_path / f"run{run}.ckpt"
            save_checkpoint(ckpt, str(p))
            paths.append(p)
            logs.append(log)
        assert logs[0] == logs[1]
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_lambda_zero_full_equals_no_aux(self, small_dataset, tmp_path):
        def payload(path):
            raw = path.read_bytes()
            return raw[raw.index(b"\n", 7) + 1 :]

        m_full = build_model(small_dataset, "full", seed=5)
        c_full, log_full = train(
            small_dataset.sessions[:6], m_full,
            TrainConfig(epochs=2, batch_size=4, lam=0.0, seed=9),
        )
        m_noaux = build_model(small_dataset, "no_aux", seed=5)
        c_noaux, log_noaux = train(
            small_dataset.sessions[:6], m_noaux,
            TrainConfig(epochs=2, batch_size=4, lam=1.0, seed=9),
        )
        assert log_full == log_noaux
        p1, p2 = tmp_path / "full.ckpt", tmp_path / "noaux.ckpt"
        save_checkpoint(c_full, str(p1))
        save_checkpoint(c_noaux, str(p2))
        assert payload(p1) == payload(p2)

    def test_nan_aborts_naming_parameter(self, small_dataset):
        model = build_model(small_dataset, "full", seed=6)
        model.store["mlp_mo/w1"].data[0, 0] = np.nan
        with pytest.raises(NumericError, match="mlp_mo/w1"):
            train(small_dataset.sessions[:4], model, TrainConfig(epochs=1, batch_size=4))


class TestCheckpoint:
    def test_roundtrip_bit_exact_forward(self, small_dataset, tmp_path):
        model = build_model(small_dataset, "full", seed=7)
        ckpt, _ = train(
            small_dataset.sessions[:4], model, TrainConfig(epochs=1, batch_size=4, seed=1)
        )
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.step == ckpt.step
        assert loaded.model.variant == "full"
        for p in model.store:
            lp = loaded.model.store[p.name]
            np.testing.assert_array_equal(p.data, lp.data)
            np.testing.assert_array_equal(p.accum, lp.accum)
        s = small_dataset.sessions[0]
        a = run_forward(s, model).y_hat.data
        b = run_forward(s, loaded.model).y_hat.data
        np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, small_dataset, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXXXX\n{}\n")
        with pytest.raises(BadMagicError):
            load_checkpoint(str(path))

    def test_version_mismatch(self, small_dataset, tmp_path):
        model = build_model(small_dataset, "full", seed=7)
        path = tmp_path / "v.ckpt"
        save_checkpoint(Checkpoint(model, TrainConfig(), 0), str(path))
        raw = path.read_bytes()
        nl = raw.index(b"\n", 7)
        import json

        header = json.loads(raw[7:nl])
        header["format_version"] = 99
        path.write_bytes(raw[:7] + json.dumps(header).encode() + raw[nl:])
        with pytest.raises(VersionMismatchError):
            load_checkpoint(str(path))

    def test_payload_size_mismatch(self, small_dataset, tmp_path):
        model = build_model(small_dataset, "full", seed=7)
        path = tmp_path / "s.ckpt"
        save_checkpoint(Checkpoint(model, TrainConfig(), 0), str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])  # drop two floats
        with pytest.raises(PayloadSizeError):
            load_checkpoint(str(path))
