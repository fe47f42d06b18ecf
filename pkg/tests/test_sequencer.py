import struct
import zlib

import numpy as np
import pytest

from sisc.errors import (CheckpointChecksumError, CheckpointStructureError,
                         CheckpointVersionError, ConfigurationError, DataError,
                         InternalConsistencyError, NumericError)
from sisc.sequencer import (AdamState, CellConfig, FinalCellConfig,
                            SequencerConfig, TrainSchedule, adam_step,
                            backward, build_sequencer, forward,
                            load_checkpoint, parameter_count, predict,
                            save_checkpoint, train)
from sisc.tensor import RUN_DTYPE, TEST_DTYPE, softmax_xent

from oracles import adam_oracle, finite_difference, max_rel_err


def tiny_config(dropout=0.25, input_size=8, conv_count=2):
    return SequencerConfig(
        cells=(CellConfig(4, conv_count=conv_count, kernel=3,
                          dropout_rate=dropout),),
        final_cell=FinalCellConfig(channels=6, kernel=3, dropout_rate=dropout),
        input_size=input_size, class_count=2)


def small_config(dropout=0.25, input_size=16):
    return SequencerConfig(
        cells=(CellConfig(4, conv_count=1, dropout_rate=dropout),
               CellConfig(8, conv_count=1, dropout_rate=dropout)),
        final_cell=FinalCellConfig(channels=8, dropout_rate=dropout),
        input_size=input_size, class_count=2)


def two_cluster_set(n, rng, size=16):
    """Two noisy clusters around fixed random centroid images."""
    centroids = rng.standard_normal((2, 1, size, size))
    labels = np.arange(n) % 2
    images = centroids[labels] + 0.1 * rng.standard_normal((n, 1, size, size))
    return images.astype(np.float64), labels.astype(np.int64)


class TestBuildSequencer:
    def test_default_config_output_shape(self):
        model = build_sequencer(SequencerConfig(), np.random.default_rng(0))
        probs, _ = forward(model, np.zeros((1, 1, 96, 96)), "infer")
        assert probs.shape == (1, 2, 1, 1)

    def test_indivisible_input_size(self):
        with pytest.raises(ConfigurationError):
            build_sequencer(SequencerConfig(input_size=95), np.random.default_rng(0))

    def test_error_lists_every_violation(self):
        config = SequencerConfig(
            cells=(CellConfig(0, conv_count=0, kernel=2, dropout_rate=1.5),),
            input_size=7, class_count=1)
        with pytest.raises(ConfigurationError) as exc:
            build_sequencer(config, np.random.default_rng(0))
        message = str(exc.value)
        for fragment in ("channels", "conv_count", "kernel", "dropout_rate",
                         "class_count", "input_size"):
            assert fragment in message

    def test_same_seed_identical_weights(self):
        a = build_sequencer(tiny_config(), np.random.default_rng(42))
        b = build_sequencer(tiny_config(), np.random.default_rng(42))
        for (name_a, arr_a), (name_b, arr_b) in zip(a.checkpoint_arrays(),
                                                    b.checkpoint_arrays()):
            assert name_a == name_b
            np.testing.assert_array_equal(arr_a, arr_b)

    def test_parameter_count_closed_form(self):
        for config in (SequencerConfig(), tiny_config(), small_config()):
            model = build_sequencer(config, np.random.default_rng(0))
            built = sum(arr.size for arr in model.trainable_params().values())
            assert parameter_count(config) == built

    def test_layer_sequence_per_cell(self):
        model = build_sequencer(tiny_config(conv_count=2), np.random.default_rng(0))
        kinds = [layer.kind for layer in model.layers]
        assert kinds == (["conv", "bn", "dropout", "relu"] * 2 + ["pool"]
                         + ["conv", "bn", "dropout", "relu"] + ["conv"])
        assert model.class_conv.params.out_channels == 2
        assert model.class_conv.params.kernel == (1, 1)


class TestForward:
    def test_zero_image_deterministic(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        x = np.zeros((1, 1, 8, 8))
        p1, _ = forward(model, x, "infer")
        p2, _ = forward(model, x, "infer")
        np.testing.assert_array_equal(p1, p2)

    def test_identical_images_identical_probs(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        one = np.random.default_rng(5).standard_normal((1, 1, 8, 8))
        batch = np.concatenate([one, one])
        probs, _ = forward(model, batch, "infer")
        np.testing.assert_array_equal(probs[0], probs[1])

    def test_probs_sum_to_one(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal((5, 1, 8, 8))
        probs, _ = forward(model, x.astype(np.float32), "infer")
        sums = probs.reshape(5, 2).sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        with pytest.raises(DataError):
            forward(model, np.zeros((1, 1, 9, 9)), "infer")
        with pytest.raises(DataError):
            forward(model, np.zeros((1, 2, 8, 8)), "infer")
        with pytest.raises(DataError):
            forward(model, np.zeros((8, 8)), "infer")

    def test_train_mode_needs_rng(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        with pytest.raises(ConfigurationError):
            forward(model, np.zeros((1, 1, 8, 8)), "train")

    def test_trace_covers_every_layer(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        _, trace = forward(model, np.zeros((2, 1, 8, 8)), "train",
                           np.random.default_rng(0))
        assert len(trace.records) == len(model.layers)
        assert trace.class_maps.shape[1] == 2
        # activations chain: each record's input is the previous output
        for prev, rec in zip(trace.records, trace.records[1:]):
            assert rec.input is prev.output

    def test_infer_bypasses_dropout(self):
        model = build_sequencer(tiny_config(dropout=0.9), np.random.default_rng(1))
        x = np.random.default_rng(4).standard_normal((2, 1, 8, 8))
        p1, trace = forward(model, x, "infer")
        p2, _ = forward(model, x, "infer")
        np.testing.assert_array_equal(p1, p2)
        for rec in trace.records:
            if rec.kind == "dropout":
                np.testing.assert_array_equal(rec.dropout_mask, 1.0)


class TestBackward:
    def test_saturated_probs_zero_grads(self):
        model = build_sequencer(tiny_config(dropout=0.0), np.random.default_rng(1),
                                dtype=TEST_DTYPE)
        head = model.class_conv.params
        head.weights[...] = 0.0
        head.bias[...] = [100.0, -100.0]
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
        _, trace = forward(model, x, "train", np.random.default_rng(0))
        grads = backward(model, trace, np.zeros(2, dtype=np.int64))
        worst = max(np.max(np.abs(g)) for g in grads.values())
        assert worst < 1e-8

    def test_full_model_finite_difference(self):
        model = build_sequencer(tiny_config(dropout=0.25), np.random.default_rng(7),
                                dtype=TEST_DTYPE)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 1, 8, 8))
        labels = np.array([0, 1])

        def loss():
            # fixed dropout seed so every evaluation sees the same masks
            _, trace = forward(model, x, "train", np.random.default_rng(99))
            return softmax_xent(trace.logits, labels)[1]

        _, trace = forward(model, x, "train", np.random.default_rng(99))
        grads = backward(model, trace, labels)
        worst = 0.0
        for name, param in model.trainable_params().items():
            probes = min(15, param.size)
            flat = rng.choice(param.size, size=probes, replace=False)
            numeric = finite_difference(loss, param, flat)
            analytic = grads[name].reshape(-1)[flat]
            worst = max(worst, max_rel_err(analytic, numeric))
        assert worst < 1e-3

    def test_duplicated_batch_same_grads(self):
        model = build_sequencer(tiny_config(dropout=0.0), np.random.default_rng(3),
                                dtype=TEST_DTYPE)
        x = np.random.default_rng(4).standard_normal((3, 1, 8, 8))
        labels = np.array([0, 1, 1])
        _, trace = forward(model, x, "train", np.random.default_rng(0))
        single = backward(model, trace, labels)
        _, trace2 = forward(model, np.concatenate([x, x]), "train",
                            np.random.default_rng(0))
        doubled = backward(model, trace2, np.concatenate([labels, labels]))
        for name in single:
            assert np.max(np.abs(single[name] - doubled[name])) < 1e-9

    def test_stale_trace_rejected(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        _, trace = forward(model, np.zeros((1, 1, 8, 8)), "train",
                           np.random.default_rng(0))
        model.bump_version()
        with pytest.raises(InternalConsistencyError):
            backward(model, trace, np.array([0]))

    def test_infer_trace_rejected(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(1))
        _, trace = forward(model, np.zeros((1, 1, 8, 8)), "infer")
        with pytest.raises(InternalConsistencyError):
            backward(model, trace, np.array([0]))


class TestAdamStep:
    def test_zero_grad_no_move(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(params, lr=0.1)
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_magnitude_is_lr(self):
        rng = np.random.default_rng(0)
        g = rng.uniform(0.01, 10.0, size=100) * rng.choice([-1.0, 1.0], size=100)
        params = {"w": np.zeros(100)}
        state = AdamState.for_params(params, lr=1e-3)
        adam_step(params, {"w": g}, state)
        # first bias-corrected step is lr * g/(|g|+eps), i.e. lr in magnitude
        np.testing.assert_allclose(np.abs(params["w"]), 1e-3, atol=1e-6 * 1e-3)
        np.testing.assert_array_equal(np.sign(params["w"]), -np.sign(g))

    def test_two_steps_match_scalar_oracle(self):
        theta = np.array([2.0])
        params = {"theta": theta}
        state = AdamState.for_params(params, lr=0.05)
        history = []
        value = 2.0
        for _ in range(2):
            g = 2.0 * value  # d/dx of x^2
            history.append(g)
            adam_step(params, {"theta": np.array([g])}, state)
            value = float(theta[0])
        expected = adam_oracle(2.0, history, lr=0.05)
        assert abs(float(theta[0]) - expected) < 1e-12

    def test_nonfinite_grad_names_parameter(self):
        params = {"cell0.conv0.weights": np.ones(3)}
        state = AdamState.for_params(params)
        bad = {"cell0.conv0.weights": np.array([1.0, np.nan, 0.0])}
        with pytest.raises(NumericError) as exc:
            adam_step(params, bad, state)
        assert "cell0.conv0.weights" in str(exc.value)

    def test_in_place_on_model_params(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(0))
        params = model.trainable_params()
        before = params["cell0.conv0.weights"].copy()
        grads = {name: np.ones_like(arr) for name, arr in params.items()}
        adam_step(params, grads, AdamState.for_params(params, lr=0.01))
        after = model.trainable_params()["cell0.conv0.weights"]
        assert np.max(np.abs(after - before)) > 1e-4


class TestTrain:
    def test_one_epoch_history(self):
        model = build_sequencer(small_config(), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x, y = two_cluster_set(4, rng)
        _, result = train(model, (x, y), (x, y), TrainSchedule(epochs=1, batch_size=2))
        assert len(result.history) == 1
        assert result.history[0].epoch == 0

    def test_separable_task_reaches_high_accuracy(self):
        model = build_sequencer(small_config(), np.random.default_rng(0))
        rng = np.random.default_rng(11)
        x, y = two_cluster_set(200, rng)
        vx, vy = two_cluster_set(40, rng)
        schedule = TrainSchedule(epochs=30, batch_size=32, lr=1e-3, seed=5)
        _, result = train(model, (x, y), (vx, vy), schedule)
        assert max(h.train_accuracy for h in result.history) >= 0.99

    def test_loss_decreases_over_first_steps(self):
        model = build_sequencer(small_config(dropout=0.0), np.random.default_rng(0))
        rng = np.random.default_rng(11)
        x, y = two_cluster_set(64, rng)
        # full-batch schedule: one Adam step per epoch, loss logged pre-step
        schedule = TrainSchedule(epochs=5, batch_size=64, lr=1e-3, seed=5)
        _, result = train(model, (x, y), (x[:8], y[:8]), schedule)
        losses = [h.train_loss for h in result.history]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_same_seed_identical_weights(self):
        runs = []
        for _ in range(2):
            model = build_sequencer(small_config(), np.random.default_rng(0))
            rng = np.random.default_rng(3)
            x, y = two_cluster_set(32, rng)
            schedule = TrainSchedule(epochs=2, batch_size=8, lr=1e-3, seed=9)
            train(model, (x, y), (x[:8], y[:8]), schedule)
            runs.append({name: arr.copy()
                         for name, arr in model.checkpoint_arrays()})
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_best_val_state_restored(self):
        model = build_sequencer(small_config(), np.random.default_rng(0))
        rng = np.random.default_rng(2)
        x, y = two_cluster_set(64, rng)
        vx, vy = two_cluster_set(32, rng)
        schedule = TrainSchedule(epochs=8, batch_size=16, lr=1e-3, seed=1)
        _, result = train(model, (x, y), (vx, vy), schedule)
        val_curve = [h.val_accuracy for h in result.history]
        assert result.best_epoch == int(np.argmax(val_curve))
        assert result.best_val_accuracy == max(val_curve)
        # the restored weights must reproduce the best validation accuracy
        probs, _ = forward(model, vx, "infer")
        acc = float(np.mean(np.argmax(probs.reshape(len(vy), -1), axis=1) == vy))
        assert acc == result.best_val_accuracy

    def test_empty_dataset(self):
        model = build_sequencer(small_config(), np.random.default_rng(0))
        empty = (np.zeros((0, 1, 16, 16)), np.zeros(0, dtype=np.int64))
        some = two_cluster_set(4, np.random.default_rng(0))
        with pytest.raises(DataError):
            train(model, empty, some, TrainSchedule(epochs=1))
        with pytest.raises(DataError):
            train(model, some, empty, TrainSchedule(epochs=1))

    def test_divergence_reports_location(self):
        model = build_sequencer(small_config(), np.random.default_rng(0))
        rng = np.random.default_rng(4)
        x, y = two_cluster_set(16, rng)
        x[3] = np.nan  # one poisoned sample must surface with its location
        schedule = TrainSchedule(epochs=3, batch_size=8, lr=1e-3, seed=0)
        with pytest.raises(NumericError) as exc:
            train(model, (x, y), (x, y), schedule)
        assert "epoch 0" in str(exc.value)
        assert "batch" in str(exc.value)


class TestPredict:
    def test_fixed_probability_head(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(0))
        head = model.class_conv.params
        head.weights[...] = 0.0
        head.bias[...] = np.log([0.8, 0.2]).astype(head.bias.dtype)
        cls, prob = predict(model, np.zeros((8, 8)))
        assert cls == 0
        assert abs(prob - 0.8) < 1e-6

    def test_exact_tie_lowest_id(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(0))
        head = model.class_conv.params
        head.weights[...] = 0.0
        head.bias[...] = 0.0
        cls, prob = predict(model, np.zeros((8, 8)))
        assert cls == 0
        assert abs(prob - 0.5) < 1e-7

    def test_agrees_with_forward_argmax(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(6))
        rng = np.random.default_rng(7)
        images = rng.standard_normal((100, 1, 8, 8)).astype(np.float32)
        probs, _ = forward(model, images, "infer")
        flat = probs.reshape(100, -1)
        for i in range(100):
            cls, prob = predict(model, images[i])
            assert cls == int(np.argmax(flat[i]))
            # batch-of-100 and batch-of-1 GEMMs differ in summation order
            assert abs(prob - float(flat[i, cls])) < 1e-6

    def test_wrong_size(self):
        model = build_sequencer(tiny_config(), np.random.default_rng(0))
        with pytest.raises(DataError):
            predict(model, np.zeros((9, 9)))
        with pytest.raises(DataError):
            predict(model, np.zeros((2, 1, 8, 8)))


def trained_toy_model():
    model = build_sequencer(tiny_config(), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((8, 1, 8, 8)).astype(np.float32)
    # a couple of train-mode passes so BN running stats move off their init
    forward(model, x, "train", np.random.default_rng(2))
    forward(model, x * 0.5, "train", np.random.default_rng(3))
    return model


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = trained_toy_model()
        path = tmp_path / "model.sisc"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for (name_a, arr_a), (name_b, arr_b) in zip(model.checkpoint_arrays(),
                                                    loaded.checkpoint_arrays()):
            assert name_a == name_b
            np.testing.assert_array_equal(arr_a, arr_b)
        x = np.random.default_rng(9).standard_normal((3, 1, 8, 8)).astype(np.float32)
        p1, _ = forward(model, x, "infer")
        p2, _ = forward(loaded, x, "infer")
        np.testing.assert_array_equal(p1, p2)

    def test_truncated_file(self, tmp_path):
        model = trained_toy_model()
        path = tmp_path / "model.sisc"
        save_checkpoint(model, path)
        data = path.read_bytes()
        for cut in (len(data) // 2, len(data) - 1, 10):
            short = tmp_path / f"cut{cut}.sisc"
            short.write_bytes(data[:cut])
            with pytest.raises(CheckpointChecksumError):
                load_checkpoint(short)

    def test_bad_magic_and_version(self, tmp_path):
        model = trained_toy_model()
        path = tmp_path / "model.sisc"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        wrong_magic = tmp_path / "magic.sisc"
        wrong_magic.write_bytes(b"XXXX" + bytes(data[4:]))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(wrong_magic)
        bumped = bytearray(data)
        bumped[4:8] = struct.pack("<I", 2)
        wrong_version = tmp_path / "version.sisc"
        wrong_version.write_bytes(bytes(bumped))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(wrong_version)

    def test_flipped_payload_byte(self, tmp_path):
        model = trained_toy_model()
        path = tmp_path / "model.sisc"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        bad = tmp_path / "flipped.sisc"
        bad.write_bytes(bytes(data))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(bad)

    def test_config_blob_disagreement(self, tmp_path):
        model = trained_toy_model()
        path = tmp_path / "model.sisc"
        save_checkpoint(model, path)
        data = path.read_bytes()
        cfg_len = struct.unpack("<I", data[8:12])[0]
        text = data[12:12 + cfg_len].decode("utf-8")
        # claim 8 channels while the blobs still hold a 4-channel model
        forged_text = text.replace("cells = 4:", "cells = 8:").encode("utf-8")
        body = (data[:8] + struct.pack("<I", len(forged_text)) + forged_text
                + data[12 + cfg_len:-4])
        forged = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        bad = tmp_path / "forged.sisc"
        bad.write_bytes(forged)
        with pytest.raises(CheckpointStructureError):
            load_checkpoint(bad)

    def test_loaded_model_is_run_precision(self, tmp_path):
        model = trained_toy_model()
        path = tmp_path / "model.sisc"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.dtype == np.dtype(RUN_DTYPE)
        assert all(arr.dtype == np.dtype(RUN_DTYPE)
                   for _, arr in loaded.checkpoint_arrays())
