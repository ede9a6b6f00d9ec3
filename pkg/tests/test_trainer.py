from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from chip_emulator import ConstraintViolation
from event_io import SynthConfig, stratified_split, synth_moving_box
from snn_core import compact_spec, yole_spec
from tensor_engine import Tensor
from trainer import (SWEEP_COLUMNS, Adam, Checkpoint, DetectorModel, EmptySplit, TrainConfig,
                     TrainingError, evaluate, fit_to_input, sweep_lambda, train, train_step)


def _cfg(**overrides):
    values = dict(epochs=1, batch_size=2, window_us=1000, threads=1, augment=False, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


class TestTrainConfig:
    def test_representation_follows_activation(self):
        assert TrainConfig(activation="single").representation == "binary"
        assert TrainConfig(activation="multi").representation == "histogram"
        assert TrainConfig(activation="single", representation="histogram").representation == "histogram"

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 2, "momentum": 0.9})

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(representation="voxel")

    def test_hash_ignores_threads(self):
        assert _cfg(threads=1).config_hash() == _cfg(threads=8).config_hash()
        assert _cfg(lam=0.0).config_hash() != _cfg(lam=0.1).config_hash()

    def test_dict_round_trip(self):
        cfg = _cfg(lam=1e-3, layer_weights=[1.0] * 8)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        param = Tensor(np.array([1.0, -1.0]))
        optimizer = Adam(lr=0.1)
        optimizer.step({"p": param}, {"p": np.array([0.5, -2.0])})
        np.testing.assert_allclose(param.values, [0.9, -0.9], atol=1e-6)
        assert optimizer.step_count == 1

    def test_state_round_trip(self):
        optimizer = Adam(lr=0.1)
        optimizer.step({"p": Tensor(np.ones(2))}, {"p": np.ones(2)})
        restored = Adam(lr=0.1)
        restored.load_state(optimizer.state_tensors(), optimizer.step_count)
        np.testing.assert_array_equal(restored.m["p"], optimizer.m["p"])
        assert restored.step_count == 1


class TestTrainStep:
    def test_loss_splits_into_detection_and_penalty(self, tiny_spec, tiny_samples):
        cfg = _cfg(lam=0.01, batch_size=1)
        model = DetectorModel.create(tiny_spec, seed=0, gain=3.0)
        terms = train_step(model, Adam(1e-3), tiny_samples[:1], cfg)
        assert terms["loss"] == pytest.approx(terms["detection_loss"] + terms["penalty"])
        assert terms["penalty"] == pytest.approx(0.01 * terms["spikes"])

    def test_step_changes_parameters(self, tiny_spec, tiny_samples):
        model = DetectorModel.create(tiny_spec, seed=0, gain=3.0)
        before = model.head.b.values.copy()
        train_step(model, Adam(1e-2), tiny_samples[:2], _cfg())
        assert not np.array_equal(before, model.head.b.values)

    def test_thread_count_does_not_change_result(self, tiny_spec, tiny_samples):
        results = []
        for threads in (1, 3):
            model = DetectorModel.create(tiny_spec, seed=0, gain=3.0)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                train_step(model, Adam(1e-2), tiny_samples[:3], _cfg(batch_size=3), pool)
            results.append(model.parameters())
        for name in results[0]:
            np.testing.assert_array_equal(results[0][name].values, results[1][name].values)

    def test_batch_norm_batch_is_trained_jointly(self, tiny_samples):
        spec = compact_spec(resolution=16, n_out=8, channels=(2, 2, 2, 2), hidden=8, normalization="batch")
        model = DetectorModel.create(spec, seed=0, gain=3.0)
        terms = train_step(model, Adam(1e-3), tiny_samples[:2], _cfg())
        assert np.isfinite(terms["loss"])
        assert not np.allclose(model.head.bn_state.running_var, 1.0)


class TestTraining:
    def test_empty_split(self, tiny_spec, tiny_samples):
        with pytest.raises(EmptySplit):
            train(tiny_spec, [], tiny_samples, _cfg())
        with pytest.raises(EmptySplit):
            train(tiny_spec, tiny_samples, [], _cfg())

    def test_topology_that_does_not_fit_is_refused(self, tiny_samples):
        with pytest.raises(ConstraintViolation):
            train(yole_spec(), tiny_samples, tiny_samples, _cfg())

    def test_same_seed_same_checkpoint(self, tiny_spec, tiny_samples):
        train_set, val_set = tiny_samples[:4], tiny_samples[4:]
        a = train(tiny_spec, train_set, val_set, _cfg(augment=True))
        b = train(tiny_spec, train_set, val_set, _cfg(augment=True))
        assert a.checkpoint.config_hash == b.checkpoint.config_hash
        for name, values in a.checkpoint.tensors.items():
            np.testing.assert_array_equal(values, b.checkpoint.tensors[name])

    def test_outputs_written(self, tiny_spec, tiny_samples, tmp_path):
        result = train(tiny_spec, tiny_samples[:4], tiny_samples[4:], _cfg(epochs=2), out_dir=tmp_path)
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "checkpoint.sfck").exists()
        assert list(result.history["epoch"]) == [1, 2]
        assert {"loss", "detection_loss", "penalty", "val_map", "val_spikes_per_s"} <= set(result.history.columns)

    def test_checkpoint_round_trip(self, tiny_spec, tiny_samples, tmp_path):
        result = train(tiny_spec, tiny_samples[:4], tiny_samples[4:], _cfg())
        result.checkpoint.save(tmp_path / "ck.sfck")
        loaded = Checkpoint.load(tmp_path / "ck.sfck")
        assert loaded.spec == tiny_spec
        assert loaded.train_config == result.checkpoint.train_config
        for name, values in result.checkpoint.tensors.items():
            np.testing.assert_array_equal(values, loaded.tensors[name])
        a = evaluate(result.checkpoint, tiny_samples[4:], threads=1)
        b = evaluate(loaded, tiny_samples[4:], threads=1)
        assert a.to_dict() == b.to_dict()


class TestEvaluate:
    @pytest.fixture
    def checkpoint(self, tiny_spec, tiny_samples):
        return train(tiny_spec, tiny_samples[:4], tiny_samples[4:], _cfg(init_gain=3.0)).checkpoint

    def test_float_and_quantized_modes(self, checkpoint, tiny_samples):
        for mode in ("float_sim", "quant_sim"):
            metrics = evaluate(checkpoint, tiny_samples[4:], mode, threads=1)
            assert metrics.mode == mode
            assert metrics.frames == 2 * 4
            assert 0.0 <= metrics.map50 <= 1.0
            assert metrics.map_range <= metrics.map50 + 1e-12
            assert metrics.stall is None
            assert len(metrics.layer_spikes_per_s) == len(checkpoint.spec.layers)

    def test_emulator_mode_reports_power_and_stall(self, checkpoint, tiny_samples):
        metrics = evaluate(checkpoint, tiny_samples[4:], "emulator", threads=1)
        assert metrics.power_mw >= 0.9
        assert set(metrics.stall) == {"stalled_samples", "dropped_events", "max_delay_us"}

    @pytest.mark.slow
    def test_quantization_barely_moves_map(self):
        synth = SynthConfig(resolution=(32, 32), box_size=(10, 10), duration_us=20_000, step_us=500,
                            window_us=2000, noise_rate=0.0)
        samples = [synth_moving_box(synth, seed) for seed in range(20)]
        train_set, val_set = stratified_split(samples, seed=0)
        cfg = TrainConfig(epochs=5, batch_size=4, window_us=2000, threads=2, learning_rate=1e-2,
                          init_gain=2.0, augment=False)
        checkpoint = train(compact_spec(resolution=32), train_set, val_set, cfg).checkpoint
        float_map = evaluate(checkpoint, val_set, "float_sim", threads=2).map50
        quant_map = evaluate(checkpoint, val_set, "quant_sim", threads=2).map50
        assert abs(float_map - quant_map) <= 0.05

    def test_unknown_mode(self, checkpoint, tiny_samples):
        with pytest.raises(ValueError):
            evaluate(checkpoint, tiny_samples[4:], "fpga", threads=1)

    def test_samples_are_fitted_to_the_input(self, tiny_samples):
        spec = compact_spec(resolution=8, n_out=8, channels=(2, 2, 2), hidden=8)
        fitted = fit_to_input(tiny_samples[0], spec)
        assert fitted.stream.resolution == (8, 8)
        assert fitted.track[0].width == pytest.approx(3.0)


class TestSweep:
    def test_needs_two_values(self, tiny_spec, tiny_samples):
        with pytest.raises(TrainingError):
            sweep_lambda(tiny_spec, tiny_samples[:4], tiny_samples[4:], _cfg(), [0.0])

    @pytest.mark.slow
    def test_sweep_trades_accuracy_for_activity(self, tmp_path):
        synth = SynthConfig(resolution=(32, 32), box_size=(10, 10), duration_us=20_000, step_us=500,
                            window_us=2000, noise_rate=0.0)
        samples = [synth_moving_box(synth, seed) for seed in range(20)]
        train_set, val_set = stratified_split(samples, seed=0)
        spec = compact_spec(resolution=32)
        base = TrainConfig(epochs=5, batch_size=4, window_us=2000, threads=2, learning_rate=1e-2, init_gain=2.0)
        table = sweep_lambda(spec, train_set, val_set, base, [0.0, 1.0], out_dir=tmp_path)
        assert list(table.columns) == SWEEP_COLUMNS
        assert len(table) == 2
        assert (tmp_path / "sweep.csv").exists()
        assert table["sim_spikes_per_s"].iloc[1] <= table["sim_spikes_per_s"].iloc[0]
