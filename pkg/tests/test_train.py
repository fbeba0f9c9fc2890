import dataclasses
import math

import numpy as np
import pytest

from cdl.codec.container import compress_model, compressed_bytes
from cdl.config import ConfigError
from cdl.constants import ABORT_SNAPSHOT, CHECKPOINT_FILE, METRICS_CSV, METRICS_JSON, SUMMARY_JSON
from cdl.datasets import load_dataset
from cdl.gradcheck import check_network
from cdl.metrics import load_run
from cdl.net.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from cdl.net.model import Mode, NonFiniteError, forward
from cdl.optim import MomentumSGD
from cdl.train import (
    QUANT_STREAM,
    TrainingAborted,
    TrainState,
    apply_update,
    base_rates,
    evaluate,
    init_quant_params,
    initial_model,
    lr_scale,
    objective_and_gradients,
    penalty_norms,
    run_name,
    run_training,
    scaled_lr,
    sweep,
    train_epoch,
)
from cdl.utils import make_rng


class RecordingObserver:
    def __init__(self):
        self.steps = []
        self.epochs = []

    def on_step(self, state, info):
        self.steps.append((info.epoch, info.step, len(info.labels)))

    def on_epoch_end(self, state, metrics):
        self.epochs.append(metrics.epoch)


class TestSchedule:
    def test_lr_scale_steps_at_milestones(self, tiny_config):
        config = tiny_config.model_copy(update={"epochs": 4})
        assert [lr_scale(epoch, config) for epoch in range(4)] == pytest.approx([1.0, 1.0, 0.1, 0.01])

    def test_layer_wise_rates(self, quantized_model, tiny_config):
        rates = base_rates(tiny_config)
        quant = quantized_model.weighted_layers()[0].quant
        assert scaled_lr(quant, "w", rates) == tiny_config.lr_w
        assert scaled_lr(quant, "q", rates) == pytest.approx(0.01 / math.sqrt(quant.weight_count * 2 ** 7))
        assert scaled_lr(quant, "s", rates) == pytest.approx(0.01 / math.sqrt(quant.activation_count * 2 ** 8))
        assert scaled_lr(quant, "alpha", rates) == pytest.approx(0.01 / math.sqrt(quant.weight_count))
        with pytest.raises(ValueError):
            scaled_lr(quant, "gamma", rates)


class TestInit:
    def test_steps_follow_the_mean_magnitudes(self, tiny_dataset, tiny_config, rng):
        model = initial_model(tiny_config.model_copy(update={"exempt_first_last": False}), tiny_dataset)
        batch = tiny_dataset.train_x[:32]
        params = init_quant_params(model, batch, 4, sharpness=300.0)
        first, last = model.weighted_layers()
        assert params[0].q == pytest.approx(2 * np.abs(first.weight).mean() / math.sqrt(8))
        pre = forward(model, batch, Mode.FP).activations[0].pre
        assert params[0].s == pytest.approx(2 * np.abs(pre).mean() / math.sqrt(8))
        assert params[0].alpha == pytest.approx(300.0)
        assert params[0].quantize_activations and not params[1].quantize_activations
        assert params[0].activation_count == 8
        assert last.quant.bits == 4

    def test_exempt_layers_get_eight_bits(self, quantized_model):
        assert [layer.quant.bits for layer in quantized_model.weighted_layers()] == [8, 8]

    def test_zero_weights_fall_back(self, tiny_dataset, tiny_config):
        model = initial_model(tiny_config, tiny_dataset)
        model.weighted_layers()[1].weight[...] = 0.0
        params = init_quant_params(model, tiny_dataset.train_x[:8], 4)
        assert params[1].q == pytest.approx(1.0 / 2 ** 7)

    def test_from_checkpoint(self, tiny_dataset, tiny_config, quantized_model, tmp_path):
        path = tmp_path / "init.ckpt"
        save_checkpoint(quantized_model, path)
        model = initial_model(tiny_config.model_copy(update={"init_checkpoint": str(path)}), tiny_dataset)
        assert not model.has_quant_params()
        assert np.array_equal(model.weighted_layers()[0].weight, quantized_model.weighted_layers()[0].weight)
        assert model.bits == tiny_config.bits

    def test_checkpoint_must_fit_the_dataset(self, tiny_dataset, tiny_config, tmp_path):
        other = tiny_config.model_copy(update={"synthetic_classes": 5})
        path = tmp_path / "other.ckpt"
        save_checkpoint(initial_model(other, load_dataset(other)), path)
        with pytest.raises(ConfigError):
            initial_model(tiny_config.model_copy(update={"init_checkpoint": str(path)}), tiny_dataset)


class TestObjective:
    def test_penalty_norms(self, quantized_model, tiny_config):
        assert penalty_norms(quantized_model, tiny_config) == (float(16 * 8 + 8 * 3), 8.0)
        total = tiny_config.model_copy(update={"penalty_normalization": "total"})
        assert penalty_norms(quantized_model, total) == (1.0, 1.0)

    def test_objective_adds_normalized_penalties(self, quantized_model, tiny_dataset, tiny_config):
        x, y = tiny_dataset.train_x[:16], tiny_dataset.train_y[:16]
        result = objective_and_gradients(quantized_model, x, y, tiny_config, with_grads=False)
        w_norm, x_norm = penalty_norms(quantized_model, tiny_config)
        expected = result.loss + 0.02 * result.weight_bits / w_norm + 0.02 * result.activation_bits / x_norm
        assert result.objective == pytest.approx(expected)
        assert result.weight_bits > 0 and result.activation_bits > 0
        assert result.grads is None

    def test_fp_objective_is_the_loss(self, quantized_model, tiny_dataset, tiny_config):
        x, y = tiny_dataset.train_x[:16], tiny_dataset.train_y[:16]
        result = objective_and_gradients(quantized_model, x, y, tiny_config, mode=Mode.FP)
        assert result.objective == result.loss
        assert result.weight_bits == 0.0
        assert all(layer.q == 0.0 for layer in result.grads.layers)

    def test_gradients_with_penalties(self):
        result = check_network(2, np.random.default_rng(17), lam=0.05, gamma=0.05)
        assert result.passed, result.worst


class TestRunTraining:
    def test_writes_run_files(self, tiny_config, tiny_dataset, tmp_path):
        observer = RecordingObserver()
        state = run_training(tiny_config, tiny_dataset, tmp_path / "run", observers=[observer])
        for name in (METRICS_CSV, METRICS_JSON, SUMMARY_JSON, CHECKPOINT_FILE):
            assert (tmp_path / "run" / name).exists()
        assert [metrics.epoch for metrics in state.history] == [1, 2]
        assert observer.epochs == [1, 2]
        assert [step for _, step, _ in observer.steps] == list(range(1, 7))
        assert state.step == 6

        final = state.history[-1]
        assert 0.0 <= final.test_acc <= 1.0
        assert 0.0 < final.huffman_w_bits <= 8.0
        assert final.h_w_bits_per_weight >= 0.0
        run = load_run(tmp_path / "run")
        assert run.final["test_acc"] == pytest.approx(final.test_acc)
        assert sorted(run.histograms) == ["0", "1", "2"]

        model, metadata = load_checkpoint(tmp_path / "run" / CHECKPOINT_FILE)
        assert metadata["config"]["lambda"] == 0.02
        assert model.has_quant_params()

    def test_same_seed_same_run(self, tiny_config, tiny_dataset):
        first = run_training(tiny_config, tiny_dataset)
        second = run_training(tiny_config, tiny_dataset)
        for a, b in zip(first.model.weighted_layers(), second.model.weighted_layers()):
            assert np.array_equal(a.weight, b.weight)
            assert a.quant == b.quant
        assert [m.objective for m in first.history] == [m.objective for m in second.history]

    def test_same_seed_same_bytes(self, tiny_config, tiny_dataset):
        first = run_training(tiny_config, tiny_dataset).model
        second = run_training(tiny_config, tiny_dataset).model
        assert checkpoint_bytes(first) == checkpoint_bytes(second)
        batch = tiny_dataset.test_x[:16]
        assert (compressed_bytes(compress_model(first, make_rng(tiny_config.seed, QUANT_STREAM), batch))
                == compressed_bytes(compress_model(second, make_rng(tiny_config.seed, QUANT_STREAM), batch)))

    def test_full_precision_run(self, tiny_config, tiny_dataset):
        state = run_training(tiny_config.model_copy(update={"mode": "fp", "epochs": 1}), tiny_dataset)
        final = state.history[-1]
        assert not state.model.has_quant_params()
        assert math.isnan(final.h_w_bits_per_weight)
        assert math.isnan(final.huffman_w_bits)

    def test_abort_writes_a_snapshot(self, tiny_config, tiny_dataset, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NonFiniteError("logits are not finite")

        monkeypatch.setattr("cdl.train.objective_and_gradients", explode)
        with pytest.raises(TrainingAborted) as excinfo:
            run_training(tiny_config, tiny_dataset, tmp_path)
        assert excinfo.value.snapshot_path == tmp_path / ABORT_SNAPSHOT
        _, metadata = load_checkpoint(tmp_path / ABORT_SNAPSHOT)
        assert metadata["epoch"] == 1 and metadata["step"] == 0

    def test_evaluate_modes(self, quantized_model, tiny_dataset):
        x, y = tiny_dataset.test_x, tiny_dataset.test_y
        for mode in (Mode.FP, Mode.RCDL):
            assert 0.0 <= evaluate(quantized_model, x, y, mode) <= 1.0
        cdl = evaluate(quantized_model, x, y, Mode.CDL, np.random.default_rng(0), batch_size=10, topk=3)
        again = evaluate(quantized_model, x, y, Mode.CDL, np.random.default_rng(0), batch_size=10, topk=3)
        assert cdl == again


def test_sweep_flags_the_frontier(tiny_config, tiny_dataset, tmp_path):
    configs = [tiny_config.model_copy(update={"lam": lam, "gamma": lam, "epochs": 1}) for lam in (0.0, 0.05)]
    rows = sweep(configs, tiny_dataset, tmp_path)
    assert [row.lam for row in rows] == [0.0, 0.05]
    assert any(row.on_frontier for row in rows)
    assert (tmp_path / "sweep.csv").exists()
    assert rows[1].run_dir == tmp_path / "rcdl_b4_lambda0.05_gamma0.05_seed7"
    assert (rows[1].run_dir / METRICS_CSV).exists()


def test_sweep_keeps_every_mode_apart(tiny_config, tiny_dataset, tmp_path):
    base = tiny_config.model_copy(update={"epochs": 1})
    configs = [base.model_copy(update={"mode": mode}) for mode in ("cdl", "rcdl")]
    rows = sweep(configs, tiny_dataset, tmp_path)
    assert [row.run_dir.name for row in rows] == [run_name(config) for config in configs]
    assert rows[0].run_dir != rows[1].run_dir
    assert rows[0].run_dir.name.startswith("cdl_b4_")
    assert all((row.run_dir / CHECKPOINT_FILE).exists() for row in rows)


class TestUpdate:
    def make_state(self, model, config):
        return TrainState(model=model, config=config, optimizer=MomentumSGD(config.momentum, config.weight_decay),
                          data_rng=np.random.default_rng(0), quant_rng=np.random.default_rng(1))

    def test_quantizer_parameters_move_in_log_space(self, quantized_model, tiny_dataset, tiny_config):
        x, y = tiny_dataset.train_x[:32], tiny_dataset.train_y[:32]
        before = [layer.quant.log_q for layer in quantized_model.weighted_layers()]
        result = objective_and_gradients(quantized_model, x, y, tiny_config)
        apply_update(self.make_state(quantized_model, tiny_config), result.grads)
        rates = base_rates(tiny_config)
        for layer, log_q, grads in zip(quantized_model.weighted_layers(), before, result.grads.layers):
            # first momentum step: the velocity is the log-space gradient q * dJ/dq
            expected = log_q - scaled_lr(layer.quant, "q", rates) * np.exp(log_q) * grads.q
            assert layer.quant.log_q == pytest.approx(expected, rel=1e-12, abs=1e-15)

    def test_fp_runs_leave_quantizers_alone(self, quantized_model, tiny_dataset, tiny_config):
        config = tiny_config.model_copy(update={"mode": "fp"})
        quant_before = [layer.quant for layer in quantized_model.weighted_layers()]
        snapshot = [(q.log_q, q.log_s, q.log_alpha, q.log_beta) for q in quant_before]
        result = objective_and_gradients(quantized_model, tiny_dataset.train_x[:8], tiny_dataset.train_y[:8], config)
        apply_update(self.make_state(quantized_model, config), result.grads)
        assert [(q.log_q, q.log_s, q.log_alpha, q.log_beta) for q in quant_before] == snapshot

    def test_train_epoch_counts_steps(self, quantized_model, tiny_dataset, tiny_config):
        state = self.make_state(quantized_model, tiny_config)
        loss, objective = train_epoch(state, tiny_dataset.train_x, tiny_dataset.train_y)
        assert state.step == 3
        assert objective >= loss > 0.0

    def test_zero_rates_change_nothing(self, quantized_model, tiny_dataset, tiny_config):
        rates = {name: 0.0 for name in ("lr_w", "lr_q", "lr_s", "lr_alpha", "lr_beta")}
        config = tiny_config.model_copy(update=rates)
        layers = quantized_model.weighted_layers()
        before = [(layer.weight.copy(), layer.bias.copy(), dataclasses.replace(layer.quant)) for layer in layers]
        result = objective_and_gradients(quantized_model, tiny_dataset.train_x[:32], tiny_dataset.train_y[:32], config)
        apply_update(self.make_state(quantized_model, config), result.grads)
        for layer, (weight, bias, quant) in zip(layers, before):
            assert np.array_equal(layer.weight, weight)
            assert np.array_equal(layer.bias, bias)
            assert layer.quant == quant
