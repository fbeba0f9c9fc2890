import struct

import numpy as np
import pytest

from cdl.net.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint
from cdl.net.model import Mode, build_model, forward
from cdl.train import init_quant_params


@pytest.fixture
def cnn(rng):
    model = build_model("cnn", (1, 12, 12), 4, rng, bits=5)
    init_quant_params(model, rng.normal(size=(6, 1, 12, 12)), 5)
    return model


def test_round_trip_is_byte_identical(cnn):
    data = checkpoint_bytes(cnn, {"config": {"seed": 3}, "epoch": 2})
    restored, metadata = model_from_bytes(data)
    assert metadata == {"config": {"seed": 3}, "epoch": 2}
    assert checkpoint_bytes(restored, metadata) == data


def test_parameters_survive_bit_for_bit(cnn, rng):
    restored, _ = model_from_bytes(checkpoint_bytes(cnn))
    for original, loaded in zip(cnn.weighted_layers(), restored.weighted_layers()):
        assert original.name == loaded.name
        assert np.array_equal(original.weight, loaded.weight)
        assert np.array_equal(original.bias, loaded.bias)
        assert loaded.quant == original.quant
        assert loaded.exempt_8bit == original.exempt_8bit
    x = rng.normal(size=(3, 1, 12, 12))
    assert np.array_equal(forward(cnn, x, Mode.RCDL).logits, forward(restored, x, Mode.RCDL).logits)


def test_model_without_quantizer_state(rng):
    model = build_model("mlp", (1, 4, 4), 3, rng, hidden=5)
    restored, metadata = model_from_bytes(checkpoint_bytes(model))
    assert metadata == {}
    assert not restored.has_quant_params()
    assert restored.input_shape == (1, 4, 4)


def test_save_and_load(cnn, tmp_path):
    path = tmp_path / "nested" / "model.ckpt"
    save_checkpoint(cnn, path, {"note": "x"})
    restored, metadata = load_checkpoint(path)
    assert metadata == {"note": "x"}
    assert restored.parameter_count() == cnn.parameter_count()
    assert not list(path.parent.glob("*.tmp"))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.parametrize("mutate", [
    lambda data: b"XXXX" + data[4:],
    lambda data: data[:4] + struct.pack("<H", 9) + data[6:],
    lambda data: data[:-10],
    lambda data: data + b"\x00",
])
def test_malformed_bytes(cnn, mutate):
    with pytest.raises(CheckpointError):
        model_from_bytes(mutate(checkpoint_bytes(cnn)))
