"""Tests for npz checkpoints."""

import json

import numpy as np
import pytest

from stemcast.checkpoint import META_KEY, load_checkpoint, save_checkpoint
from stemcast.config import ModelConfig
from stemcast.errors import DataError
from stemcast.models import architecture_for, build_model

META = {"seed": 5, "norm": {"names": ["x"], "mins": [0.0], "maxs": [1.0]}}


def _model(family="wt-ed-lstm-am", seed=5):
    config = ModelConfig(family=family, encoder_sizes=(3, 2), predictor_hidden=3, gru_sizes=(3, 3), mlp_hidden=(4,))
    return build_model(architecture_for(config, 2, 4), seed)


class TestCheckpoint:
    @pytest.mark.parametrize("family", ["wt-ed-lstm-am", "wt-ed-lstm", "gru", "mlp", "persistence"])
    def test_round_trip(self, tmp_path, family):
        model = _model(family)
        save_checkpoint(tmp_path / "m.npz", model, META)
        loaded, meta = load_checkpoint(tmp_path / "m.npz")
        assert loaded.family == family
        assert meta["seed"] == 5 and meta["norm"] == META["norm"]
        assert meta["architecture"] == json.loads(json.dumps(model.architecture))
        inputs = np.random.default_rng(0).uniform(0, 1, (3, 4, 2))
        np.testing.assert_array_equal(loaded.predict(inputs), model.predict(inputs))

    def test_trained_values_survive(self, tmp_path):
        model = _model()
        state = model.state_dict()
        state["head.b_s"] = np.array([0.123456789])
        model.load_state_dict(state)
        save_checkpoint(tmp_path / "m.npz", model, META)
        loaded, _ = load_checkpoint(tmp_path / "m.npz")
        assert loaded.state_dict()["head.b_s"][0] == 0.123456789

    def test_explicit_state(self, tmp_path):
        model, other = _model(seed=5), _model(seed=6)
        save_checkpoint(tmp_path / "best.npz", model, META, state=other.state_dict())
        loaded, _ = load_checkpoint(tmp_path / "best.npz")
        for name, values in other.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], values)

    def test_byte_identical(self, tmp_path):
        save_checkpoint(tmp_path / "a.npz", _model(), META)
        save_checkpoint(tmp_path / "b.npz", _model(), META)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.npz")

    def test_not_a_checkpoint(self, tmp_path):
        np.savez(tmp_path / "plain.npz", x=np.zeros(3))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "plain.npz")

    def test_unknown_architecture(self, tmp_path):
        meta = {"architecture": {"family": "transformer"}}
        np.savez(tmp_path / "odd.npz", **{META_KEY: np.array(json.dumps(meta))})
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "odd.npz")

    def test_parameter_mismatch(self, tmp_path):
        model = _model()
        state = model.state_dict()
        state.pop("head.b_s")
        save_checkpoint(tmp_path / "cut.npz", model, META, state=state)
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "cut.npz")
