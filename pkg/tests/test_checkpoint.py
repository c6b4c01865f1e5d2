import json

import numpy as np
import pytest

from read_forge import tensor as T
from read_forge.checkpoint import load_into, load_params, params_from_dict, params_to_dict, save_params
from read_forge.errors import CheckpointError
from read_forge.petl import MethodSpec, apply_method
from read_forge.read import ReadConfig


def test_round_trip_is_lossless(tmp_path, tiny_backbone):
    model = apply_method(tiny_backbone, MethodSpec("read", read=ReadConfig("gru", 8)), seed=1)
    rng = np.random.default_rng(0)
    for p in model.trainable().values():
        p.data = rng.standard_normal(p.shape) * 1e-3 + 1 / 3
    save_params(tmp_path / "p.json", model.trainable())
    loaded = load_params(tmp_path / "p.json")
    assert set(loaded) == set(model.trainable())
    for name, p in model.trainable().items():
        assert np.array_equal(loaded[name], p.data)


def test_layout(tmp_path):
    save_params(tmp_path / "p.json", {"b": np.arange(6.0).reshape(2, 3), "a": np.array(0.5)})
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["format"] == "read-forge-params" and doc["version"] == 1
    assert doc["params"]["b"] == {"shape": [2, 3], "data": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]}
    assert doc["params"]["a"] == {"shape": [], "data": [0.5]}


def test_load_into(tiny_backbone):
    target = {"w": T.parameter(np.zeros((2, 2)))}
    load_into(target, {"w": np.eye(2)})
    np.testing.assert_array_equal(target["w"].data, np.eye(2))
    with pytest.raises(CheckpointError):
        load_into(target, {"w": np.eye(3)})
    with pytest.raises(CheckpointError):
        load_into(target, {})
    load_into(target, {}, strict=False)


@pytest.mark.parametrize("doc", [
    {"format": "other", "version": 1, "params": {}},
    {"format": "read-forge-params", "version": 2, "params": {}},
    {"format": "read-forge-params", "version": 1, "params": {"w": {"shape": [3], "data": [1.0]}}},
    {"format": "read-forge-params", "version": 1, "params": {"w": {"data": [1.0]}}},
])
def test_malformed(doc):
    with pytest.raises(CheckpointError):
        params_from_dict(doc)


def test_non_finite_refused():
    with pytest.raises(CheckpointError):
        params_to_dict({"w": np.array([np.inf])})


def test_unreadable(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad.json")
