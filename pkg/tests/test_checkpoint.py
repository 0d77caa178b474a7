from __future__ import annotations

import json

import numpy as np
import pytest

from app.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    CheckpointError,
    checkpoint_from_json,
    load_checkpoint,
    save_checkpoint,
)
from app.optim import AdamState
from app.training import TrainConfig, build_model, make_checkpoint, model_from_checkpoint


def _sample() -> Checkpoint:
    return Checkpoint(
        tensors={
            "frontend/cochlea.alpha": np.linspace(0.5, 1.5, 129),
            "frontend/cochlea.tau": np.array(8.0),
            "backend/classifier.head.weight": np.arange(6.0).reshape(2, 3),
        },
        config={"task": "classify"},
        step=12,
        seed=3,
    )


def test_save_and_load_preserve_values(tmp_path):
    path = save_checkpoint(tmp_path / "run" / "model.json", _sample())
    loaded = load_checkpoint(path)
    assert loaded.step == 12
    assert loaded.seed == 3
    assert loaded.version == FORMAT_VERSION
    assert loaded.config == {"task": "classify"}
    np.testing.assert_array_equal(loaded.tensors["frontend/cochlea.alpha"], np.linspace(0.5, 1.5, 129))
    assert loaded.tensors["frontend/cochlea.tau"].shape == ()
    assert loaded.group("backend/")["classifier.head.weight"].shape == (2, 3)


def test_text_is_stable():
    assert _sample().to_json() == _sample().to_json()
    assert _sample().to_json().endswith("}\n")


def _payload() -> dict:
    return json.loads(_sample().to_json())


def test_rejects_other_versions():
    payload = _payload()
    payload["format_version"] = 2
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_json(json.dumps(payload))


def test_rejects_corrupted_data():
    payload = _payload()
    payload["tensors"][0]["data"] = "@@not base64@@"
    with pytest.raises(CheckpointError, match="base64"):
        checkpoint_from_json(json.dumps(payload))

    payload = _payload()
    payload["tensors"][2]["shape"] = [3, 3]
    with pytest.raises(CheckpointError, match="needs 9"):
        checkpoint_from_json(json.dumps(payload))


def test_rejects_wrong_frontend_geometry():
    ckpt = _sample()
    ckpt.tensors["frontend/cochlea.alpha"] = np.ones(128)
    with pytest.raises(CheckpointError, match="expected"):
        checkpoint_from_json(ckpt.to_json())


def test_rejects_missing_fields_and_files(tmp_path):
    payload = _payload()
    del payload["step"]
    with pytest.raises(CheckpointError, match="step"):
        checkpoint_from_json(json.dumps(payload))
    with pytest.raises(CheckpointError):
        checkpoint_from_json("not json")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.json")


def test_training_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(task="classify", n_classes=3)
    model = build_model(cfg)
    ckpt = make_checkpoint(model, cfg, AdamState(), step=0)
    text = ckpt.to_json()
    tau = next(item for item in json.loads(text)["tensors"] if item["name"] == "frontend/cochlea.tau")
    assert tau["shape"] == []

    loaded = load_checkpoint(save_checkpoint(tmp_path / "model.json", ckpt))
    assert loaded.to_json() == text
    restored, _ = model_from_checkpoint(loaded)
    assert restored.frontend.cochlea.tau.value.shape == ()
