"""Tests for config resolution and the checkpoint format."""

import json

import numpy as np
import pytest

from protoreg import config as C
from protoreg.gradcheck import tiny_model
from protoreg.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from protoreg.prototypes import ProvenanceRecord

TINY_CFG = {
    "data": {
        "image_hw": [8, 8],
        "train_per_grade": 4,
        "test_per_grade": 2,
        "grades": 3,
        "blobs_per_grade": 1,
        "blob_radius": [1.5, 2.0],
    },
    "model": {
        "m": 3,
        "c_z": 4,
        "backbone_blocks": [[4, 3, 2], [4, 2, 1], [4, 1, 1]],
        "latent_hw": [2, 2],
    },
    "train": {
        "cycles": 1,
        "joint_epochs": 2,
        "lastlayer_epochs": 1,
        "warmup_epochs": 1,
        "batch_size": 6,
    },
}


class TestResolve:
    def test_defaults_fill(self):
        cfg = C.resolve_config()
        assert cfg == C.DEFAULTS

    def test_partial_override_keeps_rest(self):
        cfg = C.resolve_config({"loss": {"k": 1}})
        assert cfg["loss"]["k"] == 1
        assert cfg["loss"]["delta_l"] == C.DEFAULTS["loss"]["delta_l"]
        assert cfg["train"] == C.DEFAULTS["train"]

    def test_defaults_not_mutated(self):
        before = json.dumps(C.DEFAULTS, sort_keys=True)
        cfg = C.resolve_config({"model": {"m": 4}})
        cfg["model"]["m"] = 99
        cfg["data"]["seed"] = 99
        assert json.dumps(C.DEFAULTS, sort_keys=True) == before

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(C.ConfigError, match="unknown config key: optimizer"):
            C.resolve_config({"optimizer": {}})

    def test_unknown_nested_key_rejected_with_path(self):
        with pytest.raises(C.ConfigError, match="unknown config key: train.momentum"):
            C.resolve_config({"train": {"momentum": 0.9}})

    def test_section_must_be_object(self):
        with pytest.raises(C.ConfigError, match="section"):
            C.resolve_config({"train": 5})

    def test_invalid_values_rejected(self):
        with pytest.raises(C.ConfigError):
            C.resolve_config({"model": {"eps": 0.0}})
        with pytest.raises(C.ConfigError):
            C.resolve_config({"model": {"similarity": "cosine"}})
        with pytest.raises(C.ConfigError):
            C.resolve_config({"train": {"warmup_epochs": 99}})
        with pytest.raises(C.ConfigError):
            C.resolve_config({"data": {"grades": 1}})
        with pytest.raises(C.ConfigError):
            C.resolve_config({"loss": {"alpha_psd": -1.0}})

    def test_backbone_shape_mismatch_rejected(self):
        # blocks that do not land on the declared latent size must fail loudly
        with pytest.raises(C.ConfigError):
            C.resolve_config({"model": {"latent_hw": [7, 7]}})

    def test_tiny_cfg_resolves(self):
        cfg = C.resolve_config(TINY_CFG)
        assert cfg["model"]["m"] == 3
        bc = C.backbone_config_from(cfg)
        assert bc.latent_hw == (2, 2)


class TestLoadSave:
    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"loss": {"k": 2}}))
        cfg = C.load_config(path)
        assert cfg["loss"]["k"] == 2
        out = tmp_path / "resolved.json"
        C.save_config(cfg, out)
        assert json.loads(out.read_text()) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(C.ConfigError, match="not found"):
            C.load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(C.ConfigError, match="JSON"):
            C.load_config(path)

    def test_non_object_json(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(C.ConfigError, match="object"):
            C.load_config(path)

    def test_save_is_deterministic(self, tmp_path):
        cfg = C.resolve_config()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        C.save_config(cfg, a)
        C.save_config(cfg, b)
        assert a.read_bytes() == b.read_bytes()


def tiny_resolved_cfg():
    return C.resolve_config(TINY_CFG)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = tiny_model(seed=5)
        model.cursor = {"cycle": 0, "stage": "joint"}
        model.bank.provenance[1] = ProvenanceRecord(3, 1, 0, 0.25)
        cfg = tiny_resolved_cfg()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, path, cfg)
        back, cfg_back = load_checkpoint(path)
        assert cfg_back == cfg
        assert back.cursor == model.cursor
        assert back.similarity_kind == model.similarity_kind
        assert back.eps == model.eps
        for a, b in zip(model.params(), back.params()):
            assert np.array_equal(a.data, b.data)
        assert np.array_equal(back.bank.labels, model.bank.labels)
        assert back.bank.provenance[0] is None
        assert back.bank.provenance[1] == ProvenanceRecord(3, 1, 0, 0.25)

    def test_round_trip_predictions_bitwise(self, tmp_path):
        model = tiny_model(seed=6)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, path, tiny_resolved_cfg())
        back, _ = load_checkpoint(path)
        images = np.random.default_rng(0).uniform(size=(4, 3, 8, 8))
        assert np.array_equal(model.predict_np(images), back.predict_np(images))

    def test_save_is_byte_deterministic(self, tmp_path):
        model = tiny_model(seed=7)
        cfg = tiny_resolved_cfg()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(model, p1, cfg)
        save_checkpoint(model, p2, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXXX" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = tiny_model(seed=0)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, path, tiny_resolved_cfg())
        raw = bytearray(path.read_bytes())
        raw[5] = 99  # bump the little-endian version field
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        model = tiny_model(seed=0)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, path, tiny_resolved_cfg())
        raw = path.read_bytes()
        path.write_bytes(raw + b"\x00" * 8)  # trailing garbage
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"PRCK1"
