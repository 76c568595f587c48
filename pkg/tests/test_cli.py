"""End-to-end tests of the command line surface on a tiny configuration."""

import json

import numpy as np
import pytest

from protoreg.cli import main
from protoreg.data import load_dataset
from protoreg.model import load_checkpoint

TINY_CFG = {
    "data": {
        "image_hw": [8, 8],
        "train_per_grade": 6,
        "test_per_grade": 3,
        "grades": 2,
        "blobs_per_grade": 1,
        "blob_radius": [1.0, 1.3],
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


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen-data + train once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CFG))
    data_dir, run_dir = root / "data", root / "run"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(data_dir),
                 "--out", str(run_dir)]) == 0
    return root


class TestGenData:
    def test_artifacts(self, workdir):
        data_dir = workdir / "data"
        assert (data_dir / "train.insd").exists()
        assert (data_dir / "test.insd").exists()
        cfg = json.loads((data_dir / "resolved_config.json").read_text())
        assert cfg["model"]["m"] == 3
        train = load_dataset(data_dir / "train.insd")
        assert len(train) == 12  # 2 grades x 6 per grade
        assert len(load_dataset(data_dir / "test.insd")) == 6

    def test_continuous_mode(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        overrides = json.loads(json.dumps(TINY_CFG))
        overrides["data"]["continuous"] = True
        cfg_path.write_text(json.dumps(overrides))
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
        train = load_dataset(out / "train.insd")
        assert train.label_mode == "continuous"
        assert not np.array_equal(train.y, train.y_categorical)

    def test_deterministic_bytes(self, workdir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY_CFG))
        out = tmp_path / "data2"
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "train.insd").read_bytes() == \
            (workdir / "data" / "train.insd").read_bytes()


class TestTrain:
    def test_artifacts(self, workdir):
        run = workdir / "run"
        assert (run / "checkpoint.bin").exists()
        # per-stage checkpoints: 1 cycle x (joint, projection, lastlayer)
        for stage in ("joint", "projection", "lastlayer"):
            assert (run / f"checkpoint_c0_{stage}.bin").exists()
        log = (run / "training_log.csv").read_text().strip().splitlines()
        assert log[0] == "cycle,stage,epoch,mse,clst,psd,total"
        assert len(log) == 1 + 2 + 1  # header + joint(incl. warmup) + lastlayer
        projections = json.loads((run / "projection_report.json").read_text())
        assert len(projections) == 1
        assert len(projections[0]["prototypes"]) == 3

    def test_final_checkpoint_is_projected_model(self, workdir):
        model, _ = load_checkpoint(workdir / "run" / "checkpoint.bin")
        assert model.bank.projected
        assert model.cursor == {"cycle": 0, "stage": "lastlayer"}

    def test_retrain_byte_identical(self, workdir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY_CFG))
        out = tmp_path / "run2"
        assert main(["train", "--config", str(cfg_path),
                     "--data", str(workdir / "data"), "--out", str(out)]) == 0
        assert (out / "checkpoint.bin").read_bytes() == \
            (workdir / "run" / "checkpoint.bin").read_bytes()
        assert (out / "training_log.csv").read_text() == \
            (workdir / "run" / "training_log.csv").read_text()


class TestEval:
    def test_metrics_json(self, workdir):
        out = workdir / "eval"
        assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                     "--data", str(workdir / "data"), "--out", str(out)]) == 0
        result = json.loads((out / "metrics.json").read_text())
        assert set(result) == {"mae", "accuracy", "s_spars_mean", "diversity",
                               "n_samples"}
        assert result["n_samples"] == 6
        per_sample = (out / "per_sample.csv").read_text().strip().splitlines()
        assert per_sample[0] == "sample_id,y,y_hat,abs_err,s_spars"
        assert len(per_sample) == 7

    def test_eval_deterministic_bytes(self, workdir, tmp_path):
        out2 = tmp_path / "eval2"
        assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                     "--data", str(workdir / "data"), "--out", str(out2)]) == 0
        assert (out2 / "metrics.json").read_bytes() == \
            (workdir / "eval" / "metrics.json").read_bytes()


class TestExplain:
    def test_artifacts(self, workdir):
        out = workdir / "explain"
        assert main(["explain", "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                     "--data", str(workdir / "data"), "--sample-ids", "0,3",
                     "--out", str(out)]) == 0
        for sid in (0, 3):
            doc = json.loads((out / f"explanation_{sid}.json").read_text())
            assert doc["projected"] is True
            assert len(doc["records"]) == 3
            for rec in doc["records"]:
                assert rec["provenance"] is not None
                pgm = (out / rec["activation_map_file"]).read_bytes()
                assert pgm.startswith(b"P5\n8 8\n255\n")

    def test_out_of_range_sample(self, workdir, tmp_path, capsys):
        rc = main(["explain", "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                   "--data", str(workdir / "data"), "--sample-ids", "99",
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "out of range" in capsys.readouterr().err


class TestEmbed:
    def test_artifacts(self, workdir):
        out = workdir / "embed"
        assert main(["embed", "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                     "--data", str(workdir / "data"), "--out", str(out)]) == 0
        csv = (out / "embedding.csv").read_text().strip().splitlines()
        assert csv[0] == "id,kind,x,y,label"
        kinds = [line.split(",")[1] for line in csv[1:]]
        assert kinds.count("prototype") == 3
        assert kinds.count("sample") > 0
        assert (out / "embedding.svg").read_text().startswith("<svg")
        assert (out / "usage_histogram.svg").read_text().startswith("<svg")


class TestAblate:
    def test_matrix(self, workdir):
        out = workdir / "ablate"
        assert main(["ablate", "--config", str(workdir / "data" / "resolved_config.json"),
                     "--data", str(workdir / "data"), "--out", str(out),
                     "--seeds", "1"]) == 0
        csv = (out / "ablation.csv").read_text().strip().splitlines()
        assert len(csv) == 1 + 6  # header + 6 variants x 1 seed
        variants = {line.split(",")[0] for line in csv[1:]}
        assert variants == {"base", "log_similarity", "no_psd", "no_clst",
                            "no_clst_no_psd", "k1"}
        assert (out / "ablation.md").read_text().startswith("|")


class TestGradCheckCommand:
    def test_passes(self, capsys):
        assert main(["grad-check"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) >= 5
        assert all(line.startswith("PASS") for line in lines)


class TestErrors:
    def test_missing_dataset(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_bad_checkpoint(self, tmp_path, capsys):
        ckpt = tmp_path / "ckpt.bin"
        ckpt.write_bytes(b"garbage")
        rc = main(["eval", "--checkpoint", str(ckpt),
                   "--data", str(tmp_path), "--out", str(tmp_path / "out")])
        assert rc == 2
