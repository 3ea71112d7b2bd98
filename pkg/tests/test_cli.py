"""End-to-end command-line workflows."""

import json

import numpy as np
import pytest

from dmad import banks as bk
from dmad import features as fs
from dmad.cli import main, resolve_config
from dmad.errors import ValidationError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small synthetic dataset plus a full unsupervised pipeline run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    spec = {
        "num_objects": 2, "train_normal": 8, "test_normal": 3, "test_anomalous": 3,
        "seen_anomalies": 3, "h0": 4, "w0": 4, "c": 6, "outlier_images": 3, "seed": 3,
    }
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    assert main(["synth-gen", "--spec", str(spec_path), "--out", str(data)]) == 0

    cfg = {
        "mode": "unsupervised",
        "paths": {
            "train_manifest": str(data / "train_manifest.json"),
            "test_manifest": str(data / "test_manifest.json"),
            "outlier_dir": str(data / "outliers"),
            "bank_dir": str(root / "banks"),
            "checkpoint": str(root / "model.dmckpt"),
            "report_dir": str(root / "report"),
        },
        "coreset": {"retention": 0.1, "seed": 1},
        "train": {"epochs": 2, "batch_size": 4, "seed": 5},
        "optimizer": {"lr_mlp": 2e-3, "lr_attn_proj": 1e-3},
        "augment": {"noise_std": 0.1, "seed": 7},
        "eval": {"blur_sigma": 2.0},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return root, data, cfg, cfg_path


class TestBuildBanks:
    def test_unsupervised_banks_written(self, workspace, capsys):
        root, data, cfg, cfg_path = workspace
        assert main(["build-banks", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "pseudo_outlier" in out
        normal = bk.load_bank(root / "banks" / "normal.dmbk")
        abnormal = bk.load_bank(root / "banks" / "abnormal.dmbk")
        assert normal.kind == "normal"
        assert set(abnormal.provenance) == {"pseudo_outlier"}
        assert (root / "banks" / "effective_config.json").is_file()

    def test_rerun_is_byte_identical(self, workspace):
        root, data, cfg, cfg_path = workspace
        bank_path = root / "banks" / "abnormal.dmbk"
        assert main(["build-banks", "--config", str(cfg_path)]) == 0
        first = bank_path.read_bytes()
        assert main(["build-banks", "--config", str(cfg_path)]) == 0
        assert bank_path.read_bytes() == first

    def test_semi_banks_carry_components(self, workspace, tmp_path):
        root, data, cfg, cfg_path = workspace
        semi = dict(cfg)
        semi["mode"] = "semi_supervised"
        semi["paths"] = dict(cfg["paths"], bank_dir=str(tmp_path / "banks"))
        semi_path = tmp_path / "semi.json"
        semi_path.write_text(json.dumps(semi))
        assert main(["build-banks", "--config", str(semi_path)]) == 0
        abnormal = bk.load_bank(tmp_path / "banks" / "abnormal.dmbk")
        assert set(abnormal.provenance) == {"pseudo_outlier", "seen_anomaly", "center_sampled"}
        assert (tmp_path / "banks" / "seen_anomaly.dmbk").is_file()
        assert (tmp_path / "banks" / "center_sampled.dmbk").is_file()


class TestTrainEvalScore:
    def test_train_writes_checkpoint_and_loss_log(self, workspace):
        root, data, cfg, cfg_path = workspace
        main(["build-banks", "--config", str(cfg_path)])
        assert main(["train", "--config", str(cfg_path)]) == 0
        assert (root / "model.dmckpt").is_file()
        loss_csv = (root / "model.loss.csv").read_text().splitlines()
        assert loss_csv[0] == "epoch,step,loss,term_n,term_p,term_a"
        assert len(loss_csv) > 2

    def test_eval_writes_reports_and_figures(self, workspace):
        root, data, cfg, cfg_path = workspace
        assert main(["eval", "--config", str(cfg_path)]) == 0
        report = json.loads((root / "report" / "report.json").read_text())
        assert set(report["objects"]) == {"object00", "object01"}
        for row in report["objects"].values():
            for value in row.values():
                assert value is None or 0.0 <= value <= 1.0
        csv_lines = (root / "report" / "report.csv").read_text().splitlines()
        assert csv_lines[0].startswith("object,image_auroc")
        assert csv_lines[-1].startswith("mean,")
        assert (root / "report" / "metrics_bars.png").is_file()
        assert (root / "report" / "score_histogram.png").is_file()

    def test_score_prints_image_score_and_writes_pixel_map(self, workspace, capsys, tmp_path):
        root, data, cfg, cfg_path = workspace
        manifest = fs.load_manifest(data / "test_manifest.json", "test")
        normal_entry = manifest.select(label="normal")[0]
        anom_entry = manifest.select(label="anomalous")[0]
        pm_path = tmp_path / "pm.dmft"
        assert main(
            ["score", "--config", str(cfg_path), "--feature", str(anom_entry.feature_path),
             "--pixel-map", str(pm_path)]
        ) == 0
        out_anom = capsys.readouterr().out
        assert main(["score", "--config", str(cfg_path), "--feature", str(normal_entry.feature_path)]) == 0
        out_norm = capsys.readouterr().out

        def score_of(text):
            return float(text.split("image score")[1].split()[0])

        assert score_of(out_anom) > score_of(out_norm)
        pm = fs.read_feature_file(pm_path)
        assert pm.c == 1
        grid = fs.read_feature_file(anom_entry.feature_path)
        assert (pm.h0, pm.w0) == (grid.source_h, grid.source_w)

    def test_missing_checkpoint_errors(self, workspace, tmp_path, capsys):
        root, data, cfg, cfg_path = workspace
        broken = dict(cfg)
        broken["paths"] = dict(cfg["paths"], checkpoint=str(tmp_path / "missing.dmckpt"))
        p = tmp_path / "broken.json"
        p.write_text(json.dumps(broken))
        assert main(["eval", "--config", str(p)]) == 1
        assert "missing.dmckpt" in capsys.readouterr().err


class TestInspectBank:
    def test_stats_match_independent_pass(self, workspace, capsys):
        root, data, cfg, cfg_path = workspace
        path = root / "banks" / "normal.dmbk"
        assert main(["inspect-bank", str(path), "--json"]) == 0
        info = json.loads(capsys.readouterr().out)
        bank = bk.load_bank(path)
        assert info["kind"] == "normal"
        assert info["rows"] == bank.k
        assert info["channels"] == bank.c
        mean = [float(np.mean([bank.rows[r][d] for r in range(bank.k)])) for d in range(bank.c)]
        std = [
            float(np.sqrt(np.mean([(bank.rows[r][d] - mean[d]) ** 2 for r in range(bank.k)])))
            for d in range(bank.c)
        ]
        assert np.allclose(info["dim_mean"], mean, atol=1e-9)
        assert np.allclose(info["dim_std"], std, atol=1e-9)

    def test_human_readable_lists_every_dimension(self, workspace, capsys):
        root, data, cfg, cfg_path = workspace
        assert main(["inspect-bank", str(root / "banks" / "normal.dmbk")]) == 0
        out = capsys.readouterr().out
        assert "kind: normal" in out
        assert out.count("dim ") == 6

    def test_corrupted_bank_fails_cleanly(self, workspace, tmp_path, capsys):
        root, data, cfg, cfg_path = workspace
        bad = tmp_path / "bad.dmbk"
        bad.write_bytes(b"NOPE" + b"\0" * 40)
        assert main(["inspect-bank", str(bad)]) == 1
        assert "error" in capsys.readouterr().err


class TestConfigResolution:
    def test_mode_defaults(self):
        unsup = resolve_config({"mode": "unsupervised"})
        assert unsup.loss.lambda1 == 1.0 and unsup.loss.lambda2 == 0.0
        assert unsup.knowledge.use_attention is True
        semi = resolve_config({"mode": "semi_supervised"})
        assert semi.loss.lambda1 == 0.5 and semi.loss.lambda2 == 15.0
        assert semi.knowledge.use_attention is False

    def test_semi_requires_positive_lambda2(self):
        with pytest.raises(ValidationError):
            resolve_config({"mode": "semi_supervised", "loss": {"lambda2": 0.0}})

    def test_unsupervised_rejects_abnormal_weight(self):
        with pytest.raises(ValidationError):
            resolve_config({"mode": "unsupervised", "loss": {"lambda2": 1.0}})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            resolve_config({"nonsense": 1})
        with pytest.raises(ValidationError):
            resolve_config({"coreset": {"nonsense": 1}})

    def test_master_seed_overrides_all_streams(self):
        a = resolve_config({}, seed=99)
        b = resolve_config({}, seed=99)
        c = resolve_config({}, seed=100)
        assert a.coreset.seed == b.coreset.seed
        assert a.train.seed == b.train.seed
        assert {a.coreset.seed, a.fusion.pair_seed, a.center_sampling.seed} != {
            c.coreset.seed, c.fusion.pair_seed, c.center_sampling.seed
        }

    def test_deterministic_forces_single_thread(self):
        cfg = resolve_config({"threads": 8}, deterministic=True)
        assert cfg.threads == 1

    def test_effective_config_round_trips(self, workspace):
        root, data, cfg, cfg_path = workspace
        echoed = json.loads((root / "banks" / "effective_config.json").read_text())
        again = resolve_config(echoed)
        assert again.coreset.retention == 0.1
        assert again.train.epochs == 2


class TestLogging:
    def test_invalid_log_level_falls_back(self, workspace, capsys, monkeypatch):
        root, data, cfg, cfg_path = workspace
        monkeypatch.setenv("DMAD_LOG", "bogus")
        assert main(["inspect-bank", str(root / "banks" / "normal.dmbk")]) == 0
        assert "unknown DMAD_LOG" in capsys.readouterr().err

    def test_debug_level_accepted(self, workspace, monkeypatch):
        root, data, cfg, cfg_path = workspace
        monkeypatch.setenv("DMAD_LOG", "debug")
        assert main(["inspect-bank", str(root / "banks" / "normal.dmbk")]) == 0
