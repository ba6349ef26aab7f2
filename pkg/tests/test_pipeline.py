import dataclasses
import json

import numpy as np
import pytest

from demrep import cli, nn, pipeline
from demrep.errors import ConfigError
from demrep.manifest import read_manifest, stable_seed


def tiny_config(seed=404):
    cfg = pipeline.PipelineConfig(master_seed=seed)
    cfg.syngen.pretrain = dataclasses.replace(
        cfg.syngen.pretrain, n_patients=220, visits_mean=6.0)
    cfg.syngen.overrides = {
        "pneumonia_like": {"n": 80, "n_noise_features": 6, "missing_rate": 0.08},
        "osteoporosis_like": {"n": 260, "n_noise_features": 5},
        "thyroid_like": {"n": 120, "n_noise_features": 6},
    }
    cfg.pretrain = dataclasses.replace(cfg.pretrain, epochs=4, hidden_dim=12,
                                       embed_dim=4, d_model=8)
    cfg.embedder = dataclasses.replace(cfg.embedder, fallback_dim=8)
    cfg.downstream = dataclasses.replace(cfg.downstream, min_samples_leaf=10,
                                         n_estimators=15)
    cfg.tsne = dataclasses.replace(cfg.tsne, iterations=120, max_points=64)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    pipeline.run_syngen(cfg, out)
    pipeline.run_pretrain(cfg, out, ["ns-trad", "seq-trad"])
    results = pipeline.run_downstream(cfg, out, ["ns-trad", "seq-trad"])
    return cfg, out, results


class TestConfig:
    def test_defaults_without_file(self):
        cfg = pipeline.load_config(None)
        assert cfg.downstream.bootstrap_reps == 50
        assert cfg.downstream.n_estimators == 50
        assert cfg.downstream.learning_rate == 0.1
        assert cfg.pretrain.frame_len == 120
        assert cfg.tsne.perplexity == 5.0

    def test_yaml_round(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("master_seed: 9\npretrain:\n  epochs: 3\n"
                     "downstream:\n  frame_scope: patient\n")
        cfg = pipeline.load_config(p)
        assert cfg.master_seed == 9
        assert cfg.pretrain.epochs == 3
        assert cfg.downstream.frame_scope == "patient"

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("pretrain:\n  epochz: 3\n")
        with pytest.raises(ConfigError, match="epochz"):
            pipeline.load_config(p)

    def test_missing_config_file(self):
        with pytest.raises(ConfigError):
            pipeline.load_config("/nonexistent.yaml")

    def test_parse_cells(self):
        assert pipeline.parse_cells("ns-trad, seq-pe") == ["ns-trad", "seq-pe"]
        assert pipeline.parse_cells(None) == pipeline.CELL_IDS
        with pytest.raises(ConfigError):
            pipeline.parse_cells("seq-onehot")


class TestSeeds:
    def test_stable_seed_deterministic_and_distinct(self):
        a = stable_seed(1, "init", "ns-trad")
        assert a == stable_seed(1, "init", "ns-trad")
        assert a != stable_seed(1, "init", "ns-pe")
        assert a != stable_seed(2, "init", "ns-trad")


class TestSyngenCommand:
    def test_outputs_exist(self, tiny_run):
        _, out, _ = tiny_run
        for name in ("pretrain.csv", "pneumonia_like.csv", "osteoporosis_like.csv",
                     "thyroid_like.csv", "stats.json"):
            assert (out / "data" / name).exists()
        stats = json.loads((out / "data" / "stats.json").read_text())
        assert set(stats) == {"pretrain", "pneumonia_like", "osteoporosis_like", "thyroid_like"}

    def test_manifest_records_outputs(self, tiny_run):
        _, out, _ = tiny_run
        entries = read_manifest(out)
        syngen_entries = [e for e in entries if e["command"] == "syngen"]
        assert syngen_entries
        assert "pretrain.csv" in syngen_entries[0]["output_hashes"]
        assert syngen_entries[0]["manifest_hash"]


class TestPretrainCommand:
    def test_models_written_and_loadable(self, tiny_run):
        cfg, out, _ = tiny_run
        for cell in ("ns-trad", "seq-trad"):
            model = nn.load_model(out / "models" / f"{cell}.model.txt")
            assert model.embed_dim == cfg.pretrain.embed_dim
        entries = [e for e in read_manifest(out) if e["command"] == "pretrain"]
        assert any("held-out" in note for note in entries[0]["notes"])

    def test_missing_input_no_partial_outputs(self, tmp_path):
        cfg = tiny_config()
        with pytest.raises(Exception, match="not found"):
            pipeline.run_pretrain(cfg, tmp_path, ["ns-trad"])
        assert not (tmp_path / "models").exists()

    def test_rerun_identical_model_files(self, tmp_path):
        cfg = tiny_config(seed=505)
        pipeline.run_syngen(cfg, tmp_path)
        pipeline.run_pretrain(cfg, tmp_path, ["seq-trad"])
        first = (tmp_path / "models" / "seq-trad.model.txt").read_bytes()
        pipeline.run_pretrain(cfg, tmp_path, ["seq-trad"])
        second = (tmp_path / "models" / "seq-trad.model.txt").read_bytes()
        assert first == second


class TestDownstreamCommand:
    def test_report_structure(self, tiny_run):
        _, out, results = tiny_run
        assert len(results) == 3
        for result in results:
            assert set(result["cells"]) == {"baseline", "ns-trad", "seq-trad"}
            for cell, entry in result["cells"].items():
                assert len(entry["auroc"]["replicates"]) == 50
                assert len(entry["ece"]["replicates"]) == 50
            # baseline keeps raw demographics; GDP cells replace them
            assert result["cells"]["baseline"]["demographic_features"] == ["age", "gender"]
            assert all(f.startswith("gdp_") for f in
                       result["cells"]["seq-trad"]["demographic_features"])
            assert not any(f.startswith("gdp_") for f in
                           result["cells"]["baseline"]["gains"])

    def test_tests_reference_existing_cells(self, tiny_run):
        _, out, results = tiny_run
        for result in results:
            for t in result["tests"]:
                assert t["a"] in result["cells"] and t["b"] in result["cells"]
                assert 0.0 <= t["p"] <= 1.0
                assert t["significant"] == (t["p"] < 0.05)

    def test_report_text_layout(self, tiny_run):
        _, out, _ = tiny_run
        text = (out / "reports" / "osteoporosis_like.report.txt").read_text()
        assert "AUROC" in text and "ECE" in text
        assert "baseline" in text and "Seq" in text and "NS" in text
        assert "demographic gain share" in text
        assert "frame scope (downstream): cohort" in text

    def test_gainshare_csv(self, tiny_run):
        _, out, _ = tiny_run
        lines = (out / "reports" / "gain_shares.csv").read_text().splitlines()
        assert lines[0] == "dataset,cell,demographic_share_pct,manifest"
        assert len(lines) > 3

    def test_metrics_csv(self, tiny_run):
        _, out, _ = tiny_run
        lines = (out / "reports" / "osteoporosis_like.metrics.csv").read_text().splitlines()
        assert lines[0] == "dataset,cell,metric,mean,ci_low,ci_high,p_vs_baseline,manifest"
        assert any(line.startswith("osteoporosis_like,seq-trad,auroc") for line in lines)

    def test_ledger_csvs(self, tiny_run):
        _, out, _ = tiny_run
        path = out / "reports" / "ledgers" / "osteoporosis_like.baseline.ledger.csv"
        assert path.exists()
        assert path.read_text().splitlines()[0] == "feature,gain,share_pct"

    def test_missing_model_is_config_error(self, tiny_run):
        cfg, out, _ = tiny_run
        with pytest.raises(ConfigError, match="ns-pe"):
            pipeline.run_downstream(cfg, out, ["ns-pe"])

    def test_report_command_renders(self, tiny_run):
        cfg, out, _ = tiny_run
        combined = pipeline.run_report(cfg, out)
        assert "osteoporosis_like" in combined
        assert (out / "reports" / "combined_report.txt").exists()


class TestFormatP:
    def test_flooring_and_stars(self):
        assert pipeline.format_p(0.0001) == "<0.001*"
        assert pipeline.format_p(0.0123) == "0.012*"
        assert pipeline.format_p(0.2) == "0.200"
        assert pipeline.format_p(0.05) == "0.050"


class TestEmbedCommand:
    def test_embedding_csvs(self, tiny_run):
        cfg, out, _ = tiny_run
        written = pipeline.run_embed(cfg, out, ["seq-trad"])
        assert len(written) == 3
        header = written[0].read_text().splitlines()[0]
        assert header.startswith("patient_id,gdp_0")


class TestTsneCommand:
    def test_coordinate_files(self, tmp_path):
        cfg = tiny_config(seed=606)
        cfg.downstream = dataclasses.replace(cfg.downstream, datasets=[])
        cfg.syngen.profiles = ["thyroid_like"]
        pipeline.run_syngen(cfg, tmp_path)
        pipeline.run_pretrain(cfg, tmp_path, ["seq-trad"])
        written = pipeline.run_tsne(cfg, tmp_path, ["seq-trad"])
        assert len(written) == 2  # original + one cell
        for path in written:
            lines = path.read_text().splitlines()
            assert lines[0] == "row_id,label,dim1,dim2,approach,encoding"
            values = [line.split(",") for line in lines[1:]]
            assert all(np.isfinite(float(v[2])) and np.isfinite(float(v[3]))
                       for v in values)

    def test_infeasible_perplexity_suggests_value(self, tmp_path):
        cfg = tiny_config(seed=707)
        cfg.tsne = dataclasses.replace(cfg.tsne, perplexity=50.0, max_points=40)
        cfg.syngen.profiles = ["thyroid_like"]
        pipeline.run_syngen(cfg, tmp_path)
        pipeline.run_pretrain(cfg, tmp_path, ["ns-trad"])
        with pytest.raises(ConfigError, match="perplexity"):
            pipeline.run_tsne(cfg, tmp_path, ["ns-trad"])


class TestCliExitCodes:
    def test_success(self, tmp_path, capsys):
        config = tmp_path / "c.yaml"
        config.write_text(
            "syngen:\n  pretrain: {n_patients: 60, visits_mean: 4.0}\n"
            "  overrides:\n    thyroid_like: {n: 60, n_noise_features: 4}\n"
            "  profiles: [thyroid_like]\n")
        code = cli.main(["syngen", "--config", str(config), "--seed", "5",
                        "--out", str(tmp_path / "o")])
        assert code == 0
        assert "thyroid_like" in capsys.readouterr().out

    def test_config_error_is_2(self, tmp_path):
        code = cli.main(["pretrain", "--out", str(tmp_path), "--cells", "bogus"])
        assert code == 2

    def test_data_error_is_3(self, tmp_path):
        code = cli.main(["pretrain", "--out", str(tmp_path)])
        assert code == 3

    def test_unknown_config_key_is_2(self, tmp_path):
        config = tmp_path / "c.yaml"
        config.write_text("nonsense: 1\n")
        code = cli.main(["syngen", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 2
