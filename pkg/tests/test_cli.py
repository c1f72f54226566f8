import json
from pathlib import Path

import numpy as np
import pytest

from mfcontrol.cli import (
    LQ_DEFAULTS,
    load_config,
    lq_params_from_config,
    main,
    resolve_config,
    run_dump_riccati,
    run_lq_benchmark,
    run_portfolio,
    run_quantize_cache,
)


def tiny_lq_config(tmp_path, **overrides):
    cfg = {
        "schema": "v1",
        "kind": "lq_benchmark",
        "seed": 7,
        "output_dir": str(tmp_path / "out"),
        "lq": {
            "grid_sizes": [2],
            "n_mc": 500,
            "init_mc": 5000,
            "codebook_max": 16,
            "codebook_level_cap": 16,
        },
    }
    cfg["lq"].update(overrides)
    return resolve_config(cfg)


def tiny_portfolio_config(tmp_path, **overrides):
    cfg = {
        "schema": "v1",
        "kind": "portfolio",
        "seed": 11,
        "output_dir": str(tmp_path / "out"),
        "portfolio": {
            "risk_aversions": [2.0, 16.0],
            "n_paths": [250],
            "n_mc": 500,
            "init_mc": 1000,
            "pilot_paths": 2000,
            "codebook_max": 16,
            "codebook_level_cap": 16,
        },
    }
    cfg["portfolio"].update(overrides)
    return resolve_config(cfg)


class TestConfig:
    def test_defaults_filled(self):
        cfg = resolve_config({"kind": "lq_benchmark"})
        for key in LQ_DEFAULTS:
            assert key in cfg["lq"]
        assert cfg["seed"] == 0

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            resolve_config({"kind": "lq_benchmark", "lq": {"bogus": 1}})

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            resolve_config({"kind": "mystery"})

    def test_toml_loading(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text('schema = "v1"\nkind = "lq_benchmark"\nseed = 3\n')
        raw = load_config(path)
        assert raw["seed"] == 3

    def test_schema_guard(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"schema": "v99", "kind": "lq_benchmark"}')
        with pytest.raises(ValueError, match="schema"):
            load_config(path)

    def test_params_roundtrip(self):
        cfg = resolve_config({"kind": "lq_benchmark"})
        params = lq_params_from_config(cfg["lq"])
        assert params.dim == 2
        assert params.horizon == 3
        np.testing.assert_array_equal(
            params.control_gain[0], [[1.0, 1.0], [0.0, 1.0]]
        )


class TestLQBenchmarkVerb:
    def test_outputs_written(self, tmp_path):
        cfg = tiny_lq_config(tmp_path)
        report = run_lq_benchmark(cfg)
        out = Path(cfg["output_dir"])
        assert (out / "lq_benchmark.csv").exists()
        assert (out / "lq_benchmark_plot.csv").exists()
        assert (out / "lq_benchmark.json").exists()
        assert report["rows"][0]["status"] == "ok"
        assert report["reference_value"] == pytest.approx(8.0, abs=1e-9)
        assert report["provenance"]["config_hash"]
        text = (out / "lq_benchmark.csv").read_text()
        assert report["provenance"]["config_hash"] in text

    def test_infeasible_size_marked_skipped(self, tmp_path):
        cfg = tiny_lq_config(tmp_path, codebook_max=0)
        report = run_lq_benchmark(cfg)
        assert report["rows"][0]["status"] == "skipped"
        assert "max_codewords" in report["rows"][0]["reason"]

    def test_rerun_is_bitwise_identical(self, tmp_path):
        cfg = tiny_lq_config(tmp_path)
        run_lq_benchmark(cfg, out_dir=tmp_path / "a")
        run_lq_benchmark(cfg, out_dir=tmp_path / "b")
        for name in ("lq_benchmark.csv", "lq_benchmark_plot.csv", "lq_benchmark.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()


class TestPortfolioVerb:
    def test_outputs_and_identity(self, tmp_path):
        cfg = tiny_portfolio_config(tmp_path)
        report = run_portfolio(cfg)
        out = Path(cfg["output_dir"])
        assert (out / "portfolio.json").exists()
        assert (out / "portfolio_gamma2_paths250.csv").exists()
        for table in report["tables"]:
            gamma = table["risk_aversion"]
            for col in table["columns"].values():
                want = 0.5 * gamma * col["var_terminal"] - col["mean_terminal"]
                assert col["criterion"] == want  # identity holds exactly

    def test_table_layout(self, tmp_path):
        cfg = tiny_portfolio_config(tmp_path)
        run_portfolio(cfg)
        out = Path(cfg["output_dir"])
        lines = (out / "portfolio_gamma2_paths250.csv").read_text().splitlines()
        assert lines[0] == "statistic,proposed,buy_and_hold,trending"
        stats = [line.split(",")[0] for line in lines[1:4]]
        assert stats == ["mean_terminal", "var_terminal", "criterion"]

    def test_rerun_is_bitwise_identical(self, tmp_path):
        cfg = tiny_portfolio_config(tmp_path)
        run_portfolio(cfg, out_dir=tmp_path / "a")
        run_portfolio(cfg, out_dir=tmp_path / "b")
        for path in sorted((tmp_path / "a").iterdir()):
            twin = tmp_path / "b" / path.name
            assert path.read_bytes() == twin.read_bytes()


class TestOtherVerbs:
    def test_dump_riccati(self, tmp_path):
        cfg = tiny_lq_config(tmp_path)
        payload = run_dump_riccati(cfg)
        assert payload["value_at_standard_initial"] == pytest.approx(8.0, abs=1e-9)
        dumped = json.loads((Path(cfg["output_dir"]) / "riccati.json").read_text())
        assert len(dumped["solution"]["quad_coeff"]) == 4

    def test_quantize_cache(self, tmp_path):
        cfg = tiny_lq_config(tmp_path)
        payload = run_quantize_cache(cfg)
        out = Path(cfg["output_dir"])
        cache_files = list(out.glob("cache_*.json"))
        assert len(cache_files) == 1
        assert payload["provenance"]["config_hash"] in cache_files[0].name
        assert "2" in payload["codebooks"]

    def test_main_entry(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "schema": "v1",
                    "kind": "lq_benchmark",
                    "seed": 1,
                    "lq": {
                        "grid_sizes": [2],
                        "n_mc": 200,
                        "init_mc": 2000,
                        "codebook_max": 8,
                        "codebook_level_cap": 8,
                    },
                }
            )
        )
        rc = main(
            [
                "bench-lq",
                "--config",
                str(cfg_path),
                "--out",
                str(tmp_path / "cli_out"),
                "--seed",
                "2",
                "--mode",
                "cd",
            ]
        )
        assert rc == 0
        report = json.loads((tmp_path / "cli_out" / "lq_benchmark.json").read_text())
        assert report["provenance"]["seed"] == 2
        assert report["provenance"]["config"]["lq"]["optimizer_mode"] == "coordinate_descent"


class TestMeanFieldLQThroughCLI:
    def test_mean_field_gain_pipeline(self, tmp_path):
        # Nonzero mean-field gain exercises the law-keyed kernel cache
        # through the full benchmark pipeline.
        cfg = tiny_lq_config(
            tmp_path,
            mean_gain=[[0.4, 0.0], [0.0, 0.4]],
            grid_sizes=[2],
            n_mc=300,
            init_mc=2000,
        )
        report = run_lq_benchmark(cfg)
        row = report["rows"][0]
        assert row["status"] == "ok"
        assert np.isfinite(row["quantized_value"])
        # With zero state gain the mean-field term cannot move the value at
        # the centered initial law; the closed form stays at 8.
        assert row["reference_value"] == pytest.approx(8.0, abs=1e-9)
