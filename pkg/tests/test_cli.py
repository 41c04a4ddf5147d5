import json

import numpy as np
import pytest

from adanode.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from adanode.shiftgen import read_dataset


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestArgHandling:
    def test_unknown_flag_is_a_usage_error(self, capsys):
        code, _, err = run(capsys, "gen", "--nope")
        assert code == EXIT_USAGE
        assert "error" in err

    def test_missing_subcommand(self, capsys):
        code, _, _ = run(capsys)
        assert code == EXIT_USAGE

    def test_bad_choice(self, capsys):
        code, _, _ = run(capsys, "gen", "--signal", "square", "--severity", "0",
                         "--out", "x.csv")
        assert code == EXIT_USAGE

    def test_glyph_rejects_1d_shifts(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen", "--signal", "glyph", "--shift", "ampfreq",
                           "--severity", "0", "--out", str(tmp_path / "g.csv"))
        assert code == EXIT_USAGE
        assert "dt" in err

    def test_1d_needs_a_shift(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gen", "--signal", "sine",
                         "--severity", "0", "--out", str(tmp_path / "s.csv"))
        assert code == EXIT_USAGE


class TestGen:
    def test_writes_a_readable_dataset(self, capsys, tmp_path):
        out = tmp_path / "ds.csv"
        code, _, _ = run(capsys, "gen", "--signal", "sine", "--shift", "ampfreq",
                         "--severity", "2", "--out", str(out),
                         "--n-series", "3", "--context-len", "6",
                         "--horizon-len", "4", "--seed", "5")
        assert code == EXIT_OK
        ds = read_dataset(out)
        assert len(ds.windows) == 3
        assert len(ds.windows[0].t_context) == 6
        assert len(ds.windows[0].t_target) == 4

    def test_deterministic_per_seed(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            run(capsys, "gen", "--signal", "damped", "--shift", "delay",
                "--severity", "1", "--out", str(out), "--seed", "9",
                "--n-series", "2", "--context-len", "6", "--horizon-len", "3")
        assert a.read_bytes() == b.read_bytes()

    def test_glyph_dataset(self, capsys, tmp_path):
        out = tmp_path / "g.csv"
        code, _, _ = run(capsys, "gen", "--signal", "glyph", "--severity", "0",
                         "--out", str(out), "--n-series", "2", "--frames", "8")
        assert code == EXIT_OK
        ds = read_dataset(out)
        assert ds.windows[0].d_obs == 256


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> train once; the products feed the adapt/eval tests."""
    root = tmp_path_factory.mktemp("cli")
    train_csv = root / "train.csv"
    test_csv = root / "test.csv"
    model_json = root / "model.json"
    common = ["--n-series", "4", "--context-len", "8", "--horizon-len", "4"]
    assert main(["gen", "--signal", "sine", "--shift", "ampfreq", "--severity",
                 "0", "--split", "train", "--out", str(train_csv), "--seed",
                 "1", *common]) == EXIT_OK
    assert main(["gen", "--signal", "sine", "--shift", "ampfreq", "--severity",
                 "3", "--out", str(test_csv), "--seed", "2", *common]) == EXIT_OK
    assert main(["train", "--data", str(train_csv), "--out", str(model_json),
                 "--epochs", "3", "--d-lat", "3", "--enc-len", "8",
                 "--hidden", "8", "--no-fine-tune"]) == EXIT_OK
    return {"root": root, "train": train_csv, "test": test_csv,
            "model": model_json}


class TestPipeline:
    def test_train_wrote_a_checkpoint(self, pipeline):
        doc = json.loads(pipeline["model"].read_text())
        assert doc["format_version"] == 1

    def test_adapt_emits_the_contracted_json(self, pipeline, capsys):
        out = pipeline["root"] / "adapted.json"
        code, stdout, _ = run(capsys, "adapt", "--model", str(pipeline["model"]),
                              "--data", str(pipeline["test"]), "--out", str(out),
                              "--steps", "2", "--seed", "4")
        assert code == EXIT_OK
        doc = json.loads(out.read_text())
        assert set(doc) == {"alpha", "gamma", "final_loss", "steps", "seed"}
        assert doc["steps"] == 2
        assert doc["seed"] == 4
        assert doc["alpha"] > 0
        assert np.isfinite(doc["final_loss"])
        assert "alpha=" in stdout

    def test_eval_plain_and_adapted(self, pipeline, capsys):
        adapted = pipeline["root"] / "adapted.json"
        if not adapted.exists():
            assert main(["adapt", "--model", str(pipeline["model"]), "--data",
                         str(pipeline["test"]), "--out", str(adapted),
                         "--steps", "2"]) == EXIT_OK
        code, stdout, _ = run(capsys, "eval", "--model", str(pipeline["model"]),
                              "--data", str(pipeline["test"]),
                              "--n-samples", "3", "--seeds", "0,1")
        assert code == EXIT_OK
        doc = json.loads(stdout)
        assert len(doc["rows"]) == 2
        assert doc["adaptation"] is None
        assert doc["std"]["mse"] >= 0
        code, stdout, _ = run(capsys, "eval", "--model", str(pipeline["model"]),
                              "--data", str(pipeline["test"]),
                              "--adapted", str(adapted), "--n-samples", "3")
        assert code == EXIT_OK
        doc = json.loads(stdout)
        assert doc["adaptation"]["alpha"] > 0
        assert doc["std"] is None

    def test_eval_writes_predictions(self, pipeline, capsys):
        preds = pipeline["root"] / "preds.csv"
        code, _, _ = run(capsys, "eval", "--model", str(pipeline["model"]),
                         "--data", str(pipeline["test"]), "--n-samples", "2",
                         "--predictions", str(preds))
        assert code == EXIT_OK
        lines = preds.read_text().splitlines()
        assert lines[0] == "series_id,seed,t,dim,y_pred,y_true"
        assert len(lines) == 1 + 4 * 4

    def test_corrupt_checkpoint_is_a_runtime_error(self, pipeline, capsys,
                                                   tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code, _, err = run(capsys, "eval", "--model", str(bad),
                           "--data", str(pipeline["test"]))
        assert code == EXIT_RUNTIME
        assert "error" in err

    def test_corrupt_adapted_params(self, pipeline, capsys, tmp_path):
        bad = tmp_path / "adapted.json"
        bad.write_text('{"alpha": 1.0}')
        code, _, err = run(capsys, "eval", "--model", str(pipeline["model"]),
                           "--data", str(pipeline["test"]),
                           "--adapted", str(bad))
        assert code == EXIT_RUNTIME
        assert "malformed" in err

    def test_missing_file_is_a_runtime_error(self, pipeline, capsys):
        code, _, _ = run(capsys, "eval", "--model", "does_not_exist.json",
                         "--data", str(pipeline["test"]))
        assert code == EXIT_RUNTIME


class TestBench:
    def test_print_config_round_trips(self, capsys):
        code, stdout, _ = run(capsys, "bench", "--print-config")
        assert code == EXIT_OK
        doc = json.loads(stdout)
        assert doc["context_len"] == 24
        assert doc["horizon_len"] == 16
        assert doc["adapt"]["steps"] == 50

    def test_config_overrides_show_up(self, capsys, tmp_path):
        cfg = tmp_path / "grid.json"
        cfg.write_text('{"eval_series": 3}')
        code, stdout, _ = run(capsys, "bench", "--config", str(cfg),
                              "--out-dir", "elsewhere", "--print-config")
        assert code == EXIT_OK
        doc = json.loads(stdout)
        assert doc["eval_series"] == 3
        assert doc["out_dir"] == "elsewhere"

    def test_bench_without_config_is_usage(self, capsys):
        code, _, _ = run(capsys, "bench")
        assert code == EXIT_USAGE

    def test_bad_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "grid.json"
        cfg.write_text('{"horizon": 4}')
        code, _, err = run(capsys, "bench", "--config", str(cfg))
        assert code == EXIT_USAGE
        assert "unknown config key" in err

    def test_tiny_grid_end_to_end(self, capsys, tmp_path):
        cfg = tmp_path / "grid.json"
        cfg.write_text(json.dumps({
            "signals": ["sine"],
            "shifts": ["ampfreq"],
            "severities": [0],
            "eval_seeds": [0],
            "train_series": 3,
            "eval_series": 2,
            "context_len": 8,
            "horizon_len": 4,
            "model": {"d_lat": 3, "enc_len": 8, "hidden": [8]},
            "train": {"epochs": 2, "fine_tune": False},
            "adapt": {"steps": 2, "search_rates": None},
            "eval_samples": 2,
            "out_dir": str(tmp_path / "out"),
        }))
        code, stdout, _ = run(capsys, "bench", "--config", str(cfg))
        assert code == EXIT_OK
        assert (tmp_path / "out" / "metrics.csv").exists()
        assert (tmp_path / "out" / "summary.json").exists()
        assert "metrics:" in stdout
