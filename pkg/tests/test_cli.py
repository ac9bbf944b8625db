import json
import math

import numpy as np
import pytest

from reclogit import save_network, save_params, save_trajectories, toy_fixture
from reclogit.cli import main
from reclogit.model import ModelParams


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    fx = toy_fixture()
    save_network(root / "toy.csv", fx.graph)
    save_trajectories(root / "before.csv", fx.trajectories_before, fx.graph)
    config = {
        "features": ["travel_time"],
        "init": {"phi": {"travel_time": -1.0}},
        "optimizer": "sgd",
        "lr": 0.1,
        "max_epochs": 40,
        "lambda": 0.0,
    }
    (root / "rl.json").write_text(json.dumps(config))
    params = ModelParams("rl", np.array([-1.0]), ("travel_time",))
    save_params(root / "params.json", params)
    return root


class TestEstimateCommand:
    def test_plain_fit_writes_outputs(self, workdir, tmp_path):
        out = tmp_path / "fit"
        rc = main([
            "estimate", "--model", "rl", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"), "--config", str(workdir / "rl.json"),
            "--out", str(out),
        ])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["final_ll"] == pytest.approx(100 * math.log(0.25), abs=1e-6)
        assert (out / "params.json").exists()
        assert (out / "history.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert str(workdir / "toy.csv") in manifest["inputs"]

    def test_missing_feature_column_exits_2(self, workdir, tmp_path, capsys):
        config = dict(json.loads((workdir / "rl.json").read_text()))
        config["features"] = ["congestion"]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(config))
        rc = main([
            "estimate", "--model", "rl", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"), "--config", str(bad),
            "--out", str(tmp_path / "o"),
        ])
        assert rc == 2
        assert "congestion" in capsys.readouterr().err

    def test_negative_penalty_exits_2(self, workdir, tmp_path):
        config = dict(json.loads((workdir / "rl.json").read_text()))
        config["lambda"] = -1.0
        bad = tmp_path / "neg.json"
        bad.write_text(json.dumps(config))
        rc = main([
            "estimate", "--model", "rl", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"), "--config", str(bad),
            "--out", str(tmp_path / "o"),
        ])
        assert rc == 2

    def test_manifest_written_on_failure(self, workdir, tmp_path):
        out = tmp_path / "failed"
        rc = main([
            "estimate", "--model", "rl", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "toy.csv"), "--config", str(workdir / "rl.json"),
            "--out", str(out),
        ])
        assert rc == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "error"
        assert manifest["error"]


class TestEvaluateCommand:
    def test_metrics_files(self, workdir, tmp_path):
        out = tmp_path / "eval"
        rc = main([
            "evaluate", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"),
            "--params", str(workdir / "params.json"), "--out", str(out),
        ])
        assert rc == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["acp"] == pytest.approx(0.25, abs=1e-9)
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("model,ll,acp")

    def test_dimension_mismatch_exits_2(self, workdir, tmp_path, rng):
        big = ModelParams("resrl", np.array([-1.0]), ("travel_time",),
                          theta=(rng.normal(size=(10, 10)),))
        params_path = tmp_path / "big.json"
        save_params(params_path, big)
        rc = main([
            "evaluate", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"),
            "--params", str(params_path), "--out", str(tmp_path / "o"),
        ])
        assert rc == 2


class TestFlowCommand:
    def test_toy_flow_values(self, workdir, tmp_path):
        out = tmp_path / "flow"
        rc = main([
            "flow", "--network", str(workdir / "toy.csv"),
            "--params", str(workdir / "params.json"),
            "--origin", "0-1", "--destination", "5-6", "--out", str(out),
        ])
        assert rc == 0
        rows = dict(
            line.split(",") for line in (out / "flow.csv").read_text().strip().splitlines()[1:]
        )
        assert float(rows["1-2"]) == pytest.approx(0.75, abs=1e-9)
        assert float(rows["5-6"]) == pytest.approx(1.0, abs=1e-9)

    def test_unreachable_destination_exits_3(self, workdir, tmp_path):
        net = tmp_path / "split.csv"
        net.write_text(
            "link_id,tail_node,head_node,travel_time\n"
            "a,1,2,1.0\nb,3,4,1.0\n"
        )
        params = ModelParams("rl", np.array([-1.0]), ("travel_time",))
        params_path = tmp_path / "p.json"
        save_params(params_path, params)
        rc = main([
            "flow", "--network", str(net), "--params", str(params_path),
            "--origin", "a", "--destination", "b", "--out", str(tmp_path / "o"),
        ])
        assert rc == 3


class TestPredictCommand:
    def test_routes_csv(self, workdir, tmp_path):
        ods = tmp_path / "ods.csv"
        ods.write_text("origin,destination\n0-1,5-6\n")
        out = tmp_path / "pred"
        rc = main([
            "predict", "--network", str(workdir / "toy.csv"),
            "--params", str(workdir / "params.json"),
            "--ods", str(ods), "--out", str(out),
        ])
        assert rc == 0
        lines = (out / "routes.csv").read_text().strip().splitlines()
        assert lines[1].split(",")[2] == "ok"
        assert lines[1].split(",")[3] == "0-1;1-2;2-4;4-3;3-5;5-6"

    def test_incomplete_route_flagged(self, workdir, tmp_path):
        ods = tmp_path / "ods.csv"
        ods.write_text("origin,destination\n0-1,5-6\n")
        out = tmp_path / "pred2"
        rc = main([
            "predict", "--network", str(workdir / "toy.csv"),
            "--params", str(workdir / "params.json"),
            "--ods", str(ods), "--max-steps", "1", "--out", str(out),
        ])
        lines = (out / "routes.csv").read_text().strip().splitlines()
        assert lines[1].split(",")[2] == "incomplete"
        assert rc == 3


class TestExportProximities:
    def test_symmetric_output(self, workdir, tmp_path):
        out = tmp_path / "prox"
        rc = main([
            "export-proximities", "--network", str(workdir / "toy.csv"), "--out", str(out),
        ])
        assert rc == 0
        for name in ("z_first", "z_second_in", "z_second_out"):
            lines = (out / f"{name}.csv").read_text().strip().splitlines()
            header = lines[0].split(",")[1:]
            values = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
            assert header == [line.split(",")[0] for line in lines[1:]]
            assert np.allclose(values, values.T, atol=1e-12)


class TestParserBasics:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for sub in ("estimate", "evaluate", "flow", "predict", "export-proximities",
                    "reproduce-toy"):
            assert sub in out

    def test_estimate_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit):
            main(["estimate", "--help"])
        out = capsys.readouterr().out
        for flag in ("--network", "--trajs", "--config", "--out", "--seed", "--threads",
                     "--model"):
            assert flag in out

    def test_threads_flag_accepted(self, workdir, tmp_path):
        rc = main([
            "evaluate", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"),
            "--params", str(workdir / "params.json"),
            "--out", str(tmp_path / "o"), "--threads", "2",
        ])
        assert rc == 0


class TestReproduceToyCommand:
    def test_reproduce_toy_passes(self, tmp_path, capsys):
        out = tmp_path / "toy"
        rc = main(["reproduce-toy", "--out", str(out)])
        assert rc == 0
        table = capsys.readouterr().out
        assert "log-likelihood" in table
        doc = json.loads((out / "toy_report.json").read_text())
        assert doc["all_passed"] is True
        assert (out / "toy_table.txt").exists()
        assert (out / "manifest.json").exists()


class TestEvaluateChainPerfectScores:
    def test_jsd_zero_bleu_one(self, tmp_path):
        net = tmp_path / "chain.csv"
        net.write_text(
            "link_id,tail_node,head_node,travel_time\n"
            "a,0,1,1.0\nb,1,2,1.0\nc,2,3,1.0\n"
        )
        trajs = tmp_path / "chain_trajs.csv"
        trajs.write_text("t1,a;b;c\nt2,a;b;c\n")
        params = ModelParams("rl", np.array([-1.0]), ("travel_time",))
        params_path = tmp_path / "p.json"
        save_params(params_path, params)
        out = tmp_path / "eval"
        rc = main([
            "evaluate", "--network", str(net), "--trajs", str(trajs),
            "--params", str(params_path), "--out", str(out),
        ])
        assert rc == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["jsd"] == pytest.approx(0.0, abs=1e-12)
        assert doc["bleu"] == 1.0
        assert doc["acp"] == pytest.approx(1.0, abs=1e-12)


class TestNestedModelThroughConfig:
    def test_estimate_nrl(self, workdir, tmp_path):
        config = {
            "features": ["travel_time"],
            "init": {"phi": {"travel_time": -1.0}, "nrl_gamma": {"travel_time": 0.0}},
            "scale_features": ["travel_time"],
            "optimizer": "adam",
            "lr": 0.05,
            "max_epochs": 3,
        }
        cfg = tmp_path / "nrl.json"
        cfg.write_text(json.dumps(config))
        out = tmp_path / "nrl_fit"
        rc = main([
            "estimate", "--model", "nrl", "--network", str(workdir / "toy.csv"),
            "--trajs", str(workdir / "before.csv"), "--config", str(cfg),
            "--out", str(out),
        ])
        assert rc == 0
        doc = json.loads((out / "params.json").read_text())
        assert doc["model_kind"] == "nrl"
        assert "travel_time" in doc["nrl_gamma"]


class TestLogEnvironment:
    def test_unknown_level_warns_but_runs(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("RECLOGIT_LOG", "verbose")
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        assert "RECLOGIT_LOG" in capsys.readouterr().err
