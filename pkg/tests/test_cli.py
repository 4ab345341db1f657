import json

import pytest

from todqos import pipeline
from todqos.cli import main

TINY = {
    "plan": {"load_levels": [0, 30, 80], "seeds_per_level": 1, "duration": 40.0,
             "holdout_levels": [80], "configs": ["T1", "T3"]},
    "forest": {"n_trees": 3},
    "history_len": 100,
    "demo": {"duration": 50.0, "surge_at": 35.0, "start": 15.0},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return root, cfg


def _args(workspace, *rest):
    root, cfg = workspace
    return [*rest, "--config", str(cfg), "--out", str(root / "out")]


class TestExitCodes:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as ei:
            main(["frobnicate"])
        assert ei.value.code == 1

    def test_bad_flag_value(self):
        with pytest.raises(SystemExit) as ei:
            main(["simulate", "--duration", "soon"])
        assert ei.value.code == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["evaluate", "--out", str(tmp_path)]) == 2

    def test_bad_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"plan": {"holdout_levels": [7]}}))
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == 2


class TestTinyPipeline:
    def test_stages(self, workspace, capsys):
        root, _ = workspace
        out = root / "out"
        assert main(_args(workspace, "simulate")) == 0
        assert len(list((out / "traces").glob("*.csv"))) == 3
        capsys.readouterr()
        assert main(_args(workspace, "simulate")) == 0
        assert capsys.readouterr().out.startswith("0 new simulation(s)")

        assert main(_args(workspace, "build-dataset")) == 0
        assert len(pipeline.Dataset.from_csv(out / "dataset.csv")) == 3 * 400

        # the report lacks T2/T4/T6, so the ordering check cannot pass
        assert main(_args(workspace, "evaluate", "--check")) == 3
        rep = pipeline.read_report(out / "reports" / "table1.csv")
        assert set(rep) == {"T1", "T3"}

        assert main(_args(workspace, "train", "--features", "T6", "--exclude-levels", "80")) == 0
        assert (out / "models" / "T6-without080.json").exists()

        assert main(_args(workspace, "infer")) == 0
        summary = json.loads((out / "inference" / "summary.json").read_text())
        assert summary["known"]["origins"] > 0 and len(summary["unknown"]["step_mae_arima"]) == 7
        header = (out / "inference" / "known_rolling.csv").read_text().splitlines()[0]
        assert header == "origin_t_s,step_k,true_bps,pred_perfect_bps,pred_arima_bps,spread_bps"

        assert main(_args(workspace, "demo")) == 0
        demo = json.loads((out / "demo" / "summary.json").read_text())
        assert sum(demo["decisions"].values()) > 0
        assert (out / "demo" / "decisions.csv").read_text().startswith(
            "t_s,speed_mps,predicted_min_bps,action,target_config,decel_mps2")

    def test_evaluate_is_reproducible(self, workspace, tmp_path):
        root, cfg = workspace
        first = (root / "out" / "reports" / "table1.csv").read_bytes()
        model = (root / "out" / "models" / "T1.json").read_bytes()
        assert main(["evaluate", "--force", "--check", "--config", str(cfg), "--out", str(root / "out")]) == 3
        assert (root / "out" / "reports" / "table1.csv").read_bytes() == first
        assert (root / "out" / "models" / "T1.json").read_bytes() == model
