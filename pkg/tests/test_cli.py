import json

import pytest

from ggmoe import cli
from ggmoe.evaluate import ScoreSummary, dumps
from ggmoe.tune import SearchResult


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--kind", "linear-regression", "--n", "150", "--features", "3",
                     "--noise", "0.1", "--out", str(d)]) == 0
    return d / "manifest.json"


@pytest.fixture(scope="module")
def tuned(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["tune", "--manifest", str(dataset), "--budget", "2", "--max-epochs", "2",
                     "--space", "desk", "--out", str(out)])
    assert code == 0
    return out


def test_tune_writes_log_and_best(tuned):
    for fam in ("mlp", "moe", "ggmoe"):
        lines = (tuned / "tune" / fam / "trials.jsonl").read_text().splitlines()
        assert len(lines) == 2
        best = json.loads((tuned / "tune" / fam / "best.json").read_text())
        assert best["spec"]["family"] == fam
    run = json.loads((tuned / "run-tune.json").read_text())
    assert run["budget"] == 2 and run["mode"] == "tune"


def test_tune_rerun_is_byte_identical(dataset, tuned, tmp_path):
    assert cli.main(["tune", "--manifest", str(dataset), "--budget", "2", "--max-epochs", "2",
                     "--space", "desk", "--family", "moe", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "tune/moe/trials.jsonl").read_bytes() == (tuned / "tune/moe/trials.jsonl").read_bytes()


def test_invalid_manifest_exit_2(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"name": "x", "task": "regression", "columns": [], "files": {"single": "a.csv"}}))
    assert cli.main(["tune", "--manifest", str(bad), "--out", str(tmp_path)]) == 2
    assert "target" in capsys.readouterr().err


def test_missing_manifest_and_bad_flags_exit_2(tmp_path):
    assert cli.main(["tune", "--manifest", str(tmp_path / "none.json")]) == 2
    assert cli.main(["evaluate", "--manifest", str(tmp_path / "none.json"), "--mc-samples", "0"]) == 2


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifest": str(dataset), "budget": 5, "families": ["mlp"],
                               "max_epochs": 2, "out": str(tmp_path / "o")}))
    assert cli.main(["tune", "--config", str(cfg), "--budget", "1"]) == 0
    run = json.loads((tmp_path / "o/run-tune.json").read_text())
    assert run["budget"] == 1 and run["families"] == ["mlp"]
    assert len((tmp_path / "o/tune/mlp/trials.jsonl").read_text().splitlines()) == 1


def test_unknown_config_field_exit_2(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"budgett": 5}))
    assert cli.main(["tune", "--config", str(cfg)]) == 2


def test_benchmark_missing_tuned_config_exit_3(dataset, tmp_path, capsys):
    assert cli.main(["benchmark", "--manifest", str(dataset), "--out", str(tmp_path)]) == 3
    assert "'mlp'" in capsys.readouterr().err


def test_all_trials_failed_exit_4(dataset, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_search", lambda *a, **k: SearchResult(None, []))
    assert cli.main(["tune", "--manifest", str(dataset), "--family", "mlp", "--out", str(tmp_path)]) == 4


def test_benchmark_outputs_and_reproducibility(dataset, tuned, tmp_path):
    args = ["benchmark", "--manifest", str(dataset), "--out", str(tuned), "--n-seeds", "2",
            "--max-epochs", "2", "--mc-sweep", "1"]
    assert cli.main(args) == 0
    first = {f: (tuned / f).read_bytes() for f in ("summaries.json", "ranks.json", "ranks.csv", "ranks.txt")}
    timings = json.loads((tuned / "timings.json").read_text())
    assert set(timings) == {"MLP", "MoE", "GGMoE", "GGMoE[mc=1]"}
    assert "inference" in timings["GGMoE[mc=1]"] and "train" in timings["GGMoE"]
    assert cli.main(args) == 0
    assert first == {f: (tuned / f).read_bytes() for f in first}


def test_single_seed_has_zero_std(dataset, tuned, tmp_path):
    out = tmp_path / "one"
    (out / "tune").mkdir(parents=True)
    for fam in ("mlp",):
        (out / "tune" / fam).mkdir()
        (out / "tune" / fam / "best.json").write_bytes((tuned / "tune" / fam / "best.json").read_bytes())
    assert cli.main(["benchmark", "--manifest", str(dataset), "--out", str(out), "--family", "mlp",
                     "--n-seeds", "1", "--max-epochs", "2"]) == 0
    (s,) = json.loads((out / "summaries.json").read_text())["summaries"]
    assert s["std"] == 0.0 and len(s["scores"]) == 1


def test_train_evaluate_rank_pipeline(dataset, tuned):
    common = ["--manifest", str(dataset), "--out", str(tuned), "--family", "ggmoe", "--n-seeds", "2"]
    assert cli.main(["train", *common, "--max-epochs", "2"]) == 0
    assert (tuned / "models/ggmoe/seed1.ckpt").exists()
    assert cli.main(["evaluate", *common, "--mc-sweep", "1", "100"]) == 0
    ids = [s["model_id"] for s in json.loads((tuned / "summaries.json").read_text())["summaries"]]
    assert ids == ["GGMoE", "GGMoE[mc=1]", "GGMoE[mc=100]"]
    assert cli.main(["rank", "--out", str(tuned)]) == 0


def test_evaluate_missing_checkpoint_exit_3(dataset, tmp_path):
    assert cli.main(["evaluate", "--manifest", str(dataset), "--out", str(tmp_path), "--family", "mlp"]) == 3


def test_rank_identical_entries_share_rank(tmp_path):
    s = [ScoreSummary.from_scores(m, [0.5, 0.7]) for m in ("A", "B")]
    path = tmp_path / "s.json"
    path.write_text(dumps({"summaries": [x.to_dict() for x in s]}))
    assert cli.main(["rank", "--summaries", str(path), "--out", str(tmp_path)]) == 0
    ranks = json.loads((tmp_path / "ranks.json").read_text())["ranks"]
    assert [r["rank"] for r in ranks] == [1, 1]
    assert (tmp_path / "ranks.csv").read_text().startswith("model_id,rank")


def test_rank_without_summaries_exit_3(tmp_path):
    assert cli.main(["rank", "--out", str(tmp_path)]) == 3


def test_count_params_and_time(dataset, tuned):
    assert cli.main(["count-params", "--manifest", str(dataset), "--out", str(tuned)]) == 0
    counts = json.loads((tuned / "params.json").read_text())
    assert set(counts) == {"MLP", "MoE", "GGMoE"} and all(v["counts"][0] > 0 for v in counts.values())
    assert cli.main(["time", "--manifest", str(dataset), "--out", str(tuned), "--family", "ggmoe",
                     "--max-epochs", "2", "--mc-sweep", "1"]) == 0
    t = json.loads((tuned / "timings.json").read_text())
    assert t["GGMoE"]["inference"]["repeats"] == 15 and t["GGMoE[mc=1]"]["inference"]["repeats"] == 15
