import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from massmerge.checkpoint import read_checkpoint
from massmerge.cli import main
from massmerge.engine import forward

SMALL = ["--widths", "16,32,16,32,16", "--suite-rank", "2", "--samples", "20"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def suite_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("suite")
    assert main(["generate", "--out", str(d), "--tasks", "3", "--seed", "1", *SMALL]) == 0
    return d


@pytest.fixture(scope="module")
def merged(suite_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("merged") / "m.mtsv"
    tasks = [suite_dir / f"task{i}.mtsv" for i in range(3)]
    assert main(["merge", "--pre", str(suite_dir / "pre.mtsv"), "--tasks", *map(str, tasks), "--out", str(out)]) == 0
    return out


def write_inputs(path, suite_dir, task, n=None):
    lines = (suite_dir / "data" / f"{task}.jsonl").read_text().splitlines()[:n]
    path.write_text("\n".join(json.dumps({"id": json.loads(l)["id"], "x": json.loads(l)["x"]}) for l in lines) + "\n")
    return path


def infer_args(suite_dir, merged, inp):
    stem = str(merged)[: -len(".mtsv")]
    return ["infer", "--pre", suite_dir / "pre.mtsv", "--merged", merged, "--bundles", stem + ".bundles.mtsv", "--input", inp]


# ---------------------------------------------------------------- merge


def test_merge_writes_three_files(suite_dir, tmp_path, capsys):
    out = tmp_path / "m.mtsv"
    code, stdout, _ = run(capsys, "merge", "--pre", suite_dir / "pre.mtsv", "--tasks", suite_dir / "task0.mtsv",
                          suite_dir / "task1.mtsv", "--out", out, "--alpha", "1.0", "--epsilon", "0.3")
    assert code == 0
    assert out.exists() and (tmp_path / "m.bundles.mtsv").exists() and (tmp_path / "m.provenance.json").exists()
    assert "admitted: task0, task1" in stdout
    assert "k per admitted task" in stdout
    prov = json.loads((tmp_path / "m.provenance.json").read_text())
    assert prov["admitted"] == [0, 1] and prov["config"]["epsilon"] == 0.3


def test_merge_duplicate_task_admitted_once(suite_dir, tmp_path, capsys):
    t = suite_dir / "task0.mtsv"
    code, _, _ = run(capsys, "merge", "--pre", suite_dir / "pre.mtsv", "--tasks", t, t, "--out", tmp_path / "m.mtsv",
                     "--epsilon", "0.9")
    assert code == 0
    prov = json.loads((tmp_path / "m.provenance.json").read_text())
    assert len(prov["admitted"]) == 1
    assert prov["tasks"] == ["task0"]


def test_merge_missing_input_names_path(suite_dir, tmp_path, capsys):
    code, _, err = run(capsys, "merge", "--pre", suite_dir / "pre.mtsv", "--tasks", tmp_path / "ghost.mtsv",
                       "--out", tmp_path / "m.mtsv")
    assert code != 0
    assert "ghost.mtsv" in err and len(err.strip().splitlines()) == 1


def test_merge_corrupt_input_single_line_diagnostic(suite_dir, tmp_path, capsys):
    bad = tmp_path / "bad.mtsv"
    bad.write_bytes(b"NOPE" + (suite_dir / "task0.mtsv").read_bytes()[4:])
    code, _, err = run(capsys, "merge", "--pre", suite_dir / "pre.mtsv", "--tasks", bad, "--out", tmp_path / "m.mtsv")
    assert code == 2 and "BadMagicError" in err and len(err.strip().splitlines()) == 1


def test_merge_strict_rank_overflow(suite_dir, tmp_path, capsys):
    code, _, err = run(capsys, "merge", "--pre", suite_dir / "pre.mtsv", "--tasks", suite_dir / "task0.mtsv",
                       suite_dir / "task1.mtsv", "--out", tmp_path / "m.mtsv", "--rank", "16", "--strict")
    assert code == 2 and "RankBudgetError" in err


# ---------------------------------------------------------------- infer


def test_infer_predictions(suite_dir, merged, tmp_path, capsys):
    inp = write_inputs(tmp_path / "in.jsonl", suite_dir, "task1", 5)
    code, out, _ = run(capsys, *infer_args(suite_dir, merged, inp))
    assert code == 0
    recs = [json.loads(l) for l in out.splitlines()]
    assert len(recs) == 5 and recs[0]["input_id"] == "task1-0000"
    for r in recs:
        assert set(r) == {"input_id", "selected_tasks", "task_weights", "predicted_task", "predicted_class", "logit"}
        assert r["predicted_task"] in r["selected_tasks"]


def test_infer_single_task_matches_finetuned(tmp_path, capsys):
    d = tmp_path / "s"
    assert main(["generate", "--out", str(d), "--tasks", "1", *SMALL]) == 0
    out = tmp_path / "m.mtsv"
    assert main(["merge", "--pre", str(d / "pre.mtsv"), "--tasks", str(d / "task0.mtsv"), "--out", str(out)]) == 0
    capsys.readouterr()
    inp = write_inputs(tmp_path / "in.jsonl", d, "task0", 1)
    code, stdout, _ = run(capsys, *infer_args(d, out, inp))
    assert code == 0
    rec = json.loads(stdout)
    x = json.loads(inp.read_text())["x"]
    ft = read_checkpoint(d / "task0.mtsv")
    assert rec["predicted_class"] == int(np.argmax(forward(ft, x, heads=["task0"]).logits["task0"]))


def test_infer_batched_merges_once(suite_dir, merged, tmp_path, capsys):
    inp = write_inputs(tmp_path / "in.jsonl", suite_dir, "task2", 10)
    code, out, err = run(capsys, *infer_args(suite_dir, merged, inp), "--batched")
    assert code == 0 and len(out.splitlines()) == 10
    assert err.count("adaptive_merge") == 1


def test_infer_high_eta_falls_back_to_one_task(suite_dir, merged, tmp_path, capsys):
    inp = write_inputs(tmp_path / "in.jsonl", suite_dir, "task0", 8)
    code, out, _ = run(capsys, *infer_args(suite_dir, merged, inp), "--eta", "0.9")
    assert code == 0
    assert all(len(json.loads(l)["selected_tasks"]) == 1 for l in out.splitlines())


def test_infer_dimension_mismatch_names_sample(suite_dir, merged, tmp_path, capsys):
    inp = tmp_path / "in.jsonl"
    inp.write_text(json.dumps({"id": "odd-one", "x": [1.0, 2.0]}) + "\n")
    code, _, err = run(capsys, *infer_args(suite_dir, merged, inp))
    assert code == 2 and "odd-one" in err


def test_infer_writes_out_file(suite_dir, merged, tmp_path, capsys):
    inp = write_inputs(tmp_path / "in.jsonl", suite_dir, "task0", 2)
    code, out, _ = run(capsys, *infer_args(suite_dir, merged, inp), "--out", tmp_path / "p.jsonl")
    assert code == 0 and out == ""
    assert len((tmp_path / "p.jsonl").read_text().splitlines()) == 2


# ---------------------------------------------------------------- eval


def test_eval_two_methods_share_suite_hash(capsys):
    code, out, err = run(capsys, "eval", "--suite", "synthetic", "--seed", "7", "--methods", "mass,tsv-m", *SMALL)
    assert code == 0
    reports = json.loads(out)
    assert [r["method"] for r in reports] == ["mass", "tsv-m"]
    assert reports[0]["suite_hash"] == reports[1]["suite_hash"]
    assert "method: mass" in err


def test_eval_is_byte_identical_across_runs(capsys):
    args = ("eval", "--seed", "7", "--methods", "mass,weight-average", "--threads", "2", *SMALL)
    a = run(capsys, *args)[1]
    b = run(capsys, *args)[1]
    assert a == b


def test_eval_finetuned_noiseless(capsys):
    code, out, _ = run(capsys, "eval", "--methods", "fine-tuned", "--noise", "0", *SMALL)
    assert code == 0 and json.loads(out)["normalized_accuracy"] == 1.0


def test_eval_unknown_method_listed(capsys):
    code, _, err = run(capsys, "eval", "--methods", "mass,ties,dare", *SMALL)
    assert code == 2 and "ties" in err and "dare" in err


def test_eval_from_suite_directory_and_config_precedence(suite_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eta": 0.5, "top_k": 3}))
    code, out, _ = run(capsys, "eval", "--suite", suite_dir, "--methods", "mass", "--config", cfg, "--topk", "1")
    assert code == 0
    rep = json.loads(out)
    assert rep["config"]["eta"] == 0.5 and rep["config"]["top_k"] == 1
    assert len(rep["tasks"]) == 3


def test_eval_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gamma": 1}))
    code, _, err = run(capsys, "eval", "--methods", "mass", "--config", cfg, *SMALL)
    assert code == 2 and "gamma" in err


# ---------------------------------------------------------------- sweep


def test_sweep_csv(capsys):
    code, out, _ = run(capsys, "sweep", "--noise", "0", *SMALL)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 4
    best = max(rows, key=lambda r: float(r["mean_acc"]))
    assert best["layer"] == "layer2" and float(best["mean_acc"]) == 1.0


def test_sweep_layer_subset(capsys):
    code, out, _ = run(capsys, "sweep", "--layers", "2,3", *SMALL)
    assert code == 0
    assert [r["layer"] for r in csv.DictReader(io.StringIO(out))] == ["layer2", "layer3"]
    assert run(capsys, "sweep", "--layers", "9", *SMALL)[0] == 2


# ---------------------------------------------------------------- inspect


def test_inspect_bundle_and_storage_ratio(suite_dir, merged, capsys):
    bundles = str(merged)[: -len(".mtsv")] + ".bundles.mtsv"
    code, out, _ = run(capsys, "inspect", bundles, "--pre", suite_dir / "pre.mtsv")
    assert code == 0
    assert "task0/layer2" in out and "k=" in out and "S:" in out
    assert "x pretrained" in out
    code, out, _ = run(capsys, "inspect", bundles, "--pre", suite_dir / "pre.mtsv", "--json")
    rep = json.loads(out)
    assert rep["storage_ratio"] == pytest.approx((rep["pre_bytes"] + rep["bundle_bytes"]) / rep["pre_bytes"])


def test_inspect_zero_delta_spectrum(suite_dir, capsys):
    code, out, _ = run(capsys, "inspect", suite_dir / "pre.mtsv", "--pre", suite_dir / "pre.mtsv", "--json")
    assert code == 0
    layers = json.loads(out)["files"][0]["layers"]
    assert all(s == 0.0 for row in layers for s in row["delta_spectrum"])


def test_inspect_checkpoint_text(suite_dir, capsys):
    code, out, _ = run(capsys, "inspect", suite_dir / "task0.mtsv")
    assert code == 0 and "layer0: 32x16" in out and "head task0" in out


def test_inspect_unreadable(tmp_path, capsys):
    p = tmp_path / "junk.mtsv"
    p.write_bytes(b"junk")
    code, _, err = run(capsys, "inspect", p)
    assert code == 2 and "BadMagicError" in err


# ---------------------------------------------------------------- entry point


@pytest.mark.parametrize("cmd", ["generate", "merge", "infer", "eval", "sweep", "inspect"])
def test_help_for_every_command(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "massmerge.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "inspect" in r.stdout
