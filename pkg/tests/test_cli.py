import json

import pytest

from conftest import TINY_SETTINGS
from narslu.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_config(tmp_path, **over):
    kv = {**TINY_SETTINGS, "max_epochs": "2", "seed": "1"}
    kv.update({k: str(v) for k, v in over.items()})
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return path


# --- train -------------------------------------------------------------------


def test_train_writes_artifacts(tmp_path, toy_data_dir, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    code, stdout, _ = run_cli(
        capsys, "train", "--data", str(toy_data_dir), "--config", str(cfg), "--out", str(out)
    )
    assert code == 0
    summary = json.loads(stdout)
    assert summary["epochs_run"] == 2
    for name in ("checkpoint.bin", "checkpoint.json", "vocab.json", "metrics.jsonl"):
        assert (out / name).exists()


def test_train_same_seed_identical_logs(tmp_path, toy_data_dir, capsys):
    cfg = write_config(tmp_path)
    for name in ("a", "b"):
        code, _, _ = run_cli(
            capsys, "train", "--data", str(toy_data_dir), "--config", str(cfg),
            "--out", str(tmp_path / name), "--seed", "7",
        )
        assert code == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (
        tmp_path / "b" / "metrics.jsonl"
    ).read_bytes()


def test_train_bad_config_key_exits_2(tmp_path, toy_data_dir, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("d_modle = 64\n")
    code, _, err = run_cli(
        capsys, "train", "--data", str(toy_data_dir), "--config", str(cfg),
        "--out", str(tmp_path / "run"),
    )
    assert code == 2
    assert "d_modle" in err


def test_train_override_wins(tmp_path, toy_data_dir, capsys):
    cfg = write_config(tmp_path, max_epochs=2)
    code, stdout, _ = run_cli(
        capsys, "train", "--data", str(toy_data_dir), "--config", str(cfg),
        "--out", str(tmp_path / "run"), "--override", "max_epochs=1",
    )
    assert code == 0
    assert json.loads(stdout)["epochs_run"] == 1


def test_usage_error_exits_2(capsys):
    assert main(["train"]) == 2 or main(["nonsense"]) == 2


# --- eval ----------------------------------------------------------------------


def test_eval_model_and_dump(tmp_path, toy_data_dir, toy_run_dir, capsys):
    pred_dir = tmp_path / "preds"
    code, stdout, err = run_cli(
        capsys, "eval", "--model", str(toy_run_dir), "--data", str(toy_data_dir),
        "--split", "test", "--dump-pred", str(pred_dir),
    )
    assert code == 0
    payload = json.loads(stdout)
    assert payload["n_utterances"] == 48
    assert 0.0 <= payload["intent_accuracy"] <= 1.0
    assert payload["report"]["bi_errors"] + payload["report"]["ib_errors"] + payload[
        "report"
    ]["other_unc"] == payload["report"]["uncoordinated"]
    assert (pred_dir / "seq.out").exists()
    assert (pred_dir / "label").exists()
    assert "intent accuracy" in err  # human table on stderr

    # re-scoring the dumped files reproduces the model metrics exactly
    code2, stdout2, _ = run_cli(
        capsys, "eval", "--data", str(toy_data_dir), "--split", "test",
        "--pred-slots", str(pred_dir / "seq.out"), "--pred-intents", str(pred_dir / "label"),
    )
    assert code2 == 0
    rescored = json.loads(stdout2)
    for key in ("intent_accuracy", "slot_f1", "overall_accuracy", "slot_errors"):
        assert rescored[key] == payload[key]


def test_eval_gold_against_itself_is_perfect(toy_data_dir, capsys):
    gold = toy_data_dir / "test"
    code, stdout, _ = run_cli(
        capsys, "eval", "--data", str(toy_data_dir), "--split", "test",
        "--pred-slots", str(gold / "seq.out"), "--pred-intents", str(gold / "label"),
    )
    assert code == 0
    payload = json.loads(stdout)
    assert payload["intent_accuracy"] == 1.0
    assert payload["slot_f1"] == 1.0
    assert payload["overall_accuracy"] == 1.0
    assert payload["slot_errors"] == 0
    assert payload["uncoordinated"] == 0


def test_eval_missing_model_dir_exits_2(toy_data_dir, capsys):
    code, _, err = run_cli(
        capsys, "eval", "--model", "/nonexistent/model", "--data", str(toy_data_dir)
    )
    assert code == 2
    assert "model" in err


def test_eval_vocab_mismatch_exits_2(tmp_path, toy_data_dir, toy_run_dir, capsys):
    import shutil

    tampered = tmp_path / "tampered"
    shutil.copytree(toy_run_dir, tampered)
    doc = json.loads((tampered / "vocab.json").read_text())
    doc["tokens"].append("extra_token")
    (tampered / "vocab.json").write_text(json.dumps(doc))
    code, _, err = run_cli(
        capsys, "eval", "--model", str(tampered), "--data", str(toy_data_dir)
    )
    assert code == 2
    assert "vocabulary" in err


# --- bench ------------------------------------------------------------------------


def test_bench_report_fields_and_determinism(toy_data_dir, toy_run_dir, capsys):
    code, stdout, err = run_cli(
        capsys, "bench", "--model", str(toy_run_dir), "--data", str(toy_data_dir),
        "--split", "test", "--warmup", "10", "--repeat", "2",
    )
    assert code == 0
    report = json.loads(stdout)
    for mode in ("lrm_on", "lrm_off"):
        for field in ("mean_ms", "median_ms", "p95_ms"):
            assert report[mode][field] > 0
    assert report["on_off_ratio_mean"] > 0
    assert report["n_utterances"] == 48
    assert report["repeat"] == 2
    assert report["predictions_identical_across_repeats"] is True
    assert "on/off ratio" in err


# --- analyze -----------------------------------------------------------------------


def test_analyze_gold_vs_gold_zero_report(toy_data_dir, capsys):
    gold = str(toy_data_dir / "test" / "seq.out")
    code, stdout, _ = run_cli(capsys, "analyze", "--pred", gold, "--gold", gold)
    assert code == 0
    report = json.loads(stdout)
    assert report["slot_errors"] == 0
    assert report["uncoordinated"] == 0
    assert report["cases"] == []


def test_analyze_uncoordinated_example(tmp_path, capsys):
    (tmp_path / "pred.txt").write_text("O B-city I-time O B-city I-time\n")
    (tmp_path / "gold.txt").write_text("O B-city I-city O B-time I-time\n")
    (tmp_path / "toks.txt").write_text("return new york at 9 oclock\n")
    code, stdout, err = run_cli(
        capsys, "analyze", "--pred", str(tmp_path / "pred.txt"),
        "--gold", str(tmp_path / "gold.txt"), "--tokens", str(tmp_path / "toks.txt"),
    )
    assert code == 0
    report = json.loads(stdout)
    assert report["uncoordinated"] == 2
    assert report["bi_errors"] == 1
    assert report["ib_errors"] == 1
    assert report["bi_errors"] + report["ib_errors"] + report["other_unc"] == report[
        "uncoordinated"
    ]
    assert "york" in err  # token context in the case listing


def test_analyze_misaligned_files_exit_1(tmp_path, capsys):
    (tmp_path / "pred.txt").write_text("O O\n")
    (tmp_path / "gold.txt").write_text("O\n")
    code, _, _ = run_cli(
        capsys, "analyze", "--pred", str(tmp_path / "pred.txt"), "--gold", str(tmp_path / "gold.txt")
    )
    assert code == 1
