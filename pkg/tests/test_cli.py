import csv
import json
from pathlib import Path

import pytest

from bias_rescore.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from bias_rescore.model import load_checkpoint

DATA_DIR = Path(__file__).parent.parent / "test-data"
CONFIG_DIR = Path(__file__).parent.parent / "configs"

TINY = str(CONFIG_DIR / "tiny.yaml")


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """gen-data and train once with the tiny config; tests reuse the output."""
    out = tmp_path_factory.mktemp("run")
    assert main(["gen-data", "--config", TINY, "--out", str(out)]) == EXIT_OK
    assert main(["train", "--config", TINY, "--out", str(out)]) == EXIT_OK
    return out


def test_gen_data_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", TINY, "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--config", TINY, "--out", str(b)]) == EXIT_OK
    for name in ["train.jsonl", "test.jsonl"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len((a / "train.jsonl").read_text().splitlines()) == 40
    assert len((a / "test.jsonl").read_text().splitlines()) == 8
    resolved = json.loads((a / "resolved_config.json").read_text())
    assert resolved["gen"]["n_train"] == 40


def test_gen_data_seed_override(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", TINY, "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--config", TINY, "--out", str(b), "--seed", "5"]) == EXIT_OK
    assert (a / "train.jsonl").read_bytes() != (b / "train.jsonl").read_bytes()
    assert json.loads((b / "resolved_config.json").read_text())["gen"]["seed"] == 5


def test_gen_data_ngt(tmp_path):
    assert (
        main(["gen-data", "--config", TINY, "--out", str(tmp_path), "--ablation", "NGT"])
        == EXIT_OK
    )
    first = json.loads((tmp_path / "test.jsonl").read_text().splitlines()[0])
    assert first["ablation_mode"] == "NGT"


def test_gen_data_ingest(tmp_path):
    sample = str(DATA_DIR / "annotated_sample.jsonl")
    assert main(["gen-data", "--config", TINY, "--out", str(tmp_path), "--ingest", sample]) == 0
    train = (tmp_path / "train.jsonl").read_text().splitlines()
    test = (tmp_path / "test.jsonl").read_text().splitlines()
    assert len(train) + len(test) == 8
    assert len(test) == 4


def test_bad_config_key_is_usage_error(tmp_path, caplog):
    config = tmp_path / "bad.yaml"
    config.write_text("gen:\n  n_trian: 5\n")
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "n_trian" in caplog.text


def test_missing_config_is_data_error(tmp_path):
    missing = str(tmp_path / "nope.yaml")
    assert main(["gen-data", "--config", missing, "--out", str(tmp_path)]) == EXIT_DATA


def test_no_command_and_bad_choice(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["eval", "--modes", "loud", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--threads", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_missing_corpus(tmp_path):
    assert main(["train", "--config", TINY, "--out", str(tmp_path)]) == EXIT_DATA


def test_train_writes_checkpoint_and_log(trained_run):
    assert (trained_run / "model.pt").exists()
    assert (trained_run / "vocab.json").exists()
    log_lines = (trained_run / "train_log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in log_lines]
    assert records
    assert {"epoch", "step", "l_token", "l_class", "total"} <= set(records[0])
    assert load_checkpoint(trained_run / "model.pt").step > 0


def test_train_rerun_is_byte_identical(trained_run, tmp_path):
    out = tmp_path / "rerun"
    out.mkdir()
    (out / "train.jsonl").write_bytes((trained_run / "train.jsonl").read_bytes())
    args = ["train", "--config", TINY, "--out", str(out)]

    assert main(args) == EXIT_OK
    first = _snapshot(out)
    assert main(args) == EXIT_OK
    assert _snapshot(out) == first
    for name in ["model.pt", "vocab.json", "train_log.jsonl"]:
        assert first[name] == (trained_run / name).read_bytes()


def test_train_resume_continues_step_count(trained_run, tmp_path):
    source = trained_run / "model.pt"
    resumed = tmp_path / "resumed"
    resumed.mkdir()
    (resumed / "train.jsonl").write_bytes((trained_run / "train.jsonl").read_bytes())
    args = ["train", "--config", TINY, "--out", str(resumed), "--resume", str(source)]
    assert main(args) == EXIT_OK
    assert load_checkpoint(resumed / "model.pt").step == 2 * load_checkpoint(source).step


def test_train_resume_refuses_to_overwrite(trained_run):
    source = str(trained_run / "model.pt")
    args = ["train", "--config", TINY, "--out", str(trained_run), "--resume", source]
    assert main(args) == EXIT_DATA


def test_eval_all_modes(trained_run):
    assert main(["eval", "--config", TINY, "--out", str(trained_run)]) == EXIT_OK
    report_dir = trained_run / "eval-test"
    report = json.loads((report_dir / "report.json").read_text())
    assert set(report["modes"]) == {"plain", "static", "few_shot", "dynamic"}
    assert report["n_utterances"] == 8
    assert report["oracle_wer"] <= report["baseline_wer"]
    for mode in report["modes"]:
        assert len((report_dir / f"rescored_{mode}.jsonl").read_text().splitlines()) == 8
    assert (report_dir / "report.md").exists()
    assert (report_dir / "resolved_config.json").exists()


def test_eval_rerun_is_byte_identical(trained_run):
    args = ["eval", "--config", TINY, "--out", str(trained_run)]
    assert main(args) == EXIT_OK
    first = _snapshot(trained_run / "eval-test")
    assert main(args) == EXIT_OK
    assert _snapshot(trained_run / "eval-test") == first


def test_eval_without_modes(trained_run, tmp_path):
    out = tmp_path / "eval"
    args = [
        "eval",
        "--config",
        TINY,
        "--out",
        str(out),
        "--checkpoint",
        str(trained_run / "model.pt"),
        "--corpus",
        str(trained_run / "test.jsonl"),
        "--modes",
    ]
    assert main(args) == EXIT_OK
    report = json.loads((out / "eval-test" / "report.json").read_text())
    assert report["modes"] == {}
    assert report["class_f1"] is None


def test_sweep(trained_run):
    assert main(["sweep", "--config", TINY, "--out", str(trained_run)]) == EXIT_OK
    with open(trained_run / "sweep" / "sweep.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["list_length", "mode", "wer"]
    assert [(r[0], r[1]) for r in rows[1:]] == [
        ("3", "static"),
        ("3", "dynamic"),
        ("6", "static"),
        ("6", "dynamic"),
    ]


def test_sweep_rerun_is_byte_identical(trained_run):
    args = ["sweep", "--config", TINY, "--out", str(trained_run)]
    assert main(args) == EXIT_OK
    first = _snapshot(trained_run / "sweep")
    assert main(args) == EXIT_OK
    assert _snapshot(trained_run / "sweep") == first


def test_export_attention(trained_run):
    args = [
        "export-attention",
        "--config",
        TINY,
        "--out",
        str(trained_run),
        "--sentence",
        "call amy",
        "--biasing-list",
        str(DATA_DIR / "biasing_list.json"),
    ]
    assert main(args) == EXIT_OK
    names = sorted(p.name for p in (trained_run / "attention").glob("*.csv"))
    assert names == ["attention_layer0_head0.csv", "attention_layer0_head1.csv"]


def test_export_attention_bad_layer(trained_run):
    args = [
        "export-attention",
        "--config",
        TINY,
        "--out",
        str(trained_run),
        "--sentence",
        "call amy",
        "--layers",
        "3",
    ]
    assert main(args) == EXIT_DATA
