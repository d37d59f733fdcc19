import os
from pathlib import Path

import numpy as np
import pytest

from hyenadistill import cli
from hyenadistill.evalbench import parse_report_csv

FAST = ["--set", "model.d_model=16", "--set", "model.n_heads=2",
        "--set", "model.context_len=32", "--set", "hyena.filter_ffn_width=8",
        "--set", "train.teacher_budget=20000", "--set", "train.arm_budget=8000",
        "--set", "train.batch_size=8", "--set", "train.distill_epochs=1",
        "--set", "data.val_fraction=0.01",
        "--set", "bench.lengths=64,128,256,512", "--set", "bench.repeats=3"]


def run(out_dir, *argv):
    return cli.main(["--out-dir", str(out_dir), *FAST, *argv])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert run(out, "ingest") == 0
    return out


def test_config_value_parsing():
    assert cli.parse_value("64") == 64
    assert cli.parse_value("1e-3") == 1e-3
    assert cli.parse_value("true") is True
    assert cli.parse_value('"runs/x"') == "runs/x"
    assert cli.parse_value("attention") == "attention"


def test_config_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "exp.toml"
    cfg_file.write_text("# experiment\nmodel.d_model = 32\ntrain.max_lr = 2e-3\n")
    cfg = cli.resolve_config(str(cfg_file), ["model.d_model=64"])
    assert cfg["model.d_model"] == 64  # override wins
    assert cfg["train.max_lr"] == 2e-3
    st = cli.settings_from_config(cfg)
    assert st.d_model == 64 and st.max_lr == 2e-3


def test_unknown_key_rejected():
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(None, ["model.width=64"])


def test_unknown_flag_exits_2(tmp_path):
    assert cli.main(["--out-dir", str(tmp_path), "ingest", "--bogus"]) == 2


def test_missing_file_exit_code(tmp_path):
    code = cli.main(["--out-dir", str(tmp_path), "eval", "--ckpt", "nope.ckpt"])
    assert code == 3


def test_config_error_exit_code(tmp_path):
    code = cli.main(["--out-dir", str(tmp_path), "--set", "bogus.key=1", "ingest"])
    assert code == 4


def test_ingest_writes_corpus_and_snapshot(pipeline_dir):
    assert (pipeline_dir / "corpus.tok").exists()
    resolved = (pipeline_dir / "resolved.toml").read_text()
    assert "model.d_model = 16" in resolved
    assert 'run.command = "ingest"' in resolved
    reparsed = cli.parse_config_text(resolved)
    assert reparsed["model.d_model"] == 16


def test_full_stage_chain(pipeline_dir):
    assert run(pipeline_dir, "pretrain", "--mixer", "attention") == 0
    assert (pipeline_dir / "teacher.ckpt").exists()
    assert run(pipeline_dir, "pretrain", "--mixer", "hyena") == 0
    assert (pipeline_dir / "baseline_hyena.ckpt").exists()
    assert run(pipeline_dir, "dump-activations") == 0
    assert (pipeline_dir / "activations" / "layer0.hyad").exists()
    assert run(pipeline_dir, "distill", "--mode", "pkt") == 0
    assert (pipeline_dir / "student_pkt.ckpt").exists()
    assert run(pipeline_dir, "distill", "--mode", "jkt") == 0
    assert (pipeline_dir / "student_jkt.ckpt").exists()
    # pkt and jkt students are distinct artifacts with stage-tagged logs
    assert (pipeline_dir / "logs" / "pkt.csv").read_text().count("pkt") > 1
    assert (pipeline_dir / "logs" / "jkt.csv").read_text().count("jkt") > 1
    a = (pipeline_dir / "student_pkt.ckpt").read_bytes()
    b = (pipeline_dir / "student_jkt.ckpt").read_bytes()
    assert a != b
    assert run(pipeline_dir, "finetune") == 0
    assert (pipeline_dir / "student_finetuned.ckpt").exists()


def test_eval_and_report(pipeline_dir):
    assert run(pipeline_dir, "eval", "--ckpt", str(pipeline_dir / "teacher.ckpt"),
               "--label", "teacher", "--stage", "teacher") == 0
    assert run(pipeline_dir, "eval", "--ckpt",
               str(pipeline_dir / "student_finetuned.ckpt")) == 0
    rows = parse_report_csv((pipeline_dir / "eval.csv").read_text())
    assert len(rows) == 2
    assert all(r.perplexity >= 1.0 for r in rows)
    assert run(pipeline_dir, "report") == 0
    report = (pipeline_dir / "report.md").read_text()
    assert "teacher" in report and "perplexity" in report


def test_rerun_resumes_cleanly(pipeline_dir):
    before = (pipeline_dir / "teacher.ckpt").read_bytes()
    assert run(pipeline_dir, "pretrain", "--mixer", "attention") == 0
    assert (pipeline_dir / "teacher.ckpt").read_bytes() == before


def test_bench_writes_csv(pipeline_dir):
    assert run(pipeline_dir, "bench") == 0
    text = (pipeline_dir / "bench.csv").read_text()
    assert text.splitlines()[0] == "mixer,length,median_s,min_s,repeats,slope"
    assert "attention" in text and "hyena" in text


def test_lock_blocks_concurrent_runs(tmp_path):
    lock = tmp_path / ".lock"
    tmp_path.mkdir(exist_ok=True)
    lock.write_text(str(os.getpid()))  # a live pid
    code = cli.main(["--out-dir", str(tmp_path), "ingest"])
    assert code == 6
    lock.write_text("999999999")  # stale pid is reclaimed
    assert cli.main(["--out-dir", str(tmp_path), *FAST, "ingest"]) == 0


def test_pipeline_smoke(tmp_path):
    code = run(tmp_path, "pipeline")
    assert code == 0
    for name in ("teacher.ckpt", "baseline_hyena.ckpt", "student_pkt.ckpt",
                 "student_jkt.ckpt", "student_finetuned.ckpt", "eval.csv",
                 "bench.csv", "report.md"):
        assert (tmp_path / name).exists(), name
    rows = parse_report_csv((tmp_path / "eval.csv").read_text())
    assert {r.stage for r in rows} >= {"teacher", "pretrained", "pkt", "finetune"}
    assert not (tmp_path / ".lock").exists()


def test_resolved_snapshot_reproduces_run_bitwise(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "ingest") == 0
    assert run(a, "pretrain", "--mixer", "attention") == 0
    # rebuild a fresh run directory from nothing but the snapshot
    assert cli.main(["--out-dir", str(b), "--config", str(a / "resolved.toml"),
                     "ingest"]) == 0
    assert cli.main(["--out-dir", str(b), "--config", str(a / "resolved.toml"),
                     "pretrain", "--mixer", "attention"]) == 0
    assert (a / "teacher.ckpt").read_bytes() == (b / "teacher.ckpt").read_bytes()


def test_pipeline_budget_minutes_flag(tmp_path):
    assert run(tmp_path, "pipeline", "--budget-minutes", "30") == 0
    assert (tmp_path / "report.md").exists()
