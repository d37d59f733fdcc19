import numpy as np
import pytest

from hyenadistill import data as D
from hyenadistill import experiments as X


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    words = [b"stone", b"river", b"lamp", b"wind", b"keeps", b"turns", b"the", b"a"]
    blob = b" ".join(words[i] for i in rng.integers(0, len(words), size=30_000))
    return D.tokenize(blob)


TINY = X.PipelineSettings(d_model=16, n_heads=2, context_len=32,
                          filter_ffn_width=8, teacher_budget=16_000,
                          arm_budget=8_000, batch_size=8, distill_epochs=1,
                          val_fraction=0.01, checkpoint_every=0)


def test_distill_windows_budget_accounting(corpus):
    train, _ = X.prepare_windows(corpus, TINY)
    dwin = X.distill_windows(train, TINY)
    spent = TINY.distill_epochs * TINY.n_layers * len(dwin) * TINY.context_len
    assert spent <= TINY.arm_budget * 1.1
    assert len(dwin) >= TINY.batch_size


def test_run_arms_reuses_existing_artifacts(corpus, tmp_path):
    teacher = X.train_teacher(corpus, tmp_path, TINY)
    models, _ = X.run_arms(corpus, teacher, tmp_path, TINY, seed=0, run_jkt=False)
    assert set(models) == {"pretrained", "pkt", "finetune"}
    stamp = (tmp_path / "student_pkt.ckpt").read_bytes()
    models2, _ = X.run_arms(corpus, teacher, tmp_path, TINY, seed=0, run_jkt=False)
    assert (tmp_path / "student_pkt.ckpt").read_bytes() == stamp


def test_evaluate_arms_labels(corpus, tmp_path):
    teacher = X.train_teacher(corpus, tmp_path, TINY)
    models, val = X.run_arms(corpus, teacher, tmp_path, TINY, seed=0, run_jkt=False)
    results = X.evaluate_arms(teacher, models, val, TINY, seed=0)
    stages = [r.stage for r in results]
    assert stages[0] == "teacher"
    assert set(stages) == {"teacher", "pretrained", "pkt", "finetune"}
    assert all(r.perplexity >= 1.0 for r in results)


def test_budget_scaling_shrinks(corpus):
    scaled = X.scale_budgets_to_minutes(corpus, TINY, budget_minutes=0.05)
    assert scaled.arm_budget <= TINY.arm_budget
    assert scaled.teacher_budget >= 50_000 or scaled.teacher_budget <= TINY.teacher_budget
