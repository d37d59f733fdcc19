"""End-to-end experiment orchestration: the teacher/baseline/distill/fine-tune
chain at desk scale, shared by the command line and the reproduction study."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import evalbench as E
from . import model as MD
from . import training as TR
from .mixers import AttentionConfig, HyenaConfig


@dataclass
class PipelineSettings:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 128
    mlp_hidden_mult: int = 4
    filter_embed_dim: int = 5
    filter_ffn_width: int = 48
    filter_ffn_depth: int = 2
    short_filter_len: int = 3
    window_decay_init: float = 1.0
    precision: str = "f32"
    batch_size: int = 32
    teacher_budget: int = 9_000_000
    arm_budget: int = 3_000_000
    distill_epochs: int = 8
    max_lr: float = 1e-3
    distill_lr: float = 3e-3
    warmup_frac: float = 0.025
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    data_seed: int = 0
    val_fraction: float = 0.005
    run_jkt: bool = True
    checkpoint_every: int = 200

    @property
    def betas(self):
        return (self.beta1, self.beta2)


def attention_model_config(st: PipelineSettings, seed: int) -> MD.ModelConfig:
    return MD.ModelConfig(
        vocab_size=D.BYTE_VOCAB, d_model=st.d_model, n_layers=st.n_layers,
        context_len=st.context_len, mlp_hidden_mult=st.mlp_hidden_mult,
        seed=seed, precision=st.precision,
        mixer=AttentionConfig(d_model=st.d_model, n_heads=st.n_heads))


def hyena_model_config(st: PipelineSettings, seed: int) -> MD.ModelConfig:
    return MD.ModelConfig(
        vocab_size=D.BYTE_VOCAB, d_model=st.d_model, n_layers=st.n_layers,
        context_len=st.context_len, mlp_hidden_mult=st.mlp_hidden_mult,
        seed=seed, precision=st.precision,
        mixer=hyena_mixer_config(st))


def hyena_mixer_config(st: PipelineSettings) -> HyenaConfig:
    return HyenaConfig(d_model=st.d_model, filter_embed_dim=st.filter_embed_dim,
                       filter_ffn_width=st.filter_ffn_width,
                       filter_ffn_depth=st.filter_ffn_depth,
                       short_filter_len=st.short_filter_len,
                       window_decay_init=st.window_decay_init)


def prepare_windows(corpus: D.TokenizedCorpus, st: PipelineSettings):
    """Train/val window sets sized so the training pool covers the largest
    stage budget without reuse starvation."""
    n = max(st.teacher_budget, st.arm_budget) // st.context_len + 1
    return D.sample_windows(corpus, st.context_len, n,
                            val_fraction=st.val_fraction, seed=st.data_seed)


def distill_windows(train: D.WindowSet, st: PipelineSettings) -> D.WindowSet:
    """The slice of training windows every layer's distillation dataset is
    built from; sized so one distillation arm costs arm_budget tokens."""
    n = max(st.batch_size,
            st.arm_budget // (st.distill_epochs * st.n_layers * st.context_len))
    n = min(n, len(train))
    return D.WindowSet(windows=train.windows[:n], starts=train.starts[:n],
                       split="train", seed=train.seed)


def jkt_windows(train: D.WindowSet, st: PipelineSettings) -> D.WindowSet:
    n = max(st.batch_size, st.arm_budget // (st.distill_epochs * st.context_len))
    n = min(n, len(train))
    return D.WindowSet(windows=train.windows[:n], starts=train.starts[:n],
                       split="train", seed=train.seed)


def _plan(st: PipelineSettings, stage: str, seed: int, budget: int = 0,
          epochs: int = 1) -> TR.TrainPlan:
    lr = st.distill_lr if stage in ("pkt", "jkt") else st.max_lr
    return TR.TrainPlan(stage=stage, batch_size=st.batch_size, seed=seed,
                        token_budget=budget, epochs=epochs,
                        checkpoint_every=st.checkpoint_every,
                        max_lr=lr, warmup_frac=st.warmup_frac,
                        weight_decay=st.weight_decay, betas=st.betas)


def train_teacher(corpus, out_dir, st: PipelineSettings, seed: int | None = None):
    """Attention model pretrained from scratch; the distillation source."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "teacher.ckpt"
    if path.exists():
        return MD.load(path, expected_mixer="attention")
    train, _ = prepare_windows(corpus, st)
    model = MD.build(attention_model_config(st, st.data_seed if seed is None else seed))
    plan = _plan(st, "pretrain", model.config.seed, budget=st.teacher_budget)
    _, log = TR.pretrain(model, train, plan, out_dir=out_dir, state_tag="teacher")
    MD.save(model, path, extra_meta={"stage": "teacher",
                                     "token_budget": st.teacher_budget})
    log.write_csv(out_dir / "logs_teacher.csv")
    return model


def run_arms(corpus, teacher, out_dir, st: PipelineSettings, seed: int,
             run_jkt: bool | None = None):
    """One seed's worth of comparison arms: hyena pretrained from scratch,
    PKT-distilled student, optional JKT student, and a CE fine-tune of the
    PKT student. Every arm spends arm_budget tokens. Existing checkpoints
    are reused, so re-invocation resumes."""
    out_dir = Path(out_dir)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    (out_dir / "activations").mkdir(exist_ok=True)
    run_jkt = st.run_jkt if run_jkt is None else run_jkt
    train, val = prepare_windows(corpus, st)
    models = {}

    baseline_path = out_dir / "baseline_hyena.ckpt"
    if baseline_path.exists():
        models["pretrained"] = MD.load(baseline_path, expected_mixer="hyena")
    else:
        baseline = MD.build(hyena_model_config(st, seed + 1000))
        _, log = TR.pretrain(baseline, train,
                             _plan(st, "pretrain", seed, budget=st.arm_budget),
                             out_dir=out_dir, state_tag="pretrain_hyena")
        MD.save(baseline, baseline_path, extra_meta={"stage": "pretrained",
                                                     "seed": seed,
                                                     "token_budget": st.arm_budget})
        log.write_csv(out_dir / "logs" / "pretrain.csv")
        models["pretrained"] = baseline

    dwin = distill_windows(train, st)
    paths = {i: out_dir / "activations" / f"layer{i}.hyad"
             for i in range(st.n_layers)}
    if all(p.exists() for p in paths.values()):
        datasets = [D.load_activation_dataset(paths[i], teacher=teacher)
                    for i in range(st.n_layers)]
    else:
        built = D.build_activation_datasets(teacher, dwin, paths,
                                            batch_size=st.batch_size)
        datasets = [built[i] for i in range(st.n_layers)]

    pkt_path = out_dir / "student_pkt.ckpt"
    if pkt_path.exists():
        models["pkt"] = MD.load(pkt_path, expected_mixer="hyena")
    else:
        student = MD.swap_mixer(teacher, hyena_mixer_config(st), seed=seed + 2000)
        _, log, _ = TR.progressive_knowledge_transfer(
            teacher, student, datasets,
            _plan(st, "pkt", seed, epochs=st.distill_epochs), out_dir=out_dir)
        MD.save(student, pkt_path, extra_meta={"stage": "pkt", "seed": seed,
                                               "token_budget": st.arm_budget})
        log.write_csv(out_dir / "logs" / "pkt.csv")
        models["pkt"] = student

    if run_jkt:
        jkt_path = out_dir / "student_jkt.ckpt"
        if jkt_path.exists():
            models["jkt"] = MD.load(jkt_path, expected_mixer="hyena")
        else:
            jwin = jkt_windows(train, st)
            jpaths = {i: out_dir / "activations" / f"jkt_layer{i}.hyad"
                      for i in range(st.n_layers)}
            jbuilt = D.build_activation_datasets(teacher, jwin, jpaths,
                                                 batch_size=st.batch_size)
            jdatasets = [jbuilt[i] for i in range(st.n_layers)]
            student = MD.swap_mixer(teacher, hyena_mixer_config(st), seed=seed + 3000)
            _, log = TR.joint_knowledge_transfer(
                teacher, student, jdatasets,
                _plan(st, "jkt", seed, epochs=st.distill_epochs), out_dir=out_dir)
            MD.save(student, jkt_path, extra_meta={"stage": "jkt", "seed": seed,
                                                   "token_budget": st.arm_budget})
            log.write_csv(out_dir / "logs" / "jkt.csv")
            models["jkt"] = student

    ft_path = out_dir / "student_finetuned.ckpt"
    if ft_path.exists():
        models["finetune"] = MD.load(ft_path, expected_mixer="hyena")
    else:
        student = MD.clone_model(models["pkt"])
        _, log = TR.ce_finetune(student, train,
                                _plan(st, "finetune", seed, budget=st.arm_budget),
                                out_dir=out_dir)
        MD.save(student, ft_path, extra_meta={"stage": "finetune", "seed": seed,
                                              "token_budget": st.arm_budget})
        log.write_csv(out_dir / "logs" / "finetune.csv")
        models["finetune"] = student

    return models, val


def evaluate_arms(teacher, models, val, st: PipelineSettings, seed: int):
    results = [E.perplexity(teacher, val, batch_size=st.batch_size,
                            label="attention-teacher", stage="teacher",
                            token_budget=st.teacher_budget)]
    labels = {"pretrained": "hyena-pretrained", "pkt": "hyena-pkt-mse",
              "jkt": "hyena-jkt-mse", "finetune": "hyena-ce-finetuned"}
    for stage, model in models.items():
        results.append(E.perplexity(model, val, batch_size=st.batch_size,
                                    label=labels[stage], stage=stage, seed=seed,
                                    token_budget=st.arm_budget))
    return results


@dataclass
class StudyResult:
    results: list
    medians: dict
    ordering_ok: bool
    finetune_gain: float
    wall_seconds: float


def directional_study(corpus, work_dir, st: PipelineSettings,
                      seeds=(0, 1, 2)) -> StudyResult:
    """Train one shared teacher, run every arm per seed, and compare
    median validation perplexities across seeds.

    The expected ordering at matched per-arm budgets is
    pretrained >= PKT-distilled >= CE-fine-tuned.
    """
    t0 = time.perf_counter()
    work_dir = Path(work_dir)
    teacher = train_teacher(corpus, work_dir / "shared", st)
    all_results = []
    for seed in seeds:
        arm_st = replace(st, run_jkt=False)
        models, val = run_arms(corpus, teacher, work_dir / f"seed{seed}",
                               arm_st, seed=seed)
        all_results.extend(evaluate_arms(teacher, models, val, st, seed))
    medians = {}
    for stage in ("pretrained", "pkt", "finetune"):
        vals = [r.perplexity for r in all_results if r.stage == stage]
        medians[stage] = float(np.median(vals))
    ordering_ok = medians["pretrained"] >= medians["pkt"] >= medians["finetune"]
    gain = (medians["pretrained"] - medians["finetune"]) / medians["pretrained"]
    return StudyResult(results=all_results, medians=medians,
                       ordering_ok=ordering_ok, finetune_gain=gain,
                       wall_seconds=time.perf_counter() - t0)


def throughput_probe(corpus, st: PipelineSettings, probe_steps: int = 3) -> float:
    """Tokens per second of one pretraining step at these settings; used to
    scale budgets to a wall-clock allowance."""
    train, _ = prepare_windows(corpus, st)
    model = MD.build(attention_model_config(st, seed=0))
    plan = _plan(st, "pretrain", 0, budget=st.batch_size * st.context_len * probe_steps)
    t0 = time.perf_counter()
    TR.pretrain(model, train, plan)
    dt = time.perf_counter() - t0
    return st.batch_size * st.context_len * probe_steps / dt


def scale_budgets_to_minutes(corpus, st: PipelineSettings,
                             budget_minutes: float) -> PipelineSettings:
    """Shrink (or keep) stage budgets so the full pipeline is projected to
    fit in the given wall-clock budget, leaving headroom for evaluation."""
    rate = throughput_probe(corpus, st)
    # stages: teacher + 3 arms of roughly arm_budget each; hyena runs faster
    # than attention, so weighting every arm at the attention rate is headroom
    projected = (st.teacher_budget + 3 * st.arm_budget) / rate
    allowance = budget_minutes * 60.0 * 0.8
    if projected <= allowance:
        return st
    factor = allowance / projected
    # scaling only ever shrinks a budget; the floor keeps runs non-degenerate
    def shrink(budget):
        return max(min(budget, 50_000), int(budget * factor))

    return replace(st, teacher_budget=shrink(st.teacher_budget),
                   arm_budget=shrink(st.arm_budget))
