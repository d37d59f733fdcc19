"""Optimization: losses, the warmup/cosine/floor learning-rate schedule, the
decoupled-weight-decay adaptive optimizer, and the stage drivers — next-token
pretraining, progressive and joint knowledge transfer, and CE fine-tuning."""

from __future__ import annotations

import contextlib
import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ActivationDataset
from .model import Model, forward, model_digest, save, load_full
from .tensor import Tensor, no_grad


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Loss stayed above 10x its initial value for 50 consecutive steps."""


# -- learning rate schedule -----------------------------------------------------


@dataclass
class LRSchedule:
    """Linear warmup to max_lr, cosine decay to floor_fraction * max_lr,
    constant floor afterwards."""

    max_lr: float
    warmup_steps: int
    decay_steps: int
    floor_fraction: float = 0.1

    def __post_init__(self):
        if self.max_lr <= 0 or not 0 < self.floor_fraction <= 1:
            raise ValueError("need max_lr > 0 and 0 < floor_fraction <= 1")
        if self.warmup_steps < 0 or self.decay_steps < 1:
            raise ValueError("need warmup_steps >= 0 and decay_steps >= 1")

    @property
    def min_lr(self) -> float:
        return self.floor_fraction * self.max_lr


def lr_at(schedule: LRSchedule, step) -> float:
    """Rate at an integer (or fractional) step; exact at the boundaries."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    t = step - schedule.warmup_steps
    floor = schedule.min_lr
    if t >= schedule.decay_steps:
        return floor
    return floor + (schedule.max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t / schedule.decay_steps))


# -- optimizer ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.1
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: dict, betas=(0.9, 0.98), weight_decay=0.1, eps=1e-8):
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   betas=tuple(betas), weight_decay=weight_decay, eps=eps)


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Bias-corrected adaptive moment update with decoupled weight decay:
    p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} != param shape "
                                f"{p.data.shape} for {name!r}")
        if np.isnan(g).any():
            raise TrainingError(f"NaN gradient for {name!r} at optimizer step {state.step}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * update


# -- losses -------------------------------------------------------------------------


def layer_mse(y_teacher: Tensor, y_student: Tensor) -> Tensor:
    """Mean over every element of the squared difference."""
    d = T.sub(y_student, y_teacher)
    return T.reduce_mean(T.mul(d, d))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log softmax probability of the targets. The caller is
    responsible for the next-token shift."""
    targets = np.asarray(targets)
    picked = T.pick_index(T.log_softmax_rows(logits), targets)
    return T.scale(T.reduce_mean(picked), -1.0)


def soft_target_loss(student_logits: Tensor, teacher_logits, temperature: float,
                     targets, weight: float) -> Tensor:
    """weight * T^2 * KL(teacher_T || student_T) + (1 - weight) * CE(student).

    The KL is mean-per-row; the T^2 factor keeps gradient scale comparable
    across temperatures. weight=0 reduces exactly to cross_entropy.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must be in [0, 1], got {weight}")
    ce = cross_entropy(student_logits, targets)
    if weight == 0.0:
        return ce
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    z = t_logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    entropy_rows = np.where(p > 0.0, p * np.log(p, where=p > 0.0), 0.0).sum(axis=-1)
    logq = T.log_softmax_rows(T.scale(student_logits, 1.0 / temperature))
    cross_rows = T.reduce_sum(T.mul(Tensor(p.astype(logq.data.dtype)), logq), axis=-1)
    kl = T.reduce_mean(T.sub(Tensor(entropy_rows.astype(logq.data.dtype)), cross_rows))
    return T.add(T.scale(kl, weight * temperature * temperature),
                 T.scale(ce, 1.0 - weight))


# -- plans and logs ------------------------------------------------------------------


@dataclass
class TrainPlan:
    stage: str
    batch_size: int = 32
    seed: int = 0
    token_budget: int = 0          # CE stages: tokens = batch * context * steps
    epochs: int = 1                # distillation stages: passes over the dataset
    checkpoint_every: int = 0      # steps between mid-run state saves (0 = end only)
    max_steps_per_run: int = 0     # cap per invocation (0 = run to completion)
    max_lr: float = 1e-3
    warmup_frac: float = 0.025
    floor_fraction: float = 0.1
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    soft_target_temp: float = 0.0  # > 0 turns on soft targets in fine-tuning
    soft_target_weight: float = 0.5

    def schedule_for(self, total_steps: int) -> LRSchedule:
        warmup = max(1, round(self.warmup_frac * total_steps))
        decay = max(1, total_steps - warmup)
        return LRSchedule(max_lr=self.max_lr, warmup_steps=warmup,
                          decay_steps=decay, floor_fraction=self.floor_fraction)


@dataclass
class LossLog:
    rows: list = field(default_factory=list)

    def append(self, step, stage, layer, lr, loss, wall_ms):
        self.rows.append({"step": step, "stage": stage, "layer": layer,
                          "lr": lr, "loss": loss, "wall_ms": wall_ms})

    def extend(self, other: "LossLog"):
        self.rows.extend(other.rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "stage", "layer", "lr",
                                              "loss", "wall_ms"])
            w.writeheader()
            w.writerows(self.rows)

    def losses(self, stage=None):
        return [r["loss"] for r in self.rows if stage is None or r["stage"] == stage]


# -- shared machinery -----------------------------------------------------------------


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    return np.random.default_rng([seed, step]).integers(0, n, size=batch)


def _collect_grads(params: dict) -> dict:
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


@contextlib.contextmanager
def _trainable_only(model: Model, names):
    keep = set(names)
    saved = {n: p.requires_grad for n, p in model.params.items()}
    for n, p in model.params.items():
        p.requires_grad = n in keep
    try:
        yield {n: model.params[n] for n in names}
    finally:
        for n, p in model.params.items():
            p.requires_grad = saved[n]


class _DivergenceWatch:
    def __init__(self, initial=None, bad=0, factor=10.0, patience=50):
        self.initial = initial
        self.bad = bad
        self.factor = factor
        self.patience = patience

    def update(self, loss: float):
        if self.initial is None:
            self.initial = loss
        self.bad = self.bad + 1 if loss > self.factor * self.initial else 0
        if self.bad >= self.patience:
            raise DivergenceError(
                f"loss {loss:.4g} stayed above {self.factor}x initial "
                f"({self.initial:.4g}) for {self.patience} consecutive steps")


def _save_state(model, opt, path, stage, step, done, watch, extra_meta=None):
    extras = {f"opt.m.{k}": v for k, v in opt.m.items()}
    extras.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    meta = {"stage": stage, "step": step, "opt_step": opt.step, "done": done,
            "div_initial": watch.initial, "div_bad": watch.bad,
            **(extra_meta or {})}
    save(model, path, extra_tensors=extras, extra_meta=meta)


def _load_state(path, model, opt):
    loaded, extras, meta = load_full(path)
    if loaded.config != model.config:
        raise TrainingError(f"resume config mismatch in {path}")
    for name, p in model.params.items():
        p.data = loaded.params[name].data
    for name in opt.m:
        opt.m[name] = extras[f"opt.m.{name}"]
        opt.v[name] = extras[f"opt.v.{name}"]
    opt.step = int(meta["opt_step"])
    return meta


# -- CE training loop (pretrain / fine-tune) ----------------------------------------


def _ce_loop(model: Model, windows, plan: TrainPlan, stage: str,
             out_dir=None, teacher: Model | None = None,
             state_tag: str | None = None):
    ctx = windows.context_len
    if ctx > model.config.context_len:
        raise TrainingError(f"window length {ctx} exceeds model context "
                            f"{model.config.context_len}")
    if plan.token_budget <= 0:
        return model, LossLog()
    steps = max(1, round(plan.token_budget / (plan.batch_size * ctx)))
    schedule = plan.schedule_for(steps)
    trainable = dict(model.params)
    opt = OptimizerState.fresh(trainable, betas=plan.betas,
                               weight_decay=plan.weight_decay, eps=plan.eps)
    log = LossLog()
    watch = _DivergenceWatch()
    start = 0
    state_path = Path(out_dir) / f"{state_tag or stage}.state.ckpt" if out_dir else None
    if state_path and state_path.exists():
        meta = _load_state(state_path, model, opt)
        if meta.get("done"):
            return model, log
        start = int(meta["step"])
        watch = _DivergenceWatch(initial=meta.get("div_initial"),
                                 bad=int(meta.get("div_bad") or 0))

    soft = teacher is not None and plan.soft_target_temp > 0
    end = steps if plan.max_steps_per_run <= 0 else min(steps, start + plan.max_steps_per_run)
    for step in range(start, end):
        t0 = time.perf_counter()
        idx = _batch_indices(plan.seed, step, len(windows), plan.batch_size)
        batch = windows.windows[idx]
        trace = forward(model, batch)
        logits = T.narrow(trace.logits, 1, 0, ctx - 1)
        targets = batch[:, 1:]
        if soft:
            with no_grad():
                t_logits = forward(teacher, batch).logits.data[:, : ctx - 1, :]
            loss = soft_target_loss(logits, Tensor(t_logits), plan.soft_target_temp,
                                    targets, plan.soft_target_weight)
        else:
            loss = cross_entropy(logits, targets)
        value = loss.item()
        T.backward(loss)
        lr = lr_at(schedule, step)
        optimizer_step(trainable, _collect_grads(trainable), opt, lr)
        T.zero_grad(trainable.values())
        log.append(step, stage, "", lr, value, (time.perf_counter() - t0) * 1e3)
        watch.update(value)
        if state_path and plan.checkpoint_every and (step + 1) % plan.checkpoint_every == 0:
            _save_state(model, opt, state_path, stage, step + 1, False, watch)
    if state_path:
        _save_state(model, opt, state_path, stage, end, end == steps, watch)
    return model, log


def pretrain(model: Model, windows, plan: TrainPlan, out_dir=None,
             state_tag: str | None = None):
    """Next-token cross-entropy training from the model's current state
    (typically a fresh seeded init)."""
    return _ce_loop(model, windows, plan, stage="pretrain", out_dir=out_dir,
                    state_tag=state_tag)


def ce_finetune(model: Model, windows, plan: TrainPlan, out_dir=None,
                teacher: Model | None = None, state_tag: str | None = None):
    """The same loop warm-started from a checkpointed model; with a teacher
    and soft_target_temp > 0 the loss blends in temperature-softened KL.
    A zero token budget is a bitwise no-op."""
    return _ce_loop(model, windows, plan, stage="finetune", out_dir=out_dir,
                    teacher=teacher, state_tag=state_tag)


# -- distillation ---------------------------------------------------------------------


def _check_datasets(student: Model, datasets, teacher: Model | None):
    n = student.config.n_layers
    if len(datasets) != n:
        raise TrainingError(f"need one activation dataset per layer: "
                            f"got {len(datasets)} for {n} layers")
    tdig = model_digest(teacher) if teacher is not None else None
    wdig = datasets[0].info.windows_digest
    for i, ds in enumerate(datasets):
        if ds.info.layer_index != i:
            raise TrainingError(f"dataset {i} holds layer {ds.info.layer_index}")
        if ds.info.d_model != student.config.d_model:
            raise TrainingError(f"dataset d_model {ds.info.d_model} != student "
                                f"{student.config.d_model}")
        if tdig is not None and ds.info.teacher_digest != tdig:
            raise TrainingError(f"dataset {i} was generated by a different teacher")
        if ds.info.windows_digest != wdig:
            raise TrainingError("datasets were built from different window sets")


def distill_mse(student: Model, dataset: ActivationDataset, layer: int,
                batch_size: int = 32) -> float:
    """Mean layer MSE of the student against stored teacher activations."""
    total, count = 0.0, 0
    dtype = T.DTYPES[student.config.precision]
    with no_grad():
        tokens, ys = dataset.load_all()
        for lo in range(0, len(tokens), batch_size):
            tb = tokens[lo: lo + batch_size]
            yb = ys[lo: lo + batch_size].astype(dtype)
            trace = forward(student, tb, capture="all_layers", up_to_layer=layer + 1)
            diff = trace.hidden[layer].data - yb
            total += float((diff * diff).sum())
            count += diff.size
    return total / count


_JKT_TAG = 1_000_003  # out of the per-layer tag range


def _epoch_order(seed: int, tag: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, tag, epoch]).permutation(count)


def progressive_knowledge_transfer(teacher: Model | None, student: Model,
                                   datasets, plan: TrainPlan, out_dir=None,
                                   val_datasets=None):
    """Distill one block at a time: stage i unfreezes block i (plus the
    embedding at stage 0), minimizes that layer's output MSE for
    ``plan.epochs`` passes, then freezes it again. Frozen parameters are
    never touched, so they stay bitwise identical across their span.

    Returns (student, log, per-layer history).
    """
    _check_datasets(student, datasets, teacher)
    n = student.config.n_layers
    log = LossLog()
    history = []
    state_path = Path(out_dir) / "pkt.state.ckpt" if out_dir else None
    first_layer = 0
    if state_path and state_path.exists():
        loaded, _, meta = load_full(state_path)
        for name, p in student.params.items():
            p.data = loaded.params[name].data
        first_layer = int(meta["next_layer"])
        history = meta.get("history", [])
        if first_layer >= n:
            return student, log, history

    for i in range(first_layer, n):
        names = [nm for nm in student.params if nm.startswith(f"layers.{i}.")]
        if i == 0:
            names.append("embed.w")
        entry = {"layer": i}
        if val_datasets is not None:
            entry["val_mse_start"] = distill_mse(student, val_datasets[i], i,
                                                 plan.batch_size)
        with _trainable_only(student, names) as trainable:
            stats = _distill_layer_stage(student, trainable, datasets[i], i,
                                         plan, log, stage="pkt", seed_tag=i)
        entry.update(stats)
        if val_datasets is not None:
            entry["val_mse_end"] = distill_mse(student, val_datasets[i], i,
                                               plan.batch_size)
        history.append(entry)
        if state_path:
            save(student, state_path, extra_meta={"next_layer": i + 1,
                                                  "history": history})
    return student, log, history


def _distill_layer_stage(student, trainable, dataset, layer, plan, log, stage,
                         seed_tag):
    tokens, ys = dataset.load_all()
    count = len(tokens)
    batch = min(plan.batch_size, count)
    steps_per_epoch = count // batch
    total = plan.epochs * steps_per_epoch
    if total == 0:
        return {"steps": 0}
    schedule = plan.schedule_for(total)
    opt = OptimizerState.fresh(trainable, betas=plan.betas,
                               weight_decay=plan.weight_decay, eps=plan.eps)
    dtype = T.DTYPES[student.config.precision]
    watch = _DivergenceWatch()
    first = last = None
    for step in range(total):
        t0 = time.perf_counter()
        epoch, pos = divmod(step, steps_per_epoch)
        order = _epoch_order(plan.seed, seed_tag, epoch, count)
        idx = order[pos * batch: (pos + 1) * batch]
        trace = forward(student, tokens[idx], capture="all_layers",
                        up_to_layer=layer + 1)
        loss = layer_mse(Tensor(ys[idx].astype(dtype)), trace.hidden[layer])
        value = loss.item()
        first = value if first is None else first
        last = value
        T.backward(loss)
        lr = lr_at(schedule, step)
        optimizer_step(trainable, _collect_grads(trainable), opt, lr)
        T.zero_grad(trainable.values())
        log.append(step, stage, layer, lr, value, (time.perf_counter() - t0) * 1e3)
        watch.update(value)
    return {"steps": total, "train_mse_first": first, "train_mse_last": last}


def joint_knowledge_transfer(teacher: Model | None, student: Model, datasets,
                             plan: TrainPlan, out_dir=None, layer_weights=None):
    """Minimize the sum of every layer's output MSE simultaneously; nothing
    is frozen. Datasets must share one window set so records align."""
    _check_datasets(student, datasets, teacher)
    n = student.config.n_layers
    weights = [1.0] * n if layer_weights is None else list(layer_weights)
    if len(weights) != n:
        raise TrainingError(f"need {n} layer weights, got {len(weights)}")
    tokens, _ = datasets[0].load_all()
    ys = [ds.load_all()[1] for ds in datasets]
    count = len(tokens)
    batch = min(plan.batch_size, count)
    steps_per_epoch = count // batch
    total = plan.epochs * steps_per_epoch
    log = LossLog()
    if total == 0:
        return student, log
    schedule = plan.schedule_for(total)
    trainable = dict(student.params)
    opt = OptimizerState.fresh(trainable, betas=plan.betas,
                               weight_decay=plan.weight_decay, eps=plan.eps)
    dtype = T.DTYPES[student.config.precision]
    watch = _DivergenceWatch()
    for step in range(total):
        t0 = time.perf_counter()
        epoch, pos = divmod(step, steps_per_epoch)
        order = _epoch_order(plan.seed, _JKT_TAG, epoch, count)
        idx = order[pos * batch: (pos + 1) * batch]
        trace = forward(student, tokens[idx], capture="all_layers")
        loss = None
        for i in range(n):
            term = layer_mse(Tensor(ys[i][idx].astype(dtype)), trace.hidden[i])
            if weights[i] != 1.0:
                term = T.scale(term, weights[i])
            loss = term if loss is None else T.add(loss, term)
        value = loss.item()
        T.backward(loss)
        lr = lr_at(schedule, step)
        optimizer_step(trainable, _collect_grads(trainable), opt, lr)
        T.zero_grad(trainable.values())
        log.append(step, "jkt", "", lr, value, (time.perf_counter() - t0) * 1e3)
        watch.update(value)
    if out_dir:
        save(student, Path(out_dir) / "jkt.state.ckpt", extra_meta={"done": True})
    return student, log


# -- hyperparameter search --------------------------------------------------------------


@dataclass
class SearchCell:
    lr: float
    batch: int
    train_mse: float
    val_mse: float
    selected: bool = False


@dataclass
class SearchReport:
    cells: list
    best_index: int

    def to_markdown(self) -> str:
        lines = ["| (learning rate, batch size) | train MSE | val MSE | selected |",
                 "| --- | --- | --- | --- |"]
        for c in self.cells:
            mark = "**yes**" if c.selected else "-"
            lines.append(f"| ({c.lr:g}, {c.batch}) | {c.train_mse:.6f} | "
                         f"{c.val_mse:.6f} | {mark} |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["lr,batch,train_mse,val_mse,selected"]
        for c in self.cells:
            out.append(f"{c.lr:g},{c.batch},{c.train_mse:.10g},{c.val_mse:.10g},"
                       f"{int(c.selected)}")
        return "\n".join(out) + "\n"


def hyperparam_search(student_factory, train_dataset: ActivationDataset,
                      val_dataset: ActivationDataset, grid, epochs: int = 1,
                      seed: int = 0, weight_decay: float = 0.1,
                      betas=(0.9, 0.98)) -> SearchReport:
    """Last-layer distillation once per (lr, batch) cell; the winner is the
    validation-MSE argmin, ties broken by lower lr then lower batch."""
    if not grid:
        raise TrainingError("hyperparameter grid is empty")
    layer = train_dataset.info.layer_index
    cells = []
    for lr, batch in grid:
        student = student_factory()
        if layer != student.config.n_layers - 1:
            raise TrainingError(f"search distills the last layer "
                                f"({student.config.n_layers - 1}), dataset holds "
                                f"layer {layer}")
        plan = TrainPlan(stage="search", batch_size=int(batch), seed=seed,
                         epochs=epochs, max_lr=float(lr),
                         weight_decay=weight_decay, betas=betas)
        names = [nm for nm in student.params if nm.startswith(f"layers.{layer}.")]
        log = LossLog()
        with _trainable_only(student, names) as trainable:
            stats = _distill_layer_stage(student, trainable, train_dataset, layer,
                                         plan, log, stage="search", seed_tag=layer)
        per_epoch = max(1, stats["steps"] // max(plan.epochs, 1))
        last_epoch = log.losses("search")[-per_epoch:]
        train_mse = float(np.mean(last_epoch)) if last_epoch else float("nan")
        val_mse = distill_mse(student, val_dataset, layer, plan.batch_size)
        cells.append(SearchCell(lr=float(lr), batch=int(batch),
                                train_mse=train_mse, val_mse=val_mse))
    best = min(range(len(cells)),
               key=lambda i: (cells[i].val_mse, cells[i].lr, cells[i].batch))
    cells[best].selected = True
    return SearchReport(cells=cells, best_index=best)
