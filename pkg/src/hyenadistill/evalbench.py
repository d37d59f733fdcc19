"""Perplexity evaluation, mixer scaling benchmarks, and comparative reports."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mixers import MIXERS, mixer_kind
from .model import Model, forward
from .model import model_digest as _model_digest
from .tensor import Tensor, no_grad


class BenchError(RuntimeError):
    pass


@dataclass
class EvalResult:
    model_digest: str
    dataset_digest: str
    context_len: int
    mean_ce: float
    perplexity: float
    token_count: int
    precision: str
    label: str = ""
    stage: str = ""
    seed: int | None = None
    token_budget: int | None = None


def perplexity(model: Model, windows, context_len: int | None = None,
               batch_size: int = 32, label: str = "", stage: str = "",
               seed: int | None = None, token_budget: int | None = None) -> EvalResult:
    """Mean next-token cross-entropy over every position of every window,
    exponentiated. Windows are scored independently (no sliding context);
    per-token terms are combined with exact compensated summation, so the
    result does not depend on evaluation order."""
    if len(windows) == 0:
        raise ValueError("empty window set")
    ctx = windows.context_len
    if context_len is not None and context_len != ctx:
        raise ValueError(f"windows have context {ctx}, expected {context_len}")
    nll_parts = []
    count = 0
    with no_grad():
        for lo in range(0, len(windows), batch_size):
            batch = windows.windows[lo: lo + batch_size]
            logits = forward(model, batch).logits.data
            z = logits[:, :-1, :].astype(np.float64)
            z -= z.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=-1))
            targets = batch[:, 1:]
            picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
            nll_parts.append((lse - picked).reshape(-1))
            count += targets.size
    mean_ce = math.fsum(np.concatenate(nll_parts)) / count
    return EvalResult(model_digest=_model_digest(model), dataset_digest=windows.digest,
                      context_len=ctx, mean_ce=mean_ce,
                      perplexity=float(np.exp(mean_ce)), token_count=count,
                      precision=model.config.precision, label=label, stage=stage,
                      seed=seed, token_budget=token_budget)


# -- scaling benchmark -----------------------------------------------------------------


@dataclass
class BenchRecord:
    mixer: str
    length: int
    median_s: float
    min_s: float
    repeats: int


@dataclass
class BenchReport:
    records: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["mixer", "length", "median_s", "min_s", "repeats", "slope"])
        for r in self.records:
            w.writerow([r.mixer, r.length, f"{r.median_s:.9f}", f"{r.min_s:.9f}",
                        r.repeats, f"{self.slopes[r.mixer]:.4f}"])
        return out.getvalue()


def scaling_bench(mixer_configs, lengths, repeats: int = 5, seed: int = 0,
                  dtype: str = "f32") -> BenchReport:
    """Forward-only wall time of each mixer versus sequence length.

    One warmup run per point is excluded, and the timed repeats round-robin
    across lengths so a burst of machine contention cannot poison a single
    point's statistics. The per-mixer slope is the least-squares fit of log
    median time against log length over the grid.
    """
    lengths = list(lengths)
    if len(lengths) < 4 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("need at least 4 strictly increasing lengths")
    if repeats < 3:
        raise ValueError("need repeats >= 3")
    report = BenchReport()
    for config in mixer_configs:
        kind = mixer_kind(config)
        _, init, fwd = MIXERS[kind]
        params = init(config, seed=seed, dtype=dtype)
        inputs = {L: Tensor(np.random.default_rng([seed, L])
                            .normal(size=(L, config.d_model)).astype(T.DTYPES[dtype]))
                  for L in lengths}
        times = {L: [] for L in lengths}
        with no_grad():
            for L in lengths:
                fwd(inputs[L], config, params)  # warmup excluded from statistics
            for _ in range(repeats):
                for L in lengths:
                    t0 = time.perf_counter()
                    fwd(inputs[L], config, params)
                    times[L].append(time.perf_counter() - t0)
        medians = []
        for L in lengths:
            med = float(np.median(times[L]))
            if med < 1e-6:
                raise BenchError(f"median {med:.3g}s at L={L} is below timer "
                                 "resolution; increase repeats or sizes")
            medians.append(med)
            report.records.append(BenchRecord(mixer=kind, length=L, median_s=med,
                                              min_s=float(min(times[L])),
                                              repeats=repeats))
        slope, _ = np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)),
                              np.log(np.asarray(medians)), 1)
        report.slopes[kind] = float(slope)
    return report


# -- comparative report -----------------------------------------------------------------


_STAGE_ORDER = {"teacher": 0, "pretrained": 1, "mse": 2, "pkt": 2, "jkt": 3,
                "finetune": 4}

_CSV_FIELDS = ["label", "stage", "seed", "token_budget", "context_len",
               "token_count", "mean_ce", "perplexity", "precision",
               "model_digest", "dataset_digest"]


def compare_report(results, fmt: str = "markdown") -> str:
    """Render evaluation rows, teacher first and then pipeline order.
    Optional fields render as '-'. CSV parses back losslessly."""
    if not results:
        raise ValueError("no results to report")
    ordered = sorted(results, key=lambda r: (_STAGE_ORDER.get(r.stage, 9),
                                             r.label, r.seed if r.seed is not None else -1))
    if fmt == "csv":
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(_CSV_FIELDS)
        for r in ordered:
            w.writerow([_cell(getattr(r, f)) for f in _CSV_FIELDS])
        return out.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    cols = ["model", "stage", "seed", "budget (tokens)", "context", "tokens scored",
            "mean CE", "perplexity", "precision"]
    lines = ["| " + " | ".join(cols) + " |",
             "| " + " | ".join("---" for _ in cols) + " |"]
    for r in ordered:
        lines.append("| " + " | ".join([
            _cell(r.label), _cell(r.stage), _cell(r.seed), _cell(r.token_budget),
            str(r.context_len), str(r.token_count), f"{r.mean_ce:.4f}",
            f"{r.perplexity:.3f}", r.precision]) + " |")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[EvalResult]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append(EvalResult(
            model_digest=row["model_digest"], dataset_digest=row["dataset_digest"],
            context_len=int(row["context_len"]), mean_ce=float(row["mean_ce"]),
            perplexity=float(row["perplexity"]), token_count=int(row["token_count"]),
            precision=row["precision"], label=row["label"], stage=row["stage"],
            seed=None if row["seed"] == "-" else int(row["seed"]),
            token_budget=None if row["token_budget"] == "-" else int(row["token_budget"])))
    return out


def _cell(value) -> str:
    if value is None or value == "":
        return "-"
    if isinstance(value, float):
        return repr(value)
    return str(value)
