"""Command-line entry point: ingest -> pretrain -> dump-activations ->
distill -> finetune -> eval -> bench -> report, plus a `pipeline` command
that chains everything on the bundled sample corpus.

Configuration is a flat key = value file with dotted sections; command-line
--set overrides win. Every run writes the resolved configuration snapshot
into its output directory and holds a lock file for its duration.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

_THREAD_ENV = "HYENADISTILL_THREADS"


class ConfigError(Exception):
    pass


class LockError(Exception):
    pass


# -- configuration ------------------------------------------------------------------

_SETTINGS_KEYS = {
    "model.d_model": ("d_model", int),
    "model.n_layers": ("n_layers", int),
    "model.n_heads": ("n_heads", int),
    "model.context_len": ("context_len", int),
    "model.mlp_hidden_mult": ("mlp_hidden_mult", int),
    "model.precision": ("precision", str),
    "hyena.filter_embed_dim": ("filter_embed_dim", int),
    "hyena.filter_ffn_width": ("filter_ffn_width", int),
    "hyena.filter_ffn_depth": ("filter_ffn_depth", int),
    "hyena.short_filter_len": ("short_filter_len", int),
    "hyena.window_decay_init": ("window_decay_init", float),
    "train.batch_size": ("batch_size", int),
    "train.teacher_budget": ("teacher_budget", int),
    "train.arm_budget": ("arm_budget", int),
    "train.distill_epochs": ("distill_epochs", int),
    "train.max_lr": ("max_lr", float),
    "train.warmup_frac": ("warmup_frac", float),
    "train.weight_decay": ("weight_decay", float),
    "train.beta1": ("beta1", float),
    "train.beta2": ("beta2", float),
    "train.distill_lr": ("distill_lr", float),
    "train.checkpoint_every": ("checkpoint_every", int),
    "data.seed": ("data_seed", int),
    "data.val_fraction": ("val_fraction", float),
    "pipeline.run_jkt": ("run_jkt", bool),
}

_EXTRA_KEYS = {
    "pipeline.seed": int,
    "bench.lengths": str,
    "bench.repeats": int,
}

_EXTRA_DEFAULTS = {
    "pipeline.seed": 0,
    "bench.lengths": "1024,2048,4096,8192",
    "bench.repeats": 3,
}


def parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = parse_value(raw)
    return out


def resolve_config(config_path: str | None, overrides) -> dict:
    cfg = dict(_EXTRA_DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path}")
        cfg.update(parse_config_text(path.read_text()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        cfg[key.strip()] = parse_value(raw)
    cfg.pop("run.command", None)  # resolved snapshots feed back in cleanly
    known = set(_SETTINGS_KEYS) | set(_EXTRA_KEYS)
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def settings_from_config(cfg: dict):
    from .experiments import PipelineSettings
    kwargs = {}
    for key, (attr, typ) in _SETTINGS_KEYS.items():
        if key in cfg:
            value = cfg[key]
            if typ is bool and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true/false, got {value!r}")
            if typ in (int, float) and isinstance(value, bool):
                raise ConfigError(f"{key} must be {typ.__name__}, got a boolean")
            if typ is int and not isinstance(value, int):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            if typ is float and not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number, got {value!r}")
            kwargs[attr] = typ(value)
    try:
        return PipelineSettings(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def write_resolved(cfg: dict, out_dir: Path, command: str) -> None:
    from .experiments import PipelineSettings
    import dataclasses
    st = settings_from_config(cfg)
    full = dict(cfg)
    reverse = {attr: key for key, (attr, _) in _SETTINGS_KEYS.items()}
    for f in dataclasses.fields(PipelineSettings):
        if f.name in reverse:
            full.setdefault(reverse[f.name], getattr(st, f.name))
    full["run.command"] = command
    lines = []
    for key in sorted(full):
        value = full[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, str):
            rendered = f'"{value}"'
        else:
            rendered = repr(value)
        lines.append(f"{key} = {rendered}")
    (out_dir / "resolved.toml").write_text("\n".join(lines) + "\n")


# -- lock file -----------------------------------------------------------------------


@contextlib.contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    if lock.exists():
        try:
            pid = int(lock.read_text().strip())
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError, PermissionError):
            lock.unlink()  # stale
        else:
            raise LockError(f"output directory is locked by running pid {pid}")
    lock.write_text(str(os.getpid()))
    try:
        yield
    finally:
        if lock.exists():
            lock.unlink()


# -- helpers -------------------------------------------------------------------------


def _load_corpus(out_dir: Path):
    from . import data as D
    path = out_dir / "corpus.tok"
    if not path.exists():
        raise FileNotFoundError(f"{path} (run `ingest` first)")
    return D.load_corpus(path)


def _sample_corpus_path() -> Path:
    return Path(__file__).parent / "assets" / "sample_corpus.txt"


def _append_eval(out_dir: Path, results) -> None:
    from .evalbench import compare_report, parse_report_csv
    path = out_dir / "eval.csv"
    rows = parse_report_csv(path.read_text()) if path.exists() else []
    rows.extend(results)
    path.write_text(compare_report(rows, fmt="csv"))


# -- subcommands ----------------------------------------------------------------------


def cmd_ingest(args, cfg, out_dir):
    from . import data as D
    if args.text:
        blob = b"".join(Path(p).read_bytes() for p in args.text)
    else:
        blob = _sample_corpus_path().read_bytes()
    corpus = D.tokenize(blob)
    D.save_corpus(corpus, out_dir / "corpus.tok")
    print(f"ingested {len(corpus.tokens)} tokens -> {out_dir / 'corpus.tok'}")
    return 0


def cmd_pretrain(args, cfg, out_dir):
    from . import model as MD
    from . import training as TR
    from . import experiments as X
    st = settings_from_config(cfg)
    corpus = _load_corpus(out_dir)
    if args.mixer == "attention":
        model = X.train_teacher(corpus, out_dir, st, seed=args.seed)
        print(f"teacher ready: {out_dir / 'teacher.ckpt'}")
    else:
        path = out_dir / "baseline_hyena.ckpt"
        if path.exists():
            print(f"baseline already complete: {path}")
            return 0
        train, _ = X.prepare_windows(corpus, st)
        seed = args.seed if args.seed is not None else cfg["pipeline.seed"]
        model = MD.build(X.hyena_model_config(st, seed + 1000))
        plan = X._plan(st, "pretrain", seed, budget=st.arm_budget)
        _, log = TR.pretrain(model, train, plan, out_dir=out_dir,
                             state_tag="pretrain_hyena")
        MD.save(model, path, extra_meta={"stage": "pretrained", "seed": seed,
                                         "token_budget": st.arm_budget})
        log.write_csv(out_dir / "logs_pretrain_hyena.csv")
        print(f"baseline ready: {path}")
    return 0


def cmd_dump_activations(args, cfg, out_dir):
    from . import data as D
    from . import model as MD
    from . import experiments as X
    st = settings_from_config(cfg)
    corpus = _load_corpus(out_dir)
    teacher = MD.load(out_dir / "teacher.ckpt", expected_mixer="attention")
    train, _ = X.prepare_windows(corpus, st)
    dwin = X.distill_windows(train, st)
    (out_dir / "activations").mkdir(exist_ok=True)
    paths = {i: out_dir / "activations" / f"layer{i}.hyad" for i in range(st.n_layers)}
    D.build_activation_datasets(teacher, dwin, paths, batch_size=st.batch_size)
    print(f"wrote {st.n_layers} activation datasets ({len(dwin)} windows each) "
          f"under {out_dir / 'activations'}")
    return 0


def cmd_distill(args, cfg, out_dir):
    from . import data as D
    from . import model as MD
    from . import training as TR
    from . import experiments as X
    st = settings_from_config(cfg)
    corpus = _load_corpus(out_dir)
    teacher = MD.load(out_dir / "teacher.ckpt", expected_mixer="attention")
    seed = args.seed if args.seed is not None else cfg["pipeline.seed"]
    out_path = out_dir / f"student_{args.mode}.ckpt"
    if out_path.exists():
        print(f"distilled student already complete: {out_path}")
        return 0
    if args.mode == "pkt":
        paths = [out_dir / "activations" / f"layer{i}.hyad" for i in range(st.n_layers)]
        for p in paths:
            if not p.exists():
                raise FileNotFoundError(f"{p} (run `dump-activations` first)")
        datasets = [D.load_activation_dataset(p, teacher=teacher) for p in paths]
        student = MD.swap_mixer(teacher, X.hyena_mixer_config(st), seed=seed + 2000)
        _, log, _ = TR.progressive_knowledge_transfer(
            teacher, student, datasets,
            X._plan(st, "pkt", seed, epochs=st.distill_epochs), out_dir=out_dir)
    else:
        train, _ = X.prepare_windows(corpus, st)
        jwin = X.jkt_windows(train, st)
        (out_dir / "activations").mkdir(exist_ok=True)
        jpaths = {i: out_dir / "activations" / f"jkt_layer{i}.hyad"
                  for i in range(st.n_layers)}
        built = D.build_activation_datasets(teacher, jwin, jpaths,
                                            batch_size=st.batch_size)
        datasets = [built[i] for i in range(st.n_layers)]
        student = MD.swap_mixer(teacher, X.hyena_mixer_config(st), seed=seed + 3000)
        _, log = TR.joint_knowledge_transfer(
            teacher, student, datasets,
            X._plan(st, "jkt", seed, epochs=st.distill_epochs), out_dir=out_dir)
    MD.save(student, out_path, extra_meta={"stage": args.mode, "seed": seed,
                                           "token_budget": st.arm_budget})
    (out_dir / "logs").mkdir(exist_ok=True)
    log.write_csv(out_dir / "logs" / f"{args.mode}.csv")
    print(f"student ready: {out_path}")
    return 0


def cmd_finetune(args, cfg, out_dir):
    from . import model as MD
    from . import training as TR
    from . import experiments as X
    st = settings_from_config(cfg)
    corpus = _load_corpus(out_dir)
    src = Path(args.student) if args.student else out_dir / "student_pkt.ckpt"
    if not src.exists():
        raise FileNotFoundError(f"{src} (run `distill` first)")
    out_path = out_dir / "student_finetuned.ckpt"
    if out_path.exists():
        print(f"fine-tuned student already complete: {out_path}")
        return 0
    student = MD.load(src)
    seed = args.seed if args.seed is not None else cfg["pipeline.seed"]
    train, _ = X.prepare_windows(corpus, st)
    _, log = TR.ce_finetune(student, train,
                            X._plan(st, "finetune", seed, budget=st.arm_budget),
                            out_dir=out_dir)
    MD.save(student, out_path, extra_meta={"stage": "finetune", "seed": seed,
                                           "token_budget": st.arm_budget})
    (out_dir / "logs").mkdir(exist_ok=True)
    log.write_csv(out_dir / "logs" / "finetune.csv")
    print(f"fine-tuned student ready: {out_path}")
    return 0


def cmd_eval(args, cfg, out_dir):
    from . import model as MD
    from . import evalbench as E
    from . import experiments as X
    st = settings_from_config(cfg)
    corpus = _load_corpus(out_dir)
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt}")
    model = MD.load(ckpt)
    _, val = X.prepare_windows(corpus, st)
    _, _, meta = MD.load_full(ckpt)
    result = E.perplexity(model, val, batch_size=st.batch_size,
                          label=args.label or ckpt.stem,
                          stage=args.stage or meta.get("stage", ""),
                          seed=meta.get("seed"),
                          token_budget=meta.get("token_budget"))
    _append_eval(out_dir, [result])
    print(f"{result.label}: perplexity {result.perplexity:.3f} "
          f"(mean CE {result.mean_ce:.4f} over {result.token_count} tokens)")
    return 0


def cmd_bench(args, cfg, out_dir):
    from . import evalbench as E
    from . import experiments as X
    st = settings_from_config(cfg)
    lengths = [int(x) for x in str(cfg["bench.lengths"]).split(",")]
    repeats = int(cfg["bench.repeats"])
    from .mixers import AttentionConfig
    configs = [AttentionConfig(d_model=st.d_model, n_heads=st.n_heads),
               X.hyena_mixer_config(st)]
    report = E.scaling_bench(configs, lengths, repeats=repeats, seed=st.data_seed)
    (out_dir / "bench.csv").write_text(report.to_csv())
    for kind, slope in report.slopes.items():
        print(f"{kind}: fitted log-log slope {slope:.3f}")
    return 0


def cmd_report(args, cfg, out_dir):
    from .evalbench import compare_report, parse_report_csv
    path = out_dir / "eval.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} (run `eval` first)")
    results = parse_report_csv(path.read_text())
    md = compare_report(results, fmt="markdown")
    (out_dir / "report.md").write_text(md)
    print(md, end="")
    return 0


def cmd_pipeline(args, cfg, out_dir):
    from . import model as MD
    from . import experiments as X
    st = settings_from_config(cfg)
    seed = cfg["pipeline.seed"]
    if not (out_dir / "corpus.tok").exists():
        cmd_ingest(argparse.Namespace(text=None), cfg, out_dir)
    corpus = _load_corpus(out_dir)
    if args.budget_minutes:
        st = X.scale_budgets_to_minutes(corpus, st, args.budget_minutes)
        print(f"budgets scaled to fit {args.budget_minutes} min: "
              f"teacher {st.teacher_budget}, arm {st.arm_budget} tokens")
    teacher = X.train_teacher(corpus, out_dir, st)
    models, val = X.run_arms(corpus, teacher, out_dir, st, seed=seed)
    results = X.evaluate_arms(teacher, models, val, st, seed)
    _append_eval(out_dir, results)
    cmd_bench(args, cfg, out_dir)
    cmd_report(args, cfg, out_dir)
    print("pipeline complete")
    return 0


# -- entry ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hyenadistill",
        description="Train, distill, and benchmark hyena-versus-attention decoders.")
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                   help="override one configuration key (repeatable)")
    p.add_argument("--out-dir", default="runs/default", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="tokenize plain text into corpus.tok")
    s.add_argument("--text", nargs="+", help="input text files (default: bundled sample)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("pretrain", help="pretrain a model from scratch")
    s.add_argument("--mixer", choices=("attention", "hyena"), default="attention")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("dump-activations", help="write per-layer teacher activations")
    s.set_defaults(func=cmd_dump_activations)

    s = sub.add_parser("distill", help="train a hyena student against the teacher")
    s.add_argument("--mode", choices=("pkt", "jkt"), required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("finetune", help="cross-entropy fine-tune a student checkpoint")
    s.add_argument("--student", help="checkpoint to start from (default student_pkt.ckpt)")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--label", default=None)
    s.add_argument("--stage", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="mixer forward-time scaling benchmark")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="render eval.csv as markdown")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("--budget-minutes", type=float, default=None,
                   help="scale token budgets to fit this wall-clock allowance")
    s.set_defaults(func=cmd_pipeline)
    return p


def _apply_thread_env():
    threads = os.environ.get(_THREAD_ENV)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    out_dir = Path(args.out_dir)
    try:
        cfg = resolve_config(args.config, args.overrides)
        with run_lock(out_dir):
            write_resolved(cfg, out_dir, args.command)
            return args.func(args, cfg, out_dir)
    except FileNotFoundError as e:
        print(f"missing-file: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"config-error: {e}", file=sys.stderr)
        return 4
    except LockError as e:
        print(f"lock-error: {e}", file=sys.stderr)
        return 6
    except Exception as e:  # noqa: BLE001 - one-line diagnostic per category
        from ._container import ContainerError
        from .data import ProvenanceError
        from .training import TrainingError
        if isinstance(e, (TrainingError, ContainerError, ProvenanceError)):
            print(f"run-error: {type(e).__name__}: {e}", file=sys.stderr)
            return 5
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


run = main  # argv -> exit code


if __name__ == "__main__":
    sys.exit(main())
