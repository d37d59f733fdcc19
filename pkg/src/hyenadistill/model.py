"""GPT-NeoX-style decoder: token embedding, parallel-residual blocks with a
pluggable token mixer, final norm, tied unembedding, plus checkpoint
serialization and the attention-to-hyena mixer swap."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._container import MAGIC_MODEL, ContainerError, dtype_code, read_header, write_header
from .mixers import MIXERS, AttentionConfig, HyenaConfig, mixer_kind
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    mixer: AttentionConfig | HyenaConfig
    n_layers: int = 6
    mlp_hidden_mult: int = 4
    context_len: int = 1024
    tie_embeddings: bool = True
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.n_layers < 1 or self.context_len < 2 or self.vocab_size < 2:
            raise ValueError("need n_layers >= 1, context_len >= 2, vocab_size >= 2")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.mixer.d_model != self.d_model:
            raise ValueError(f"mixer d_model {self.mixer.d_model} != model d_model {self.d_model}")

    @property
    def mixer_kind(self) -> str:
        return mixer_kind(self.mixer)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mixer"] = {"kind": self.mixer_kind, **dataclasses.asdict(self.mixer)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        m = dict(d.pop("mixer"))
        kind = m.pop("kind")
        if kind not in MIXERS:
            raise ContainerError(f"unknown mixer kind {kind!r}")
        d["mixer"] = MIXERS[kind][0](**m)
        return cls(**d)


@dataclass
class LayerTrace:
    """Per-layer residual-stream outputs plus final logits (logits are None
    when the forward pass was truncated below the top)."""

    hidden: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def mixer_forward(self, x: Tensor, layer: int, position_offset: int = 0) -> Tensor:
        prefix = f"layers.{layer}.mixer."
        sub = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        fwd = MIXERS[self.config.mixer_kind][2]
        return fwd(x, self.config.mixer, sub, position_offset=position_offset)

    def parameter_names(self) -> list[str]:
        return sorted(self.params)


def _param_layout(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) triples in creation order. init is one of
    normal | zeros | ones | mixer."""
    d, mult = config.d_model, config.mlp_hidden_mult
    out = [("embed.w", (config.vocab_size, d), "normal")]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        out += [
            (p + "norm1.g", (d,), "ones"), (p + "norm1.b", (d,), "zeros"),
            (p + "norm2.g", (d,), "ones"), (p + "norm2.b", (d,), "zeros"),
            (p + "mixer", (), "mixer"),
            (p + "mlp.w1", (d, mult * d), "normal"), (p + "mlp.b1", (mult * d,), "zeros"),
            (p + "mlp.w2", (mult * d, d), "normal"), (p + "mlp.b2", (d,), "zeros"),
        ]
    out += [("final_norm.g", (d,), "ones"), ("final_norm.b", (d,), "zeros")]
    if not config.tie_embeddings:
        out.append(("unembed.w", (d, config.vocab_size), "normal"))
    return out


def build(config: ModelConfig) -> Model:
    """Deterministic seeded init: dense weights normal(0, 0.02), biases zero,
    norm gains one. The hyena variant carries no rotary tables by
    construction; attention applies them inside its forward."""
    seeds = T.seed_stream(config.seed)
    init_mixer = MIXERS[config.mixer_kind][1]
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_layout(config):
        if kind == "mixer":
            sub = init_mixer(config.mixer, next(seeds), dtype=config.precision)
            params.update({f"{name}.{k}": v for k, v in sub.items()})
        elif kind == "normal":
            params[name] = T.create(shape, "normal", mu=0.0, sigma=0.02,
                                    seed=next(seeds), dtype=config.precision,
                                    requires_grad=True)
        else:
            params[name] = T.create(shape, kind, dtype=config.precision,
                                    requires_grad=True)
    return Model(config, params)


def forward(model: Model, tokens, capture: str = "none",
            up_to_layer: int | None = None, position_offset: int = 0) -> LayerTrace:
    """Run the decoder. Each block computes x + Mixer(norm1(x)) + MLP(norm2(x))
    with both branches reading the same input (parallel residual form).

    ``capture="all_layers"`` records every block's output. ``up_to_layer``
    stops after that many blocks and skips the logits (used by layer-wise
    distillation)."""
    if capture not in ("none", "all_layers"):
        raise ValueError(f"capture must be 'none' or 'all_layers', got {capture!r}")
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ValueError(f"tokens must be [L] or [batch, L], got shape {tokens.shape}")
    L = tokens.shape[-1]
    cfg = model.config
    if L > cfg.context_len:
        raise ValueError(f"sequence length {L} exceeds context_len {cfg.context_len}")
    p = model.params
    x = T.embedding(p["embed.w"], tokens)
    trace = LayerTrace()
    n_blocks = cfg.n_layers if up_to_layer is None else up_to_layer
    for i in range(n_blocks):
        pre = f"layers.{i}."
        mixed = model.mixer_forward(T.layer_norm(x, p[pre + "norm1.g"], p[pre + "norm1.b"]),
                                    i, position_offset)
        h = T.layer_norm(x, p[pre + "norm2.g"], p[pre + "norm2.b"])
        ff = T.linear(T.gelu(T.linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"])),
                      p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        x = T.add(T.add(x, mixed), ff)
        if capture == "all_layers":
            trace.hidden.append(x)
    if up_to_layer is None:
        xn = T.layer_norm(x, p["final_norm.g"], p["final_norm.b"])
        if cfg.tie_embeddings:
            trace.logits = T.matmul(xn, T.transpose(p["embed.w"]))
        else:
            trace.logits = T.matmul(xn, p["unembed.w"])
    return trace


# -- serialization ----------------------------------------------------------------


def save(model: Model, path, extra_tensors: dict | None = None,
         extra_meta: dict | None = None) -> None:
    """Checkpoint: "HYSC" magic, version, JSON manifest (config + tensor
    directory), then the raw little-endian payload in manifest order."""
    entries = []
    arrays = []
    offset = 0
    named = [(name, model.params[name].data) for name in sorted(model.params)]
    for name, arr in list(named) + sorted((extra_tensors or {}).items()):
        arr = np.ascontiguousarray(arr)
        tag = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
               np.dtype(np.int32): "i32", np.dtype(np.int64): "i64"}[arr.dtype]
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": arr.nbytes})
        arrays.append(arr)
        offset += arr.nbytes
    manifest = {"format": "model", "config": model.config.to_dict(),
                "tensors": entries, "extra_meta": extra_meta or {}}
    with open(path, "wb") as f:
        write_header(f, MAGIC_MODEL, manifest)
        for arr in arrays:
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_full(path, expected_mixer: str | None = None):
    """Load a checkpoint; returns (model, extra_tensors, extra_meta)."""
    with open(path, "rb") as f:
        manifest = read_header(f, MAGIC_MODEL)
        payload = f.read()
    if manifest.get("format") != "model":
        raise ContainerError("container does not hold a model checkpoint")
    config = ModelConfig.from_dict(manifest["config"])
    if expected_mixer is not None and config.mixer_kind != expected_mixer:
        raise ContainerError(f"checkpoint mixer kind is {config.mixer_kind!r}, "
                             f"expected {expected_mixer!r}")
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(dtype_code(e["dtype"]))
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ContainerError(f"payload truncated: tensor {e['name']!r} "
                                 f"needs bytes up to {end}, file has {len(payload)}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dt).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    model = build(config)
    extras = {}
    for name, arr in tensors.items():
        if name in model.params:
            if model.params[name].data.shape != arr.shape:
                raise ContainerError(f"tensor {name!r} shape {arr.shape} does not "
                                     f"match config shape {model.params[name].data.shape}")
            model.params[name].data = arr
        else:
            extras[name] = arr
    missing = set(model.params) - set(tensors)
    if missing:
        raise ContainerError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
    return model, extras, manifest.get("extra_meta", {})


def load(path, expected_mixer: str | None = None) -> Model:
    return load_full(path, expected_mixer)[0]


# -- derived models -------------------------------------------------------------------


def swap_mixer(teacher: Model, hyena_config: HyenaConfig, seed: int | None = None,
               mode: str = "copy") -> Model:
    """Student with fresh seeded hyena mixers in place of the teacher's.

    ``mode="copy"`` (default) copies embeddings, MLPs, norms, and unembedding
    from the teacher so layer-wise distillation starts from a shared
    substrate; ``mode="fresh"`` keeps the student's own seeded init.
    """
    if hyena_config.d_model != teacher.config.d_model:
        raise ValueError(f"hyena d_model {hyena_config.d_model} != teacher "
                         f"d_model {teacher.config.d_model}")
    if mode not in ("copy", "fresh"):
        raise ValueError(f"mode must be copy or fresh, got {mode!r}")
    student_cfg = dataclasses.replace(
        teacher.config, mixer=hyena_config,
        seed=teacher.config.seed + 1 if seed is None else seed)
    student = build(student_cfg)
    if mode == "copy":
        for name, tens in teacher.params.items():
            if ".mixer." not in name:
                student.params[name].data = tens.data.copy()
    return student


def clone_model(model: Model) -> Model:
    out = build(model.config)
    for name, tens in model.params.items():
        out.params[name].data = tens.data.copy()
    return out


def model_digest(model: Model) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


def param_count_report(model: Model) -> dict:
    """Exact parameter counts, total and by subsystem."""
    groups = {"embedding": 0, "mixers": 0, "mlps": 0, "norms": 0, "unembedding": 0}
    total = 0
    for name, tens in model.params.items():
        n = tens.data.size
        total += n
        if name.startswith("embed."):
            groups["embedding"] += n
        elif ".mixer." in name:
            groups["mixers"] += n
        elif ".mlp." in name:
            groups["mlps"] += n
        elif "norm" in name:
            groups["norms"] += n
        else:
            groups["unembedding"] += n
    return {"total": total, "groups": groups, "mixer_kind": model.config.mixer_kind}
