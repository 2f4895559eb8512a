"""A small decoder-only transformer with the seven quantizable projections.

Each layer is pre-RMSNorm causal multi-head attention (q, k, v, o) followed
by a pre-RMSNorm SwiGLU MLP (up, gate, down), both with residual connections.
Positions use a learned absolute embedding. Weights are stored as
``[in_features, out_features]`` so a projection is ``x @ W``.

Only the projections are ever quantized; embeddings, norm gains and the
output head stay at full precision.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError, InputError, ParameterError

PROJECTIONS = ("q", "k", "v", "o", "up", "gate", "down")
_PROJ_ORDER = {p: i for i, p in enumerate(PROJECTIONS)}


@dataclass(frozen=True, order=False)
class ModuleId:
    layer: int
    proj: str

    def __post_init__(self):
        if self.proj not in _PROJ_ORDER:
            raise ParameterError(f"unknown projection {self.proj!r}; expected one of {PROJECTIONS}")

    @property
    def sort_key(self):
        return (self.layer, _PROJ_ORDER[self.proj])

    def __lt__(self, other):
        return self.sort_key < other.sort_key

    def __str__(self):
        return f"{self.layer}.{self.proj}"


@dataclass(frozen=True)
class ModelSpec:
    """Topology and initialisation of the toy model.

    ``weight_scales`` multiplies chosen modules' weights after initialisation
    and ``copies`` overwrites a destination module with the weights of a
    source module first; together they build controlled sensitivity
    experiments. Both hold ``((layer, proj), ...)`` tuples.
    """

    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 256
    max_seq_len: int = 64
    seed: int = 0
    init_std: float = 0.02
    weight_scales: tuple = field(default=())
    copies: tuple = field(default=())

    def __post_init__(self):
        for name in ("hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ParameterError("num_layers must be non-negative")
        if self.hidden_dim % self.num_heads:
            raise ParameterError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not self.init_std > 0:
            raise ParameterError("init_std must be positive")
        # normalise nested lists (e.g. from JSON) into hashable tuples
        scales = tuple((_module_tuple(m), float(s)) for m, s in self.weight_scales)
        copies = tuple((_module_tuple(a), _module_tuple(b)) for a, b in self.copies)
        object.__setattr__(self, "weight_scales", scales)
        object.__setattr__(self, "copies", copies)
        for m, s in scales:
            self._check_module(m)
            if not s > 0:
                raise ParameterError(f"weight scale for {m} must be positive")
        for src, dst in copies:
            self._check_module(src)
            self._check_module(dst)
            if src[1] != dst[1]:
                raise ParameterError(f"cannot copy {src} into {dst}: projection types differ")

    def _check_module(self, m):
        layer, proj = m
        if not 1 <= layer <= self.num_layers or proj not in _PROJ_ORDER:
            raise ParameterError(f"module {m} is outside the model")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    def module_ids(self):
        return [ModuleId(i, p) for i in range(1, self.num_layers + 1) for p in PROJECTIONS]

    def weight_shape(self, proj):
        d, f = self.hidden_dim, self.ffn_dim
        if proj in ("q", "k", "v", "o"):
            return (d, d)
        if proj in ("up", "gate"):
            return (d, f)
        return (f, d)

    def param_counts(self):
        return {m: math.prod(self.weight_shape(m.proj)) for m in self.module_ids()}

    def total_params(self):
        d, f = self.hidden_dim, self.ffn_dim
        return self.num_layers * (4 * d * d + 3 * d * f)

    def to_dict(self):
        out = asdict(self)
        out["weight_scales"] = [[list(m), s] for m, s in self.weight_scales]
        out["copies"] = [[list(a), list(b)] for a, b in self.copies]
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def spec_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _module_tuple(m):
    if isinstance(m, ModuleId):
        return (m.layer, m.proj)
    layer, proj = m
    return (int(layer), str(proj))


@dataclass
class FullPrecisionModel:
    spec: ModelSpec
    embed: np.ndarray
    pos: np.ndarray
    weights: dict  # ModuleId -> [in, out] array
    attn_gains: list
    mlp_gains: list
    final_gain: np.ndarray
    head: np.ndarray

    def weight_map(self):
        return dict(self.weights)

    def arrays(self):
        """Every parameter array in a fixed declaration order."""
        out = [("embed", self.embed), ("pos", self.pos)]
        for i in range(1, self.spec.num_layers + 1):
            out.append((f"attn_gain.{i}", self.attn_gains[i - 1]))
            out.append((f"mlp_gain.{i}", self.mlp_gains[i - 1]))
            for p in PROJECTIONS:
                out.append((f"w.{i}.{p}", self.weights[ModuleId(i, p)]))
        out.append(("final_gain", self.final_gain))
        out.append(("head", self.head))
        return out

    @classmethod
    def from_arrays(cls, spec, arrays):
        weights = {m: arrays[f"w.{m.layer}.{m.proj}"] for m in spec.module_ids()}
        model = cls(
            spec=spec,
            embed=arrays["embed"],
            pos=arrays["pos"],
            weights=weights,
            attn_gains=[arrays[f"attn_gain.{i}"] for i in range(1, spec.num_layers + 1)],
            mlp_gains=[arrays[f"mlp_gain.{i}"] for i in range(1, spec.num_layers + 1)],
            final_gain=arrays["final_gain"],
            head=arrays["head"],
        )
        model._freeze()
        return model

    def _freeze(self):
        for _, a in self.arrays():
            a.flags.writeable = False


def build_model(spec: ModelSpec) -> FullPrecisionModel:
    rng = np.random.default_rng(spec.seed)
    std = spec.init_std
    d = spec.hidden_dim
    embed = rng.normal(0.0, std, size=(spec.vocab_size, d))
    pos = rng.normal(0.0, std, size=(spec.max_seq_len, d))
    weights = {}
    for m in spec.module_ids():
        weights[m] = rng.normal(0.0, std, size=spec.weight_shape(m.proj))
    head = rng.normal(0.0, std, size=(d, spec.vocab_size))
    for src, dst in spec.copies:
        weights[ModuleId(*dst)] = weights[ModuleId(*src)].copy()
    for m, s in spec.weight_scales:
        weights[ModuleId(*m)] = weights[ModuleId(*m)] * s
    model = FullPrecisionModel(
        spec=spec,
        embed=embed,
        pos=pos,
        weights=weights,
        attn_gains=[np.ones(d) for _ in range(spec.num_layers)],
        mlp_gains=[np.ones(d) for _ in range(spec.num_layers)],
        final_gain=np.ones(d),
        head=head,
    )
    model._freeze()
    return model


def _check_tokens(spec, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"token batch must be [batch, seq_len], got shape {tokens.shape}")
    if tokens.shape[1] > spec.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {spec.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab_size):
        raise InputError(f"token ids must lie in [0, {spec.vocab_size})")
    return tokens


def embed_tokens(model, tokens):
    tokens = _check_tokens(model.spec, tokens)
    return model.embed[tokens] + model.pos[: tokens.shape[1]]


def _layer(model, layer_index, h, w):
    spec = model.spec
    bsz, seq, d = h.shape
    nh, hd = spec.num_heads, spec.head_dim

    x = ag.rms_norm(h, model.attn_gains[layer_index - 1])

    def heads(t):
        return t.reshape(bsz, seq, nh, hd).transpose(0, 2, 1, 3)

    q = heads(x @ w["q"])
    k = heads(x @ w["k"])
    v = heads(x @ w["v"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    attn = ag.softmax(scores, mask=causal)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, d)
    h = h + ctx @ w["o"]

    y = ag.rms_norm(h, model.mlp_gains[layer_index - 1])
    hidden = ag.silu(y @ w["gate"]) * (y @ w["up"])
    return h + hidden @ w["down"]


def _layer_weights(model, layer_index, weight_map):
    out = {}
    for p in PROJECTIONS:
        key = ModuleId(layer_index, p)
        if key not in weight_map:
            raise ConfigurationError(f"weight map is missing projection {key}")
        out[p] = ag.as_tensor(weight_map[key])
    return out


def teacher_trace(model, tokens):
    """Full-precision hidden states after the embedding and after every layer.

    Entry 0 is the embedding output; entry i is layer i applied to entry i-1.
    """
    h = embed_tokens(model, tokens)
    trace = [h]
    with ag.no_grad():
        for i in range(1, model.spec.num_layers + 1):
            w = _layer_weights(model, i, model.weights)
            h = _layer(model, i, ag.Tensor(h), w).data
            trace.append(h)
    for entry in trace:
        entry.flags.writeable = False
    return trace


def mixed_layer_forward(model, layer_index, teacher_input, mixed_weights):
    """Layer ``layer_index`` applied to the teacher's input with substituted weights."""
    if not 1 <= layer_index <= model.spec.num_layers:
        raise ParameterError(f"layer index {layer_index} outside [1, {model.spec.num_layers}]")
    w = _layer_weights(model, layer_index, mixed_weights)
    return _layer(model, layer_index, ag.as_tensor(teacher_input), w)


def full_forward_logits(model, weight_map, tokens):
    """Logits ``[batch, seq, vocab]`` of the whole model under ``weight_map``."""
    h = ag.Tensor(embed_tokens(model, tokens))
    for i in range(1, model.spec.num_layers + 1):
        h = _layer(model, i, h, _layer_weights(model, i, weight_map))
    h = ag.rms_norm(h, model.final_gain)
    return h @ model.head
