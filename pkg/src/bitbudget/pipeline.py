"""End-to-end runs: configuration, evaluation and method comparison."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .allocate import AllocationProblem, reuse_scores, solve
from .baselines import estimate_traces, hawq_allocate, uniform_assignment
from .data import generate_calibration
from .errors import ConfigurationError, ParameterError
from .masks import PenaltyConfig, Stage1Config, Stage1Problem, canonical_mode, precompute_traces, train_stage1
from .model import ModelSpec, build_model
from .quant import bitset, build_pool


def _parse_modules(text):
    """``"1.down:8;2.v:4"`` -> ``(((1, "down"), 8.0), ((2, "v"), 4.0))``."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(";"))):
        mod, _, scale = item.partition(":")
        layer, _, proj = mod.partition(".")
        out.append(((int(layer), proj), float(scale)))
    return tuple(out)


def _parse_copies(text):
    """``"1.down>2.down"`` -> ``(((1, "down"), (2, "down")),)``."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(";"))):
        src, _, dst = item.partition(">")
        a, _, pa = src.partition(".")
        b, _, pb = dst.partition(".")
        out.append(((int(a), pa), (int(b), pb)))
    return tuple(out)


def _float_list(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


@dataclass
class RunConfig:
    # model
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 256
    seq_len: int = 64
    model_seed: int = 0
    weight_scales: str = ""
    copies: str = ""
    # quantizer
    bits: str = "2,3,4"
    group_size: int = 16
    # calibration data
    num_sequences: int = 128
    holdout_fraction: float = 0.25
    data_source: str = "markov"
    data_path: str = ""
    data_seed: int = 0
    # stage I
    steps: int = 600
    batch_size: int = 8
    lr: float = 5e-2
    dual_lr: float = 2e-2
    optimizer: str = "adam"
    temperature: float = 1.0
    seed: int = 0
    b_target: float = 3.0
    mode: str = "augmented_lagrangian"
    relaxation: str = "gumbel_softmax"
    extraction: str = "noise_free"
    budget_on: str = "expected"
    # stage II and reports
    solver: str = "auto"
    budgets: str = "2.5,2.7,3.0,3.2,3.5"
    compare_budgets: str = "2.5,3.0,3.5"
    hutchinson_probes: int = 8
    out: str = "runs/default"

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        bits = self.bitset
        if not bits[0] <= self.b_target <= bits[-1]:
            raise ConfigurationError(f"b_target {self.b_target} outside [{bits[0]}, {bits[-1]}]")
        if self.seq_len < 2:
            raise ConfigurationError("seq_len must be at least 2")
        for b in self.budget_list + self.compare_budget_list:
            if not bits[0] <= b <= bits[-1]:
                raise ConfigurationError(f"budget {b} outside [{bits[0]}, {bits[-1]}]")

    @property
    def bitset(self):
        return bitset(int(b) for b in _float_list(self.bits))

    @property
    def budget_list(self):
        return list(_float_list(self.budgets))

    @property
    def compare_budget_list(self):
        return list(_float_list(self.compare_budgets))

    def model_spec(self):
        return ModelSpec(
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            vocab_size=self.vocab_size,
            max_seq_len=self.seq_len,
            seed=self.model_seed,
            weight_scales=_parse_modules(self.weight_scales),
            copies=_parse_copies(self.copies),
        )

    def stage1(self, **overrides):
        kwargs = dict(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            dual_lr=self.dual_lr,
            optimizer=self.optimizer,
            temperature=self.temperature,
            seed=self.seed,
            b_target=self.b_target,
            mode=self.mode,
            relaxation=self.relaxation,
            extraction=self.extraction,
            budget_on=self.budget_on,
            penalty=PenaltyConfig(),
        )
        kwargs.update(overrides)
        return Stage1Config(**kwargs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- persistence ---------------------------------------------------
    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        data = self.to_dict()
        data.pop("out")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self):
        """``key=value`` lines for every field except the output directory."""
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items() if k != "out")

    @classmethod
    def parse(cls, text, overrides=None):
        """Flat ``key=value`` lines (``#`` comments allowed) plus overrides."""
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"config line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind in ("int", int):
                    kwargs[key] = int(raw)
                elif kind in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError as exc:
                raise ConfigurationError(f"config key {key}: cannot parse {raw!r}") from exc
        return cls(**kwargs)


def desk_config(**changes):
    return RunConfig(**changes)


# Sensitive module and its twin: layer-2 "down" starts as a copy of the
# layer-1 "down" weights, then layer 1's copy is scaled up.
SENSITIVE = (1, "down")
TWIN = (2, "down")


def controlled_config(scale=8.0, **changes):
    return RunConfig(
        weight_scales=f"{SENSITIVE[0]}.{SENSITIVE[1]}:{scale:g}",
        copies=f"{SENSITIVE[0]}.{SENSITIVE[1]}>{TWIN[0]}.{TWIN[1]}",
        **changes,
    )


@dataclass
class Artifacts:
    config: RunConfig
    model: object
    pool: object
    calibration: object
    _holdout: list = field(default=None, repr=False)

    @property
    def modules(self):
        return self.pool.module_ids()

    @property
    def counts(self):
        return self.model.spec.param_counts()

    def holdout_batches(self):
        if self._holdout is None:
            split = "holdout" if self.calibration.holdout.shape[0] else "train"
            batches = self.calibration.batches(self.config.batch_size, split=split)
            self._holdout = precompute_traces(self.model, batches)
        return self._holdout


def build_artifacts(config, model=None):
    model = model if model is not None else build_model(config.model_spec())
    pool = build_pool(model, config.bitset, config.group_size)
    calibration = generate_calibration(
        model.spec.vocab_size,
        num_sequences=config.num_sequences,
        seq_len=config.seq_len,
        seed=config.data_seed,
        source=config.data_source,
        path=config.data_path or None,
        holdout_fraction=config.holdout_fraction,
    )
    return Artifacts(config, model, pool, calibration)


def holdout_error(artifacts, assignment):
    """Teacher-forced reconstruction error of a discrete assignment on held-out data."""
    problem = Stage1Problem(artifacts.model, artifacts.pool)
    weights = artifacts.pool.weight_map(assignment if isinstance(assignment, dict) else assignment.as_dict())
    total = 0.0
    batches = artifacts.holdout_batches()
    with ag.no_grad():
        for tokens, trace in batches:
            total += problem.recon_loss(trace, weights).item() * tokens.shape[0]
    return total / sum(t.shape[0] for t, _ in batches)


def learn(artifacts, **overrides):
    return train_stage1(artifacts.model, artifacts.pool, artifacts.calibration, artifacts.config.stage1(**overrides))


def allocate(scores, budget, solver="auto"):
    return reuse_scores(scores, budget, solver=solver)


def uniform(artifacts, b):
    counts = artifacts.counts
    return uniform_assignment(artifacts.modules, [counts[m] for m in artifacts.modules], artifacts.pool.bits, b)


def hawq(artifacts, budgets, traces=None):
    if traces is None:
        calib = [t for _, t in precompute_traces(artifacts.model, artifacts.calibration.batches(artifacts.config.batch_size)[:1])]
        traces = estimate_traces(artifacts.model, calib, num_probes=artifacts.config.hutchinson_probes, seed=artifacts.config.seed)
    return traces, {b: hawq_allocate(traces, artifacts.pool, artifacts.counts, b, artifacts.config.solver) for b in budgets}


def heatmap(modules, values, num_layers):
    """``[num_layers, 7]`` grid in projection order from a per-module mapping."""
    from .model import PROJECTIONS

    grid = np.zeros((num_layers, len(PROJECTIONS)))
    for m in modules:
        grid[m.layer - 1, PROJECTIONS.index(m.proj)] = values[m]
    return grid


def compare(artifacts, budgets=None, log=None):
    """Holdout error of every method at every budget.

    Returns a list of row dicts with method, budget, realized bits and error.
    """
    cfg = artifacts.config
    budgets = budgets or cfg.compare_budget_list
    rows = []
    for b in artifacts.pool.bits:
        a = uniform(artifacts, b)
        rows.append(_row(f"uniform-{b}", b, a, holdout_error(artifacts, a)))
    variants = [("two-stage", "augmented_lagrangian"), ("mult-penalty", "multiplicative_penalty"), ("ce-loss", "ce_loss")]
    for name, mode in variants:
        for budget in budgets:
            if log:
                log(f"learning {name} at {budget}")
            result = learn(artifacts, mode=mode, b_target=budget)
            a = allocate(result.scores, budget, cfg.solver)
            rows.append(_row(name, budget, a, holdout_error(artifacts, a)))
    _, hawq_assign = hawq(artifacts, budgets)
    for budget in budgets:
        a = hawq_assign[budget]
        rows.append(_row("hawq", budget, a, holdout_error(artifacts, a)))
    return rows


def _row(method, budget, assignment, error):
    if assignment.used_bits > assignment.capacity:
        raise ParameterError(f"{method} at {budget}: assignment over budget")
    return {
        "method": method,
        "budget": float(budget),
        "realized_bits": assignment.realized_avg_bits,
        "holdout_error": error,
    }


__all__ = [
    "AllocationProblem",
    "Artifacts",
    "RunConfig",
    "allocate",
    "build_artifacts",
    "compare",
    "controlled_config",
    "desk_config",
    "hawq",
    "heatmap",
    "holdout_error",
    "learn",
    "solve",
    "uniform",
]
