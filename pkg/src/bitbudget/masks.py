"""Stage I: learn per-module precision preferences under a bit budget.

Every module carries one logit per candidate bit-width. Each step draws a
relaxed (Gumbel-softmax or binary-concrete) sample of the categorical
choice, mixes the frozen candidates with it, and measures teacher-forced
layer reconstruction error. The expected average bit-width is pulled onto
the target by an augmented Lagrangian whose two multipliers are updated by
projected gradient ascent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import (
    ConfigurationError,
    DivergenceError,
    InfeasibleBudgetError,
    NumericalError,
    ParameterError,
)
from .model import full_forward_logits, mixed_layer_forward, teacher_trace

log = logging.getLogger(__name__)

MODES = ("augmented_lagrangian", "multiplicative_penalty", "ce_loss")
MODE_ALIASES = {"al": "augmented_lagrangian", "mult": "multiplicative_penalty", "ce": "ce_loss"}
RELAXATIONS = ("gumbel_softmax", "binary_sigmoid")
EXTRACTIONS = ("noise_free", "final_sample", "sample_mean")
OPTIMIZERS = ("adam", "sgd", "momentum")


def canonical_mode(mode):
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class MaskState:
    modules: list
    bits: tuple
    logits: ag.Tensor
    temperature: float = 1.0
    rng_seed: int = 0
    relaxation: str = "gumbel_softmax"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.relaxation not in RELAXATIONS:
            raise ParameterError(f"unknown relaxation {self.relaxation!r}")
        if self.relaxation == "binary_sigmoid" and len(self.bits) != 2:
            raise ConfigurationError("binary_sigmoid relaxation needs exactly two candidate bit-widths")
        if self.logits.shape != (len(self.modules), len(self.bits)):
            raise ConfigurationError(
                f"logits shape {self.logits.shape} does not match "
                f"{len(self.modules)} modules x {len(self.bits)} bit-widths"
            )

    @classmethod
    def zeros(cls, modules, bits, **kwargs):
        logits = ag.Tensor(np.zeros((len(modules), len(bits))), requires_grad=True)
        return cls(list(modules), tuple(bits), logits, **kwargs)


@dataclass
class DualState:
    lam1: ag.Tensor = field(default_factory=lambda: ag.Tensor(0.0, requires_grad=True))
    lam2: ag.Tensor = field(default_factory=lambda: ag.Tensor(0.0, requires_grad=True))
    learning_rate: float = 0.05

    @classmethod
    def at(cls, lam1=0.0, lam2=0.0, learning_rate=0.05):
        if lam2 < 0:
            raise ParameterError("lam2 must be non-negative")
        return cls(
            ag.Tensor(float(lam1), requires_grad=True),
            ag.Tensor(float(lam2), requires_grad=True),
            learning_rate,
        )

    def ascend(self):
        """One projected ascent step from the gradients left by ``backward``."""
        g1 = 0.0 if self.lam1.grad is None else float(self.lam1.grad)
        g2 = 0.0 if self.lam2.grad is None else float(self.lam2.grad)
        self.lam1.data = np.asarray(float(self.lam1.data) + self.learning_rate * g1)
        self.lam2.data = np.asarray(max(0.0, float(self.lam2.data) + self.learning_rate * g2))
        self.lam1.grad = None
        self.lam2.grad = None

    @property
    def values(self):
        return float(self.lam1.data), float(self.lam2.data)


def draw_noise(state, rng):
    """Fresh relaxation noise: Gumbel per (module, bit) or logistic per module."""
    shape = state.logits.shape if state.relaxation == "gumbel_softmax" else (state.logits.shape[0],)
    u = rng.random(shape)
    # random() is in [0, 1); redraw exact zeros so the logs stay finite
    while np.any(u == 0.0):
        zeros = u == 0.0
        u[zeros] = rng.random(int(zeros.sum()))
    if state.relaxation == "gumbel_softmax":
        return -np.log(-np.log(u))
    return np.log(u) - np.log1p(-u)


def sample_relaxed_probs(state, rng=None, noise=None):
    """Relaxed one-hot rows ``p`` (differentiable in the logits).

    Pass ``noise`` to reuse a fixed draw, or ``noise=0`` for the noise-free
    probabilities; otherwise noise is drawn from ``rng``.
    """
    if noise is None:
        noise = draw_noise(state, rng)
    tau = state.temperature
    if state.relaxation == "gumbel_softmax":
        return ag.softmax(state.logits + np.broadcast_to(noise, state.logits.shape), temperature=tau)
    low = state.logits[:, 0]
    high = state.logits[:, 1]
    z = (high - low + np.broadcast_to(noise, low.shape)) * (1.0 / tau)
    p_high = ag.sigmoid(z)
    return ag.stack([1.0 - p_high, p_high]).transpose(1, 0)


def noise_free_probs(state):
    with ag.no_grad():
        return sample_relaxed_probs(state, noise=0.0).data.copy()


def mix_weights(pool, p, modules=None):
    """``{module: sum_b p[module, b] * W_b}`` with gradient to ``p`` only."""
    modules = pool.module_ids() if modules is None else modules
    p = ag.as_tensor(p)
    if p.ndim != 2 or p.shape[1] != len(pool.bits):
        raise ConfigurationError(f"probability rows of width {p.shape[-1]} do not match bits {pool.bits}")
    if p.shape[0] != len(modules):
        raise ConfigurationError(f"{p.shape[0]} probability rows for {len(modules)} modules")
    return {m: ag.weighted_sum(p[k], pool.candidates[m]) for k, m in enumerate(modules)}


def bit_weights(counts, bits):
    """Constant ``N_m * b / sum N`` table; ``sum(p * table)`` is the expected average bit-width."""
    counts = np.asarray(counts, dtype=np.float64)
    return counts[:, None] * np.asarray(bits, dtype=np.float64)[None, :] / counts.sum()


def expected_avg_bits(p, counts, bits):
    """Parameter-weighted mean of the expected bit-width per module."""
    table = bit_weights(counts, bits)
    if isinstance(p, ag.Tensor):
        if p.shape != table.shape:
            raise ConfigurationError(f"p has shape {p.shape}, expected {table.shape}")
        return (p * table).sum()
    p = np.asarray(p, dtype=np.float64)
    if p.shape != table.shape:
        raise ConfigurationError(f"p has shape {p.shape}, expected {table.shape}")
    return float((p * table).sum())


@dataclass
class LossReport:
    recon: float
    deviation: float
    penalty_linear: float
    penalty_quadratic: float
    total: float


@dataclass
class PenaltyConfig:
    beta: float = 1.0
    gamma: float = 1.0
    eps: float = 1e-4
    floor: float = 1e-3


class Stage1Problem:
    """Frozen data shared by every evaluation of the Stage I objective."""

    def __init__(self, model, pool, recon_scale=1.0):
        if pool.spec_hash != model.spec.spec_hash():
            raise ConfigurationError("candidate pool was built for a different model spec")
        self.model = model
        self.pool = pool
        self.modules = pool.module_ids()
        counts = model.spec.param_counts()
        self.counts = np.array([counts[m] for m in self.modules], dtype=np.float64)
        self.bits = pool.bits
        self.recon_scale = float(recon_scale)

    def check_budget(self, b_target):
        lo, hi = self.bits[0], self.bits[-1]
        if not lo <= b_target <= hi:
            raise InfeasibleBudgetError(f"target {b_target} outside [{lo}, {hi}]")

    def recon_loss(self, trace, weight_map):
        """Mean over layers of the per-element squared error to the teacher."""
        L = self.model.spec.num_layers
        total = None
        for i in range(1, L + 1):
            hq = mixed_layer_forward(self.model, i, trace[i - 1], weight_map)
            err = (hq - trace[i]).square().mean()
            total = err if total is None else total + err
        if total is None:
            return ag.Tensor(0.0)
        return total * (self.recon_scale / L)

    def ce_loss(self, tokens, weight_map):
        logits = full_forward_logits(self.model, weight_map, tokens)
        vocab = logits.shape[-1]
        pred = logits[:, :-1].reshape(-1, vocab)
        return ag.cross_entropy(pred, np.asarray(tokens)[:, 1:].reshape(-1))

    def loss(self, batch, p, dual, b_target, mode="augmented_lagrangian", penalty=None, budget_p=None):
        """Total Stage I loss tensor and a float ``LossReport``.

        ``batch`` is ``(tokens, trace)``; the trace is unused in ce_loss mode.
        The budget deviation is measured on ``budget_p`` when given, else on
        ``p``.
        """
        mode = canonical_mode(mode)
        self.check_budget(b_target)
        tokens, trace = batch
        p = ag.as_tensor(p)
        budget_p = p if budget_p is None else ag.as_tensor(budget_p)
        weights = mix_weights(self.pool, p, self.modules)
        if mode == "ce_loss":
            recon = self.ce_loss(tokens, weights)
        else:
            recon = self.recon_loss(trace, weights)
        dev = expected_avg_bits(budget_p, self.counts, self.bits) - b_target
        if mode == "multiplicative_penalty":
            penalty = penalty or PenaltyConfig()
            base = ag.clamp_min(ag.log(dev.square() + penalty.eps), 0.0)
            factor = ag.clamp_min(ag.power(base, penalty.gamma) * penalty.beta, penalty.floor)
            total = recon * factor
            lin = quad = 0.0
        else:
            linear = dual.lam1 * dev
            quadratic = dual.lam2 * dev.square()
            total = recon + linear + quadratic
            lin, quad = linear.item(), quadratic.item()
        report = LossReport(recon.item(), dev.item(), lin, quad, total.item())
        return total, report


def stage1_loss(problem, batch, p, dual, b_target, mode="augmented_lagrangian", penalty=None, budget_p=None):
    return problem.loss(batch, p, dual, b_target, mode, penalty, budget_p)


@dataclass
class Stage1Config:
    steps: int = 600
    batch_size: int = 8
    lr: float = 5e-2
    dual_lr: float = 0.02
    optimizer: str = "adam"
    momentum: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    b_target: float = 3.0
    mode: str = "augmented_lagrangian"
    relaxation: str = "gumbel_softmax"
    extraction: str = "noise_free"
    extraction_window: int = 50
    recon_normalization: str = "min_bits"
    budget_on: str = "expected"
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and self.dual_lr > 0 and self.temperature > 0):
            raise ParameterError("learning rates and temperature must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.extraction not in EXTRACTIONS:
            raise ParameterError(f"unknown extraction {self.extraction!r}; expected one of {EXTRACTIONS}")
        if self.budget_on not in ("expected", "sample"):
            raise ParameterError("budget_on must be 'expected' or 'sample'")
        if self.recon_normalization not in ("none", "min_bits"):
            raise ParameterError("recon_normalization must be 'none' or 'min_bits'")


class _Optimizer:
    def __init__(self, kind, lr, momentum=0.9, betas=(0.9, 0.999), eps=1e-8):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m = self.v = None

    def step(self, param):
        g = param.grad
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        if self.kind == "sgd":
            update = g
        elif self.kind == "momentum":
            self.m = self.momentum * self.m + g
            update = self.m
        else:
            b1, b2 = self.betas
            self.m = b1 * self.m + (1 - b1) * g
            self.v = b2 * self.v + (1 - b2) * g * g
            mhat = self.m / (1 - b1**self.t)
            vhat = self.v / (1 - b2**self.t)
            update = mhat / (np.sqrt(vhat) + self.eps)
        param.data = param.data - self.lr * update
        param.grad = None


@dataclass
class SoftScores:
    modules: list
    bits: tuple
    scores: np.ndarray  # [num_modules, num_bits]
    counts: np.ndarray
    b_target: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.scores.shape != (len(self.modules), len(self.bits)):
            raise ConfigurationError("score table does not match modules x bits")
        if np.any(self.scores < 0) or np.any(np.abs(self.scores.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("score rows must be probability vectors")

    @property
    def expected_avg_bits(self):
        return expected_avg_bits(self.scores, self.counts, self.bits)

    def expected_bits(self):
        """``{module: sum_b b * s_b}``."""
        per = self.scores @ np.asarray(self.bits, dtype=np.float64)
        return dict(zip(self.modules, per))


@dataclass
class Stage1Result:
    scores: SoftScores
    history: list
    state: MaskState
    dual: DualState


def precompute_traces(model, batches):
    return [(b, teacher_trace(model, b)) for b in batches]


def reference_recon(problem, batch):
    """Reconstruction error with every module at the lowest bit-width."""
    with ag.no_grad():
        lowest = {m: problem.pool.candidates[m][0] for m in problem.modules}
        scale, problem.recon_scale = problem.recon_scale, 1.0
        try:
            value = problem.recon_loss(batch[1], lowest).item()
        finally:
            problem.recon_scale = scale
    return value


def train_stage1(model, pool, calibration, config=None, callback=None):
    """Run Stage I and return scores, the per-step history and final state.

    ``calibration`` is a ``CalibrationSet``; its train split is cycled in order.
    """
    config = config or Stage1Config()
    problem = Stage1Problem(model, pool)
    problem.check_budget(config.b_target)
    batches = precompute_traces(model, calibration.batches(config.batch_size))
    if config.recon_normalization == "min_bits" and config.mode != "ce_loss":
        ref = reference_recon(problem, batches[0])
        problem.recon_scale = 1.0 / ref if ref > 0 else 1.0

    state = MaskState.zeros(
        problem.modules,
        problem.bits,
        temperature=config.temperature,
        rng_seed=config.seed,
        relaxation=config.relaxation,
    )
    dual = DualState.at(learning_rate=config.dual_lr)
    opt = _Optimizer(config.optimizer, config.lr, config.momentum)
    rng = np.random.default_rng([config.seed, 2])
    allowed = {id(state.logits), id(dual.lam1), id(dual.lam2)}
    history = []
    samples = []

    for step in range(config.steps):
        batch = batches[step % len(batches)]
        try:
            p = sample_relaxed_probs(state, rng)
            budget_p = sample_relaxed_probs(state, noise=0.0) if config.budget_on == "expected" else None
            total, report = problem.loss(
                batch, p, dual, config.b_target, config.mode, config.penalty, budget_p
            )
            if not np.isfinite(report.total):
                raise NumericalError("non-finite total loss")
            total.backward()
        except NumericalError as exc:
            raise DivergenceError(f"Stage I diverged at step {step}: {exc}", step=step) from exc
        leaked = [t for t in ag.leaves_with_grad(total) if id(t) not in allowed]
        assert not leaked, "gradient reached a frozen weight tensor"
        opt.step(state.logits)
        if config.mode == "multiplicative_penalty":
            dual.lam1.grad = dual.lam2.grad = None
        else:
            dual.ascend()
        lam1, lam2 = dual.values
        history.append(
            {
                "step": step,
                "total": report.total,
                "recon": report.recon,
                "deviation": report.deviation,
                "lam1": lam1,
                "lam2": lam2,
            }
        )
        if config.extraction != "noise_free" and step >= config.steps - config.extraction_window:
            samples.append(p.data.copy())
        if callback is not None:
            callback(step, report, state, dual)

    if config.extraction == "noise_free" or not samples:
        scores = noise_free_probs(state)
    elif config.extraction == "final_sample":
        scores = samples[-1]
    else:
        scores = np.mean(samples, axis=0)
    scores = scores / scores.sum(axis=1, keepdims=True)
    meta = {
        "spec_hash": model.spec.spec_hash(),
        "steps": config.steps,
        "seed": config.seed,
        "mode": config.mode,
        "relaxation": config.relaxation,
        "extraction": config.extraction,
    }
    result = SoftScores(problem.modules, problem.bits, scores, problem.counts, config.b_target, meta)
    return Stage1Result(result, history, state, dual)
