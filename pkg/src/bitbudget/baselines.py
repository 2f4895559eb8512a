"""Comparison allocators: uniform precision and a Hessian-trace ranking in the style of HAWQ."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .allocate import AllocationProblem, DiscreteAssignment, canonical_objective, solve
from .errors import ConfigurationError, NumericalError, ParameterError
from .model import mixed_layer_forward


def uniform_assignment(modules, counts, bits, b, scores=None):
    """Every module at bit-width ``b``; ``scores`` (optional) sets the objective."""
    bits = tuple(bits)
    if b not in bits:
        raise ParameterError(f"bit-width {b} is not a candidate in {bits}")
    k = bits.index(b)
    choices = np.full(len(modules), k, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    objective = 0.0 if scores is None else canonical_objective(np.asarray(scores), choices)
    return DiscreteAssignment(
        modules=list(modules),
        bits=bits,
        choices=choices,
        counts=counts,
        b_target=float(b),
        objective_value=objective,
        solver="uniform",
        optimal=True,
        capacity=int(counts.sum()) * int(b),
    )


def rademacher(rng, size):
    return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0


def fd_hvp(grad_fn, x0, step=1e-3):
    """Hessian-vector product by central differences of ``grad_fn`` around ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)

    def hvp(v):
        return (grad_fn(x0 + step * v) - grad_fn(x0 - step * v)) / (2.0 * step)

    return hvp


def hutchinson_samples(hvp, dim, num_probes, seed):
    """Per-probe values ``v^T H v`` for Rademacher probes ``v``."""
    if num_probes < 1:
        raise ParameterError("num_probes must be at least 1")
    rng = np.random.default_rng(seed)
    out = np.empty(num_probes)
    for k in range(num_probes):
        v = rademacher(rng, dim)
        hv = np.asarray(hvp(v), dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(hv)):
            raise NumericalError(f"non-finite Hessian-vector product at probe {k}")
        out[k] = float(v @ hv)
    return out


def hutchinson(hvp, dim, num_probes, seed):
    return float(hutchinson_samples(hvp, dim, num_probes, seed).mean())


@dataclass
class TraceEstimate:
    traces: dict  # ModuleId -> float
    num_probes: int
    probe_seed: int
    samples: dict = field(default_factory=dict)


class LayerLossContext:
    """Teacher-forced reconstruction loss of one module's weight, others at full precision.

    Uses the same per-element, per-layer normalisation as Stage I.
    """

    def __init__(self, model, traces):
        self.model = model
        self.traces = traces  # list of teacher traces, one per batch

    def grad(self, module, w):
        weights = dict(self.model.weights)
        leaf = ag.Tensor(np.asarray(w).reshape(self.model.spec.weight_shape(module.proj)), requires_grad=True)
        weights[module] = leaf
        L = self.model.spec.num_layers
        total = None
        for trace in self.traces:
            out = mixed_layer_forward(self.model, module.layer, trace[module.layer - 1], weights)
            err = (out - trace[module.layer]).square().mean()
            total = err if total is None else total + err
        total = total * (1.0 / (L * len(self.traces)))
        total.backward()
        return leaf.grad.reshape(-1)


def module_trace_samples(context, module, num_probes=8, seed=0, step=1e-3):
    """Per-probe Hutchinson values for the loss Hessian in ``module``'s weights."""
    w0 = context.model.weights[module].reshape(-1)
    hvp = fd_hvp(lambda w: context.grad(module, w), w0, step)
    return hutchinson_samples(hvp, w0.size, num_probes, seed)


def hutchinson_trace(context, module, num_probes=8, seed=0, step=1e-3):
    """Hutchinson estimate of the trace of the loss Hessian in ``module``'s weights."""
    return float(module_trace_samples(context, module, num_probes, seed, step).mean())


def estimate_traces(model, traces, num_probes=8, seed=0, step=1e-3):
    context = LayerLossContext(model, traces)
    out, samples = {}, {}
    for idx, m in enumerate(model.spec.module_ids()):
        s = module_trace_samples(context, m, num_probes, seed=[seed, idx], step=step)
        samples[m] = s
        out[m] = float(s.mean())
    return TraceEstimate(out, num_probes, seed, samples)


def hawq_costs(traces, pool, counts):
    """Omega[m, b] = trace_m / N_m * ||W_b - W_fp||^2."""
    modules = pool.module_ids()
    missing = [m for m in modules if m not in traces.traces]
    if missing:
        raise ConfigurationError(f"no trace estimate for {missing[0]}")
    errs = pool.squared_errors()
    return np.array([traces.traces[m] / counts[m] * errs[m] for m in modules])


def hawq_allocate(traces, pool, counts, b_target, solver="auto"):
    """Minimise total trace-weighted quantization error under the budget."""
    modules = pool.module_ids()
    omega = hawq_costs(traces, pool, counts)
    problem = AllocationProblem(
        modules,
        -omega,
        [counts[m] for m in modules],
        pool.bits,
        b_target,
        check_rows=False,
    )
    out = solve(problem, solver=solver)
    out.meta["method"] = "hawq"
    return out
