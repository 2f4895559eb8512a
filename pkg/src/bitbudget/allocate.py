"""Stage II: exact one-bit-width-per-module allocation under a hard budget.

The problem is a multiple-choice knapsack: every module picks exactly one
bit-width, the parameter-weighted bit total may not exceed
``floor(b_target * sum N)``, and the summed scores of the picks are
maximised.

All solvers share two conventions so their answers coincide exactly:

* the objective of an assignment is the float sum of its chosen scores taken
  left to right in module order, starting from ``0.0``;
* among assignments with equal objective the lexicographically smallest
  vector of choice indices (module order, lower bit first) wins.

Float addition is monotone, so a forward DP over module prefixes that keeps
the best prefix sum per capacity cell finds the same maximum as enumeration.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    ConfigurationError,
    InfeasibleBudgetError,
    ParameterError,
    ResourceError,
    UndefinedCorrelationError,
)

SOLVERS = ("auto", "dp", "branch_and_bound", "brute_force")
SOLVER_ALIASES = {"bnb": "branch_and_bound", "brute": "brute_force"}
DP_CELL_LIMIT = 10**7
BRUTE_FORCE_LIMIT = 10**6


def canonical_solver(name):
    name = SOLVER_ALIASES.get(name, name)
    if name not in SOLVERS:
        raise ParameterError(f"unknown solver {name!r}; expected one of {SOLVERS}")
    return name


@dataclass
class AllocationProblem:
    modules: list
    scores: np.ndarray  # [num_modules, num_bits]
    counts: np.ndarray  # [num_modules] parameter counts
    bits: tuple
    b_target: float
    check_rows: bool = True

    def __post_init__(self):
        self.modules = list(self.modules)
        self.bits = tuple(int(b) for b in self.bits)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.modules), len(self.bits))
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(len(self.modules))
        if list(self.bits) != sorted(set(self.bits)):
            raise ConfigurationError(f"bits must be sorted and distinct, got {self.bits}")
        if np.any(self.counts <= 0):
            raise ConfigurationError("parameter counts must be positive")
        if not np.all(np.isfinite(self.scores)):
            raise ConfigurationError("scores must be finite")
        if self.check_rows and len(self.modules):
            if np.any(np.abs(self.scores.sum(axis=1) - 1.0) > 1e-6):
                raise ConfigurationError("score rows must sum to 1")
        if self.b_target < self.bits[0]:
            raise InfeasibleBudgetError(
                f"target {self.b_target} is below the smallest bit-width {self.bits[0]}"
            )

    @classmethod
    def from_scores(cls, scores, b_target):
        return cls(scores.modules, scores.scores, scores.counts, scores.bits, b_target)

    @property
    def total_params(self):
        return int(self.counts.sum())

    @property
    def capacity(self):
        """floor(b_target * sum N), computed on the exact binary value of b_target."""
        return math.floor(Fraction(self.b_target) * self.total_params)

    def weights(self):
        return self.counts[:, None] * np.asarray(self.bits, dtype=np.int64)[None, :]


@dataclass
class DiscreteAssignment:
    modules: list
    bits: tuple
    choices: np.ndarray  # index into bits per module
    counts: np.ndarray
    b_target: float
    objective_value: float
    solver: str
    optimal: bool = True
    capacity: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def chosen_bits(self):
        return [self.bits[k] for k in self.choices]

    def as_dict(self):
        return dict(zip(self.modules, self.chosen_bits))

    @property
    def used_bits(self):
        return int(sum(int(n) * b for n, b in zip(self.counts, self.chosen_bits)))

    @property
    def realized_avg_bits(self):
        total = int(np.sum(self.counts))
        if total == 0:
            return 0.0
        return float(Fraction(self.used_bits, total))

    @property
    def feasible(self):
        return self.used_bits <= self.capacity

    def indicators(self):
        z = np.zeros((len(self.modules), len(self.bits)))
        z[np.arange(len(self.modules)), self.choices] = 1.0
        return z


def canonical_objective(scores, choices):
    total = 0.0
    for m, k in enumerate(choices):
        total = total + float(scores[m, k])
    return total


def _finish(problem, choices, solver, optimal=True):
    choices = np.asarray(choices, dtype=np.int64).reshape(len(problem.modules))
    out = DiscreteAssignment(
        modules=problem.modules,
        bits=problem.bits,
        choices=choices,
        counts=problem.counts,
        b_target=problem.b_target,
        objective_value=canonical_objective(problem.scores, choices),
        solver=solver,
        optimal=optimal,
        capacity=problem.capacity,
    )
    # hard feasibility is part of the contract, never a tolerance
    if out.used_bits > out.capacity:
        raise AssertionError("solver returned an assignment over budget")
    return out


def _reduced(problem):
    """Integer increments over each module's lightest choice, scaled by their gcd."""
    w = problem.weights()
    base = w[:, 0].sum() if len(problem.modules) else 0
    inc = w - w[:, :1]
    slack = problem.capacity - int(base)
    if slack < 0:
        raise InfeasibleBudgetError("budget cannot hold every module at the smallest bit-width")
    slack = min(slack, int(inc[:, -1].sum()) if len(problem.modules) else 0)
    g = 0
    for v in inc[:, 1:].ravel():
        g = math.gcd(g, int(v))
    if g > 1:
        inc = inc // g
        slack //= g
    return inc, slack


def dp_cells(problem):
    inc, slack = _reduced(problem)
    return (slack + 1) * max(1, len(problem.modules))


def solve_dp(problem):
    inc, cap = _reduced(problem)
    n, k_count = problem.scores.shape
    if n == 0:
        return _finish(problem, [], "dp")
    val = np.full(cap + 1, -np.inf)
    val[0] = 0.0
    rank = np.zeros(cap + 1, dtype=np.int64)
    choice = np.full((n, cap + 1), -1, dtype=np.int8 if k_count < 127 else np.int64)
    for m in range(n):
        new_val = np.full(cap + 1, -np.inf)
        new_rank = np.full(cap + 1, np.iinfo(np.int64).max)
        new_choice = choice[m]
        for k in range(k_count):
            w = int(inc[m, k])
            if w > cap:
                continue
            cand = val[: cap + 1 - w] + problem.scores[m, k]
            cand_rank = rank[: cap + 1 - w]
            cur = new_val[w:]
            cur_rank = new_rank[w:]
            live = np.isfinite(cand)
            better = live & ((cand > cur) | ((cand == cur) & (cand_rank < cur_rank)))
            cur[better] = cand[better]
            cur_rank[better] = cand_rank[better]
            new_choice[w:][better] = k
        reach = np.flatnonzero(np.isfinite(new_val))
        # lexicographic order of stored paths = (predecessor rank, choice index)
        order = np.lexsort((new_choice[reach], new_rank[reach]))
        new_rank = np.zeros(cap + 1, dtype=np.int64)
        new_rank[reach[order]] = np.arange(reach.size)
        val, rank = new_val, new_rank
    reach = np.flatnonzero(np.isfinite(val))
    best = val[reach].max()
    tied = reach[val[reach] == best]
    c = int(tied[np.argmin(rank[tied])])
    picks = np.empty(n, dtype=np.int64)
    for m in range(n - 1, -1, -1):
        k = int(choice[m, c])
        picks[m] = k
        c -= int(inc[m, k])
    return _finish(problem, picks, "dp")


def brute_force(problem):
    """Exhaustive optimum with the shared tie-break; the solver oracle."""
    n, k_count = problem.scores.shape
    if k_count**n > BRUTE_FORCE_LIMIT:
        raise ResourceError(f"{k_count}^{n} assignments exceed the brute-force limit")
    if n == 0:
        return _finish(problem, [], "brute_force")
    if problem.capacity < int(problem.weights()[:, 0].sum()):
        raise InfeasibleBudgetError("budget cannot hold every module at the smallest bit-width")
    idx = np.indices((k_count,) * n).reshape(n, -1).T  # lexicographic order
    w = problem.weights()
    used = np.zeros(idx.shape[0], dtype=np.int64)
    obj = np.zeros(idx.shape[0])
    for m in range(n):
        used += w[m, idx[:, m]]
        obj = obj + problem.scores[m, idx[:, m]]
    obj[used > problem.capacity] = -np.inf
    best = int(np.flatnonzero(obj == obj.max())[0])
    return _finish(problem, idx[best], "brute_force")


def _hull_increments(weights, values):
    """LP-relevant incremental steps (dw, dv) of one module, best ratio first."""
    hull = [0]
    for k in range(1, len(weights)):
        if values[k] <= values[hull[-1]]:
            continue
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            left = (values[b] - values[a]) / (weights[b] - weights[a])
            right = (values[k] - values[b]) / (weights[k] - weights[b])
            if left <= right:
                hull.pop()
            else:
                break
        hull.append(k)
    return [(weights[b] - weights[a], values[b] - values[a]) for a, b in zip(hull, hull[1:])]


def solve_branch_and_bound(problem, node_limit=None):
    """Depth-first search in lexicographic order with the greedy MCKP LP bound."""
    n, k_count = problem.scores.shape
    if n == 0:
        return _finish(problem, [], "branch_and_bound")
    w = problem.weights()
    s = problem.scores
    cap = problem.capacity
    min_w_suffix = np.concatenate([np.cumsum(w[::-1, 0])[::-1], [0]])
    if min_w_suffix[0] > cap:
        raise InfeasibleBudgetError("budget cannot hold every module at the smallest bit-width")
    base_suffix = np.concatenate([np.cumsum(s[::-1, 0])[::-1], [0.0]])
    steps = [_hull_increments(w[m].astype(float), s[m]) for m in range(n)]
    tol = 1e-9 * (1.0 + float(np.abs(s).sum()))

    def bound(m, room):
        room -= min_w_suffix[m]
        if room < 0:
            return -np.inf
        incs = sorted((st for j in range(m, n) for st in steps[j]), key=lambda t: -t[1] / t[0])
        total = base_suffix[m]
        for dw, dv in incs:
            if dw <= room:
                room -= dw
                total += dv
            else:
                total += dv * room / dw
                break
        return total

    # the all-lowest assignment is feasible and lexicographically first, so it
    # is a valid incumbent that later ties never displace
    best = np.zeros(n, dtype=np.int64)
    best_val = canonical_objective(s, best)
    picks = np.zeros(n, dtype=np.int64)
    nodes = 0
    exhausted = False

    def dfs(m, prefix, used):
        nonlocal best_val, best, nodes, exhausted
        if m == n:
            if prefix > best_val:
                best_val = prefix
                best = picks.copy()
            return
        nodes += 1
        if node_limit is not None and nodes > node_limit:
            exhausted = True
            return
        if prefix + bound(m, cap - used) + tol < best_val:
            return
        for k in range(k_count):
            if used + w[m, k] + min_w_suffix[m + 1] > cap:
                continue
            picks[m] = k
            dfs(m + 1, prefix + s[m, k], used + int(w[m, k]))
            if exhausted:
                return

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, n + 100))
    try:
        dfs(0, 0.0, 0)
    finally:
        sys.setrecursionlimit(limit)
    return _finish(problem, best, "branch_and_bound", optimal=not exhausted)


def solve(problem, solver="auto", allow_bnb=True, cell_limit=DP_CELL_LIMIT, node_limit=None):
    """Exact optimum of the allocation problem.

    ``auto`` runs the DP when its table fits ``cell_limit`` cells and falls
    back to branch-and-bound otherwise (or raises ``ResourceError`` when
    ``allow_bnb`` is false).
    """
    solver = canonical_solver(solver)
    if solver == "brute_force":
        return brute_force(problem)
    if solver == "branch_and_bound":
        return solve_branch_and_bound(problem, node_limit)
    cells = dp_cells(problem)
    if solver == "dp" or cells <= cell_limit:
        if cells > cell_limit:
            raise ResourceError(f"DP table of {cells} cells exceeds the limit of {cell_limit}")
        return solve_dp(problem)
    if not allow_bnb:
        raise ResourceError(f"DP table of {cells} cells exceeds the limit and branch-and-bound is disabled")
    return solve_branch_and_bound(problem, node_limit)


def reuse_scores(scores, new_budget, solver="auto", **kwargs):
    """Project already-learned scores onto a different budget."""
    if new_budget > scores.bits[-1]:
        raise ParameterError(f"budget {new_budget} above the largest bit-width {scores.bits[-1]}")
    return solve(AllocationProblem.from_scores(scores, new_budget), solver=solver, **kwargs)


def pearson_alignment(scores, assignment):
    """Pearson r between flattened soft scores and the assignment's one-hot rows."""
    if list(scores.modules) != list(assignment.modules) or tuple(scores.bits) != tuple(assignment.bits):
        raise ConfigurationError("scores and assignment cover different modules or bit-widths")
    s = np.asarray(scores.scores, dtype=np.float64).ravel()
    z = assignment.indicators().ravel()
    s_c, z_c = s - s.mean(), z - z.mean()
    denom = math.sqrt(float(s_c @ s_c) * float(z_c @ z_c))
    if denom == 0.0:
        raise UndefinedCorrelationError("a vector has zero variance")
    return float(s_c @ z_c) / denom


def allocation_similarity(a, b):
    """Cosine similarity of two per-module expected-bit maps."""
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            raise ConfigurationError("maps cover different modules")
        keys = sorted(a)
        u = np.array([a[k] for k in keys], dtype=np.float64)
        v = np.array([b[k] for k in keys], dtype=np.float64)
    else:
        u = np.asarray(a, dtype=np.float64).ravel()
        v = np.asarray(b, dtype=np.float64).ravel()
        if u.shape != v.shape:
            raise ConfigurationError("maps cover different module grids")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise UndefinedCorrelationError("cosine similarity of a zero vector")
    return float(u @ v) / (nu * nv)
