import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bitbudget.allocate import (
    AllocationProblem,
    allocation_similarity,
    brute_force,
    canonical_objective,
    canonical_solver,
    dp_cells,
    pearson_alignment,
    reuse_scores,
    solve,
    solve_branch_and_bound,
    solve_dp,
)
from bitbudget.errors import (
    ConfigurationError,
    InfeasibleBudgetError,
    ParameterError,
    ResourceError,
    UndefinedCorrelationError,
)
from bitbudget.masks import SoftScores


def make_problem(scores, counts, bits, b_target, check_rows=False):
    return AllocationProblem(list(range(len(counts))), scores, counts, bits, b_target, check_rows=check_rows)


def enumerate_optimum(problem):
    """Independent oracle: plain itertools enumeration with the same tie rule."""
    best, best_val = None, -math.inf
    for choice in itertools.product(range(len(problem.bits)), repeat=len(problem.modules)):
        used = sum(int(n) * problem.bits[k] for n, k in zip(problem.counts, choice))
        if used > problem.capacity:
            continue
        val = canonical_objective(problem.scores, choice)
        if val > best_val:
            best, best_val = choice, val
    return best, best_val


@st.composite
def problems(draw, max_modules=7, dyadic=False):
    n = draw(st.integers(1, max_modules))
    bits = draw(st.sampled_from([(2, 4), (2, 3, 4), (3, 4), (2, 3, 8)]))
    counts = draw(st.lists(st.integers(1, 40), min_size=n, max_size=n))
    if dyadic:
        vals = st.integers(0, 8).map(lambda v: v / 8)
    else:
        vals = st.floats(0.0, 1.0, allow_nan=False)
    scores = np.array(draw(st.lists(st.lists(vals, min_size=len(bits), max_size=len(bits)), min_size=n, max_size=n)))
    b = draw(st.floats(bits[0], bits[-1] + 0.5))
    return make_problem(scores, counts, bits, b)


class TestProblem:
    def test_capacity_floor(self):
        p = make_problem(np.zeros((2, 2)), [3, 7], (2, 4), 2.5)
        assert p.capacity == 25
        # 2.3 is stored slightly below 23/10, so the exact floor is 22
        assert make_problem(np.zeros((1, 2)), [10], (2, 4), 2.3).capacity == math.floor(Fraction(2.3) * 10) == 22

    def test_validation(self):
        with pytest.raises(InfeasibleBudgetError):
            make_problem(np.zeros((1, 2)), [4], (2, 4), 1.9)
        with pytest.raises(ConfigurationError):
            make_problem(np.array([[0.3, 0.3]]), [4], (2, 4), 3.0, check_rows=True)
        with pytest.raises(ConfigurationError):
            make_problem(np.zeros((1, 2)), [0], (2, 4), 3.0)
        with pytest.raises(ConfigurationError):
            make_problem(np.array([[np.nan, 0.0]]), [1], (2, 4), 3.0)
        with pytest.raises(ParameterError):
            canonical_solver("greedy")

    def test_min_budget_forces_lowest(self):
        p = make_problem(np.array([[0.0, 1.0], [0.0, 1.0]]), [5, 9], (2, 4), 2.0)
        for solver in ("dp", "bnb", "brute"):
            assert solve(p, solver).chosen_bits == [2, 2]

    def test_ample_budget_takes_best(self):
        p = make_problem(np.array([[0.1, 0.9, 0.0], [0.7, 0.2, 0.1]]), [5, 9], (2, 3, 4), 4.0)
        assert solve(p).chosen_bits == [3, 2]

    def test_known_small_instance(self):
        # capacity floor(3 * 20) = 60; both at 4 bits would need 80
        p = make_problem(np.array([[0.0, 1.0], [0.0, 3.0]]), [10, 10], (2, 4), 3.0)
        a = solve(p)
        assert a.chosen_bits == [2, 4]
        assert a.objective_value == 3.0
        assert a.used_bits == 60 and a.realized_avg_bits == 3.0


class TestSolversAgree:
    @given(problems())
    def test_dp_and_bnb_match_enumeration(self, problem):
        choice, val = enumerate_optimum(problem)
        for solver in (solve_dp, solve_branch_and_bound, brute_force):
            a = solver(problem)
            assert a.feasible and a.used_bits <= problem.capacity
            assert a.objective_value == val

    @given(problems(dyadic=True))
    def test_ties_break_to_smallest_choice_vector(self, problem):
        # dyadic scores add exactly, so the optimum set is exact and the tie rule decides
        choice, _ = enumerate_optimum(problem)
        for solver in (solve_dp, solve_branch_and_bound, brute_force):
            assert tuple(solver(problem).choices) == choice

    def test_all_equal_scores_prefer_low_bits(self):
        p = make_problem(np.full((4, 3), 0.5), [1, 2, 3, 4], (2, 3, 4), 4.0)
        for solver in ("dp", "bnb", "brute"):
            assert solve(p, solver).chosen_bits == [2, 2, 2, 2]

    def test_large_counts_use_gcd_reduction(self):
        counts = [4096, 4096, 8192, 8192] * 7
        rng = np.random.default_rng(0)
        p = make_problem(rng.random((28, 3)), counts, (2, 3, 4), 3.0)
        assert dp_cells(p) <= 28 * 100
        assert solve(p, "dp").objective_value == solve(p, "bnb").objective_value

    def test_resource_limits(self):
        rng = np.random.default_rng(1)
        p = make_problem(rng.random((6, 3)), [101, 103, 107, 109, 113, 127], (2, 3, 4), 3.0)
        with pytest.raises(ResourceError):
            solve(p, "dp", cell_limit=10)
        with pytest.raises(ResourceError):
            solve(p, "auto", allow_bnb=False, cell_limit=10)
        assert solve(p, "auto", cell_limit=10).solver == "branch_and_bound"

    def test_branch_and_bound_node_limit_flags_non_optimal(self):
        rng = np.random.default_rng(2)
        p = make_problem(rng.random((10, 3)), list(range(1, 11)), (2, 3, 4), 3.0)
        a = solve_branch_and_bound(p, node_limit=3)
        assert a.feasible
        assert not a.optimal


class TestReuse:
    def scores(self):
        rng = np.random.default_rng(3)
        s = rng.random((6, 3))
        return SoftScores(list(range(6)), (2, 3, 4), s / s.sum(axis=1, keepdims=True), [10, 20, 30, 10, 20, 30], 3.0)

    @pytest.mark.parametrize("budget", [2.0, 2.5, 2.7, 3.2, 3.5, 4.0])
    def test_feasible_at_every_budget(self, budget):
        a = reuse_scores(self.scores(), budget)
        assert a.used_bits <= math.floor(Fraction(budget) * 120)
        assert a.b_target == budget

    def test_objective_monotone_in_budget(self):
        vals = [reuse_scores(self.scores(), b).objective_value for b in (2.0, 2.5, 3.0, 3.5, 4.0)]
        assert vals == sorted(vals)

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            reuse_scores(self.scores(), 4.5)
        with pytest.raises(InfeasibleBudgetError):
            reuse_scores(self.scores(), 1.5)


class TestDiagnostics:
    def test_pearson_perfect(self):
        s = SoftScores([0, 1], (2, 4), np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 1], 3.0)
        a = solve(AllocationProblem.from_scores(s, 3.0))
        assert pearson_alignment(s, a) == pytest.approx(1.0)

    def test_pearson_matches_numpy(self):
        rng = np.random.default_rng(4)
        raw = rng.random((5, 3))
        s = SoftScores(list(range(5)), (2, 3, 4), raw / raw.sum(1, keepdims=True), [1] * 5, 3.0)
        a = solve(AllocationProblem.from_scores(s, 3.0))
        assert pearson_alignment(s, a) == pytest.approx(np.corrcoef(s.scores.ravel(), a.indicators().ravel())[0, 1])

    def test_pearson_undefined(self):
        s = SoftScores([0, 1], (2, 4), np.full((2, 2), 0.5), [1, 1], 3.0)
        a = solve(AllocationProblem.from_scores(s, 3.0))
        with pytest.raises(UndefinedCorrelationError):
            pearson_alignment(s, a)

    def test_cosine(self):
        assert allocation_similarity({0: 2.0, 1: 4.0}, {0: 1.0, 1: 2.0}) == pytest.approx(1.0)
        assert allocation_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
        with pytest.raises(UndefinedCorrelationError):
            allocation_similarity([0.0, 0.0], [1.0, 2.0])
        with pytest.raises(ConfigurationError):
            allocation_similarity({0: 1.0}, {1: 1.0})


class TestWorkedExamples:
    def test_three_module_example(self):
        s = np.array([(0.1, 0.2, 0.7), (0.6, 0.3, 0.1), (0.2, 0.5, 0.3)])
        problem = make_problem(s, [10, 10, 10], (2, 3, 4), 3.0)
        best, best_val = enumerate_optimum(problem)
        for solver in ("dp", "bnb", "brute"):
            a = solve(problem, solver)
            assert tuple(a.choices) == best == (2, 0, 1)
            assert a.objective_value == best_val
            assert a.used_bits <= problem.capacity

    def test_single_module_at_top_budget_takes_argmax(self):
        a = solve(make_problem(np.array([[0.2, 0.5, 0.3]]), [64], (2, 3, 4), 4.0))
        assert a.chosen_bits == [3]

    def test_no_modules(self):
        problem = make_problem(np.zeros((0, 3)), [], (2, 3, 4), 3.0)
        for solver in ("dp", "bnb", "brute"):
            a = solve(problem, solver)
            assert a.objective_value == 0.0 and a.chosen_bits == []
        with pytest.raises(InfeasibleBudgetError):
            make_problem(np.zeros((0, 3)), [], (2, 3, 4), 1.0)

    def test_anti_aligned_assignment_has_negative_pearson(self):
        s = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])
        scores = SoftScores(list(range(3)), (2, 4), s, [1, 1, 1], 3.0)
        a = solve(make_problem(s, [1, 1, 1], (2, 4), 3.0))
        flipped = type(a)(a.modules, a.bits, 1 - a.choices, a.counts, 3.0, 0.0, "manual", capacity=a.capacity)
        assert pearson_alignment(scores, a) > 0 > pearson_alignment(scores, flipped)

    def test_cosine_of_negation(self):
        v = np.array([2.0, 3.5, 4.0])
        assert allocation_similarity(v, -v) == pytest.approx(-1.0, abs=1e-15)

    def test_reuse_at_own_budget_matches_solve(self):
        s = np.random.default_rng(6).dirichlet(np.ones(3), size=6)
        scores = SoftScores(list(range(6)), (2, 3, 4), s, [4, 8, 8, 16, 4, 8], 3.0)
        a = reuse_scores(scores, 3.0)
        b = solve(AllocationProblem.from_scores(scores, 3.0))
        assert list(a.choices) == list(b.choices)
        assert a.objective_value == b.objective_value and a.optimal == b.optimal

    def test_realized_bits_nested_in_budget(self):
        s = np.random.default_rng(7).dirichlet(np.ones(3), size=8)
        scores = SoftScores(list(range(8)), (2, 3, 4), s, [3, 5, 7, 9, 11, 13, 15, 17], 3.0)
        low, high = reuse_scores(scores, 2.5), reuse_scores(scores, 3.0)
        assert low.realized_avg_bits <= 2.5 and high.realized_avg_bits <= 3.0
