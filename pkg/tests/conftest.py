import numpy as np
import pytest
from hypothesis import settings

from bitbudget.model import ModelSpec, build_model
from bitbudget.quant import build_pool

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


TINY = dict(num_layers=1, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=16, max_seq_len=8, seed=3)


@pytest.fixture(scope="session")
def tiny_spec():
    return ModelSpec(**TINY)


@pytest.fixture(scope="session")
def tiny_model(tiny_spec):
    return build_model(tiny_spec)


@pytest.fixture(scope="session")
def tiny_pool(tiny_model):
    return build_pool(tiny_model, (2, 3, 4), 16)


@pytest.fixture(scope="session")
def two_layer_model():
    return build_model(ModelSpec(**{**TINY, "num_layers": 2}))


def stage1_gradient_errors(model, pool, tokens, mode="augmented_lagrangian", lam=(0.3, 0.7), b_target=3.0,
                           relaxation="gumbel_softmax", seed=0, budget_on_expected=True):
    """Relative error between analytic and central-difference Stage I gradients.

    The relaxation noise is drawn once and frozen. Returns
    ``{"logits": err, "lam1": err, "lam2": err}`` (norm-wise relative errors).
    """
    from bitbudget import autograd as ag
    from bitbudget.masks import (DualState, MaskState, Stage1Problem, draw_noise, reference_recon,
                                 sample_relaxed_probs)
    from bitbudget.model import teacher_trace

    problem = Stage1Problem(model, pool)
    batch = (tokens, teacher_trace(model, tokens))
    ref = reference_recon(problem, batch)
    problem.recon_scale = 1.0 / ref
    rng = np.random.default_rng(seed)
    state = MaskState.zeros(problem.modules, problem.bits, relaxation=relaxation)
    state.logits.data = rng.normal(size=state.logits.shape)
    noise = draw_noise(state, rng)

    def evaluate(logits, lam1, lam2, grad=False):
        st = MaskState(state.modules, state.bits, ag.Tensor(logits, requires_grad=grad),
                       relaxation=relaxation)
        dual = DualState(ag.Tensor(lam1, requires_grad=grad), ag.Tensor(lam2, requires_grad=grad))
        p = sample_relaxed_probs(st, noise=noise)
        budget_p = sample_relaxed_probs(st, noise=0.0) if budget_on_expected else None
        total, _ = problem.loss(batch, p, dual, b_target, mode, budget_p=budget_p)
        if grad:
            total.backward()
            return st.logits.grad, dual.lam1.grad, dual.lam2.grad
        return total.item()

    logits0 = state.logits.data.copy()
    g_logits, g1, g2 = evaluate(logits0, lam[0], lam[1], grad=True)
    with ag.no_grad():
        n_logits = numeric_grad(lambda x: evaluate(x, lam[0], lam[1]), logits0)
        n1 = numeric_grad(lambda x: evaluate(logits0, x[0], lam[1]), np.array([lam[0]]))[0]
        n2 = numeric_grad(lambda x: evaluate(logits0, lam[0], x[0]), np.array([lam[1]]))[0]

    def rel(a, b):
        a, b = np.atleast_1d(np.asarray(a, dtype=float)), np.atleast_1d(np.asarray(b, dtype=float))
        scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
        return float(np.linalg.norm(a - b) / scale)

    g1 = 0.0 if g1 is None else g1
    g2 = 0.0 if g2 is None else g2
    return {"logits": rel(g_logits, n_logits), "lam1": rel(g1, n1), "lam2": rel(g2, n2)}


# -- budget audit ------------------------------------------------------------
# Every assignment a solver or the uniform baseline produces anywhere in the
# suite is re-checked here against floor(b_target * sum N), recomputed from
# the raw counts rather than taken from the assignment's own capacity field.

BUDGET_AUDIT = {"checked": 0, "violations": []}
ACCEPTANCE_LINES = []


def _audit(assignment):
    from fractions import Fraction
    import math

    counts = [int(n) for n in assignment.counts]
    cap = math.floor(Fraction(assignment.b_target) * sum(counts))
    used = sum(n * b for n, b in zip(counts, assignment.chosen_bits))
    BUDGET_AUDIT["checked"] += 1
    if used > cap:
        BUDGET_AUDIT["violations"].append((assignment.solver, assignment.b_target, used, cap))
    return assignment


def _audited(fn):
    def wrapper(*args, **kwargs):
        return _audit(fn(*args, **kwargs))

    wrapper.__wrapped__ = fn
    return wrapper


def pytest_configure(config):
    from bitbudget import allocate, baselines, pipeline

    allocate._finish = _audited(allocate._finish)
    baselines.uniform_assignment = _audited(baselines.uniform_assignment)
    pipeline.uniform_assignment = baselines.uniform_assignment


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    v = BUDGET_AUDIT["violations"]
    terminalreporter.write_line(
        f"budget audit: {BUDGET_AUDIT['checked']} assignments checked, {len(v)} over budget"
    )


def pytest_sessionfinish(session, exitstatus):
    if BUDGET_AUDIT["violations"]:
        session.exitstatus = 1
