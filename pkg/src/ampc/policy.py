"""Online evaluation of approximate-MPC policies.

Three evaluation paths, fastest applicable chosen automatically:

- general: simulate every one of the K^tau input sequences and score it
  (works for any model, guarded or not);
- precomputed: per-sequence quadratic forms ``z^T P~ z + q~^T z + r~`` for
  pure switched-affine models with quadratic stage cost (the state-quadratic
  term is dropped when all modes share one A, where it no longer depends on
  the sequence);
- one-step: ``argmin_k (F z + g_vec)_k`` for common-A models with tau = 1.

All paths share the same tie-break (lowest input index / lexicographic
sequence), so they return identical decisions on the same configuration.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import (
    StageCost,
    SwitchedModel,
    SwitchingCost,
    as_state,
    simulate,
    step,
)
from .errors import BudgetError, ModelError
from .fitting import QuadraticValueFunction
from .solver import (
    DEFAULT_ENUM_BUDGET,
    DEFAULT_NODE_BUDGET,
    OcpInstance,
    compile_cost,
    compile_step,
    solve_bnb,
    solve_exhaustive,
)

DEFAULT_RUNTIME_BUDGET = 1_000_000


@dataclass(frozen=True, eq=False)
class PolicyConfig:
    """Short-horizon policy parameters.

    ``vf`` is anything with an ``evaluate(x) -> float`` method; a quadratic
    value function normally, or a stage cost for the greedy baseline.
    """

    tau: int
    vf: object
    stage: StageCost
    switching: Optional[SwitchingCost] = None

    def __post_init__(self):
        if self.tau < 1:
            raise ModelError("tau must be >= 1")
        object.__setattr__(self, "tau", int(self.tau))


def _compile_vf(vf):
    """Scalar evaluator over tuple states for the general path."""
    if isinstance(vf, QuadraticValueFunction):
        rows = tuple(tuple(r) for r in vf._I_minus_C)
        d = tuple(vf.d_des)
        P = tuple(tuple(r) for r in vf.P)
        r0 = vf.r

        def ev(x):
            dev = tuple(
                sum(a * xi for a, xi in zip(row, x)) - di for row, di in zip(rows, d)
            )
            return (
                sum(
                    di * sum(pij * dj for pij, dj in zip(prow, dev))
                    for di, prow in zip(dev, P)
                )
                + r0
            )

        return ev
    if isinstance(vf, StageCost):
        return compile_cost(vf)
    return lambda x: float(vf.evaluate(np.asarray(x, dtype=float)))


def decide_general(
    model: SwitchedModel,
    cfg: PolicyConfig,
    z,
    u_prev: Optional[int] = None,
    runtime_budget: int = DEFAULT_RUNTIME_BUDGET,
    _kit=None,
) -> int:
    """Enumerate all K^tau sequences by simulation; return the first input.

    Scores ``sum_t [g(x_t) + l(u_{t-1}, u_t)] + Vhat(x_tau)``; ties resolve to
    the lexicographically smallest sequence.
    """
    K, tau = model.K, cfg.tau
    if K**tau > runtime_budget:
        raise BudgetError(f"K^tau = {K**tau} exceeds runtime budget {runtime_budget}")
    if _kit is None:
        _kit = (compile_step(model), compile_cost(cfg.stage), _compile_vf(cfg.vf))
    step_py, g, vhat = _kit
    table = cfg.switching.table if cfg.switching is not None else None
    if table is not None and u_prev is None:
        u_prev = cfg.switching.u_init
    z = tuple(as_state(z, model.n))

    best_score = None
    best_first = 1
    for seq in itertools.product(range(K), repeat=tau):
        x = z
        score = 0.0
        prev = u_prev - 1 if table is not None else 0
        for k0 in seq:
            score += g(x)
            if table is not None:
                score += table[prev][k0]
                prev = k0
            x = step_py(x, k0)
        score += vhat(x)
        if best_score is None or score < best_score:
            best_score = score
            best_first = seq[0] + 1
    return best_first


@dataclass(frozen=True, eq=False)
class SequenceForm:
    """Quadratic score of one input sequence: ``z P~ z + q~ z + r~``.

    ``P_tilde`` is None for common-A models, where the state-quadratic term is
    the same for every sequence and drops out of the argmin.
    """

    u_seq: tuple
    P_tilde: Optional[np.ndarray]
    q_tilde: np.ndarray
    r_tilde: float

    def evaluate(self, z) -> float:
        z = np.asarray(z, dtype=float)
        val = float(self.q_tilde @ z) + self.r_tilde
        if self.P_tilde is not None:
            val += float(z @ self.P_tilde @ z)
        return val


def precompute_quadratic_forms(
    model: SwitchedModel,
    cfg: PolicyConfig,
    drop_common_quadratic: bool = True,
    runtime_budget: int = DEFAULT_RUNTIME_BUDGET,
) -> list:
    """Materialize the K^tau per-sequence quadratic forms.

    Requires a pure switched-affine model, a quadratic stage cost, and a
    quadratic value function.  The per-sequence parameters come from the
    propagated products ``Phi_{s,t}`` of mode A-matrices and the offsets
    ``e_t = (I - C_t) sum_s Phi_{s+1,t} b^{u_s} - d_t``, with the stage
    weight/map used for t < tau and the value-function weight/map at t = tau.
    """
    if not model.is_pure_switched_affine:
        raise ModelError("precomputed forms need an unguarded model; use decide_general")
    if cfg.stage.kind != "quadratic":
        raise ModelError("precomputed forms need a quadratic stage cost")
    vf = cfg.vf
    if not isinstance(vf, QuadraticValueFunction):
        raise ModelError("precomputed forms need a quadratic value function")
    K, tau, n = model.K, cfg.tau, model.n
    if K**tau > runtime_budget:
        raise BudgetError(f"K^tau = {K**tau} exceeds form budget {runtime_budget}")

    A = [m.A for m in model.modes]
    b = [m.b for m in model.modes]
    ImC_g, d_g, Q = cfg.stage._I_minus_C, cfg.stage.d_des, cfg.stage.Q
    ImC_v, d_v, P = vf._I_minus_C, vf.d_des, vf.P
    drop = drop_common_quadratic and model.has_common_A

    forms = []
    for seq in itertools.product(range(K), repeat=tau):
        Phi = np.eye(n)
        beta = np.zeros(n)
        P_acc = np.zeros((n, n))
        q_acc = np.zeros(n)
        r_acc = 0.0
        for t in range(tau + 1):
            if t > 0:
                k0 = seq[t - 1]
                Phi = A[k0] @ Phi
                beta = A[k0] @ beta + b[k0]
            if t < tau:
                ImC, d, W = ImC_g, d_g, Q
            else:
                ImC, d, W = ImC_v, d_v, P
            M = ImC @ Phi
            e = ImC @ beta - d
            P_acc += M.T @ W @ M
            q_acc += 2.0 * (M.T @ (W @ e))
            r_acc += float(e @ W @ e)
        r_acc += vf.r
        forms.append(
            SequenceForm(
                u_seq=tuple(k0 + 1 for k0 in seq),
                P_tilde=None if drop else P_acc,
                q_tilde=q_acc,
                r_tilde=r_acc,
            )
        )
    return forms


def _switching_totals(forms, switching):
    """(K, n_forms) table: row u_prev-1 gives each form's switching total."""
    K = switching.K
    out = np.zeros((K, len(forms)))
    for f, form in enumerate(forms):
        inner = sum(
            switching.cost(form.u_seq[i], form.u_seq[i + 1])
            for i in range(len(form.u_seq) - 1)
        )
        for up in range(K):
            out[up, f] = switching.cost(up + 1, form.u_seq[0]) + inner
    return out


def decide_precomputed(
    forms,
    z,
    u_prev: Optional[int] = None,
    switching: Optional[SwitchingCost] = None,
) -> int:
    """Evaluate every precomputed form at z; return the minimizer's first input."""
    z = np.asarray(z, dtype=float)
    if switching is not None and u_prev is None:
        u_prev = switching.u_init
    best_score = None
    best_first = 1
    for form in forms:
        score = form.evaluate(z)
        if switching is not None:
            prev = u_prev
            for u in form.u_seq:
                score += switching.cost(prev, u)
                prev = u
        if best_score is None or score < best_score:
            best_score = score
            best_first = form.u_seq[0]
    return best_first


@dataclass(frozen=True, eq=False)
class OneStepForm:
    """One-step scores ``F z + g_vec`` for common-A models.

    Row k equals the value of the fitted quadratic at ``A z + b^k`` up to an
    additive term that does not depend on k, so the argmin is unchanged.  Only
    ``g_vec`` depends on the desired-state offset, so a target change needs
    just that vector recomputed.
    """

    F: np.ndarray
    g_vec: np.ndarray

    def decide(self, z, u_prev=None, switching=None) -> int:
        scores = self.F @ np.asarray(z, dtype=float)
        scores = scores + self.g_vec
        if switching is not None:
            if u_prev is None:
                u_prev = switching.u_init
            scores = scores + switching.table[u_prev - 1]
        return int(np.argmin(scores)) + 1


def build_one_step(model: SwitchedModel, vf: QuadraticValueFunction) -> OneStepForm:
    """Fold the value function through one step of a common-A model."""
    if not model.has_common_A:
        raise ModelError("one-step form needs all modes to share one A matrix")
    A = model.modes[0].A
    ImC, d, P = vf._I_minus_C, vf.d_des, vf.P
    Abar = ImC @ A
    F = np.empty((model.K, model.n))
    g_vec = np.empty(model.K)
    for k, m in enumerate(model.modes):
        bproj = ImC @ m.b
        F[k] = 2.0 * (bproj @ P @ Abar)
        bk = bproj - d
        g_vec[k] = float(bk @ P @ bk)
    return OneStepForm(F=F, g_vec=g_vec)


def update_one_step_offset(
    form: OneStepForm, model: SwitchedModel, vf: QuadraticValueFunction
) -> OneStepForm:
    """Recompute only ``g_vec`` after a desired-state offset change."""
    ImC, d, P = vf._I_minus_C, vf.d_des, vf.P
    g_vec = np.empty(model.K)
    for k, m in enumerate(model.modes):
        bk = ImC @ m.b - d
        g_vec[k] = float(bk @ P @ bk)
    return OneStepForm(F=form.F, g_vec=g_vec)


# ---------------------------------------------------------------------------
# Policy objects for closed-loop runs.
# ---------------------------------------------------------------------------


class AmpcPolicy:
    """Approximate-MPC policy with a selectable evaluation path.

    ``path`` is one of ``auto``, ``general``, ``precomputed``, ``one-step``;
    auto picks the cheapest path the configuration supports.
    """

    def __init__(self, model, cfg: PolicyConfig, path: str = "auto",
                 runtime_budget: int = DEFAULT_RUNTIME_BUDGET):
        self.model = model
        self.cfg = cfg
        quad_vf = isinstance(cfg.vf, QuadraticValueFunction)
        if path == "auto":
            if model.has_common_A and cfg.tau == 1 and quad_vf:
                path = "one-step"
            elif model.is_pure_switched_affine and cfg.stage.kind == "quadratic" and quad_vf:
                path = "precomputed"
            else:
                path = "general"
        self.path = path
        self._sw = cfg.switching
        if path == "one-step":
            if cfg.tau != 1:
                raise ModelError("one-step path requires tau = 1")
            self._one_step = build_one_step(model, cfg.vf)
            self._decide = self._decide_one_step
        elif path == "precomputed":
            self._forms = precompute_quadratic_forms(model, cfg, runtime_budget=runtime_budget)
            self._compile_form_eval()
            self._decide = self._decide_precomputed
        elif path == "general":
            self._kit = (compile_step(model), compile_cost(cfg.stage), _compile_vf(cfg.vf))
            self._budget = runtime_budget
            self._decide = self._decide_general
        else:
            raise ModelError(f"unknown policy path {path!r}")

    def decide(self, z, u_prev: Optional[int] = None) -> int:
        return self._decide(z, u_prev)

    def _decide_one_step(self, z, u_prev):
        return self._one_step.decide(z, u_prev, self._sw)

    def _decide_general(self, z, u_prev):
        return decide_general(
            self.model, self.cfg, z, u_prev, runtime_budget=self._budget, _kit=self._kit
        )

    def _compile_form_eval(self):
        forms = self._forms
        n = self.model.n
        self._first_inputs = [f.u_seq[0] for f in forms]
        if self._sw is not None:
            self._sw_totals = _switching_totals(forms, self._sw)
        else:
            self._sw_totals = None
        # Tiny models get an unrolled pure-Python evaluator; anything larger
        # scores all forms with one matrix-vector product on the feature
        # vector (z kron z, z, 1).
        self._tiny = n <= 3 and len(forms) <= 16
        if self._tiny:
            compiled = []
            for f in forms:
                P = f.P_tilde
                Pt = tuple(tuple(r) for r in P) if P is not None else None
                compiled.append((Pt, tuple(f.q_tilde), f.r_tilde))
            self._compiled = compiled
        else:
            cols = n * n + n + 1
            M = np.zeros((len(forms), cols))
            for i, f in enumerate(forms):
                if f.P_tilde is not None:
                    M[i, : n * n] = f.P_tilde.ravel()
                M[i, n * n : n * n + n] = f.q_tilde
                M[i, -1] = f.r_tilde
            self._feature_matrix = M

    def _decide_precomputed(self, z, u_prev):
        sw = self._sw_totals
        if sw is not None and u_prev is None:
            u_prev = self._sw.u_init
        if self._tiny:
            row = sw[u_prev - 1] if sw is not None else None
            best = None
            best_first = 1
            for i, (Pt, q, r) in enumerate(self._compiled):
                s = r
                for qi, zi in zip(q, z):
                    s += qi * zi
                if Pt is not None:
                    for prow, zi in zip(Pt, z):
                        acc = 0.0
                        for pij, zj in zip(prow, z):
                            acc += pij * zj
                        s += zi * acc
                if row is not None:
                    s += row[i]
                if best is None or s < best:
                    best = s
                    best_first = self._first_inputs[i]
            return best_first
        z = np.asarray(z, dtype=float)
        feat = np.concatenate([np.outer(z, z).ravel(), z, [1.0]])
        scores = self._feature_matrix @ feat
        if sw is not None:
            scores = scores + sw[u_prev - 1]
        return self._first_inputs[int(np.argmin(scores))]


class FcsMpcPolicy:
    """Receding-horizon policy that re-solves the full horizon-T problem."""

    def __init__(self, model, stage, terminal, horizon, switching=None,
                 rel_gap: float = 0.0, method: str = "auto",
                 enum_budget: int = DEFAULT_ENUM_BUDGET,
                 node_budget: int = DEFAULT_NODE_BUDGET):
        if method == "auto":
            method = "exhaustive" if model.K**horizon <= enum_budget else "bnb"
        if method not in ("exhaustive", "bnb"):
            raise ModelError(f"unknown solve method {method!r}")
        self.model = model
        self.stage = stage
        self.terminal = terminal
        self.horizon = int(horizon)
        self.switching = switching
        self.rel_gap = float(rel_gap)
        self.method = method
        self.enum_budget = enum_budget
        self.node_budget = node_budget

    def decide(self, z, u_prev: Optional[int] = None) -> int:
        sw = self.switching
        if sw is not None and u_prev is not None:
            sw = sw.with_u_init(u_prev)
        inst = OcpInstance(self.model, self.stage, self.terminal, sw, self.horizon, z)
        if self.method == "exhaustive":
            sol = solve_exhaustive(inst, self.enum_budget)
        else:
            sol = solve_bnb(inst, self.rel_gap, self.node_budget)
        return sol.inputs[0]


def greedy_policy(model, stage, tau: int = 1, switching=None) -> AmpcPolicy:
    """Baseline: the stage cost itself stands in for the value function."""
    cfg = PolicyConfig(tau=tau, vf=stage, stage=stage, switching=switching)
    return AmpcPolicy(model, cfg, path="general")


@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    """Trajectory, decisions, per-decision latency, and running costs."""

    states: np.ndarray
    inputs: np.ndarray
    latencies_us: np.ndarray
    stage_costs: np.ndarray
    switching_costs: np.ndarray
    avg_stage_cost: float
    avg_switching_cost: float
    total_cost: float


def closed_loop(
    model: SwitchedModel,
    policy,
    x0,
    steps: int,
    u_init: int = 1,
    stage: Optional[StageCost] = None,
    switching: Optional[SwitchingCost] = None,
) -> ClosedLoopResult:
    """Alternate decide/step for ``steps`` epochs and record metrics.

    ``stage``/``switching`` are the reporting costs; per-step stage cost is
    evaluated at the pre-decision state, matching the per-epoch averages used
    to compare policies.
    """
    if steps < 1:
        raise ModelError("steps must be >= 1")
    x = as_state(x0, model.n)
    states = np.empty((steps + 1, model.n))
    states[0] = x
    inputs = np.empty(steps, dtype=int)
    lat = np.empty(steps)
    g_costs = np.zeros(steps)
    sw_costs = np.zeros(steps)
    u_prev = u_init
    for t in range(steps):
        t0 = time.perf_counter()
        u = policy.decide(x, u_prev)
        lat[t] = (time.perf_counter() - t0) * 1e6
        inputs[t] = u
        if stage is not None:
            g_costs[t] = stage.cost(x)
        if switching is not None:
            sw_costs[t] = switching.cost(u_prev, u)
        x = step(model, x, u)
        states[t + 1] = x
        u_prev = u
    return ClosedLoopResult(
        states=states,
        inputs=inputs,
        latencies_us=lat,
        stage_costs=g_costs,
        switching_costs=sw_costs,
        avg_stage_cost=float(g_costs.mean()),
        avg_switching_cost=float(sw_costs.mean()),
        total_cost=float(g_costs.sum() + sw_costs.sum()),
    )
