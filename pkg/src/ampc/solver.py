"""Finite-horizon, finite-control-set optimal control solvers.

Two interchangeable routes: exhaustive enumeration over all K^T input
sequences (vectorized over the prefix tree), and best-first branch-and-bound
with the accumulated-cost lower bound (zero assumed future cost, which is
valid because every cost term is nonnegative).  Both break ties toward the
lexicographically smallest input sequence, so results are bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Optional

import numpy as np

from .dynamics import (
    GuardedMode,
    StageCost,
    SwitchedModel,
    SwitchingCost,
    as_state,
    step_many,
)
from .errors import BudgetError, ModelError

DEFAULT_ENUM_BUDGET = 10_000_000
DEFAULT_NODE_BUDGET = 2_000_000
_EPS_DEN = 1e-12


@dataclass(frozen=True, eq=False)
class OcpInstance:
    """One optimal control problem: model, costs, horizon T, start state z."""

    model: SwitchedModel
    stage: StageCost
    terminal: StageCost
    switching: Optional[SwitchingCost]
    horizon: int
    z: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise ModelError(f"horizon must be >= 1, got {self.horizon}")
        z = as_state(self.z, self.model.n)
        if self.stage.n != self.model.n or self.terminal.n != self.model.n:
            raise ModelError("cost dimension does not match model")
        if self.switching is not None and self.switching.K != self.model.K:
            raise ModelError("switching table size does not match input count")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "horizon", int(self.horizon))


@dataclass(frozen=True)
class OcpSolution:
    """Solver result.  ``solve_time`` is excluded from equality comparisons."""

    optimal_cost: float
    inputs: tuple
    certified_gap: float
    nodes_explored: int
    solve_time: float = field(compare=False)
    budget_exceeded: bool = False


def solve_exhaustive(inst: OcpInstance, enum_budget: int = DEFAULT_ENUM_BUDGET) -> OcpSolution:
    """Globally optimal solve by enumerating all K^T sequences.

    The prefix tree is expanded one depth at a time with vectorized dynamics
    and costs; child ordering keeps the flattened leaf index lexicographic in
    the input sequence, so ``argmin`` lands on the tie-break winner.
    """
    t0 = time.perf_counter()
    K, T = inst.model.K, inst.horizon
    n_seq = K**T
    if n_seq > enum_budget:
        raise BudgetError(
            f"K^T = {n_seq} exceeds enumeration budget {enum_budget}; use solve_bnb"
        )
    states = inst.z[None, :]
    acc = np.zeros(1)
    sw = inst.switching
    if sw is not None:
        last = np.array([sw.u_init - 1])
        table = sw.table
    for _ in range(T):
        m = states.shape[0]
        stage_here = inst.stage.cost_many(states)
        new_states = np.empty((m * K, inst.model.n))
        new_acc = np.empty(m * K)
        for k0 in range(K):
            new_states[k0::K] = step_many(inst.model, states, k0 + 1)
            a = acc + stage_here
            if sw is not None:
                a = a + table[last, k0]
            new_acc[k0::K] = a
        states, acc = new_states, new_acc
        if sw is not None:
            last = np.tile(np.arange(K), m)
    total = acc + inst.terminal.cost_many(states)
    best = int(np.argmin(total))
    digits = []
    idx = best
    for _ in range(T):
        idx, r = divmod(idx, K)
        digits.append(r + 1)
    return OcpSolution(
        optimal_cost=float(total[best]),
        inputs=tuple(reversed(digits)),
        certified_gap=0.0,
        nodes_explored=n_seq,
        solve_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Scalar fast path shared by branch-and-bound and the greedy incumbent:
# models and costs are compiled down to tuples of floats once per solve.
# ---------------------------------------------------------------------------


def _rows(mode):
    return tuple(tuple(row) for row in mode.A), tuple(mode.b)


def compile_step(model: SwitchedModel):
    """Return ``step(x_tuple, k0) -> x_tuple`` over plain Python floats."""
    specs = []
    for m in model.modes:
        if isinstance(m, GuardedMode):
            specs.append(
                ("g", tuple(m.guard_row), m.guard_offset, _rows(m.mode_if_ge), _rows(m.mode_if_lt))
            )
        else:
            specs.append(("a", _rows(m)))

    def step_py(x, k0):
        s = specs[k0]
        if s[0] == "a":
            rows, b = s[1]
        else:
            _, grow, goff, ge, lt = s
            rows, b = ge if sum(g * xi for g, xi in zip(grow, x)) >= goff else lt
        return tuple(
            sum(a * xi for a, xi in zip(row, x)) + bi for row, bi in zip(rows, b)
        )

    return step_py


def compile_cost(cost: StageCost):
    """Return ``g(x_tuple) -> float`` over plain Python floats."""
    d = tuple(cost.d_des)
    constant_target = not np.any(cost.C_des)
    if cost.kind == "l1":
        w = tuple(cost.weights)
        if constant_target:
            terms = tuple((i, w[i], d[i]) for i in range(len(w)) if w[i] != 0.0)

            def g(x):
                return sum(wi * abs(x[i] - di) for i, wi, di in terms)

        else:
            rows = tuple(tuple(r) for r in cost._I_minus_C)
            terms = tuple(
                (w[i], rows[i], d[i]) for i in range(len(w)) if w[i] != 0.0
            )

            def g(x):
                return sum(
                    wi * abs(sum(a * xi for a, xi in zip(row, x)) - di)
                    for wi, row, di in terms
                )

        return g
    Q = tuple(tuple(r) for r in cost.Q)
    rows = tuple(tuple(r) for r in cost._I_minus_C)

    def g(x):
        dev = tuple(sum(a * xi for a, xi in zip(row, x)) - di for row, di in zip(rows, d))
        return sum(
            di * sum(qij * dj for qij, dj in zip(qrow, dev))
            for di, qrow in zip(dev, Q)
        )

    return g


def _greedy_incumbent(inst, step_py, g, h, table):
    """Rollout picking, at each step, the input minimizing g(next) + switching."""
    K, T = inst.model.K, inst.horizon
    x = tuple(inst.z)
    prev = inst.switching.u_init - 1 if table is not None else 0
    seq = []
    acc = 0.0
    for _ in range(T):
        best_k, best_score = 0, None
        for k0 in range(K):
            score = g(step_py(x, k0))
            if table is not None:
                score += table[prev][k0]
            if best_score is None or score < best_score:
                best_k, best_score = k0, score
        acc += g(x)
        if table is not None:
            acc += table[prev][best_k]
        x = step_py(x, best_k)
        prev = best_k
        seq.append(best_k + 1)
    acc += h(x)
    return tuple(seq), acc


def solve_bnb(
    inst: OcpInstance,
    rel_gap: float = 0.0,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> OcpSolution:
    """Best-first branch-and-bound to a certified relative gap.

    Node lower bound is the cost accumulated along its prefix.  The frontier
    is keyed by (lower bound, depth descending, input sequence lex), which is
    deterministic and biases toward deep incumbents.  Termination: the
    incumbent is returned once ``(incumbent - best_bound) / max(incumbent,
    1e-12) <= rel_gap``.  With ``rel_gap == 0`` the search additionally keeps
    expanding equal-bound prefixes that could still yield a lexicographically
    smaller optimal sequence, so exact solves agree with ``solve_exhaustive``
    on the returned sequence, not just its cost.
    """
    if rel_gap < 0:
        raise ModelError("rel_gap must be nonnegative")
    t0 = time.perf_counter()
    K, T = inst.model.K, inst.horizon
    step_py = compile_step(inst.model)
    g = compile_cost(inst.stage)
    h = compile_cost(inst.terminal)
    table = None
    if inst.switching is not None:
        table = tuple(tuple(row) for row in inst.switching.table)
        u_init0 = inst.switching.u_init - 1

    inc_seq, inc_cost = _greedy_incumbent(inst, step_py, g, h, table)
    heap = [(0.0, 0, (), tuple(inst.z))]
    pops = 0
    budget_hit = False
    certified = None

    while heap:
        lb, negd, seq, x = heappop(heap)
        if rel_gap > 0.0:
            gap_now = (inc_cost - lb) / max(inc_cost, _EPS_DEN)
            if gap_now <= rel_gap:
                certified = max(gap_now, 0.0)
                break
        if lb > inc_cost:
            continue
        if lb == inc_cost and seq > inc_seq[: len(seq)]:
            continue
        if pops >= node_budget:
            budget_hit = True
            best_bound = min(lb, heap[0][0]) if heap else lb
            certified = max((inc_cost - best_bound) / max(inc_cost, _EPS_DEN), 0.0)
            break
        pops += 1
        d = -negd
        g_here = g(x)
        prev = seq[-1] - 1 if seq else (u_init0 if table is not None else 0)
        for k0 in range(K):
            child_acc = lb + g_here
            if table is not None:
                child_acc += table[prev][k0]
            child_x = step_py(x, k0)
            child_seq = seq + (k0 + 1,)
            if d + 1 == T:
                total = child_acc + h(child_x)
                if total < inc_cost or (total == inc_cost and child_seq < inc_seq):
                    inc_cost, inc_seq = total, child_seq
            else:
                if child_acc > inc_cost:
                    continue
                heappush(heap, (child_acc, negd - 1, child_seq, child_x))

    if certified is None:
        certified = 0.0
    return OcpSolution(
        optimal_cost=inc_cost,
        inputs=inc_seq,
        certified_gap=certified,
        nodes_explored=pops,
        solve_time=time.perf_counter() - t0,
        budget_exceeded=budget_hit,
    )


def solve_value(
    model: SwitchedModel,
    stage: StageCost,
    terminal: StageCost,
    z,
    remaining_horizon: int,
    rel_gap: float,
    enum_budget: int = DEFAULT_ENUM_BUDGET,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> OcpSolution:
    """Cost-to-go solve from z over the remaining horizon, no switching cost.

    Uses exhaustive enumeration whenever K^horizon fits the budget (exact,
    gap 0), otherwise branch-and-bound at the requested gap.
    """
    inst = OcpInstance(model, stage, terminal, None, remaining_horizon, z)
    if model.K**remaining_horizon <= enum_budget:
        return solve_exhaustive(inst, enum_budget)
    return solve_bnb(inst, rel_gap, node_budget)


def value_sample(
    model: SwitchedModel,
    stage: StageCost,
    terminal: StageCost,
    z,
    remaining_horizon: int,
    rel_gap: float = 0.0,
    **kwargs,
) -> float:
    """Sampled optimal cost-to-go V(z) over the remaining horizon.

    Switching costs are deliberately excluded: the tail segment of the
    objective ignores them, so the fitted value function stays independent of
    the previously applied input.
    """
    return solve_value(model, stage, terminal, z, remaining_horizon, rel_gap, **kwargs).optimal_cost
