"""Discrete-time switched dynamics, stage/switching costs, and exact discretization.

States are plain 1-D float arrays.  Control inputs are 1-based integers in
``{1, ..., K}``, matching the usual switch-configuration numbering.  All model
and cost objects are immutable after construction, so they can be shared
freely across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import expm

from .errors import ModelError, NumericError


def _freeze(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def as_state(x, n: Optional[int] = None) -> np.ndarray:
    """Validate and return a finite 1-D state vector."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ModelError(f"state must be 1-D, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ModelError(f"state has dimension {arr.shape[0]}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("state contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class AffineMode:
    """One switch configuration: ``x_next = A @ x + b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = _freeze(self.A)
        b = _freeze(self.b)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError(f"A must be square, got shape {A.shape}")
        if b.shape != (A.shape[0],):
            raise ModelError(f"b has shape {b.shape}, expected ({A.shape[0]},)")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ModelError("mode matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class GuardedMode:
    """Mode whose affine map is selected by a linear test on the pre-step state.

    ``mode_if_ge`` applies iff ``guard_row @ x >= guard_offset``, otherwise
    ``mode_if_lt``.  Used for conduction-mode switching (CCM vs DCM), where the
    guard predicts the sign of the inductor current over the next interval.
    """

    guard_row: np.ndarray
    guard_offset: float
    mode_if_ge: AffineMode
    mode_if_lt: AffineMode

    def __post_init__(self):
        row = _freeze(self.guard_row)
        if row.shape != (self.mode_if_ge.n,):
            raise ModelError("guard row dimension does not match mode dimension")
        if self.mode_if_ge.n != self.mode_if_lt.n:
            raise ModelError("guard branches have mismatched dimensions")
        object.__setattr__(self, "guard_row", row)
        object.__setattr__(self, "guard_offset", float(self.guard_offset))

    @property
    def n(self) -> int:
        return self.mode_if_ge.n

    def select(self, x: np.ndarray) -> AffineMode:
        ge = float(self.guard_row @ x) >= self.guard_offset
        return self.mode_if_ge if ge else self.mode_if_lt


Mode = Union[AffineMode, GuardedMode]


@dataclass(frozen=True, eq=False)
class SwitchedModel:
    """Finite-control-set system ``x_{t+1} = f(x_t, u_t)``, ``u_t in {1..K}``.

    Each mode is either a plain affine map or a guarded pair of affine maps.
    ``is_pure_switched_affine`` is True when no mode is guarded;
    ``has_common_A`` additionally requires all modes to share one A matrix
    (a linear system with a switched input offset).
    """

    modes: tuple

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ModelError("model needs at least one mode")
        n = modes[0].n
        for k, m in enumerate(modes):
            if m.n != n:
                raise ModelError(f"mode {k + 1} has dimension {m.n}, expected {n}")
        pure = all(isinstance(m, AffineMode) for m in modes)
        common = pure and all(np.array_equal(m.A, modes[0].A) for m in modes[1:])
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "K", len(modes))
        object.__setattr__(self, "is_pure_switched_affine", pure)
        object.__setattr__(self, "has_common_A", common)

    def mode_for(self, x: np.ndarray, u: int) -> AffineMode:
        """Resolve the (possibly guarded) affine map active at state x, input u."""
        if not 1 <= u <= self.K:
            raise ModelError(f"input {u} out of range 1..{self.K}")
        m = self.modes[u - 1]
        return m.select(x) if isinstance(m, GuardedMode) else m


@dataclass(frozen=True, eq=False)
class StageCost:
    """Nonnegative state penalty relative to a desired state.

    The desired state is an affine function of the current state,
    ``x_des = C_des @ x + d_des`` (constant targets use ``C_des = 0``).
    Two kinds are supported:

    - ``l1``: ``sum_i w_i * |x_i - x_des_i|`` with entrywise ``w >= 0``;
    - ``quadratic``: ``(x - x_des)^T Q (x - x_des)`` with symmetric PSD Q.
    """

    kind: str
    weights: Optional[np.ndarray]
    Q: Optional[np.ndarray]
    C_des: np.ndarray
    d_des: np.ndarray

    def __post_init__(self):
        if self.kind not in ("l1", "quadratic"):
            raise ModelError(f"unknown cost kind {self.kind!r}")
        C = _freeze(self.C_des)
        d = _freeze(self.d_des)
        n = d.shape[0]
        if C.shape != (n, n):
            raise ModelError("C_des must be square and match d_des")
        if self.kind == "l1":
            w = _freeze(self.weights)
            if w.shape != (n,):
                raise ModelError("l1 weights must match state dimension")
            if np.any(w < 0):
                raise ModelError("l1 weights must be nonnegative")
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "Q", None)
        else:
            Q = _freeze(self.Q)
            if Q.shape != (n, n):
                raise ModelError("Q must match state dimension")
            if not np.allclose(Q, Q.T, atol=1e-12, rtol=0.0):
                raise ModelError("Q must be symmetric")
            if np.linalg.eigvalsh(Q).min() < -1e-10:
                raise ModelError("Q must be positive semidefinite")
            object.__setattr__(self, "Q", Q)
            object.__setattr__(self, "weights", None)
        object.__setattr__(self, "C_des", C)
        object.__setattr__(self, "d_des", d)
        # deviation(x) = x - x_des = (I - C_des) x - d_des
        object.__setattr__(self, "_I_minus_C", _freeze(np.eye(n) - C))

    @classmethod
    def weighted_l1(cls, weights, x_des=None, C_des=None, d_des=None) -> "StageCost":
        """L1 cost; pass either a constant ``x_des`` or an affine map."""
        w = np.asarray(weights, dtype=float)
        C, d = _desired_map(w.shape[0], x_des, C_des, d_des)
        return cls("l1", w, None, C, d)

    @classmethod
    def quadratic(cls, Q, x_des=None, C_des=None, d_des=None) -> "StageCost":
        """Quadratic cost; pass either a constant ``x_des`` or an affine map."""
        Qa = np.asarray(Q, dtype=float)
        C, d = _desired_map(Qa.shape[0], x_des, C_des, d_des)
        return cls("quadratic", None, Qa, C, d)

    @property
    def n(self) -> int:
        return self.d_des.shape[0]

    def x_des(self, x: np.ndarray) -> np.ndarray:
        return self.C_des @ x + self.d_des

    def deviation(self, x: np.ndarray) -> np.ndarray:
        return self._I_minus_C @ x - self.d_des

    def cost(self, x: np.ndarray) -> float:
        dev = self._I_minus_C @ x - self.d_des
        if self.kind == "l1":
            return float(np.abs(dev) @ self.weights)
        return float(dev @ self.Q @ dev)

    def cost_many(self, X: np.ndarray) -> np.ndarray:
        """Vectorized cost over rows of X (shape (m, n))."""
        dev = X @ self._I_minus_C.T - self.d_des
        if self.kind == "l1":
            return np.abs(dev) @ self.weights
        return np.einsum("ij,jk,ik->i", dev, self.Q, dev)

    # Value-function-compatible surface, so a stage cost can stand in for the
    # approximate value function (the greedy baseline policy).
    def evaluate(self, x: np.ndarray) -> float:
        return self.cost(x)


@dataclass(frozen=True, eq=False)
class SwitchingCost:
    """Pairwise input-transition penalty ``table[i-1, j-1] = l(i, j)``.

    The first transition of a window is charged against ``u_init``, the input
    most recently applied to the plant.
    """

    table: np.ndarray
    u_init: int = 1

    def __post_init__(self):
        t = _freeze(self.table)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ModelError("switching table must be square")
        if np.any(np.diagonal(t) != 0.0):
            raise ModelError("switching table diagonal must be zero")
        if np.any(t < 0):
            raise ModelError("switching costs must be nonnegative")
        object.__setattr__(self, "table", t)
        if not 1 <= int(self.u_init) <= t.shape[0]:
            raise ModelError("u_init out of range")
        object.__setattr__(self, "u_init", int(self.u_init))

    @classmethod
    def constant(cls, K: int, value: float, u_init: int = 1) -> "SwitchingCost":
        """Constant cost for any change of input, zero for holding it."""
        t = float(value) * (np.ones((K, K)) - np.eye(K))
        return cls(t, u_init)

    @property
    def K(self) -> int:
        return self.table.shape[0]

    def cost(self, u_prev: int, u: int) -> float:
        return float(self.table[u_prev - 1, u - 1])

    def with_u_init(self, u_init: int) -> "SwitchingCost":
        return SwitchingCost(self.table, u_init)


def _desired_map(n, x_des, C_des, d_des):
    if x_des is not None:
        if C_des is not None or d_des is not None:
            raise ModelError("pass either x_des or (C_des, d_des), not both")
        return np.zeros((n, n)), np.asarray(x_des, dtype=float)
    if C_des is None or d_des is None:
        raise ModelError("desired state map requires x_des or (C_des, d_des)")
    return np.asarray(C_des, dtype=float), np.asarray(d_des, dtype=float)


def matrix_exponential(M) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring (Pade), with overflow check."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NumericError("matrix exponential of non-finite matrix")
    E = expm(M)
    if not np.all(np.isfinite(E)):
        raise NumericError("matrix exponential overflowed")
    return E


def discretize_affine(A_c, b_c, h: float) -> AffineMode:
    """Exact step map of ``xdot = A_c x + b_c`` over one interval of length h.

    Computed from the exponential of the (n+1)-state augmented matrix
    ``[[A_c, b_c], [0, 0]]`` scaled by h; the top-left block is the discrete
    A and the top-right column the discrete b.
    """
    A_c = np.asarray(A_c, dtype=float)
    b_c = np.asarray(b_c, dtype=float)
    if h <= 0:
        raise ModelError(f"timestep must be positive, got {h}")
    n = A_c.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A_c
    aug[:n, n] = b_c
    E = matrix_exponential(h * aug)
    return AffineMode(E[:n, :n], E[:n, n])


def step(model: SwitchedModel, x, u: int) -> np.ndarray:
    """Apply one input: ``A x + b`` for the guard-resolved mode."""
    xv = as_state(x, model.n)
    m = model.mode_for(xv, u)
    nxt = m.A @ xv + m.b
    if not np.all(np.isfinite(nxt)):
        raise NumericError("non-finite state after step (unstable or ill-scaled model)")
    return nxt


def step_many(model: SwitchedModel, X: np.ndarray, u: int) -> np.ndarray:
    """Apply one input to every row of X (shape (m, n)); guard resolved per row."""
    if not 1 <= u <= model.K:
        raise ModelError(f"input {u} out of range 1..{model.K}")
    m = model.modes[u - 1]
    if isinstance(m, GuardedMode):
        ge = X @ m.guard_row >= m.guard_offset
        out_ge = X @ m.mode_if_ge.A.T + m.mode_if_ge.b
        out_lt = X @ m.mode_if_lt.A.T + m.mode_if_lt.b
        return np.where(ge[:, None], out_ge, out_lt)
    return X @ m.A.T + m.b


def simulate(model: SwitchedModel, x0, inputs: Sequence[int]) -> np.ndarray:
    """Roll the model forward; returns states of shape (len(inputs)+1, n)."""
    x = as_state(x0, model.n)
    out = np.empty((len(inputs) + 1, model.n))
    out[0] = x
    for t, u in enumerate(inputs):
        try:
            x = step(model, x, u)
        except (ModelError, NumericError) as exc:
            raise type(exc)(f"{exc} (at step {t})") from None
        out[t + 1] = x
    return out


def trajectory_cost(
    states,
    inputs: Sequence[int],
    stage: StageCost,
    terminal: StageCost,
    switching: Optional[SwitchingCost] = None,
) -> float:
    """Total objective of a rolled-out trajectory.

    ``sum_t g(x_t) + h(x_T)`` plus, when a switching cost is supplied, the
    transition penalties with the first one charged against ``u_init``.
    """
    states = np.asarray(states, dtype=float)
    if states.shape[0] != len(inputs) + 1:
        raise ModelError(
            f"{states.shape[0]} states with {len(inputs)} inputs; expected T+1 states"
        )
    total = 0.0
    for t in range(len(inputs)):
        total += stage.cost(states[t])
    total += terminal.cost(states[-1])
    if switching is not None:
        prev = switching.u_init
        for u in inputs:
            total += switching.cost(prev, u)
            prev = u
    return total
