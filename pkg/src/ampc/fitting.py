"""Value-function sampling over a state box and regularized quadratic fitting.

The fitted surrogate is ``Vhat(x) = (x - x_des)^T P (x - x_des) + r`` with an
affine desired-state map ``x_des = C_des x + d_des``.  The fit minimizes mean
squared error against sampled optimal costs plus a Frobenius-norm pull of P
toward a scaled stored-energy matrix; the unconstrained problem is linear
least squares, the PSD-constrained variant is solved by projected (FISTA)
gradient descent on the same convex objective.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import StageCost, SwitchedModel, _desired_map, _freeze
from .errors import ModelError, NumericError
from .solver import DEFAULT_ENUM_BUDGET, DEFAULT_NODE_BUDGET, solve_value


@dataclass(frozen=True, eq=False)
class SampleBox:
    """Axis-aligned box with a draw count and RNG seed."""

    lower: np.ndarray
    upper: np.ndarray
    count: int
    seed: int = 0

    def __post_init__(self):
        lo = _freeze(self.lower)
        hi = _freeze(self.upper)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ModelError("box bounds must be 1-D vectors of equal length")
        if np.any(lo > hi):
            raise ModelError("box lower bound exceeds upper bound")
        if self.count < 1:
            raise ModelError("sample count must be >= 1")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def draw_samples(box: SampleBox) -> np.ndarray:
    """I.i.d. uniform points over the box, deterministic per seed; shape (N, n)."""
    rng = np.random.default_rng(box.seed)
    u = rng.random((box.count, box.n))
    return box.lower + (box.upper - box.lower) * u


@dataclass(frozen=True, eq=False)
class ValueSample:
    """A state paired with its sampled cost-to-go and the certified gap."""

    x: np.ndarray
    v: float
    gap: float
    certified: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x", _freeze(self.x))
        if self.v < 0:
            raise ModelError("sampled value must be nonnegative")


@dataclass(frozen=True, eq=False)
class QuadraticValueFunction:
    """``Vhat(x) = (x - x_des)^T P (x - x_des) + r``, ``x_des = C_des x + d_des``.

    P is stored exactly symmetric (rebuilt from its upper triangle); ``alpha``
    is the fitted scaling of the energy prior, kept for diagnostics only.
    """

    P: np.ndarray
    r: float
    C_des: np.ndarray
    d_des: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ModelError("P must be square")
        if np.abs(P - P.T).max() > 1e-12 * max(1.0, np.abs(P).max()):
            raise ModelError("P must be symmetric")
        P = np.triu(P) + np.triu(P, 1).T
        n = P.shape[0]
        C = _freeze(self.C_des)
        d = _freeze(self.d_des)
        if C.shape != (n, n) or d.shape != (n,):
            raise ModelError("desired-state map does not match P dimension")
        object.__setattr__(self, "P", _freeze(P))
        object.__setattr__(self, "C_des", C)
        object.__setattr__(self, "d_des", d)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "_I_minus_C", _freeze(np.eye(n) - C))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def x_des(self, x) -> np.ndarray:
        return self.C_des @ np.asarray(x, dtype=float) + self.d_des

    def evaluate(self, x) -> float:
        dev = self._I_minus_C @ np.asarray(x, dtype=float) - self.d_des
        return float(dev @ self.P @ dev) + self.r

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        dev = X @ self._I_minus_C.T - self.d_des
        return np.einsum("ij,jk,ik->i", dev, self.P, dev) + self.r


@dataclass(frozen=True, eq=False)
class EnergyPrior:
    """Quadratic form whose value is the physically stored energy.

    Zero rows/columns are expected on non-physical states (reference
    oscillator components), which carry no energy.
    """

    P_energy: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.P_energy, dtype=float)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise ModelError("energy matrix must be square")
        if np.abs(E - E.T).max() > 1e-12 * max(1.0, np.abs(E).max()):
            raise ModelError("energy matrix must be symmetric")
        if np.linalg.eigvalsh(E).min() < -1e-12 * max(1.0, np.abs(E).max()):
            raise ModelError("energy matrix must be positive semidefinite")
        object.__setattr__(self, "P_energy", _freeze(E))

    @property
    def n(self) -> int:
        return self.P_energy.shape[0]


def sample_values(
    points: np.ndarray,
    model: SwitchedModel,
    stage: StageCost,
    terminal: StageCost,
    remaining_horizon: int,
    rel_gap: float,
    enum_budget: int = DEFAULT_ENUM_BUDGET,
    node_budget: int = DEFAULT_NODE_BUDGET,
    max_workers: Optional[int] = None,
) -> list:
    """Sample the cost-to-go at every point; order preserved.

    Points whose solve exhausted its node budget are kept (with the achieved
    gap) but marked uncertified rather than aborting the batch.  The
    ``AMPC_THREADS`` environment variable caps worker parallelism.
    """
    if remaining_horizon < 1:
        raise ModelError("remaining_horizon must be >= 1")
    pts = np.atleast_2d(np.asarray(points, dtype=float))

    def one(x):
        sol = solve_value(
            model, stage, terminal, x, remaining_horizon, rel_gap,
            enum_budget=enum_budget, node_budget=node_budget,
        )
        return ValueSample(
            x=x,
            v=sol.optimal_cost,
            gap=sol.certified_gap,
            certified=not sol.budget_exceeded,
        )

    workers = max_workers if max_workers is not None else (os.cpu_count() or 1)
    env_cap = os.environ.get("AMPC_THREADS")
    if env_cap:
        workers = min(workers, max(1, int(env_cap)))
    if workers <= 1 or len(pts) == 1:
        return [one(x) for x in pts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pts))


@dataclass(frozen=True)
class FitReport:
    """Diagnostics from one fit."""

    n_used: int
    n_excluded: int
    mse: float
    objective: float
    rank_deficient: bool
    iterations: int
    converged: bool


def _triu_pairs(n):
    return [(j, k) for j in range(n) for k in range(j, n)]


def _design(devs, values, lam, E, n):
    """Stacked least-squares design for theta = (triu(P), r, alpha)."""
    pairs = _triu_pairs(n)
    N = devs.shape[0]
    n_p = len(pairs)
    Phi = np.empty((N, n_p))
    for col, (j, k) in enumerate(pairs):
        Phi[:, col] = devs[:, j] ** 2 if j == k else 2.0 * devs[:, j] * devs[:, k]
    data = np.hstack([Phi, np.ones((N, 1)), np.zeros((N, 1))]) / np.sqrt(N)
    y = np.concatenate([values / np.sqrt(N), np.zeros(n_p)])
    reg = np.zeros((n_p, n_p + 2))
    root_lam = np.sqrt(lam)
    for row, (j, k) in enumerate(pairs):
        s = 1.0 if j == k else np.sqrt(2.0)  # off-diagonals count twice in ||.||_F
        reg[row, row] = root_lam * s
        reg[row, -1] = -root_lam * s * E[j, k]
    return np.vstack([data, reg]), y, pairs


def _theta_to_P(theta, pairs, n):
    P = np.zeros((n, n))
    for col, (j, k) in enumerate(pairs):
        P[j, k] = theta[col]
        P[k, j] = theta[col]
    return P


def _P_to_theta(P, pairs):
    return np.array([P[j, k] for (j, k) in pairs])


def fit_quadratic(
    samples: Sequence[ValueSample],
    prior: EnergyPrior,
    lam: float,
    psd_constrained: bool = False,
    x_des=None,
    C_des=None,
    d_des=None,
    alpha_nonneg: bool = False,
    pd_floor: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100_000,
):
    """Fit (P, r, alpha); returns ``(QuadraticValueFunction, FitReport)``.

    Minimizes ``(1/N) sum_i (v_i - Vhat(x_i))^2 + lam * ||P - alpha*E||_F^2``
    over symmetric P, scalar r, scalar alpha.  Samples without a certified
    gap are excluded from the regression and counted in the report.

    A constrained fit whose optimum sits on the cone boundary has a zero
    curvature direction, along which a short-horizon policy gets no restoring
    force once the state leaves the sampled region; set ``pd_floor`` to a
    small positive eigenvalue bound (positive-definite fit) to rule that out.
    """
    if lam < 0:
        raise ModelError("lam must be nonnegative")
    used = [s for s in samples if s.certified]
    n_excl = len(samples) - len(used)
    if not used:
        raise ModelError("no certified samples to fit")
    n = prior.n
    C, d = _desired_map(n, x_des, C_des, d_des)
    ImC = np.eye(n) - C
    X = np.stack([s.x for s in used])
    values = np.array([s.v for s in used])
    devs = X @ ImC.T - d

    D, y, pairs = _design(devs, values, lam, prior.P_energy, n)
    theta, _, rank, _ = np.linalg.lstsq(D, y, rcond=None)
    rank_deficient = rank < D.shape[1]
    iterations, converged = 0, True

    if psd_constrained or alpha_nonneg:
        theta, iterations, converged, resid = _projected_fit(
            D, y, pairs, n, theta, psd_constrained, alpha_nonneg, pd_floor, tol, max_iter
        )
        if not converged:
            raise NumericError(
                f"projected fit did not reach stationarity ({resid:.3e} > {tol:.1e} scaled)"
            )

    P = _theta_to_P(theta, pairs, n)
    r = float(theta[-2])
    alpha = float(theta[-1])
    vf = QuadraticValueFunction(P=P, r=r, C_des=C, d_des=d, alpha=alpha)
    fitted = vf.evaluate_many(X)
    mse = float(np.mean((values - fitted) ** 2))
    objective = mse + lam * float(np.linalg.norm(P - alpha * prior.P_energy, "fro") ** 2)
    report = FitReport(
        n_used=len(used),
        n_excluded=n_excl,
        mse=mse,
        objective=objective,
        rank_deficient=bool(rank_deficient),
        iterations=iterations,
        converged=converged,
    )
    return vf, report


def _projected_fit(D, y, pairs, n, theta0, psd, alpha_nonneg, pd_floor, tol, max_iter):
    """Accelerated projected gradient on ``||D theta - y||^2``.

    Projection clips negative eigenvalues of P (and clips alpha at zero when
    requested).  Columns are rescaled first to tame conditioning, but only by
    transforms that preserve the PSD cone: the r and alpha columns get
    individual scales, the whole P block one uniform scale.
    """
    n_p = len(pairs)
    col_scale = np.ones(D.shape[1])
    norms = np.linalg.norm(D, axis=0)
    p_norm = np.median(norms[:n_p])
    if p_norm > 0:
        col_scale[:n_p] = 1.0 / p_norm
    for c in range(n_p, D.shape[1]):
        if norms[c] > 0:
            col_scale[c] = 1.0 / norms[c]
    D = D * col_scale

    def project(th):
        out = th.copy()
        if psd:
            P = _theta_to_P(out[:n_p], pairs, n)
            w, V = np.linalg.eigh(P)
            if w.min() < pd_floor:
                P = (V * np.maximum(w, pd_floor)) @ V.T
                P = np.triu(P) + np.triu(P, 1).T
                out[:n_p] = _P_to_theta(P, pairs)
        if alpha_nonneg and out[-1] < 0.0:
            out[-1] = 0.0
        return out

    G = D.T @ D
    gty = D.T @ y
    L = 2.0 * np.linalg.eigvalsh(G).max()
    if L <= 0:
        return project(theta0), 0, True, 0.0
    grad_scale = max(1.0, 2.0 * np.linalg.norm(gty))

    th = project(theta0 / col_scale)
    z = th.copy()
    t_mom = 1.0
    f_prev = np.inf
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (G @ z - gty)
        th_new = project(z - grad / L)
        grad_th = 2.0 * (G @ th_new - gty)
        resid = L * np.linalg.norm(th_new - project(th_new - grad_th / L))
        if resid <= tol * grad_scale:
            return th_new * col_scale, it, True, resid
        f_new = float(th_new @ G @ th_new - 2.0 * gty @ th_new)
        if f_new > f_prev:  # monotone restart
            z = th_new.copy()
            t_mom = 1.0
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom**2))
            z = th_new + ((t_mom - 1.0) / t_next) * (th_new - th)
            t_mom = t_next
        th = th_new
        f_prev = f_new
    return th * col_scale, it, False, resid


# ---------------------------------------------------------------------------
# Value-function artifact file: structured text, floats written with 17
# significant digits so write -> read -> write is byte-stable.
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _fmt_list(values) -> str:
    return "[" + ", ".join(_fmt(v) for v in values) + "]"


def save_vf(
    path,
    vf: QuadraticValueFunction,
    lam: float,
    seed: int,
    sample_count: int,
    fit_mse: float,
) -> None:
    """Write the value-function artifact (JSON text, bit-stable floats)."""
    n = vf.n
    lines = [
        "{",
        f'  "n": {n},',
        f'  "P": {_fmt_list(vf.P.ravel())},',
        f'  "r": {_fmt(vf.r)},',
        f'  "alpha": {_fmt(vf.alpha)},',
        f'  "C_des": {_fmt_list(vf.C_des.ravel())},',
        f'  "d_des": {_fmt_list(vf.d_des)},',
        f'  "lambda": {_fmt(lam)},',
        f'  "seed": {int(seed)},',
        f'  "sample_count": {int(sample_count)},',
        f'  "fit_mse": {_fmt(fit_mse)}',
        "}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vf(path):
    """Read a value-function artifact; returns ``(QuadraticValueFunction, meta)``."""
    with open(path) as fh:
        obj = json.load(fh)
    n = int(obj["n"])
    vf = QuadraticValueFunction(
        P=np.array(obj["P"], dtype=float).reshape(n, n),
        r=float(obj["r"]),
        C_des=np.array(obj["C_des"], dtype=float).reshape(n, n),
        d_des=np.array(obj["d_des"], dtype=float),
        alpha=float(obj["alpha"]),
    )
    meta = {
        "lambda": float(obj["lambda"]),
        "seed": int(obj["seed"]),
        "sample_count": int(obj["sample_count"]),
        "fit_mse": float(obj["fit_mse"]),
    }
    return vf, meta
