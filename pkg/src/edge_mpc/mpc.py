"""Receding-horizon controller: single-shooting projected gradient with Armijo backtracking.

The decision variable is the input plan ``U`` (N x 3).  States are obtained by
Euler rollout from the measured state, and the gradient of the three-term
quadratic cost is obtained by a backward (adjoint) sweep through that rollout.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .dynamics import (
    ControlInput,
    ModelParams,
    VehicleState,
    euler_step_arr,
    hover_input,
    rollout_arr,
)

ARMIJO_SIGMA = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 50

CONVERGED, MAX_ITERS, STALLED, DEGRADED = 0, 1, 2, 3
STATUS_NAMES = {CONVERGED: "converged", MAX_ITERS: "max_iters", STALLED: "stalled", DEGRADED: "degraded"}


def _check_psd(name: str, m: np.ndarray, dim: int) -> np.ndarray:
    m = np.array(m, dtype=np.float64)
    if m.ndim == 1:
        m = np.diag(m)
    if m.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(m - m.T)) > 1e-12:
        raise ValueError(f"{name} is not symmetric")
    if np.min(np.linalg.eigvalsh(m)) < -1e-12:
        raise ValueError(f"{name} is not positive semi-definite")
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class MpcWeights:
    """Quadratic weights; 1-D inputs are read as diagonals."""

    q_x: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 2.0, 2.0]))
    q_u: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 1.0]))
    q_du: np.ndarray = field(default_factory=lambda: np.diag([5.0, 5.0, 5.0]))

    def __post_init__(self):
        object.__setattr__(self, "q_x", _check_psd("q_x", self.q_x, 8))
        object.__setattr__(self, "q_u", _check_psd("q_u", self.q_u, 3))
        object.__setattr__(self, "q_du", _check_psd("q_du", self.q_du, 3))


@dataclass(frozen=True)
class InputBounds:
    thrust_min: float = 0.0
    thrust_max: float = 2 * 9.81
    tilt_max: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.thrust_min < self.thrust_max and math.isfinite(self.thrust_max)):
            raise ValueError("need 0 <= thrust_min < thrust_max < inf")
        if not (0.0 < self.tilt_max <= math.pi):
            raise ValueError("tilt_max must lie in (0, pi]")

    def lower(self) -> np.ndarray:
        return np.array([self.thrust_min, -self.tilt_max, -self.tilt_max])

    def upper(self) -> np.ndarray:
        return np.array([self.thrust_max, self.tilt_max, self.tilt_max])


@dataclass(frozen=True, eq=False)
class MpcConfig:
    horizon: int = 20
    dt: float = 0.05
    weights: MpcWeights = field(default_factory=MpcWeights)
    bounds: InputBounds = field(default_factory=InputBounds)
    max_iters: int = 60
    grad_tol: float = 1e-4
    params: ModelParams = field(default_factory=ModelParams)

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be an integer >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")


@dataclass(frozen=True, eq=False)
class MpcSolution:
    plan: np.ndarray  # (N, 3)
    states: np.ndarray  # (N, 8)
    cost: float
    iterations: int
    solve_time: float  # seconds
    cost_history: np.ndarray
    status: str = "converged"

    @property
    def degraded(self) -> bool:
        return self.status == "degraded"

    @property
    def first_input(self) -> ControlInput:
        return ControlInput.from_array(self.plan[0])

    @property
    def input_plan(self) -> list[ControlInput]:
        return [ControlInput.from_array(row) for row in self.plan]

    @property
    def predicted_states(self) -> list[VehicleState]:
        return [VehicleState.from_array(row) for row in self.states]


# -- kernels ---------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _quad_diff(q, a, b):
    """(a - b)^T q (a - b) without temporaries."""
    n = a.shape[0]
    acc = 0.0
    for i in range(n):
        ri = a[i] - b[i]
        if ri == 0.0:
            continue
        s = 0.0
        for k in range(n):
            s += q[i, k] * (a[k] - b[k])
        acc += ri * s
    return acc


@numba.njit(cache=True, nogil=True)
def _stage(x, u, u_prev, xd, ud, qx, qu, qdu):
    return _quad_diff(qx, xd, x) + _quad_diff(qu, ud, u) + _quad_diff(qdu, u, u_prev)


@numba.njit(cache=True, nogil=True)
def _cost(x0, plan, u_last, xd, ud, qx, qu, qdu, prm, dt):
    x = x0.copy()
    prev = u_last
    total = 0.0
    for j in range(plan.shape[0]):
        u = plan[j]
        euler_step_arr(x, u, prm, dt, x)
        total += _stage(x, u, prev, xd, ud, qx, qu, qdu)
        prev = u
    return total


@numba.njit(cache=True, nogil=True)
def _cost_grad(x0, plan, u_last, xd, ud, qx, qu, qdu, prm, dt, grad):
    """Cost and its gradient w.r.t. every plan entry (written into ``grad``)."""
    n = plan.shape[0]
    xs = np.empty((n + 1, 8))
    xs[0, :] = x0
    total = 0.0
    for j in range(n):
        euler_step_arr(xs[j], plan[j], prm, dt, xs[j + 1])
        prev = u_last if j == 0 else plan[j - 1]
        total += _stage(xs[j + 1], plan[j], prev, xd, ud, qx, qu, qdu)

    tau_phi, tau_th = prm[6], prm[7]
    lam = np.empty(8)
    tmp = np.empty(8)
    x = xs[n]
    for i in range(8):
        s = 0.0
        for k in range(8):
            s += (qx[i, k] + qx[k, i]) * (x[k] - xd[k])
        lam[i] = s
    for j in range(n - 1, -1, -1):
        x = xs[j]
        u = plan[j]
        t = u[0]
        sphi, cphi = math.sin(x[6]), math.cos(x[6])
        sth, cth = math.sin(x[7]), math.cos(x[7])
        # input sensitivity of the step from xs[j] with plan[j]
        grad[j, 0] = dt * (lam[3] * sth * cphi - lam[4] * sphi + lam[5] * cth * cphi)
        grad[j, 1] = dt * lam[6] * prm[4] / tau_phi
        grad[j, 2] = dt * lam[7] * prm[5] / tau_th
        prev = u_last if j == 0 else plan[j - 1]
        for i in range(3):
            s = 0.0
            for k in range(3):
                s += (qu[i, k] + qu[k, i]) * (u[k] - ud[k]) + (qdu[i, k] + qdu[k, i]) * (u[k] - prev[k])
                if j + 1 < n:
                    s -= (qdu[i, k] + qdu[k, i]) * (plan[j + 1][k] - u[k])
            grad[j, i] += s
        if j == 0:
            break
        # lam <- A^T lam + dJ/dx_j, with A = I + dt * df/dx at (xs[j], plan[j])
        tmp[0] = lam[0]
        tmp[1] = lam[1]
        tmp[2] = lam[2]
        tmp[3] = lam[3] + dt * (lam[0] - prm[1] * lam[3])
        tmp[4] = lam[4] + dt * (lam[1] - prm[2] * lam[4])
        tmp[5] = lam[5] + dt * (lam[2] - prm[3] * lam[5])
        tmp[6] = lam[6] + dt * (
            -lam[3] * sth * sphi * t - lam[4] * cphi * t - lam[5] * cth * sphi * t - lam[6] / tau_phi
        )
        tmp[7] = lam[7] + dt * (lam[3] * cth * cphi * t - lam[5] * sth * cphi * t - lam[7] / tau_th)
        for i in range(8):
            s = 0.0
            for k in range(8):
                s += (qx[i, k] + qx[k, i]) * (x[k] - xd[k])
            lam[i] = tmp[i] + s
    return total


@numba.njit(cache=True, nogil=True)
def _clip(plan, lo, hi, out):
    for j in range(plan.shape[0]):
        for i in range(3):
            v = plan[j, i]
            if v < lo[i]:
                v = lo[i]
            elif v > hi[i]:
                v = hi[i]
            out[j, i] = v


@numba.njit(cache=True, nogil=True)
def _pgd(x0, plan0, u_last, xd, ud, qx, qu, qdu, prm, dt, lo, hi, max_iters, grad_tol):
    n = plan0.shape[0]
    plan = np.empty((n, 3))
    _clip(plan0, lo, hi, plan)
    grad = np.empty((n, 3))
    trial = np.empty((n, 3))
    new_grad = np.empty((n, 3))
    history = np.empty(max_iters + 1)

    f = _cost_grad(x0, plan, u_last, xd, ud, qx, qu, qdu, prm, dt, grad)
    history[0] = f
    if not math.isfinite(f):
        return plan, f, 0, DEGRADED, history[:1]

    gmax = 0.0
    for j in range(n):
        for i in range(3):
            gmax = max(gmax, abs(grad[j, i]))
    alpha = 1e-2 / max(gmax, 1.0)

    status = MAX_ITERS
    it = 0
    while it < max_iters:
        # projected gradient with unit step
        pg2 = 0.0
        for j in range(n):
            for i in range(3):
                p = plan[j, i] - grad[j, i]
                p = min(max(p, lo[i]), hi[i])
                pg2 += (plan[j, i] - p) ** 2
        if math.sqrt(pg2) <= grad_tol:
            status = CONVERGED
            break

        accepted = False
        fn = f
        for _ in range(MAX_BACKTRACKS):
            for j in range(n):
                for i in range(3):
                    p = plan[j, i] - alpha * grad[j, i]
                    trial[j, i] = min(max(p, lo[i]), hi[i])
            gd = 0.0
            for j in range(n):
                for i in range(3):
                    gd += grad[j, i] * (trial[j, i] - plan[j, i])
            fn = _cost(x0, trial, u_last, xd, ud, qx, qu, qdu, prm, dt)
            if not math.isfinite(fn):
                return plan, f, it, DEGRADED, history[: it + 1]
            if fn <= f + ARMIJO_SIGMA * gd:
                accepted = True
                break
            alpha *= BACKTRACK
        if not accepted:
            status = STALLED
            break

        fn = _cost_grad(x0, trial, u_last, xd, ud, qx, qu, qdu, prm, dt, new_grad)
        # Barzilai-Borwein guess for the next trial step
        ss = 0.0
        sy = 0.0
        for j in range(n):
            for i in range(3):
                s = trial[j, i] - plan[j, i]
                ss += s * s
                sy += s * (new_grad[j, i] - grad[j, i])
        if sy > 1e-300:
            alpha = min(max(ss / sy, 1e-10), 1e10)
        else:
            alpha = min(alpha * 4.0, 1e10)
        plan[:, :] = trial
        grad[:, :] = new_grad
        f = fn
        it += 1
        history[it] = f
    return plan, f, it, status, history[: it + 1]


# -- public API ------------------------------------------------------------------


def _as_state(x) -> np.ndarray:
    return x.as_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=np.float64)


def _as_input(u) -> np.ndarray:
    return u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=np.float64)


def _as_plan(plan) -> np.ndarray:
    if isinstance(plan, np.ndarray):
        return np.ascontiguousarray(plan, dtype=np.float64)
    return np.array([_as_input(u) for u in plan], dtype=np.float64).reshape(-1, 3)


def stage_cost(x, u, u_prev, x_d, u_d, w: MpcWeights) -> float:
    xa, xda = _as_state(x), _as_state(x_d)
    ua, upa, uda = _as_input(u), _as_input(u_prev), _as_input(u_d)
    if xa.shape != (8,) or xda.shape != (8,) or ua.shape != (3,) or upa.shape != (3,) or uda.shape != (3,):
        raise ValueError("dimension mismatch in stage_cost")
    return float(_stage(xa, ua, upa, xda, uda, w.q_x, w.q_u, w.q_du))


def _checked_plan(plan, cfg: MpcConfig) -> np.ndarray:
    arr = _as_plan(plan)
    if arr.shape != (cfg.horizon, 3):
        raise ValueError(f"plan must have shape ({cfg.horizon}, 3), got {arr.shape}")
    return arr


def total_cost(x0, plan, u_last, x_d, cfg: MpcConfig, u_d=None) -> float:
    """Sum of stage costs over the rollout of ``plan`` from ``x0``.

    The smoothness term of the first stage is taken against ``u_last``.
    """
    arr = _checked_plan(plan, cfg)
    ud = _as_input(u_d if u_d is not None else hover_input(cfg.params))
    w = cfg.weights
    return float(
        _cost(_as_state(x0), arr, _as_input(u_last), _as_state(x_d), ud, w.q_x, w.q_u, w.q_du,
              cfg.params.as_array(), float(cfg.dt))
    )


def cost_gradient(x0, plan, u_last, x_d, cfg: MpcConfig, u_d=None) -> np.ndarray:
    """Exact gradient of :func:`total_cost` with respect to the plan, shape (N, 3)."""
    arr = _checked_plan(plan, cfg)
    ud = _as_input(u_d if u_d is not None else hover_input(cfg.params))
    w = cfg.weights
    grad = np.empty_like(arr)
    _cost_grad(_as_state(x0), arr, _as_input(u_last), _as_state(x_d), ud, w.q_x, w.q_u, w.q_du,
               cfg.params.as_array(), float(cfg.dt), grad)
    return grad


def project(plan, bounds: InputBounds) -> np.ndarray:
    arr = _as_plan(plan)
    out = np.empty_like(arr)
    _clip(arr, bounds.lower(), bounds.upper(), out)
    return out


def shift_warm_start(previous_plan) -> np.ndarray:
    arr = _as_plan(previous_plan)
    if len(arr) == 0:
        raise ValueError("empty plan")
    return np.concatenate([arr[1:], arr[-1:]], axis=0)


def solve(
    x0,
    x_d,
    u_last,
    cfg: MpcConfig,
    warm_start=None,
    u_d=None,
) -> MpcSolution:
    """Minimise the horizon cost from ``x0`` towards ``x_d``.

    ``warm_start`` defaults to N copies of ``u_last``.  The returned cost never
    exceeds the cost of the (projected) starting plan.
    """
    started = time.perf_counter_ns()
    x0a, xda, ula = _as_state(x0), _as_state(x_d), _as_input(u_last)
    uda = _as_input(u_d if u_d is not None else hover_input(cfg.params))
    if warm_start is None:
        plan0 = np.tile(ula, (cfg.horizon, 1))
    else:
        plan0 = _checked_plan(warm_start, cfg)
    w = cfg.weights
    prm = cfg.params.as_array()
    plan, cost, iters, status, hist = _pgd(
        x0a, plan0, ula, xda, uda, w.q_x, w.q_u, w.q_du, prm, float(cfg.dt),
        cfg.bounds.lower(), cfg.bounds.upper(), int(cfg.max_iters), float(cfg.grad_tol),
    )
    states = rollout_arr(x0a, plan, prm, float(cfg.dt))
    elapsed = (time.perf_counter_ns() - started) * 1e-9
    return MpcSolution(
        plan=plan, states=states, cost=float(cost), iterations=int(iters), solve_time=elapsed,
        cost_history=hist.copy(), status=STATUS_NAMES[int(status)],
    )


class MpcSolver:
    """Stateful wrapper for one control loop: remembers the last plan and applied input."""

    def __init__(self, cfg: MpcConfig, u_last: Optional[ControlInput] = None):
        self.cfg = cfg
        self.u_last = (u_last or hover_input(cfg.params)).as_array()
        self.plan: Optional[np.ndarray] = None

    def step(self, x0, x_d, u_d=None) -> MpcSolution:
        warm = shift_warm_start(self.plan) if self.plan is not None else None
        sol = solve(x0, x_d, self.u_last, self.cfg, warm_start=warm, u_d=u_d)
        self.plan = sol.plan
        self.u_last = sol.plan[0].copy()
        return sol

    def reset(self, u_last: Optional[ControlInput] = None) -> None:
        self.u_last = (u_last or hover_input(self.cfg.params)).as_array()
        self.plan = None


def warmup() -> None:
    """Trigger JIT compilation so the first timed solve is representative."""
    cfg = MpcConfig(horizon=2, max_iters=2)
    solve(VehicleState(), VehicleState(p=(0, 0, 1)), hover_input(cfg.params), cfg)


__all__: Sequence[str] = [
    "MpcWeights", "InputBounds", "MpcConfig", "MpcSolution", "MpcSolver",
    "stage_cost", "total_cost", "cost_gradient", "project", "shift_warm_start", "solve", "warmup",
]
