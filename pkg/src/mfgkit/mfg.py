"""Fixed-point solver for the coupled HJB / continuity system.

The map ``S`` solves the HJB equation on a frozen measure flow and
transports the initial particles along the resulting optimal feedback.
Solutions are fixed points of ``S``; they are located by damped Picard
iteration where every particle moves a fraction ``damping`` of the way to
its image under ``S``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MaxIterExceeded, ParamOutOfRange
from .flow import MeasureFlow, flow_distance, integrate_flow, velocity_from_value
from .hjb import SpaceTimeGrid, ValueField, auto_grid, solve_hjb
from .measures import ParticleMeasure, optimal_coupling
from .model import MfgProblem

logger = logging.getLogger(__name__)

INITIAL_GUESSES = ("warm", "static")


@dataclass(frozen=True)
class SolveParams:
    """Numerical settings of a solve.

    ``bounds=None`` sizes the grid from the growth of the terminal feedback.
    ``initial`` selects the first Picard iterate: ``"warm"`` uses ``S`` of
    the static flow, ``"static"`` the static flow itself.
    """

    damping: float = 0.5
    tol: float = 1e-4
    max_iter: int = 30
    nt: int = 100
    nx: int = 201
    bounds: Optional[tuple] = None
    A_max: Optional[float] = None
    n_particles: int = 1000
    seed: int = 0
    initial: str = "warm"
    min_damping: float = 1.0 / 64
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ParamOutOfRange(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise ParamOutOfRange(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ParamOutOfRange(f"max_iter must be >= 1, got {self.max_iter}")
        if self.nt < 2 or self.nx < 8:
            raise ParamOutOfRange("need nt >= 2 and nx >= 8")
        if self.n_particles < 1:
            raise ParamOutOfRange("n_particles must be >= 1")
        if self.initial not in INITIAL_GUESSES:
            raise ParamOutOfRange(f"initial must be one of {INITIAL_GUESSES}, got {self.initial!r}")
        if self.threads < 1:
            raise ParamOutOfRange("threads must be >= 1")

    def make_grid(self, problem: MfgProblem, rho0: ParticleMeasure) -> SpaceTimeGrid:
        if self.bounds is None:
            return auto_grid(problem, rho0, self.nx, self.nt)
        bounds = tuple(tuple(map(float, b)) for b in self.bounds)
        if len(bounds) == 1 and problem.dim > 1:
            bounds = bounds * problem.dim
        return SpaceTimeGrid(bounds, self.nx, self.nt, problem.horizon)


@dataclass
class MfgSolution:
    value: ValueField
    flow: MeasureFlow
    residual_history: list
    iterations: int
    converged: bool
    damping_history: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else 0.0

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.value.grid

    def summary(self) -> dict:
        m = self.flow.mean_curve()
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
            "terminal_mean": [float(v) for v in m[-1]],
            "initial_mean": [float(v) for v in m[0]],
            "n_particles": self.flow.n,
        }

    def write_residuals(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual", "damping"])
            for k, (r, lam) in enumerate(zip(self.residual_history, self.damping_history), start=1):
                w.writerow([k, repr(float(r)), repr(float(lam))])
        return path


def _check_flow(rho: MeasureFlow, grid: SpaceTimeGrid) -> None:
    if rho.nt != grid.nt or abs(rho.T - grid.T) > 1e-12 * max(1.0, grid.T):
        raise ValueError("flow is not on the solver's time grid")


def _apply(problem: MfgProblem, rho: MeasureFlow, grid: SpaceTimeGrid,
           A_max: Optional[float]) -> tuple[MeasureFlow, ValueField]:
    _check_flow(rho, grid)
    value = solve_hjb(problem, rho, grid, A_max=A_max)
    V = velocity_from_value(problem, value, rho)
    out = integrate_flow(V, rho.initial, grid.nt, grid.T)
    if V.out_of_domain:
        logger.warning("velocity clamped at %d evaluations outside the grid", V.out_of_domain)
    value.diagnostics["clamped_velocity_evaluations"] = V.out_of_domain
    return out, value


def apply_S(problem: MfgProblem, rho: MeasureFlow, params: SolveParams,
            grid: Optional[SpaceTimeGrid] = None) -> MeasureFlow:
    """One application of the fixed-point map: HJB on ``rho``, then transport ``rho_0``."""
    grid = grid or params.make_grid(problem, rho.initial)
    return _apply(problem, rho, grid, params.A_max)[0]


def residual(a: MeasureFlow, b: MeasureFlow) -> float:
    """``sup_t W1(a_t, b_t)`` (index-coupling bound for large clouds in d >= 2)."""
    return max(flow_distance(1, ma, mb) for ma, mb in zip(a.measures, b.measures))


def _blend(a: MeasureFlow, b: MeasureFlow, lam: float) -> MeasureFlow:
    return MeasureFlow(a.times, (1 - lam) * a.positions + lam * b.positions)


def solve(problem: MfgProblem, rho0: ParticleMeasure, params: SolveParams = SolveParams(),
          grid: Optional[SpaceTimeGrid] = None, initial_flow: Optional[MeasureFlow] = None,
          strict: bool = False) -> MfgSolution:
    """Damped Picard iteration ``rho <- (1 - lam) rho + lam S(rho)``.

    Stops once ``sup_t W1(rho^k, S(rho^k)) <= tol``.  The damping is halved
    whenever the residual grows.  The returned pair is ``(u[rho^k],
    S(rho^k))`` for the best iterate seen.  Without convergence the best
    iterate comes back with ``converged=False``, or ``MaxIterExceeded`` is
    raised when ``strict`` is set.
    """
    start = time.perf_counter()
    grid = grid or params.make_grid(problem, rho0)
    if initial_flow is not None:
        if initial_flow.n != rho0.n or not np.array_equal(initial_flow.positions[0], rho0.points):
            raise ValueError("initial flow must start from rho0 with the same particle order")
        rho = initial_flow
    else:
        rho = MeasureFlow.static(rho0, grid.T, grid.nt)
        if params.initial == "warm":
            rho = _apply(problem, rho, grid, params.A_max)[0]
    _check_flow(rho, grid)

    lam = params.damping
    history, lams = [], []
    best = None
    for it in range(1, params.max_iter + 1):
        image, value = _apply(problem, rho, grid, params.A_max)
        r = residual(rho, image)
        history.append(r)
        lams.append(lam)
        logger.info("picard iteration %d residual %.3e damping %.4f", it, r, lam)
        if best is None or r < best[0]:
            best = (r, image, value)
        if r <= params.tol:
            break
        if len(history) > 1 and r > history[-2]:
            lam = max(lam / 2, params.min_damping)
        rho = _blend(rho, image, lam)
    converged = history[-1] <= params.tol
    _, flow, value = best
    sol = MfgSolution(value, flow, history, len(history), converged, lams,
                      time.perf_counter() - start)
    if not converged:
        msg = f"no convergence in {params.max_iter} iterations, best residual {best[0]:.3e}"
        if strict:
            err = MaxIterExceeded(msg)
            err.solution = sol
            raise err
        logger.warning(msg)
    return sol


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    times: np.ndarray
    w2_curve: np.ndarray
    grad_gap_curve: np.ndarray
    pairing_curve: np.ndarray
    initial_gap: float
    ratio: float
    sharp_flag: bool
    zero_gap: bool
    solutions: tuple = field(repr=False, default=())

    @property
    def grad_gap(self) -> float:
        return float(np.max(self.grad_gap_curve))

    @property
    def grad_ratio(self) -> float:
        return 0.0 if self.zero_gap else self.grad_gap / self.initial_gap

    def pairing_check(self, eps: float) -> dict:
        """Sign and monotone-decrease audit of the pairing curve at tolerance ``eps``."""
        p = self.pairing_curve
        rises = np.diff(p)
        return {
            "eps": eps,
            "min_pairing": float(p.min()),
            "max_increase": float(rises.max()) if len(rises) else 0.0,
            "nonnegative": bool(p.min() >= -eps),
            "nonincreasing": bool(len(rises) == 0 or rises.max() <= eps),
        }

    def summary(self) -> dict:
        return {
            "initial_gap": self.initial_gap,
            "ratio": self.ratio,
            "grad_gap": self.grad_gap,
            "grad_ratio": self.grad_ratio,
            "sharp_flag": self.sharp_flag,
            "zero_gap": self.zero_gap,
            "terminal_w2": float(self.w2_curve[-1]),
            "min_pairing": float(self.pairing_curve.min()),
        }

    def write_curves(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "w2", "grad_gap", "pairing"])
            for row in zip(self.times, self.w2_curve, self.grad_gap_curve, self.pairing_curve):
                w.writerow([repr(float(v)) for v in row])
        return path


def stability_experiment(problem: MfgProblem, rho0_1: ParticleMeasure, rho0_2: ParticleMeasure,
                         params: SolveParams = SolveParams(), sharp_tol: float = 1e-3,
                         grid: Optional[SpaceTimeGrid] = None) -> StabilityReport:
    """Solve from two initial measures and compare the solutions.

    The particles of ``rho0_2`` are reordered by the optimal coupling with
    ``rho0_1``, so particle ``i`` of both flows realises that coupling at
    ``t = 0`` and is followed by index afterwards.  Both solves share one
    grid so gradients can be compared node by node.
    """
    coupling = optimal_coupling(rho0_1, rho0_2, order=2)
    rho0_2 = ParticleMeasure(rho0_2.points[coupling.pairing])
    gap0 = float(np.sqrt(coupling.cost2))
    if grid is None:
        union = ParticleMeasure(np.vstack([rho0_1.points, rho0_2.points]))
        grid = params.make_grid(problem, union)

    with ThreadPoolExecutor(max_workers=min(2, params.threads)) as pool:
        f1 = pool.submit(solve, problem, rho0_1, params, grid)
        f2 = pool.submit(solve, problem, rho0_2, params, grid)
        s1, s2 = f1.result(), f2.result()
    for s in (s1, s2):
        if not s.converged:
            logger.warning("stability solve did not converge (residual %.3e)", s.residual)

    X1, X2 = s1.flow.positions, s2.flow.positions
    nt = grid.nt
    w2 = np.array([flow_distance(2, a, b) for a, b in zip(s1.flow.measures, s2.flow.measures)])
    gg = np.abs(s1.value.du - s2.value.du).reshape(nt + 1, -1).max(axis=1)
    pairing = np.empty(nt + 1)
    for k in range(nt + 1):
        d1 = s1.value.grad_at(k, X1[k])
        d2 = s2.value.grad_at(k, X2[k])
        pairing[k] = float(np.mean(np.sum((d1 - d2) * (X1[k] - X2[k]), axis=1)))
    zero = gap0 == 0.0
    ratio = 0.0 if zero else float(w2.max() / gap0)
    return StabilityReport(grid.times, w2, gg, pairing, gap0, ratio,
                           bool(ratio <= 1 + sharp_tol), zero, (s1, s2))


def pairing_tolerance(grid: SpaceTimeGrid, n: int) -> float:
    """``1e-6 + 5 (dx + dt + n^{-1/2})`` used for the along-flow pairing audit."""
    return 1e-6 + 5 * (float(np.max(grid.dx)) + grid.dt + n ** -0.5)


def with_params(params: SolveParams, **kw) -> SolveParams:
    return replace(params, **kw)


def write_summary(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
