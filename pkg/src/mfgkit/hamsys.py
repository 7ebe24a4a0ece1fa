"""Characteristics of the deterministic system on a frozen measure flow.

Along an optimal path the costate ``Y = -D_xu(t, X)`` solves

    X' = D_pH(X, Y, rho_t),   Y' = -D_xH(X, Y, rho_t),   Y_T = -D_xg(X_T, rho_T),

a two-point boundary value problem.  It is solved by shooting on ``Y_0``
with a damped Newton iteration and a finite-difference Jacobian.  Many
starting points are shot at once; each keeps its own Newton state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BlowUp, ShootingDiverged
from .flow import MeasureFlow, rk4_path
from .mfg import MfgSolution
from .model import MfgProblem, rows

MAX_SHOOTING_ITER = 100


@dataclass
class CharacteristicPath:
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    residual: float
    iterations: int = 0

    @property
    def x0(self) -> np.ndarray:
        return self.X[0]

    @property
    def y0(self) -> np.ndarray:
        return self.Y[0]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        d = self.X.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"X{i}" for i in range(d)] + [f"Y{i}" for i in range(d)])
            for t, x, y in zip(self.times, self.X, self.Y):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in (*x, *y)])
        return path


def _system(problem: MfgProblem, rho: MeasureFlow, d: int):
    H = problem.hamiltonian

    def rhs(t, z):
        x, y = z[:, :d], z[:, d:]
        mu = rho.at(t)
        return np.hstack([H.grad_p(x, y, mu), -H.grad_x(x, y, mu)])

    return rhs


def _integrate(rhs, x0: np.ndarray, y0: np.ndarray, times: np.ndarray) -> np.ndarray:
    return rk4_path(rhs, np.hstack([x0, y0]), times)


def shoot_many(problem: MfgProblem, rho: MeasureFlow, x0, tol: float = 1e-10,
               y0_guess=None, h: float = 1e-6) -> list[CharacteristicPath]:
    """Shoot one characteristic from every row of ``x0``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    d = problem.dim
    x0 = rows(x0, d)
    m = len(x0)
    times = rho.times
    rhs = _system(problem, rho, d)
    g = problem.terminal
    muT = rho.measures[-1]

    def defect(y0):
        z = _integrate(rhs, x0, y0, times)
        zT = z[-1]
        return z, zT[:, d:] + g.grad_x(zT[:, :d], muT)

    y = -g.grad_x(x0, rho.measures[0]) if y0_guess is None else rows(y0_guess, d).copy()
    try:
        z, F = defect(y)
        norm = np.linalg.norm(F, axis=1)
        its = np.zeros(m, dtype=int)
        for it in range(MAX_SHOOTING_ITER):
            active = norm > tol
            if not active.any():
                break
            # finite-difference Jacobian, one column per costate component
            J = np.empty((m, d, d))
            for j in range(d):
                yp = y.copy()
                yp[:, j] += h
                J[:, :, j] = (defect(yp)[1] - F) / h
            step = -np.linalg.solve(J, F[:, :, None])[:, :, 0]
            step[~active] = 0.0
            its[active] += 1
            lam = np.ones(m)
            for _ in range(30):
                z_new, F_new = defect(y + lam[:, None] * step)
                n_new = np.linalg.norm(F_new, axis=1)
                bad = active & ~(n_new < norm) & (n_new > tol)
                if not bad.any():
                    break
                lam[bad] /= 2
            y = y + lam[:, None] * step
            z, F, norm = z_new, F_new, n_new
        else:
            if np.any(norm > tol):
                raise ShootingDiverged(
                    f"shooting did not converge in {MAX_SHOOTING_ITER} iterations, "
                    f"worst defect {norm.max():.3e}")
    except (BlowUp, np.linalg.LinAlgError) as exc:
        raise ShootingDiverged(f"shooting failed: {exc}") from exc
    if not np.all(np.isfinite(norm)):
        raise ShootingDiverged("non-finite terminal defect")
    return [CharacteristicPath(times, z[:, i, :d].copy(), z[:, i, d:].copy(), float(norm[i]), int(its[i]))
            for i in range(m)]


def shoot(problem: MfgProblem, rho: MeasureFlow, x0, tol: float = 1e-10,
          y0_guess=None) -> CharacteristicPath:
    """Characteristic through ``x0`` with terminal costate defect at most ``tol``."""
    x0 = rows(x0, problem.dim)
    if len(x0) != 1:
        raise ValueError("shoot takes a single starting point; use shoot_many")
    return shoot_many(problem, rho, x0, tol, y0_guess)[0]


@dataclass
class ConsistencyReport:
    n_probe: int
    max_defect: float
    threshold: float
    passed: bool
    worst: Optional[dict] = None
    defects: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"n_probe": self.n_probe, "max_defect": self.max_defect,
                "threshold": self.threshold, "passed": self.passed, "worst": self.worst}


def consistency_check(problem: MfgProblem, solution: MfgSolution, n_probe: int = 20,
                      seed: int = 0, tol: float = 1e-10) -> ConsistencyReport:
    """Compare shot costates with the interpolated HJB gradient along each path.

    Probes are particles of the initial measure drawn without replacement.
    The check passes when ``sup_t |Y_t + I[du(t)](X_t)| <= 10 (dx + dt)``.
    """
    grid = solution.grid
    threshold = 10.0 * (float(np.max(grid.dx)) + grid.dt)
    if n_probe <= 0:
        return ConsistencyReport(0, 0.0, threshold, True)
    flow = solution.flow
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(flow.n, size=min(n_probe, flow.n), replace=False))
    x0 = flow.positions[0][idx]
    paths = shoot_many(problem, flow, x0, tol, y0_guess=-solution.value.grad_at(0, x0))
    defects = np.zeros((len(idx), grid.nt + 1))
    for k in range(grid.nt + 1):
        X = np.stack([p.X[k] for p in paths])
        Y = np.stack([p.Y[k] for p in paths])
        defects[:, k] = np.linalg.norm(Y + solution.value.grad_at(k, X), axis=1)
    per_probe = defects.max(axis=1)
    i = int(np.argmax(per_probe))
    k = int(np.argmax(defects[i]))
    worst = {"particle": int(idx[i]), "x0": [float(v) for v in x0[i]],
             "t": float(grid.times[k]), "defect": float(per_probe[i])}
    return ConsistencyReport(len(idx), float(per_probe.max()), threshold,
                             bool(per_probe.max() <= threshold), worst, per_probe.tolist())


def characteristic_pairing(problem: MfgProblem, flow1: MeasureFlow, flow2: MeasureFlow,
                           x1, x2, tol: float = 1e-10) -> np.ndarray:
    """``E[(-Y1_t + Y2_t) . (X1_t - X2_t)]`` over coupled starting points, per time node."""
    p1 = shoot_many(problem, flow1, x1, tol)
    p2 = shoot_many(problem, flow2, x2, tol)
    X1, Y1 = np.stack([p.X for p in p1], 1), np.stack([p.Y for p in p1], 1)
    X2, Y2 = np.stack([p.X for p in p2], 1), np.stack([p.Y for p in p2], 1)
    return np.mean(np.sum((Y2 - Y1) * (X1 - X2), axis=2), axis=1)


def reversibility_defect(problem: MfgProblem, rho: MeasureFlow, path: CharacteristicPath) -> float:
    """Distance from ``x0`` after integrating the path's terminal state backwards."""
    d = problem.dim
    rhs = _system(problem, rho, d)
    back = rk4_path(rhs, np.hstack([path.X[-1], path.Y[-1]])[None, :], rho.times[::-1])
    return float(np.linalg.norm(back[-1, 0, :d] - path.X[0]))
