"""Particle transport along the optimal feedback of a value field.

Particles are never resampled: particle ``i`` at every time slice is the
image of particle ``i`` at ``t = 0``, so each slice is an exact
push-forward of the initial measure and index pairing gives a valid
coupling between any two slices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import BlowUp
from .hjb import SpaceTimeGrid, ValueField
from .measures import ParticleMeasure, index_coupling_distance, moment2, wasserstein, write_csv
from .model import MfgProblem


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Particle positions on the uniform time grid ``times`` (shape ``(nt+1, n, d)``)."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[0] != len(times):
            raise ValueError(f"positions shape {pos.shape} does not match {len(times)} time nodes")
        if len(times) < 2 or abs(times[0]) > 0:
            raise ValueError("time grid must start at 0 and have at least two nodes")
        steps = np.diff(times)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * times[-1]:
            raise ValueError("time grid must be uniform and increasing")
        if not np.all(np.isfinite(pos)):
            raise ValueError("flow positions must be finite")
        pos.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def static(cls, rho0: ParticleMeasure, T: float, nt: int) -> "MeasureFlow":
        """The constant flow ``rho_t = rho0``."""
        pos = np.broadcast_to(rho0.points, (nt + 1,) + rho0.points.shape).copy()
        return cls(np.linspace(0.0, T, nt + 1), pos)

    @property
    def nt(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @cached_property
    def measures(self) -> list[ParticleMeasure]:
        return [ParticleMeasure(p) for p in self.positions]

    @property
    def initial(self) -> ParticleMeasure:
        return self.measures[0]

    def positions_at(self, t: float) -> np.ndarray:
        """Particle positions at ``t``, linear in time between slices."""
        s = float(np.clip(t / self.dt, 0.0, self.nt))
        k = min(int(np.floor(s)), self.nt - 1)
        w = s - k
        if w == 0.0:
            return self.positions[k]
        return (1 - w) * self.positions[k] + w * self.positions[k + 1]

    def at(self, t: float) -> ParticleMeasure:
        s = t / self.dt
        k = int(round(s))
        if abs(s - k) < 1e-12 and 0 <= k <= self.nt:
            return self.measures[k]
        return ParticleMeasure(self.positions_at(t))

    def moment2_curve(self) -> np.ndarray:
        return np.array([moment2(m) for m in self.measures])

    def mean_curve(self) -> np.ndarray:
        return self.positions.mean(axis=1)

    def lipschitz_constant(self) -> float:
        """``C_flow = max_k W1(rho_{k+1}, rho_k) / dt``.

        By the triangle inequality ``W1(rho_tk, rho_tj) <= C_flow |tk - tj|``
        then holds for every pair of slices.  Consecutive slices are compared
        through the index coupling when the exact solve is too large.
        """
        worst = 0.0
        for k in range(self.nt):
            worst = max(worst, flow_distance(1, self.measures[k], self.measures[k + 1]) / self.dt)
        return worst

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        width = len(str(self.nt))
        files = []
        for k, mu in enumerate(self.measures):
            name = f"rho_t{k:0{width}d}.csv"
            write_csv(mu, directory / name)
            files.append(name)
        manifest = {"T": self.T, "nt": self.nt, "n": self.n, "dim": self.dim, "files": files}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path


def flow_distance(order: int, mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Exact ``W_order`` when tractable, otherwise the index-coupling upper bound."""
    if mu.dim == 1 or mu.n <= 512:
        return wasserstein(order, mu, nu)
    return index_coupling_distance(order, mu, nu)


def growth_bound(x0_norm, cv: float, t: float):
    """Gronwall envelope ``(|x| + C_V t) exp(t C_V)`` for ``|V| <= C_V (1 + |x|)``."""
    return (np.asarray(x0_norm) + cv * t) * np.exp(t * cv)


def moment2_bound(m2_0: float, cv: float, T: float) -> float:
    """Bound on ``max_t M2(rho_t)`` implied by the growth envelope."""
    return float(np.sqrt(2.0 * (m2_0**2 + cv**2 * T**2)) * np.exp(T * cv))


@dataclass
class VelocityField:
    """``V(t, x) = D_pH(x, -I[du(t)](x), rho_t)``; counts clamped evaluations."""

    problem: MfgProblem
    field: ValueField
    rho: MeasureFlow
    out_of_domain: int = 0
    evaluations: int = 0

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        outside = int(np.sum(~self.field.grid.contains(x)))
        self.out_of_domain += outside
        self.evaluations += len(x)
        p = -self.field.grad_at_time(t, x)
        return self.problem.hamiltonian.grad_p(x, p, self.rho.at(t))

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.field.grid

    def lipschitz_bound(self, c0_bound: Optional[float] = None) -> float:
        """``lip_H (1 + C0)`` with ``C0`` the sup of the second differences."""
        c0 = float(np.max(np.abs(self.field.d2u))) if c0_bound is None else c0_bound
        return self.problem.hamiltonian.lip * (1.0 + c0)


def velocity_from_value(problem: MfgProblem, field: ValueField, rho: MeasureFlow) -> VelocityField:
    if abs(field.grid.T - rho.T) > 1e-12 * max(1.0, rho.T) or field.grid.nt != rho.nt:
        raise ValueError("value field and flow must share the time grid")
    return VelocityField(problem, field, rho)


def integrate_flow(
    V: Callable[[float, np.ndarray], np.ndarray],
    rho0: ParticleMeasure,
    nt: int,
    T: float,
    domain_bound: Optional[float] = None,
) -> MeasureFlow:
    """Classical RK4 for ``dX/dt = V(t, X)`` started from the particles of ``rho0``.

    ``BlowUp`` is raised when a particle exceeds ten times ``domain_bound``
    (taken from the velocity's grid when not given).
    """
    if nt < 1:
        raise ValueError("nt must be >= 1")
    if domain_bound is None and isinstance(V, VelocityField):
        domain_bound = max(max(abs(lo), abs(hi)) for lo, hi in V.grid.bounds)
    times = np.linspace(0.0, T, nt + 1)

    def guard(k, x):
        if domain_bound is not None and np.max(np.abs(x)) > 10 * domain_bound:
            raise BlowUp(f"particles left 10x the domain bound at step {k}")

    return MeasureFlow(times, rk4_path(V, rho0.points.copy(), times, guard))


def rk4_path(f: Callable[[float, np.ndarray], np.ndarray], z0: np.ndarray,
             times: np.ndarray, guard: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Classical RK4 for ``dz/dt = f(t, z)`` over ``times`` (may run backwards)."""
    z = np.asarray(z0, dtype=float)
    out = np.empty((len(times),) + z.shape)
    out[0] = z
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        k1 = f(t, z)
        k2 = f(t + h / 2, z + h / 2 * k1)
        k3 = f(t + h / 2, z + h / 2 * k2)
        k4 = f(t + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise BlowUp(f"non-finite state at step {k + 1}")
        if guard is not None:
            guard(k + 1, z)
        out[k + 1] = z
    return out


@dataclass
class FlowReport:
    m2_max: float
    m2_bound: float
    c_flow: float
    growth_ok: bool
    growth_cv: float

    def summary(self) -> dict:
        return dict(self.__dict__)


def audit_flow(flow: MeasureFlow, cv: float, atol: float = 1e-8) -> FlowReport:
    """Moment, time-Lipschitz and growth-envelope checks for a computed flow."""
    m2 = flow.moment2_curve()
    x0 = np.linalg.norm(flow.positions[0], axis=1)
    growth = True
    for k, t in enumerate(flow.times):
        env = growth_bound(x0, cv, t)
        growth &= bool(np.all(np.linalg.norm(flow.positions[k], axis=1) <= env + atol))
    return FlowReport(float(m2.max()), moment2_bound(float(m2[0]), cv, flow.T),
                      flow.lipschitz_constant(), growth, cv)
