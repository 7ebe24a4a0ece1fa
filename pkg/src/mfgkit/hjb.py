"""Semi-Lagrangian dynamic programming for the HJB equation on a frozen flow.

For a fixed measure flow the value function is the value of a deterministic
control problem, so one backward step reads

    u(t_k, x_j) = min_a { dt L(x_j, a, rho_{t_k}) + I[u(t_{k+1})](x_j + dt a) }

with ``I`` clamped multilinear interpolation.  The action is located on a
coarse grid of ``|a_i| <= A_max`` and refined by golden-section search per
axis.  Both pieces of the objective are convex in ``a`` when ``L`` is convex
in ``v`` and ``u(t_{k+1})`` is convex, so the refinement is well posed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import DomainTooSmall, NonConvergentLineSearch
from .measures import ParticleMeasure
from .model import MfgProblem

if TYPE_CHECKING:
    from .flow import MeasureFlow

logger = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Tensor grid on ``prod_i [lo_i, hi_i]`` with ``nt`` uniform time steps."""

    bounds: tuple
    nx: int
    nt: int
    T: float
    velocity_bound: Optional[float] = None

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in np.atleast_2d(self.bounds))
        object.__setattr__(self, "bounds", bounds)
        if len(bounds) not in (1, 2):
            raise ValueError(f"grid dimension must be 1 or 2, got {len(bounds)}")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"empty axis [{lo}, {hi}]")
        if self.nx < 8:
            raise ValueError(f"nx must be >= 8, got {self.nx}")
        if self.nt < 2:
            raise ValueError(f"nt must be >= 2, got {self.nt}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.velocity_bound is not None:
            width = min(hi - lo for lo, hi in bounds)
            if self.dt * self.velocity_bound > width / 4:
                raise ValueError(
                    f"time step too coarse: dt*|v|max = {self.dt * self.velocity_bound:.3g} "
                    f"exceeds a quarter of the domain width {width:.3g}"
                )

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def shape(self) -> tuple:
        return (self.nx,) * self.dim

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.nx) for lo, hi in self.bounds]

    @property
    def dx(self) -> np.ndarray:
        return np.array([(hi - lo) / (self.nx - 1) for lo, hi in self.bounds])

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    def nodes(self) -> np.ndarray:
        """All grid nodes as an ``(nx**d, d)`` array in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, pts: np.ndarray, slack: float = 1e-12) -> np.ndarray:
        inside = np.ones(len(pts), dtype=bool)
        for i, (lo, hi) in enumerate(self.bounds):
            pad = slack * (hi - lo)
            inside &= (pts[:, i] >= lo - pad) & (pts[:, i] <= hi + pad)
        return inside


def interpolate(grid: SpaceTimeGrid, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Clamped multilinear interpolation of ``values`` (shape ``grid.shape + extra``)."""
    pts = np.asarray(pts, dtype=float)
    n = grid.nx
    idx, frac = [], []
    for i, (lo, hi) in enumerate(grid.bounds):
        h = (hi - lo) / (n - 1)
        s = np.clip((pts[:, i] - lo) / h, 0.0, n - 1.0)
        j = np.minimum(s.astype(int), n - 2)
        idx.append(j)
        frac.append(s - j)
    extra = values.shape[grid.dim:]
    if grid.dim == 1:
        j, f = idx[0], frac[0]
        if extra:
            f = f.reshape((-1,) + (1,) * len(extra))
        return (1 - f) * values[j] + f * values[j + 1]
    (j0, j1), (f0, f1) = idx, frac
    if extra:
        shape = (-1,) + (1,) * len(extra)
        f0, f1 = f0.reshape(shape), f1.reshape(shape)
    return (
        (1 - f0) * (1 - f1) * values[j0, j1]
        + f0 * (1 - f1) * values[j0 + 1, j1]
        + (1 - f0) * f1 * values[j0, j1 + 1]
        + f0 * f1 * values[j0 + 1, j1 + 1]
    )


@dataclass
class ValueField:
    """Value function, discrete gradient and second differences on a grid."""

    grid: SpaceTimeGrid
    u: np.ndarray
    du: np.ndarray
    d2u: np.ndarray
    A_max: float
    conv_tol: float = 1e-8
    c11_bound: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def convex_flag(self) -> bool:
        interior = (slice(None),) + (slice(1, -1),) * self.grid.dim
        return bool(np.min(self.d2u[interior]) >= -self.conv_tol)

    @property
    def c11_flag(self) -> Optional[bool]:
        if self.c11_bound is None:
            return None
        return bool(np.max(np.abs(self.d2u)) <= self.c11_bound)

    def value_at(self, k: int, pts) -> np.ndarray:
        return interpolate(self.grid, self.u[k], np.asarray(pts, dtype=float))

    def grad_at(self, k: int, pts) -> np.ndarray:
        return interpolate(self.grid, self.du[k], np.asarray(pts, dtype=float))

    def grad_at_time(self, t: float, pts) -> np.ndarray:
        """Gradient interpolated in space and linearly in time."""
        s = np.clip(t / self.grid.dt, 0.0, self.grid.nt)
        k = min(int(np.floor(s)), self.grid.nt - 1)
        w = s - k
        g0 = self.grad_at(k, pts)
        if w == 0.0:
            return g0
        return (1 - w) * g0 + w * self.grad_at(k + 1, pts)

    def write(self, directory: str | Path) -> Path:
        """One CSV per time slice plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nodes = self.grid.nodes()
        d = self.grid.dim
        width = len(str(self.grid.nt))
        files = []
        for k in range(self.grid.nt + 1):
            name = f"value_t{k:0{width}d}.csv"
            u = self.u[k].reshape(-1)
            du = self.du[k].reshape(-1, d)
            d2u = self.d2u[k].reshape(-1, d)
            cols = [nodes, u[:, None], du, d2u]
            header = [f"x{i}" for i in range(d)] + ["u"] + [f"du{i}" for i in range(d)] + [f"d2u{i}" for i in range(d)]
            np.savetxt(directory / name, np.hstack(cols), delimiter=",", header=",".join(header),
                       comments="", fmt="%.17g")
            files.append(name)
        manifest = {
            "T": self.grid.T, "nt": self.grid.nt, "nx": self.grid.nx,
            "bounds": [list(b) for b in self.grid.bounds], "files": files,
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# grid sizing
# ---------------------------------------------------------------------------

def _probe_points(lo: np.ndarray, hi: np.ndarray, per_axis: int = 33) -> np.ndarray:
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def estimate_velocity(problem: MfgProblem, mu: ParticleMeasure, pts: np.ndarray) -> tuple[float, float]:
    """Velocity scale from the terminal feedback ``D_pH(x, -D_xg(x, mu), mu)``.

    Returns ``(sup |V|, sup |V| / (1 + |x|))`` over ``pts``; the latter is the
    linear-growth constant of the field.
    """
    H, g = problem.hamiltonian, problem.terminal
    v_term = H.grad_p(pts, -g.grad_x(pts, mu), mu)
    v_free = H.grad_p(pts, np.zeros_like(pts), mu)
    speed = np.maximum(np.linalg.norm(v_term, axis=1), np.linalg.norm(v_free, axis=1))
    growth = speed / (1.0 + np.linalg.norm(pts, axis=1))
    return float(speed.max()), float(growth.max())


def auto_grid(problem: MfgProblem, rho0: ParticleMeasure, nx: int, nt: int,
              margin_cells: int = 2, max_half_width: float = 50.0) -> SpaceTimeGrid:
    """Centred grid sized by the flow growth bound ``(R0 + C_V T) exp(C_V T)``."""
    d = problem.dim
    T = problem.horizon
    R0 = float(np.max(np.linalg.norm(rho0.points, axis=1)))
    probe = _probe_points(np.full(d, -R0 - 1.0), np.full(d, R0 + 1.0), 65 if d == 1 else 17)
    _, growth = estimate_velocity(problem, rho0, probe)
    cv = max(growth, 1e-3)
    half = min((R0 + cv * T) * np.exp(cv * T), max_half_width)
    h = 2 * half / (nx - 1 - 2 * margin_cells)
    half += margin_cells * h
    return SpaceTimeGrid(tuple((-half, half) for _ in range(d)), nx, nt, T)


# ---------------------------------------------------------------------------
# backward recursion
# ---------------------------------------------------------------------------

def _second_differences(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Second differences along every spatial axis, edge values replicated."""
    d = len(h)
    out = np.empty(u.shape + (d,))
    for i in range(d):
        ax = i + 1
        dd = np.diff(u, n=2, axis=ax) / h[i] ** 2
        pad = [(0, 0)] * u.ndim
        pad[ax] = (1, 1)
        out[..., i] = np.pad(dd, pad, mode="edge")
    return out


def _gradient(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    d = len(h)
    out = np.empty(u.shape + (d,))
    for i in range(d):
        out[..., i] = np.gradient(u, h[i], axis=i + 1, edge_order=1)
    return out


def _golden(obj, lo: np.ndarray, hi: np.ndarray, tol: float, max_iter: int = 200):
    """Vectorised golden-section minimisation on per-row brackets."""
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = obj(c), obj(d)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            return 0.5 * (lo + hi)
        if not (np.all(np.isfinite(fc)) and np.all(np.isfinite(fd))):
            raise NonConvergentLineSearch("non-finite objective in golden-section search")
        left = fc <= fd  # ties keep the smaller action
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = np.where(left, hi - GOLDEN * (hi - lo), d)
        new_d = np.where(left, c, lo + GOLDEN * (hi - lo))
        fp = obj(np.where(left, new_c, new_d))
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = new_c, new_d
    raise NonConvergentLineSearch(f"golden-section search did not reach tol {tol}")


def solve_hjb(
    problem: MfgProblem,
    rho: "MeasureFlow",
    grid: SpaceTimeGrid,
    A_max: Optional[float] = None,
    n_coarse: Optional[int] = None,
    action_tol: float = 1e-8,
    conv_tol: float = 1e-8,
    c11_bound: Optional[float] = None,
    outside_fraction: float = 0.01,
) -> ValueField:
    """Backward semi-Lagrangian recursion for ``u`` given the flow ``rho``."""
    if problem.beta != 0:
        raise ValueError("diffusion is not supported")
    if grid.dim != problem.dim:
        raise ValueError(f"grid dimension {grid.dim} != problem dimension {problem.dim}")
    if len(rho.measures) != grid.nt + 1:
        raise ValueError(f"flow has {len(rho.measures)} slices, grid needs {grid.nt + 1}")
    if abs(rho.times[-1] - grid.T) > 1e-12 * max(1.0, grid.T):
        raise ValueError("flow and grid horizons differ")

    L = problem.lagrangian
    d = grid.dim
    dt = grid.dt
    nodes = grid.nodes()
    N = len(nodes)
    if A_max is None:
        speed, _ = estimate_velocity(problem, rho.measures[-1], nodes)
        A_max = 2.0 * max(speed, 1e-3)
    n_coarse = n_coarse or (41 if d == 1 else 21)
    cand_axis = np.linspace(-A_max, A_max, n_coarse)
    cand = np.stack([m.ravel() for m in np.meshgrid(*([cand_axis] * d), indexing="ij")], axis=1)
    C = len(cand)
    step = cand_axis[1] - cand_axis[0]

    u = np.empty((grid.nt + 1,) + grid.shape)
    u[-1] = problem.terminal.eval(nodes, rho.measures[-1]).reshape(grid.shape)
    outside = np.zeros(grid.nt, dtype=int)
    capped = np.zeros(grid.nt, dtype=int)
    nodes_rep = np.repeat(nodes, C, axis=0)
    cand_tile = np.tile(cand, (N, 1))

    for k in range(grid.nt - 1, -1, -1):
        mu = rho.measures[k]
        nxt = u[k + 1]

        def total(xs, acts):
            return dt * L.eval(xs, acts, mu) + interpolate(grid, nxt, xs + dt * acts)

        coarse = total(nodes_rep, cand_tile).reshape(N, C)
        if not np.all(np.isfinite(coarse)):
            raise NonConvergentLineSearch(f"non-finite running cost at time step {k}")
        best = np.argmin(coarse, axis=1)
        a = cand[best].copy()
        f_best = coarse[np.arange(N), best]
        for _sweep in range(1 if d == 1 else 3):
            before = a.copy()
            for i in range(d):
                lo = np.maximum(a[:, i] - step, -A_max)
                hi = np.minimum(a[:, i] + step, A_max)

                def along(s, i=i):
                    trial = a.copy()
                    trial[:, i] = s
                    return total(nodes, trial)

                s = _golden(along, lo, hi, action_tol)
                trial = a.copy()
                trial[:, i] = s
                f_trial = total(nodes, trial)
                better = f_trial <= f_best
                a = np.where(better[:, None], trial, a)
                f_best = np.where(better, f_trial, f_best)
            if np.max(np.abs(a - before)) <= action_tol:
                break
        u[k] = f_best.reshape(grid.shape)
        outside[k] = int(np.sum(~grid.contains(nodes + dt * a)))
        capped[k] = int(np.sum(np.any(np.abs(a) >= A_max * (1 - 1e-9), axis=1)))
        if outside[k] > outside_fraction * N:
            raise DomainTooSmall(
                f"characteristic feet leave the domain at {outside[k]} of {N} nodes "
                f"(time step {k}); enlarge the grid", count=int(outside[k]),
            )

    if capped.any():
        logger.warning("action cap A_max=%.3g active at %d node-steps", A_max, int(capped.sum()))
    h = grid.dx
    return ValueField(
        grid=grid, u=u, du=_gradient(u, h), d2u=_second_differences(u, h),
        A_max=float(A_max), conv_tol=conv_tol, c11_bound=c11_bound,
        diagnostics={"outside": outside.tolist(), "capped": int(capped.sum()), "n_coarse": n_coarse},
    )


# ---------------------------------------------------------------------------
# regularity audit
# ---------------------------------------------------------------------------

@dataclass
class RegularityReport:
    grad_sup_on_balls: dict
    d2u_sup: float
    d2u_sup_per_time: np.ndarray
    dt_u_sup: float
    dt_du_sup: float
    passed: bool
    max_location: dict
    jump_location: dict
    note: str = ("the time derivative of D_xu is audited through discrete differences only; "
                 "its almost-everywhere bound has no grid counterpart")

    def summary(self) -> dict:
        return {
            "grad_sup_on_balls": self.grad_sup_on_balls,
            "d2u_sup": self.d2u_sup,
            "dt_u_sup": self.dt_u_sup,
            "dt_du_sup": self.dt_du_sup,
            "passed": self.passed,
            "max_location": self.max_location,
            "jump_location": self.jump_location,
            "note": self.note,
        }


def audit_regularity(field: ValueField, problem: MfgProblem | None = None,
                     radii: Optional[Sequence[float]] = None, rel_tol: float = 0.1) -> RegularityReport:
    """Sup-norm estimates of ``u`` and its derivatives on the grid.

    Passes iff the time profile ``S(t) = max_x |d2u(t, x)|`` is finite and
    moves by at most ``rel_tol * median_t S(t)`` between consecutive time
    steps, i.e. the second-derivative bound is uniform in time.
    """
    grid = field.grid
    nodes = grid.nodes()
    radius = np.linalg.norm(nodes, axis=1)
    half = min((hi - lo) / 2 for lo, hi in grid.bounds)
    radii = list(radii) if radii is not None else [half / 4, half / 2, half]
    du = field.du.reshape(grid.nt + 1, -1, grid.dim)
    gnorm = np.linalg.norm(du, axis=2)
    balls = {}
    for R in radii:
        mask = radius <= R
        balls[f"{R:.6g}"] = float(gnorm[:, mask].max()) if mask.any() else 0.0
    d2 = np.abs(field.d2u.reshape(grid.nt + 1, -1, grid.dim)).max(axis=2)
    per_time = d2.max(axis=1)
    k, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    u = field.u.reshape(grid.nt + 1, -1)
    inner = radius <= half / 2
    dt_u = float(np.max(np.abs(np.diff(u[:, inner], axis=0)))) / grid.dt
    dt_du = float(np.max(np.abs(np.diff(du[:, inner], axis=0)))) / grid.dt
    jumps = np.abs(np.diff(per_time))
    kj = int(np.argmax(jumps)) if len(jumps) else 0
    median = float(np.median(per_time))
    finite = bool(np.all(np.isfinite(field.u)) and np.all(np.isfinite(per_time)))
    passed = finite and bool(np.all(jumps <= rel_tol * median + 1e-12))
    return RegularityReport(
        grad_sup_on_balls=balls,
        d2u_sup=float(per_time.max()),
        d2u_sup_per_time=per_time,
        dt_u_sup=dt_u,
        dt_du_sup=dt_du,
        passed=passed,
        max_location={"time_index": int(k), "t": float(grid.times[k]), "x": nodes[j].tolist()},
        jump_location={"time_index": kj, "t": float(grid.times[kj]), "jump": float(jumps[kj]) if len(jumps) else 0.0},
    )
