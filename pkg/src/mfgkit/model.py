"""Problem data: Lagrangians, Hamiltonians, terminal costs and builtin models.

Every callable is vectorised over rows: positions, velocities and momenta
are ``(m, d)`` arrays, the measure argument is a single
:class:`~mfgkit.measures.ParticleMeasure` shared by all rows.  Scalar
outputs have shape ``(m,)`` and gradients ``(m, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .errors import NoConvergence, ParamOutOfRange, UnknownModel
from .measures import ParticleMeasure

ScalarFn = Callable[..., np.ndarray]
VectorFn = Callable[..., np.ndarray]


def rows(a, dim: int | None = None) -> np.ndarray:
    """Coerce a point or a batch of points to an ``(m, d)`` float array."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if dim is None or arr.size == dim else arr.reshape(-1, 1)
    return arr


@dataclass(frozen=True)
class LagrangianSpec:
    eval: ScalarFn
    grad_x: VectorFn
    grad_v: VectorFn
    c0: float
    lip: float
    hess_v: Optional[Callable[..., np.ndarray]] = None


@dataclass(frozen=True)
class HamiltonianSpec:
    eval: ScalarFn
    grad_x: VectorFn
    grad_p: VectorFn
    c0: float
    lip: float
    hess_p: Optional[Callable[..., np.ndarray]] = None


@dataclass(frozen=True)
class TerminalCost:
    eval: Callable[[np.ndarray, ParticleMeasure], np.ndarray]
    grad_x: Callable[[np.ndarray, ParticleMeasure], np.ndarray]
    lip: float


@dataclass(frozen=True)
class MfgProblem:
    lagrangian: LagrangianSpec
    hamiltonian: HamiltonianSpec
    terminal: TerminalCost
    horizon: float
    dim: int = 1
    beta: float = 0.0
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)
    # True when neither L nor H depends on the measure argument
    separable_quadratic: bool = False

    def __post_init__(self):
        if self.beta != 0:
            raise ParamOutOfRange("only the deterministic case beta = 0 is supported")
        if not self.horizon > 0:
            raise ParamOutOfRange(f"horizon must be positive, got {self.horizon}")
        if self.dim < 1:
            raise ParamOutOfRange(f"dim must be >= 1, got {self.dim}")

    def with_terminal(self, terminal: TerminalCost) -> "MfgProblem":
        return MfgProblem(
            self.lagrangian, self.hamiltonian, terminal, self.horizon, self.dim,
            self.beta, self.name, dict(self.params), self.separable_quadratic,
        )

    def duality_defect(self, n_samples: int = 64, seed: int = 0) -> float:
        """Max of ``|H(x,p) + L(x, D_pH) - p.D_pH|`` over random samples.

        Zero up to round-off when ``H`` and ``L`` are a Legendre pair.
        """
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(4):
            mu = random_measure(rng, 16, self.dim)
            x = rng.normal(scale=1.5, size=(n_samples, self.dim))
            p = rng.normal(scale=1.5, size=(n_samples, self.dim))
            v = self.hamiltonian.grad_p(x, p, mu)
            gap = self.hamiltonian.eval(x, p, mu) + self.lagrangian.eval(x, v, mu) - np.sum(p * v, axis=1)
            worst = max(worst, float(np.max(np.abs(gap))))
        return worst


def random_measure(rng: np.random.Generator, n: int, dim: int) -> ParticleMeasure:
    centre = rng.normal(scale=1.0, size=dim)
    scale = rng.uniform(0.3, 1.5)
    return ParticleMeasure(centre + scale * rng.normal(size=(n, dim)))


# ---------------------------------------------------------------------------
# Legendre-Fenchel transform
# ---------------------------------------------------------------------------

def _fd_jacobian(grad: Callable, x, z, mu, h: float = 1e-6) -> np.ndarray:
    m, d = z.shape
    jac = np.empty((m, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        jac[:, :, k] = (grad(x, z + e, mu) - grad(x, z - e, mu)) / (2 * h)
    return 0.5 * (jac + np.swapaxes(jac, 1, 2))


def conjugate(
    fun: ScalarFn,
    grad: VectorFn,
    x: np.ndarray,
    y: np.ndarray,
    mu: ParticleMeasure,
    hess: Optional[Callable] = None,
    start: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``sup_z { y.z - fun(x, z, mu) }`` by damped Newton.

    Returns ``(value, argmax)``.  Iteration stops once the first-order
    residual ``|y - grad(x, z, mu)|`` is below ``tol`` on every row.
    """
    x = rows(x)
    y = rows(y)
    z = y.copy() if start is None else np.array(start, dtype=float)

    def objective(zz):
        return np.sum(y * zz, axis=1) - fun(x, zz, mu)

    obj = objective(z)
    for _ in range(max_iter):
        resid = y - grad(x, z, mu)
        norm = np.linalg.norm(resid, axis=1)
        if np.all(norm <= tol):
            return obj, z
        jac = hess(x, z, mu) if hess is not None else _fd_jacobian(grad, x, z, mu)
        step = np.linalg.solve(jac, resid[..., None])[..., 0]
        active = norm > tol
        t = np.ones(len(z))
        for _ in range(40):
            trial = z + t[:, None] * step
            new_obj = objective(trial)
            bad = active & ~(new_obj >= obj - 1e-14 * (1 + np.abs(obj)))
            if not np.any(bad):
                break
            t[bad] *= 0.5
        z = np.where(active[:, None], trial, z)
        obj = np.where(active, new_obj, obj)
    resid = np.linalg.norm(y - grad(x, z, mu), axis=1)
    if np.any(resid > tol):
        raise NoConvergence(
            f"Legendre transform did not converge in {max_iter} iterations "
            f"(residual {resid.max():.3e}); is the function strictly convex?"
        )
    return obj, z


def legendre(L: LagrangianSpec, x, p, mu: ParticleMeasure):
    """``sup_v {p.v - L(x, v, mu)}`` and its maximiser.

    Accepts a single point (returns ``(float, vector)``) or a batch of rows.
    """
    if not L.c0 > 0:
        raise ParamOutOfRange("Legendre transform needs a strictly convex Lagrangian (c0 > 0)")
    single = np.ndim(p) <= 1
    xr, pr = rows(x, mu.dim), rows(p, mu.dim)
    value, arg = conjugate(L.eval, L.grad_v, xr, pr, mu, hess=L.hess_v)
    if single:
        return float(value[0]), arg[0]
    return value, arg


def lagrangian_from_hamiltonian(H: HamiltonianSpec) -> LagrangianSpec:
    """Lagrangian obtained by conjugating a strongly convex Hamiltonian in ``p``."""

    def argmax(x, v, mu):
        x, v = rows(x), rows(v)
        return conjugate(H.eval, H.grad_p, x, v, mu, hess=H.hess_p, tol=1e-12)

    def value(x, v, mu):
        return argmax(x, v, mu)[0]

    def grad_v(x, v, mu):
        return argmax(x, v, mu)[1]

    def grad_x(x, v, mu):
        p = argmax(x, v, mu)[1]
        return -H.grad_x(rows(x), p, mu)

    hess_v = None
    if H.hess_p is not None:
        def hess_v(x, v, mu):
            p = argmax(x, v, mu)[1]
            return np.linalg.inv(H.hess_p(rows(x), p, mu))

    # D2_vv L = (D2_pp H)^-1 <= (1/H.c0) I
    return LagrangianSpec(value, grad_x, grad_v, c0=H.c0, lip=H.lip / H.c0**2, hess_v=hess_v)


# ---------------------------------------------------------------------------
# Builtin model families
# ---------------------------------------------------------------------------

def _sq(a: np.ndarray) -> np.ndarray:
    return np.sum(a * a, axis=1)


def _identity_hess(a: np.ndarray, scale: float = 1.0) -> np.ndarray:
    m, d = a.shape
    return np.broadcast_to(scale * np.eye(d), (m, d, d)).copy()


def quadratic_lagrangian(scale: float = 1.0) -> LagrangianSpec:
    """``L = |v|^2 / (2 scale)``."""
    return LagrangianSpec(
        eval=lambda x, v, mu: _sq(rows(v)) / (2 * scale),
        grad_x=lambda x, v, mu: np.zeros_like(rows(v)),
        grad_v=lambda x, v, mu: rows(v) / scale,
        c0=scale,
        lip=1.0 / scale,
        hess_v=lambda x, v, mu: _identity_hess(rows(v), 1.0 / scale),
    )


def quadratic_hamiltonian(scale: float = 1.0) -> HamiltonianSpec:
    """``H = scale |p|^2 / 2``, the conjugate of :func:`quadratic_lagrangian`."""
    return HamiltonianSpec(
        eval=lambda x, p, mu: scale * _sq(rows(p)) / 2,
        grad_x=lambda x, p, mu: np.zeros_like(rows(p)),
        grad_p=lambda x, p, mu: scale * rows(p),
        c0=scale,
        lip=scale,
        hess_p=lambda x, p, mu: _identity_hess(rows(p), scale),
    )


def mean_tracking_terminal(a: float) -> TerminalCost:
    """``g(x, mu) = |x - a mean(mu)|^2 / 2``."""

    def value(x, mu):
        return _sq(rows(x) - a * mu.mean()) / 2

    def grad(x, mu):
        return rows(x) - a * mu.mean()

    return TerminalCost(value, grad, lip=1.0 + abs(a))


def _quadratic(params) -> MfgProblem:
    _reject_unknown(params, set())
    dim, T = _dim_T(params)
    g = TerminalCost(lambda x, mu: _sq(rows(x)) / 2, lambda x, mu: rows(x).copy(), lip=1.0)
    return MfgProblem(
        quadratic_lagrangian(), quadratic_hamiltonian(), g, T, dim,
        name="quadratic", params={"dim": dim, "T": T}, separable_quadratic=True,
    )


def _lq_mean(params) -> MfgProblem:
    _reject_unknown(params, {"a"})
    dim, T = _dim_T(params)
    a = float(params.get("a", 0.0))
    if not 0.0 <= a <= 1.0:
        raise ParamOutOfRange(f"lq_mean: a must lie in [0, 1], got {a}")
    return MfgProblem(
        quadratic_lagrangian(), quadratic_hamiltonian(), mean_tracking_terminal(a), T, dim,
        name="lq_mean", params={"dim": dim, "T": T, "a": a}, separable_quadratic=True,
    )


def _damped_mean(mu: ParticleMeasure) -> tuple[float, np.ndarray]:
    """``s(mu) = 1 + tanh(sum_i m_i) / 2`` and ``ds/dm`` (per coordinate)."""
    total = float(np.sum(mu.mean()))
    th = np.tanh(total)
    return 1.0 + 0.5 * th, np.full(mu.dim, 0.5 * (1.0 - th * th))


def _displacement_model(params) -> MfgProblem:
    _reject_unknown(params, {"C0", "eps", "a"})
    dim, T = _dim_T(params)
    C0 = float(params.get("C0", 1.0))
    eps = float(params.get("eps", 0.1))
    a = float(params.get("a", 0.5))
    if not C0 > 0:
        raise ParamOutOfRange(f"displacement_model: C0 must be positive, got {C0}")
    # sup of every derivative of H0 up to order 2 is 1.5 * eps
    if not 0.0 <= 1.5 * eps < C0:
        raise ParamOutOfRange(f"displacement_model: need 0 <= 1.5*eps < C0, got eps={eps}, C0={C0}")
    if not 0.0 <= a <= 1.0:
        raise ParamOutOfRange(f"displacement_model: a must lie in [0, 1], got {a}")

    def value(x, p, mu):
        x, p = rows(x), rows(p)
        s, _ = _damped_mean(mu)
        h0 = eps * s * np.sum(np.cos(x) * np.sin(p), axis=1)
        return h0 + 0.5 * C0 * (_sq(p) - _sq(x))

    def grad_x(x, p, mu):
        x, p = rows(x), rows(p)
        s, _ = _damped_mean(mu)
        return -eps * s * np.sin(x) * np.sin(p) - C0 * x

    def grad_p(x, p, mu):
        x, p = rows(x), rows(p)
        s, _ = _damped_mean(mu)
        return eps * s * np.cos(x) * np.cos(p) + C0 * p

    def hess_p(x, p, mu):
        x, p = rows(x), rows(p)
        s, _ = _damped_mean(mu)
        diag = C0 - eps * s * np.cos(x) * np.sin(p)
        out = np.zeros(diag.shape + (diag.shape[1],))
        idx = np.arange(diag.shape[1])
        out[:, idx, idx] = diag
        return out

    H = HamiltonianSpec(value, grad_x, grad_p, c0=C0 - 1.5 * eps, lip=C0 + 1.5 * eps, hess_p=hess_p)
    return MfgProblem(
        lagrangian_from_hamiltonian(H), H, mean_tracking_terminal(a), T, dim,
        name="displacement_model", params={"dim": dim, "T": T, "C0": C0, "eps": eps, "a": a},
    )


def convolution_terminal_cost(C: float, c: float, ripple: float) -> TerminalCost:
    """``g(x, mu) = C|x|^2 + (phi * mu)(x)`` with a strictly concave kernel.

    ``phi(z) = -(c/2)|z|^2 - ripple * sum_i cos(z_i)``, so
    ``-(c + ripple) <= D^2 phi <= -(c - ripple) < 0``.
    """

    def stats(mu):
        pts = mu.points
        return (mu.mean(), mu.second_moment(), np.cos(pts).mean(axis=0), np.sin(pts).mean(axis=0))

    def value(x, mu):
        x = rows(x)
        m, s2, ec, es = stats(mu)
        quad = -0.5 * c * (_sq(x) - 2 * x @ m + s2)
        wave = -ripple * np.sum(np.cos(x) * ec + np.sin(x) * es, axis=1)
        return C * _sq(x) + quad + wave

    def grad(x, mu):
        x = rows(x)
        m, _, ec, es = stats(mu)
        return 2 * C * x - c * (x - m) + ripple * (np.sin(x) * ec - np.cos(x) * es)

    return TerminalCost(value, grad, lip=2 * C + c + ripple)


def _convolution_terminal(params) -> MfgProblem:
    _reject_unknown(params, {"C", "c", "ripple"})
    dim, T = _dim_T(params)
    C = float(params.get("C", 1.0))
    c = float(params.get("c", 0.5))
    ripple = float(params.get("ripple", min(c / 2, C - c)))
    if not C > 0:
        raise ParamOutOfRange(f"convolution_terminal: C must be positive, got {C}")
    if not 0 < c <= C:
        raise ParamOutOfRange(f"convolution_terminal: need 0 < c <= C, got c={c}, C={C}")
    if not 0 <= ripple < c or c + ripple > C:
        raise ParamOutOfRange(
            f"convolution_terminal: need 0 <= ripple < c and c + ripple <= C, got ripple={ripple}"
        )
    g = convolution_terminal_cost(C, c, ripple)
    return MfgProblem(
        quadratic_lagrangian(), quadratic_hamiltonian(), g, T, dim,
        name="convolution_terminal",
        params={"dim": dim, "T": T, "C": C, "c": c, "ripple": ripple},
        separable_quadratic=True,
    )


def _dim_T(params) -> tuple[int, float]:
    dim = int(params.get("dim", 1))
    T = float(params.get("T", 1.0))
    if dim < 1:
        raise ParamOutOfRange(f"dim must be >= 1, got {dim}")
    if not T > 0:
        raise ParamOutOfRange(f"T must be positive, got {T}")
    return dim, T


def _reject_unknown(params, allowed: set) -> None:
    extra = set(params) - allowed - {"dim", "T"}
    if extra:
        raise ParamOutOfRange(f"unknown parameters: {sorted(extra)}")


BUILTINS: dict[str, Callable[[Mapping[str, Any]], MfgProblem]] = {
    "quadratic": _quadratic,
    "lq_mean": _lq_mean,
    "displacement_model": _displacement_model,
    "convolution_terminal": _convolution_terminal,
}


def builtin(name: str, params: Mapping[str, Any] | None = None) -> MfgProblem:
    """Construct one of the builtin model families by name."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(dict(params or {}))


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------

@dataclass
class GradientAudit:
    max_deviation: float
    passed: bool
    worst: dict
    n_samples: int
    tol: float = 1e-5


def _fd_grad(fun, args: tuple, slot: int, h: float) -> np.ndarray:
    base = args[slot]
    out = np.empty_like(base)
    for k in range(base.shape[1]):
        e = np.zeros(base.shape[1])
        e[k] = h
        plus = list(args)
        minus = list(args)
        plus[slot] = base + e
        minus[slot] = base - e
        out[:, k] = (fun(*plus) - fun(*minus)) / (2 * h)
    return out


def check_gradients(problem: MfgProblem, n_samples: int = 200, seed: int = 0,
                    h: float = 1e-5, tol: float = 1e-5) -> GradientAudit:
    """Compare every declared gradient with centred finite differences.

    The deviation is ``|fd - declared| / max(1, |declared|)`` (sup over
    components); the audit passes iff the worst one is ``<= tol``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    d = problem.dim
    L, H, g = problem.lagrangian, problem.hamiltonian, problem.terminal
    worst = {"deviation": -1.0}
    n_batches = max(1, min(8, n_samples))
    per = int(np.ceil(n_samples / n_batches))
    for _ in range(n_batches):
        mu = random_measure(rng, 16, d)
        x = rng.normal(scale=1.5, size=(per, d))
        v = rng.normal(scale=1.5, size=(per, d))
        p = rng.normal(scale=1.5, size=(per, d))
        checks = [
            ("L.grad_x", L.eval, L.grad_x, (x, v, mu), 0),
            ("L.grad_v", L.eval, L.grad_v, (x, v, mu), 1),
            ("H.grad_x", H.eval, H.grad_x, (x, p, mu), 0),
            ("H.grad_p", H.eval, H.grad_p, (x, p, mu), 1),
            ("g.grad_x", g.eval, g.grad_x, (x, mu), 0),
        ]
        for label, fun, grad, args, slot in checks:
            declared = grad(*args)
            approx = _fd_grad(fun, args, slot, h)
            dev = np.max(np.abs(approx - declared) / np.maximum(1.0, np.abs(declared)), axis=1)
            i = int(np.argmax(dev))
            if dev[i] > worst["deviation"]:
                worst = {
                    "deviation": float(dev[i]),
                    "function": label,
                    "x": x[i].tolist(),
                    "z": args[1][i].tolist() if slot == 1 or len(args) == 3 else None,
                    "declared": declared[i].tolist(),
                    "finite_difference": approx[i].tolist(),
                }
    return GradientAudit(worst["deviation"], worst["deviation"] <= tol, worst, n_batches * per, tol)
