"""Sampled audits of displacement and Lasry-Lions monotonicity.

Each checker draws pairs of particle measures ``mu1, mu2``, identifies
random variables ``X1, X2`` with their points under a coupling
(optimal, identity or random permutation, cycled over trials) and
evaluates the defining expectation as a mean over paired particles.
Sampling can only falsify; a PASS verdict is evidence, not proof.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SingularHessian
from .measures import ParticleMeasure, optimal_coupling, read_csv
from .model import HamiltonianSpec, LagrangianSpec, TerminalCost

KINDS = ("displacement_g", "displacement_L", "displacement_H", "lasry_lions", "second_order")

COUPLING_NOTE = (
    "couplings are a stratified heuristic sample (optimal / index / random "
    "permutations); the infimum over all couplings is not searched exhaustively"
)


@dataclass(frozen=True)
class SamplerConfig:
    """How pairs of measures (and tangent variables) are drawn.

    generator: ``gaussian_mixture``, ``uniform`` or ``csv`` (``csv_paths``
    then names the two measure files, reused on every trial and only
    re-coupled).  ``tangent_modes`` controls how the second velocity or
    momentum sample relates to the first.
    """

    n: int = 200
    dim: int = 1
    generator: str = "gaussian_mixture"
    couplings: Sequence[str] = ("optimal", "index", "random")
    tangent_modes: Sequence[str] = ("independent", "shared")
    components: int = 3
    spread: float = 2.0
    tangent_scale: float = 1.5
    csv_paths: Sequence[str] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sampler needs n >= 1")
        if self.generator not in ("gaussian_mixture", "uniform", "csv"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.generator == "csv" and len(self.csv_paths) != 2:
            raise ValueError("the csv generator needs exactly two csv_paths")
        for c in self.couplings:
            if c not in ("optimal", "index", "random"):
                raise ValueError(f"unknown coupling {c!r}")
        for m in self.tangent_modes:
            if m not in ("independent", "shared"):
                raise ValueError(f"unknown tangent mode {m!r}")


@dataclass
class MonotonicityReport:
    kind: str
    trials: int
    min_pairing: float
    witness: dict
    tol: float
    values: np.ndarray = field(repr=False)
    note: str = COUPLING_NOTE
    _evaluate: Optional[Callable[[dict], float]] = field(default=None, repr=False, compare=False)

    @property
    def verdict(self) -> str:
        if self.min_pairing >= -self.tol:
            return "pass"
        # a clear margin is required before declaring a violation
        if self.min_pairing < -10 * self.tol:
            return "fail"
        return "inconclusive"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def reevaluate(self) -> float:
        """Recompute the pairing from the stored witness configuration."""
        return float(self._evaluate(self.witness))

    def summary(self, witness_file: str | None = None) -> dict:
        return {
            "kind": self.kind,
            "trials": self.trials,
            "min_pairing": self.min_pairing,
            "tol": self.tol,
            "verdict": self.verdict,
            "witness_file": witness_file,
            "witness_trial": self.witness.get("trial"),
            "witness_coupling": self.witness.get("coupling"),
            "note": self.note,
        }

    def write(self, directory: str | Path, stem: str | None = None) -> dict:
        """Write ``<stem>.json`` and the witness configuration ``<stem>_witness.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        arrays = {k: v for k, v in self.witness.items() if isinstance(v, np.ndarray)}
        witness_path = directory / f"{stem}_witness.csv"
        names = sorted(arrays)
        with witness_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            header = [f"{k}_{j}" for k in names for j in range(arrays[k].shape[1])]
            writer.writerow(header)
            n = arrays[names[0]].shape[0]
            for i in range(n):
                writer.writerow([repr(float(v)) for k in names for v in arrays[k][i]])
        summary = self.summary(witness_path.name)
        (directory / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary


def default_tol(n: int, trials: int) -> float:
    return 1e-8 + 2.0 / np.sqrt(n * trials)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _draw_measure(rng: np.random.Generator, cfg: SamplerConfig) -> np.ndarray:
    n, d = cfg.n, cfg.dim
    if cfg.generator == "uniform":
        centre = rng.normal(scale=cfg.spread, size=d)
        half = rng.uniform(0.2, 2.0, size=d)
        return centre + rng.uniform(-1.0, 1.0, size=(n, d)) * half
    k = int(rng.integers(1, cfg.components + 1))
    centres = rng.normal(scale=cfg.spread, size=(k, d))
    scales = rng.uniform(0.05, 1.5, size=k)
    labels = rng.integers(0, k, size=n)
    return centres[labels] + scales[labels, None] * rng.normal(size=(n, d))


def _csv_points(cfg: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    mu1, mu2 = (read_csv(p) for p in cfg.csv_paths)
    return mu1.points, mu2.points


def _couple(rng, x1: np.ndarray, x2: np.ndarray, mode: str) -> np.ndarray:
    """Reorder ``x2`` so that row ``i`` is paired with ``x1[i]``."""
    if mode == "index":
        return x2
    if mode == "random":
        return x2[rng.permutation(len(x2))]
    sigma = optimal_coupling(ParticleMeasure(x1), ParticleMeasure(x2)).pairing
    return x2[sigma]


def _draw_pair(seed: int, trial: int, cfg: SamplerConfig, csv_cache=None):
    rng = np.random.default_rng([seed, trial])
    mode = cfg.couplings[trial % len(cfg.couplings)]
    if cfg.generator == "csv":
        x1, x2 = csv_cache
        x1, x2 = x1.copy(), x2.copy()
        if x1.shape != x2.shape:
            raise ValueError("csv measures must have equal size and dimension")
    else:
        x1 = _draw_measure(rng, cfg)
        x2 = _draw_measure(rng, cfg)
    x2 = _couple(rng, x1, x2, mode)
    tmode = cfg.tangent_modes[(trial // len(cfg.couplings)) % len(cfg.tangent_modes)]
    t1 = rng.normal(scale=cfg.tangent_scale, size=x1.shape)
    t2 = t1.copy() if tmode == "shared" else rng.normal(scale=cfg.tangent_scale, size=x1.shape)
    return rng, mode, tmode, x1, x2, t1, t2


def _run(kind, pairing: Callable[[dict], float], make_witness, cfg, trials, seed, tol):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    csv_cache = _csv_points(cfg) if cfg.generator == "csv" else None
    values = np.empty(trials)
    best = None
    for trial in range(trials):
        w = make_witness(trial, _draw_pair(seed, trial, cfg, csv_cache))
        values[trial] = pairing(w)
        if best is None or values[trial] < values[best[0]]:
            best = (trial, w)
    n = best[1]["X1"].shape[0]
    tol = default_tol(n, trials) if tol is None else float(tol)
    return MonotonicityReport(kind, trials, float(values[best[0]]), best[1], tol, values, _evaluate=pairing)


def _mean_dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.sum(a * b, axis=1)))


def _pair_witness(trial, draw):
    _, mode, tmode, x1, x2, t1, t2 = draw
    return {"trial": trial, "coupling": mode, "tangent": tmode, "X1": x1, "X2": x2, "T1": t1, "T2": t2}


# ---------------------------------------------------------------------------
# checkers
# ---------------------------------------------------------------------------

def check_displacement_g(g: TerminalCost, sampler: SamplerConfig = SamplerConfig(),
                         trials: int = 100, seed: int = 0, tol: float | None = None) -> MonotonicityReport:
    """min over trials of ``E[(D_xg(X1,mu1) - D_xg(X2,mu2)).(X1 - X2)]``."""

    def pairing(w):
        x1, x2 = w["X1"], w["X2"]
        mu1, mu2 = ParticleMeasure(x1), ParticleMeasure(x2)
        return _mean_dot(g.grad_x(x1, mu1) - g.grad_x(x2, mu2), x1 - x2)

    def witness(trial, draw):
        w = _pair_witness(trial, draw)
        del w["T1"], w["T2"], w["tangent"]
        return w

    return _run("displacement_g", pairing, witness, sampler, trials, seed, tol)


def check_lasry_lions(g: TerminalCost, sampler: SamplerConfig = SamplerConfig(),
                      trials: int = 100, seed: int = 0, tol: float | None = None) -> MonotonicityReport:
    """min over trials of ``E[g(X1,mu1) + g(X2,mu2) - g(X1,mu2) - g(X2,mu1)]``."""

    def pairing(w):
        x1, x2 = w["X1"], w["X2"]
        mu1, mu2 = ParticleMeasure(x1), ParticleMeasure(x2)
        # grouped so that mu-free costs cancel to exactly zero
        same = g.eval(x1, mu1) - g.eval(x1, mu2)
        cross = g.eval(x2, mu1) - g.eval(x2, mu2)
        return float(np.mean(same - cross))

    def witness(trial, draw):
        w = _pair_witness(trial, draw)
        del w["T1"], w["T2"], w["tangent"]
        return w

    return _run("lasry_lions", pairing, witness, sampler, trials, seed, tol)


def check_displacement_L(L: LagrangianSpec, sampler: SamplerConfig = SamplerConfig(),
                         trials: int = 100, seed: int = 0, tol: float | None = None) -> MonotonicityReport:
    """min of ``E[(D_xL1 - D_xL2).(X1 - X2) + (D_vL1 - D_vL2).(Z1 - Z2)]``."""

    def pairing(w):
        x1, x2, z1, z2 = w["X1"], w["X2"], w["Z1"], w["Z2"]
        mu1, mu2 = ParticleMeasure(x1), ParticleMeasure(x2)
        gx = L.grad_x(x1, z1, mu1) - L.grad_x(x2, z2, mu2)
        gv = L.grad_v(x1, z1, mu1) - L.grad_v(x2, z2, mu2)
        return _mean_dot(gx, x1 - x2) + _mean_dot(gv, z1 - z2)

    def witness(trial, draw):
        w = _pair_witness(trial, draw)
        w["Z1"], w["Z2"] = w.pop("T1"), w.pop("T2")
        return w

    return _run("displacement_L", pairing, witness, sampler, trials, seed, tol)


def check_displacement_H(H: HamiltonianSpec, sampler: SamplerConfig = SamplerConfig(),
                         trials: int = 100, seed: int = 0, tol: float | None = None) -> MonotonicityReport:
    """min of ``E[(-D_xH1 + D_xH2).(X1 - X2) + (D_pH1 - D_pH2).(P1 - P2)]``."""

    def pairing(w):
        x1, x2, p1, p2 = w["X1"], w["X2"], w["P1"], w["P2"]
        mu1, mu2 = ParticleMeasure(x1), ParticleMeasure(x2)
        gx = H.grad_x(x2, p2, mu2) - H.grad_x(x1, p1, mu1)
        gp = H.grad_p(x1, p1, mu1) - H.grad_p(x2, p2, mu2)
        return _mean_dot(gx, x1 - x2) + _mean_dot(gp, p1 - p2)

    def witness(trial, draw):
        w = _pair_witness(trial, draw)
        w["P1"], w["P2"] = w.pop("T1"), w.pop("T2")
        return w

    return _run("displacement_H", pairing, witness, sampler, trials, seed, tol)


def _hess_p(H: HamiltonianSpec, x, p, mu, h):
    if H.hess_p is not None:
        return H.hess_p(x, p, mu)
    m, d = p.shape
    out = np.empty((m, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        out[:, :, k] = (H.grad_p(x, p + e, mu) - H.grad_p(x, p - e, mu)) / (2 * h)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def second_order_expression(H: HamiltonianSpec, x, p, dx, h: float = 1e-4) -> float:
    """Slack of the second-order sufficient condition at one configuration.

    With ``mu`` the law of ``x`` and ``(x~, dx~)`` an independent copy of
    ``(x, dx)``, returns

        -1/4 E|D2pp^{-1/2} E~[D2pmu dx~]|^2 - E[<E~[D2xmu dx~], dx> + <D2xx dx, dx>].

    On an empirical measure ``E~[D2_{.mu}H(x, p, mu, x~) dx~]`` is the
    directional derivative of ``D_.H(x, p, .)`` when every particle ``j``
    of ``mu`` moves along ``dx_j``; it is taken by centred differences.
    """
    mu = ParticleMeasure(x)
    mu_plus, mu_minus = ParticleMeasure(x + h * dx), ParticleMeasure(x - h * dx)
    xmu = (H.grad_x(x, p, mu_plus) - H.grad_x(x, p, mu_minus)) / (2 * h)
    pmu = (H.grad_p(x, p, mu_plus) - H.grad_p(x, p, mu_minus)) / (2 * h)
    xx = (H.grad_x(x + h * dx, p, mu) - H.grad_x(x - h * dx, p, mu)) / (2 * h)
    hpp = _hess_p(H, x, p, mu, h)
    eig = np.linalg.eigvalsh(hpp)
    floor = H.c0 - 1e-6 * max(1.0, H.c0)
    if not np.all(eig.min(axis=1) >= floor) or not H.c0 > 0:
        i = int(np.argmin(eig.min(axis=1)))
        raise SingularHessian(
            f"D2_pp H has eigenvalue {eig[i].min():.4g} < c0 = {H.c0} at x={x[i]}, p={p[i]}"
        )
    quad = np.einsum("ni,ni->n", pmu, np.linalg.solve(hpp, pmu[..., None])[..., 0])
    return float(-0.25 * np.mean(quad) - _mean_dot(xmu, dx) - _mean_dot(xx, dx))


def check_second_order(H: HamiltonianSpec, sampler: SamplerConfig = SamplerConfig(),
                       trials: int = 100, seed: int = 0, tol: float | None = None,
                       h: float = 1e-4) -> MonotonicityReport:
    """min over trials of the second-order slack; pass iff ``>= -tol``."""

    def pairing(w):
        return second_order_expression(H, w["X"], w["P"], w["dX"], h)

    def witness(trial, draw):
        rng, mode, _, x1, _, t1, _ = draw
        dx = rng.normal(size=x1.shape)
        return {"trial": trial, "coupling": mode, "X": x1, "P": t1, "dX": dx, "X1": x1}

    report = _run("second_order", pairing, witness, sampler, trials, seed, tol)
    report.witness.pop("X1", None)
    return report


CHECKERS = {
    "displacement_g": check_displacement_g,
    "lasry_lions": check_lasry_lions,
    "displacement_L": check_displacement_L,
    "displacement_H": check_displacement_H,
    "second_order": check_second_order,
}
