"""Interacting particle systems for (controlled) mean-field SDEs.

The engine advances N coupled particles with an explicit Euler-Maruyama
step whose coefficients may depend on the running empirical law,

    X_{k+1} = X_k + [b(t_k, X_k, L_k) + sigma(t_k, X_k, L_k) q_k] * dt
                  + sigma(t_k, X_k, L_k) * sqrt(dt / n) * Z_k,

where L_k is the same-step empirical measure, q_k an optional control and
1/sqrt(n) the noise scale.  Noise is drawn from counter-based streams keyed
by (seed, step, particle), so a run is bit-reproducible from its seed and
increments can be regenerated on demand (the backward regression solver
relies on this).

Also here: exact 2-Wasserstein distances between uniform point clouds
(sorted/quantile coupling in one dimension, optimal assignment in several)
and a mean-field convergence report over a ladder of particle counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from mvlimits._rng import TAG_INIT, TAG_PROBE, step_normals, stream, substream_seed

__all__ = [
    "SimulationError",
    "TimeGrid",
    "ZeroDrift",
    "LinearMeanFieldDrift",
    "ClippedPolynomialDrift",
    "ConstantDiffusion",
    "TanhDiffusion",
    "CoefficientSet",
    "InitSpec",
    "ControlField",
    "ParticleEnsemble",
    "EmpiricalMeasure",
    "simulate_mckv",
    "empirical_measure",
    "wasserstein2",
    "chaos_report",
    "ensemble_to_csv",
]

ASSIGNMENT_CAP = 512  # exact multi-D coupling is O(N^3); keep clouds small


class SimulationError(RuntimeError):
    """A particle state left the finite range; carries the failing step."""

    def __init__(self, step: int, message: str = "non-finite particle state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [start, 1] with K cells."""

    start: float = 0.0
    steps: int = 512

    def __post_init__(self):
        if not 0.0 <= self.start < 1.0:
            raise ValueError("start must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("need at least one time step")

    @property
    def dt(self) -> float:
        return (1.0 - self.start) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.start + self.dt * np.arange(self.steps + 1)


def _tval(v, t: float) -> float:
    """Scalar coefficient or piecewise-constant table over [0, 1]."""
    if np.ndim(v) == 0:
        return float(v)
    tab = np.asarray(v, dtype=float)
    k = min(int(t * len(tab)), len(tab) - 1)
    return float(tab[k])


# ---------------------------------------------------------------------------
# drift catalog


@dataclass(frozen=True)
class ZeroDrift:
    def __call__(self, t, X, mu_mean):
        return np.zeros_like(X)

    lipschitz = 0.0
    bounded = True


@dataclass(frozen=True)
class LinearMeanFieldDrift:
    """b(t, x, mu) = alpha(t) + beta(t) x + gamma(t) mean(mu).

    Coefficients are scalars or piecewise-constant tables.  Linear growth
    only; the boundedness probe does not apply to this entry.
    """

    alpha: float | tuple = 0.0
    beta: float | tuple = 0.0
    gamma: float | tuple = 0.0

    def __call__(self, t, X, mu_mean):
        return (_tval(self.alpha, t) + _tval(self.beta, t) * X
                + _tval(self.gamma, t) * mu_mean)

    @property
    def lipschitz(self) -> float:
        mx = lambda v: float(np.max(np.abs(v)))
        return max(mx(self.beta), mx(self.gamma))

    bounded = False


@dataclass(frozen=True)
class ClippedPolynomialDrift:
    """Coordinatewise polynomial clipped to +-bound (bounded, Lipschitz)."""

    coeffs: tuple = (0.0,)
    bound: float = 10.0

    def __post_init__(self):
        if self.bound <= 0:
            raise ValueError("clip bound must be positive")

    def __call__(self, t, X, mu_mean):
        acc = np.zeros_like(X)
        for c in reversed(self.coeffs):
            acc = acc * X + c
        return np.clip(acc, -self.bound, self.bound)

    @property
    def lipschitz(self) -> float:
        # crude but sufficient: max |poly'| over the pre-clip range [-R, R]
        r = np.linspace(-20, 20, 4001)
        dacc = np.zeros_like(r)
        for i, c in enumerate(self.coeffs):
            if i >= 1:
                dacc += i * c * r ** (i - 1)
        return float(np.max(np.abs(dacc)))

    bounded = True


# ---------------------------------------------------------------------------
# diffusion catalog


@dataclass(eq=False)
class ConstantDiffusion:
    """Constant matrix sigma in R^{m x d}."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        self.matrix.setflags(write=False)

    @classmethod
    def scalar(cls, value: float, dim: int = 1) -> "ConstantDiffusion":
        return cls(value * np.eye(dim))

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.matrix.shape[1]

    def apply(self, t, X, mu_mean, V):
        return V @ self.matrix.T

    def matrix_at(self, t, x, mu_mean) -> np.ndarray:
        return self.matrix

    def min_ellipticity(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix @ self.matrix.T).min())

    constant = True


@dataclass(frozen=True)
class TanhDiffusion:
    """Scalar bounded-Lipschitz entry: base + amp_x tanh(x) + amp_mean tanh(mean)."""

    base: float = 1.0
    amp_x: float = 0.0
    amp_mean: float = 0.0

    def __post_init__(self):
        if self.base - abs(self.amp_x) - abs(self.amp_mean) <= 0:
            raise ValueError("diffusion entry loses ellipticity")

    state_dim = 1
    noise_dim = 1
    constant = False

    def _sigma(self, X, mu_mean):
        return self.base + self.amp_x * np.tanh(X) + self.amp_mean * np.tanh(mu_mean)

    def apply(self, t, X, mu_mean, V):
        return self._sigma(X, mu_mean) * V

    def matrix_at(self, t, x, mu_mean) -> np.ndarray:
        return np.atleast_2d(self._sigma(np.asarray(x, dtype=float), mu_mean))

    def min_ellipticity(self) -> float:
        return (self.base - abs(self.amp_x) - abs(self.amp_mean)) ** 2


# ---------------------------------------------------------------------------
# coefficient bundle


@dataclass(eq=False)
class CoefficientSet:
    """Drift and diffusion with noise scale and declared regularity.

    ``noise_scale_n`` is the integer n in the 1/sqrt(n) noise factor;
    ``math.inf`` switches the noise off entirely (zero-noise limit) while
    keeping the control channel through sigma open.
    """

    drift: object
    diffusion: object
    noise_scale_n: float = 1
    ell_b: float | None = None
    c2: float = 0.0  # declared ellipticity constant; 0 means no claim

    def __post_init__(self):
        n = self.noise_scale_n
        if not (n == math.inf or (float(n).is_integer() and n >= 1)):
            raise ValueError("noise scale index must be a positive integer or inf")
        if self.ell_b is None:
            self.ell_b = getattr(self.drift, "lipschitz", 0.0)
        if self.c2 > 0 and self.diffusion.constant and self.diffusion.min_ellipticity() < self.c2:
            raise ValueError(
                f"sigma sigma^T smallest eigenvalue {self.diffusion.min_ellipticity():.3e} "
                f"is below the declared ellipticity constant {self.c2:.3e}")

    @property
    def state_dim(self) -> int:
        return self.diffusion.state_dim

    @property
    def noise_dim(self) -> int:
        return self.diffusion.noise_dim

    def with_noise_scale(self, n) -> "CoefficientSet":
        return CoefficientSet(self.drift, self.diffusion, n, self.ell_b, self.c2)

    def probe_lipschitz(self, seed: int = 0, pairs: int = 1000, cloud: int = 16) -> dict:
        """Randomized two-point check of the declared drift Lipschitz constant.

        Draws probe pairs of (state, small point cloud), compares drift
        increments against ell_b * (|x - x'| + W2(mu, mu')).  The boundedness
        probe is skipped (and said so) for the linear-growth entry.
        """
        rng = stream(seed, TAG_PROBE)
        m = self.state_dim
        worst = 0.0
        sup_norm = 0.0
        for _ in range(pairs):
            x = rng.normal(scale=3.0, size=(1, m))
            xp = rng.normal(scale=3.0, size=(1, m))
            cl = rng.normal(scale=2.0, size=(cloud, m))
            clp = rng.normal(scale=2.0, size=(cloud, m))
            t = rng.uniform()
            bx = self.drift(t, x, cl.mean(axis=0))
            bxp = self.drift(t, xp, clp.mean(axis=0))
            num = float(np.linalg.norm(bx - bxp))
            den = float(np.linalg.norm(x - xp)) + wasserstein2(
                EmpiricalMeasure(cl), EmpiricalMeasure(clp))
            if den > 1e-12:
                worst = max(worst, num / den)
            sup_norm = max(sup_norm, float(np.linalg.norm(bx)))
        bounded = getattr(self.drift, "bounded", False)
        return {
            "max_ratio": worst,
            "declared": self.ell_b,
            "passed": worst <= self.ell_b * (1 + 1e-9) + 1e-12,
            "pairs": pairs,
            "boundedness_checked": bounded,
            "observed_sup": sup_norm if bounded else None,
        }


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True)
class InitSpec:
    """Point mass, Gaussian sampler, or a finite family of atoms."""

    kind: str
    point: tuple = (0.0,)
    mean: float = 0.0
    std: float = 1.0
    atoms: tuple = ()
    weights: tuple | None = None
    dim: int = 1

    @classmethod
    def point_mass(cls, x) -> "InitSpec":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls("point", point=tuple(x), dim=len(x))

    @classmethod
    def normal(cls, mean: float = 0.0, std: float = 1.0, dim: int = 1) -> "InitSpec":
        if std < 0:
            raise ValueError("std must be nonnegative")
        return cls("normal", mean=mean, std=std, dim=dim)

    @classmethod
    def discrete(cls, atoms, weights=None) -> "InitSpec":
        pts = np.atleast_2d(np.asarray(atoms, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("need at least one atom")
        if weights is not None:
            w = np.asarray(weights, dtype=float)
            if w.shape != (pts.shape[0],) or abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
                raise ValueError("weights must be a probability vector over the atoms")
            weights = tuple(w)
        return cls("atoms", atoms=tuple(map(tuple, pts)), weights=weights, dim=pts.shape[1])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "point":
            return np.tile(np.asarray(self.point, dtype=float), (n, 1))
        if self.kind == "normal":
            return self.mean + self.std * rng.standard_normal((n, self.dim))
        if self.kind == "atoms":
            pts = np.asarray(self.atoms, dtype=float)
            idx = rng.choice(len(pts), size=n, p=self.weights)
            return pts[idx]
        raise ValueError(f"unknown init kind {self.kind!r}")

    def support(self) -> np.ndarray | None:
        """Atoms with weights for discrete laws, else None."""
        if self.kind == "point":
            return np.array([self.point])
        if self.kind == "atoms":
            return np.asarray(self.atoms, dtype=float)
        return None

    def atom_weights(self) -> np.ndarray | None:
        sup = self.support()
        if sup is None:
            return None
        if self.kind == "point":
            return np.array([1.0])
        if self.weights is not None:
            return np.asarray(self.weights)
        return np.full(len(sup), 1.0 / len(sup))


# ---------------------------------------------------------------------------
# controls


@dataclass(eq=False)
class ControlField:
    """Dual-side control in one of three parameterizations.

    * ``open_loop``: one vector per control cell, deterministic in time.
    * ``feedback``: per-cell affine map of the state, optionally centered at
      the running ensemble mean (better conditioned for optimizers).
    * ``per_sample``: an explicit vector per particle per step, tied to a
      specific grid.

    A ``cap`` projects every value onto the ball of that radius, realizing
    the bounded admissible class used by the truncation ladder.
    """

    mode: str
    values: np.ndarray | None = None       # open_loop (C, d) / per_sample (K, N, d)
    intercepts: np.ndarray | None = None   # feedback (C, d)
    gains: np.ndarray | None = None        # feedback (C, d, m)
    centered: bool = True
    start: float = 0.0
    cap: float | None = None

    @classmethod
    def open_loop(cls, values, start: float = 0.0, cap: float | None = None) -> "ControlField":
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        return cls("open_loop", values=values, start=start, cap=cap)

    @classmethod
    def feedback_affine(cls, intercepts, gains, centered: bool = True,
                        start: float = 0.0, cap: float | None = None) -> "ControlField":
        intercepts = np.atleast_2d(np.asarray(intercepts, dtype=float))
        gains = np.asarray(gains, dtype=float)
        if gains.ndim == 1:
            gains = gains[:, None, None]
        if not (np.all(np.isfinite(intercepts)) and np.all(np.isfinite(gains))):
            raise ValueError("control parameters must be finite")
        if gains.shape[0] != intercepts.shape[0] or gains.shape[1] != intercepts.shape[1]:
            raise ValueError("feedback gains do not match intercepts")
        return cls("feedback", intercepts=intercepts, gains=gains, centered=centered,
                   start=start, cap=cap)

    @classmethod
    def per_sample(cls, values, start: float = 0.0, cap: float | None = None) -> "ControlField":
        values = np.asarray(values, dtype=float)
        if values.ndim != 3:
            raise ValueError("per-sample controls have shape (steps, particles, d)")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        return cls("per_sample", values=values, start=start, cap=cap)

    def _cell(self, t: float, cells: int) -> int:
        frac = (t - self.start) / max(1.0 - self.start, 1e-300)
        return min(max(int(frac * cells), 0), cells - 1)

    def at(self, t: float, X: np.ndarray, mu_mean: np.ndarray,
           step: int | None = None, total_steps: int | None = None) -> np.ndarray:
        n = X.shape[0]
        if self.mode == "open_loop":
            q = np.broadcast_to(self.values[self._cell(t, self.values.shape[0])], (n, self.values.shape[1]))
        elif self.mode == "feedback":
            c = self._cell(t, self.intercepts.shape[0])
            center = mu_mean if self.centered else 0.0
            q = self.intercepts[c] + (X - center) @ self.gains[c].T
        else:
            if total_steps is not None and self.values.shape[0] != total_steps:
                raise ValueError("per-sample control does not match the time grid")
            if self.values.shape[1] != n:
                raise ValueError("per-sample control does not match the particle count")
            q = self.values[step]
        if self.cap is not None:
            norms = np.linalg.norm(q, axis=-1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                scale = np.where(norms > self.cap, self.cap / norms, 1.0)
            q = q * scale
        return np.ascontiguousarray(q, dtype=float)


# ---------------------------------------------------------------------------
# ensembles and measures


@dataclass(eq=False)
class EmpiricalMeasure:
    """Uniformly weighted point cloud."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def weights(self) -> np.ndarray:
        n = self.points.shape[0]
        return np.full(n, 1.0 / n)

    @property
    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(eq=False)
class ParticleEnsemble:
    """States of an interacting particle run.

    ``states`` has shape (K+1, N, m) under full retention and (1, N, m)
    when only the terminal cloud is kept.
    """

    states: np.ndarray
    grid: TimeGrid
    seed: int
    retention: str = "full"

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, k: int) -> np.ndarray:
        if self.retention == "final":
            if k != self.grid.steps:
                raise ValueError("only the terminal cloud was retained")
            return self.states[0]
        if not 0 <= k <= self.grid.steps:
            raise ValueError(f"time index {k} outside the grid")
        return self.states[k]


def simulate_mckv(coeffs: CoefficientSet, grid: TimeGrid, init: InitSpec,
                  n_particles: int, control: ControlField | None = None,
                  seed: int = 0, retention: str = "full",
                  observer=None) -> ParticleEnsemble:
    """Euler-Maruyama run of the (controlled) mean-field particle system.

    The optional ``observer(k, t, X, q, mu_mean)`` fires once per step with
    the pre-update state, which is how running costs are accumulated without
    retaining whole paths.  Deterministic given (inputs, seed).
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if retention not in ("full", "final"):
        raise ValueError("retention must be 'full' or 'final'")
    if init.dim != coeffs.state_dim:
        raise ValueError("initial condition dimension does not match the coefficients")
    m, d = coeffs.state_dim, coeffs.noise_dim
    k_steps, dt = grid.steps, grid.dt
    X = init.sample(n_particles, stream(seed, TAG_INIT))
    nodes = grid.nodes
    noise_on = coeffs.noise_scale_n != math.inf
    root_scale = math.sqrt(dt) / math.sqrt(coeffs.noise_scale_n) if noise_on else 0.0
    store = np.empty((k_steps + 1, n_particles, m)) if retention == "full" else None
    if store is not None:
        store[0] = X
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is caught below
        for k in range(k_steps):
            t = nodes[k]
            mu_mean = X.mean(axis=0)
            drift = coeffs.drift(t, X, mu_mean)
            q = None
            if control is not None:
                q = control.at(t, X, mu_mean, step=k, total_steps=k_steps)
                drift = drift + coeffs.diffusion.apply(t, X, mu_mean, q)
            if observer is not None:
                observer(k, t, X, q, mu_mean)
            step = drift * dt
            if noise_on:
                z = step_normals(seed, k, (n_particles, d))
                step = step + coeffs.diffusion.apply(t, X, mu_mean, z) * root_scale
            X = X + step
            if not np.all(np.isfinite(X)):
                raise SimulationError(k)
            if store is not None:
                store[k + 1] = X
    states = store if store is not None else X[None, :, :]
    return ParticleEnsemble(states=states, grid=grid, seed=seed, retention=retention)


def empirical_measure(ens: ParticleEnsemble, k: int) -> EmpiricalMeasure:
    """Uniform point cloud of the ensemble at time node k."""
    return EmpiricalMeasure(ens.at(k))


# ---------------------------------------------------------------------------
# exact 2-Wasserstein distances


def _w2_sorted_1d(x: np.ndarray, y: np.ndarray) -> float:
    n, m = len(x), len(y)
    xs, ys = np.sort(x), np.sort(y)
    if n == m:
        return float(np.sqrt(np.mean((xs - ys) ** 2)))
    # quantile coupling on the merged breakpoints of the two step inverses
    edges = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate([[0.0], edges, [1.0]])
    lengths = np.diff(edges)
    mids = (edges[:-1] + edges[1:]) / 2
    xi = np.minimum((mids * n).astype(int), n - 1)
    yi = np.minimum((mids * m).astype(int), m - 1)
    return float(np.sqrt(np.sum(lengths * (xs[xi] - ys[yi]) ** 2)))


def wasserstein2(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exact W2 between uniform clouds.

    One-dimensional clouds of any sizes couple through their quantile
    functions; in higher dimension equal-size clouds up to 512 points are
    matched by optimal assignment.  Larger or unequal multi-D clouds are
    rejected; subsample to equal size first.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.dim == 1:
        return _w2_sorted_1d(a.points[:, 0], b.points[:, 0])
    if len(a) != len(b):
        raise ValueError("multi-D exact coupling needs equal-size clouds; subsample first")
    if len(a) > ASSIGNMENT_CAP:
        raise ValueError(
            f"multi-D clouds above {ASSIGNMENT_CAP} points exceed the exact solver; subsample")
    from scipy.optimize import linear_sum_assignment

    # fix the orientation so w2(a, b) and w2(b, a) run the identical float path
    if a.points.tobytes() > b.points.tobytes():
        a, b = b, a
    diff = a.points[:, None, :] - b.points[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


# ---------------------------------------------------------------------------
# mean-field convergence report


@dataclass
class ChaosRow:
    n_particles: int
    w2_to_reference: float


@dataclass
class ChaosReport:
    rows: list
    slope: float | None
    n_reference: int

    def distances(self) -> np.ndarray:
        return np.array([r.w2_to_reference for r in self.rows])


def chaos_report(coeffs: CoefficientSet, grid: TimeGrid, init: InitSpec,
                 n_list, n_ref: int, seed: int = 0) -> ChaosReport:
    """Terminal-law W2 distances to a large reference run, over a ladder of N.

    Each run uses an independent derived seed.  The log-log slope of distance
    against particle count is fitted when all distances are positive.
    """
    n_list = [int(n) for n in n_list]
    if n_ref <= max(n_list):
        raise ValueError("reference particle count must exceed every ladder entry")
    ref = simulate_mckv(coeffs, grid, init, n_ref,
                        seed=substream_seed(seed, 0), retention="final")
    ref_cloud = EmpiricalMeasure(ref.final)
    rows = []
    for i, n in enumerate(n_list, start=1):
        ens = simulate_mckv(coeffs, grid, init, n,
                            seed=substream_seed(seed, i), retention="final")
        rows.append(ChaosRow(n, wasserstein2(EmpiricalMeasure(ens.final), ref_cloud)))
    dists = np.array([r.w2_to_reference for r in rows])
    slope = None
    if len(rows) >= 2 and np.all(dists > 0):
        slope = float(np.polyfit(np.log(n_list), np.log(dists), 1)[0])
    return ChaosReport(rows=rows, slope=slope, n_reference=n_ref)


def ensemble_to_csv(ens: ParticleEnsemble, path) -> None:
    """Rows 'particle,time,x1..xm' for every retained node."""
    nodes = ens.grid.nodes if ens.retention == "full" else ens.grid.nodes[-1:]
    m = ens.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "time"] + [f"x{j + 1}" for j in range(m)])
        for k, t in enumerate(nodes):
            for i in range(ens.n_particles):
                w.writerow([i, repr(float(t))] + [repr(float(v)) for v in ens.states[k, i]])
