"""Convex risk functionals of terminal payoffs, by three independent routes.

For a terminal payoff F of the particle system and a convex cost g on the
control variable, the value of interest is the g-penalized supremum of
expected payoff over admissible controls.  Three estimators are provided:

* ``rho_log_mgf_mc`` - closed form for quadratic g at noise scale 1/sqrt(n):
  the scaled log-mean-exp of n F over the uncontrolled ensemble.
* ``bsde_lsmc`` - backward least-squares regression along uncontrolled
  forward paths, valid whenever the generator (the conjugate of g) is
  Lipschitz, e.g. any rung of the truncation ladder.
* ``rho_dual_lower`` - direct ascent over a finite-dimensional control
  template.  Every admissible control gives a certified lower bound, so the
  reported value carries a one-sided certificate by construction.

The dual optimizer uses common random numbers: a candidate control is scored
on a frozen noise realization, making the objective a smooth deterministic
function of the parameters that central finite differences handle well.  The
optimum found at reduced fidelity is re-scored at full size on fresh noise,
so selection bias cannot inflate the certified bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from mvlimits._rng import TAG_OPT, step_normals, stream, substream_seed
from mvlimits.costs import CostFunction, truncate_pair
from mvlimits.particles import (
    CoefficientSet,
    ControlField,
    InitSpec,
    ParticleEnsemble,
    TimeGrid,
    simulate_mckv,
)

__all__ = [
    "TerminalFunctional",
    "CallablePayoff",
    "RhoEstimate",
    "RegressionBasisSpec",
    "ControlTemplate",
    "InfeasibleTemplateError",
    "RegressionIllConditioned",
    "log_mean_exp",
    "rho_log_mgf_mc",
    "rho_dual_lower",
    "bsde_lsmc",
    "rho_truncated_sequence",
    "dual_gap_report",
    "TruncationLadder",
    "DualGapReport",
    "trace_to_csv",
]

Z_CI = 1.96  # normal quantile behind every reported half-width

DEFAULT_OPT_PARTICLES = 20_000
DEFAULT_OPT_STEPS = 128
CONDITION_LIMIT = 1e10


class InfeasibleTemplateError(RuntimeError):
    """Every optimizer start produced a non-finite objective."""


class RegressionIllConditioned(RuntimeError):
    """A backward regression exceeded the condition-number threshold."""

    def __init__(self, step: int, cond: float):
        super().__init__(f"regression at step {step} has condition number {cond:.3e}")
        self.step = step
        self.cond = cond


# ---------------------------------------------------------------------------
# terminal payoffs


@dataclass(frozen=True)
class TerminalFunctional:
    """Bounded-continuous payoff F(x, mu) from a small catalog.

    Base families (all clipped to ``+-bound``): ``clipped_poly`` with
    per-coordinate coefficients; ``neg_sq_dist`` -(x-center)^2;
    ``tanh`` amp * tanh(slope * (x - center)); ``constant``.  An optional
    ``mean_coeff * mean(mu)`` term (clipped too) adds measure dependence.
    """

    kind: str = "constant"
    coeffs: tuple = (0.0,)
    center: float = 0.0
    slope: float = 1.0
    amp: float = 1.0
    value: float = 0.0
    mean_coeff: float = 0.0
    bound: float = 1e3

    def __post_init__(self):
        if self.kind not in ("constant", "clipped_poly", "neg_sq_dist", "tanh"):
            raise ValueError(f"unknown terminal functional kind {self.kind!r}")
        if self.bound <= 0:
            raise ValueError("declared bound must be positive")

    @property
    def sup_bound(self) -> float:
        return self.bound * (2.0 if self.mean_coeff != 0.0 else 1.0)

    def values(self, X: np.ndarray, mu_mean=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "constant":
            base = np.full(X.shape[0], self.value)
        elif self.kind == "clipped_poly":
            acc = np.zeros_like(X)
            for c in reversed(self.coeffs):
                acc = acc * X + c
            base = acc.sum(axis=1)
        elif self.kind == "neg_sq_dist":
            base = -((X - self.center) ** 2).sum(axis=1)
        else:
            base = (self.amp * np.tanh(self.slope * (X - self.center))).sum(axis=1)
        out = np.clip(base, -self.bound, self.bound)
        if self.mean_coeff != 0.0:
            if mu_mean is None:
                raise ValueError("payoff with a mean term needs the measure mean")
            out = out + np.clip(self.mean_coeff * float(np.sum(mu_mean)),
                                -self.bound, self.bound)
        return out

    def shifted(self, c: float) -> "TerminalFunctional":
        """F + c, staying inside the catalog (bound widened to fit)."""
        if self.kind == "constant":
            return TerminalFunctional("constant", value=self.value + c,
                                      mean_coeff=self.mean_coeff,
                                      bound=self.bound + abs(c))
        raise ValueError("shifted is only a catalog operation for constants; "
                         "wrap the payoff instead")

    def probe_continuity(self, seed: int = 0, pairs: int = 200, eps: float = 1e-4,
                         dim: int = 1) -> dict:
        """Modulus check on random nearby state pairs."""
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=3.0, size=(pairs, dim))
        dx = rng.normal(size=(pairs, dim))
        dx *= eps / np.linalg.norm(dx, axis=1, keepdims=True)
        gap = np.abs(self.values(x + dx, np.zeros(dim)) - self.values(x, np.zeros(dim)))
        return {"max_gap": float(gap.max()), "eps": eps,
                "continuous": bool(gap.max() <= 1e3 * eps)}


# wrapper for payoffs outside the declarative catalog (tests, composites)
@dataclass(frozen=True)
class CallablePayoff:
    fn: object
    sup_bound: float = math.inf

    def values(self, X, mu_mean=None):
        return np.asarray(self.fn(np.atleast_2d(X), mu_mean), dtype=float)


# ---------------------------------------------------------------------------
# estimates


@dataclass
class RhoEstimate:
    """A numerical value of the risk functional with its uncertainty.

    ``half_width`` is a delta-method confidence half-width for Monte Carlo
    methods and a residual-scale proxy for the regression solver; the
    ``method`` tag says which.  Dual values carry the one-sided certificate.
    """

    value: float
    half_width: float
    method: str  # "closed-form-mgf" | "lsmc" | "dual-lower"
    n_scale: float = 1
    sample_count: int = 0
    certificate: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError("half-width must be nonnegative")
        if self.method == "dual-lower":
            self.certificate = "lower bound"

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "value": self.value,
            "ci": self.half_width,
            "n": self.n_scale,
            "samples": self.sample_count,
        }
        if self.certificate:
            out["certificate"] = self.certificate
        for key in ("seed", "trace", "restart_values"):
            if key in self.diagnostics:
                out[key] = self.diagnostics[key]
        return out


def trace_to_csv(estimate: RhoEstimate, path) -> None:
    """Optimizer trace rows 'iteration,objective' for plotting."""
    trace = estimate.diagnostics.get("trace", [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# primal estimator (quadratic cost family)


def log_mean_exp(values: np.ndarray, scale: float) -> tuple[float, float]:
    """(1/scale) log mean exp(scale * values) with max-subtraction.

    Returns the estimate and a delta-method half-width.  Kept free of library
    shortcuts so an independent re-implementation reproduces it bit for bit.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    shifted = scale * values
    top = np.max(shifted)
    e = np.exp(shifted - top)
    m = np.mean(e)
    value = (np.log(m) + top) / scale
    se = np.std(e) / (m * math.sqrt(n))
    return float(value), float(Z_CI * se / scale)


def rho_log_mgf_mc(F, ens: ParticleEnsemble, n_scale: float = 1) -> RhoEstimate:
    """Scaled log-mean-exp of the terminal payoff over an ensemble.

    Exact representation of the risk functional for the quadratic cost at
    noise scale 1/sqrt(n); the ensemble must have been simulated at that
    scale for the value to mean anything.
    """
    X = ens.final
    if X.shape[0] == 0:
        raise ValueError("empty ensemble")
    vals = F.values(X, X.mean(axis=0))
    value, hw = log_mean_exp(vals, n_scale)
    return RhoEstimate(value=value, half_width=hw, method="closed-form-mgf",
                       n_scale=n_scale, sample_count=X.shape[0],
                       diagnostics={"seed": ens.seed})


# ---------------------------------------------------------------------------
# dual lower bound by control ascent


@dataclass(frozen=True)
class ControlTemplate:
    """Finite-dimensional family of controls the optimizer searches over."""

    mode: str = "open_loop"  # or "feedback"
    cells: int = 20
    cap: float | None = None

    def __post_init__(self):
        if self.mode not in ("open_loop", "feedback"):
            raise ValueError(f"unknown template mode {self.mode!r}")
        if self.cells < 1:
            raise ValueError("need at least one control cell")

    def param_count(self, m: int, d: int) -> int:
        return self.cells * d * (1 + (m if self.mode == "feedback" else 0))

    def build(self, theta: np.ndarray, m: int, d: int, start: float) -> ControlField:
        theta = np.asarray(theta, dtype=float)
        if self.mode == "open_loop":
            return ControlField.open_loop(theta.reshape(self.cells, d),
                                          start=start, cap=self.cap)
        split = self.cells * d
        intercepts = theta[:split].reshape(self.cells, d)
        gains = theta[split:].reshape(self.cells, d, m)
        return ControlField.feedback_affine(intercepts, gains, centered=True,
                                            start=start, cap=self.cap)


def _controlled_score(F, coeffs, grid, init, g, control, n_particles, seed):
    """Mean and SE of payoff minus accumulated running cost, one simulation."""
    dt = grid.dt
    cost = np.zeros(n_particles)

    def accumulate(k, t, X, q, mu_mean):
        if q is not None:
            cost[:] += g.total(q, t=t, x=X, mu_mean=mu_mean) * dt

    ens = simulate_mckv(coeffs, grid, init, n_particles, control=control,
                        seed=seed, retention="final", observer=accumulate)
    payoff = F.values(ens.final, ens.final.mean(axis=0))
    per_particle = payoff - cost
    mean = float(np.mean(per_particle))
    se = float(np.std(per_particle) / math.sqrt(n_particles))
    return mean, se


def _fd_ascent(objective, theta0: np.ndarray, budget: int, step0: float = 0.4,
               fd_h: float = 0.05) -> tuple[np.ndarray, float, list]:
    """Central finite-difference gradient ascent with adaptive step.

    ``objective`` must be deterministic (common random numbers); the budget
    counts objective evaluations.
    """
    theta = theta0.copy()
    best = objective(theta)
    evals = 1
    trace = [best]
    alpha = step0
    dim = theta.size
    while evals + 2 * dim + 1 <= budget and alpha > 1e-6:
        grad = np.empty(dim)
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = fd_h
            grad[i] = (objective(theta + e) - objective(theta - e)) / (2 * fd_h)
            evals += 2
        norm = np.linalg.norm(grad)
        if not np.isfinite(norm) or norm < 1e-12:
            break
        moved = False
        while evals < budget and alpha > 1e-6:
            cand = theta + alpha * grad / max(norm, 1.0)
            val = objective(cand)
            evals += 1
            if np.isfinite(val) and val > best:
                theta, best = cand, val
                trace.append(best)
                alpha *= 1.6
                moved = True
                break
            alpha *= 0.5
        if not moved:
            break
    return theta, best, trace


def rho_dual_lower(F, coeffs: CoefficientSet, grid: TimeGrid, init: InitSpec,
                   g: CostFunction, template: ControlTemplate = ControlTemplate(),
                   budget: int = 3000, seed: int = 0, n_particles: int = 50_000,
                   restarts: int = 5, opt_particles: int | None = None,
                   opt_steps: int | None = None) -> tuple[RhoEstimate, ControlField]:
    """Certified lower bound by ascent over a control template.

    Optimization runs on a frozen reduced-fidelity simulation (common random
    numbers); the winning parameters are then re-scored at the requested
    size on an independent noise stream, which is the reported value.
    """
    if abs(float(g(np.zeros(g.dim)))) > 1e-9:
        raise ValueError("running cost must vanish at zero control")
    m, d = coeffs.state_dim, coeffs.noise_dim
    dim = template.param_count(m, d)
    opt_n = min(opt_particles or DEFAULT_OPT_PARTICLES, n_particles)
    opt_grid = TimeGrid(grid.start, min(opt_steps or DEFAULT_OPT_STEPS, grid.steps))
    crn_seed = substream_seed(seed, 1)

    def crn_objective(theta):
        control = template.build(theta, m, d, grid.start)
        try:
            mean, _ = _controlled_score(F, coeffs, opt_grid, init, g, control,
                                        opt_n, crn_seed)
        except RuntimeError:
            return -math.inf
        return mean

    rng = stream(seed, TAG_OPT)
    starts = [np.zeros(dim)]
    starts += [rng.normal(scale=0.5, size=dim) for _ in range(max(restarts - 1, 0))]
    per_start = max(budget // len(starts), 2 * dim + 2)
    results = []
    trace = []
    for theta0 in starts:
        theta, val, tr = _fd_ascent(crn_objective, theta0, per_start)
        results.append((val, theta))
        trace.extend(tr)
    finite = [r for r in results if np.isfinite(r[0])]
    if not finite:
        raise InfeasibleTemplateError("objective was non-finite on every start")
    best_val, best_theta = max(finite, key=lambda r: r[0])
    control = template.build(best_theta, m, d, grid.start)
    value, se = _controlled_score(F, coeffs, grid, init, g, control,
                                  n_particles, substream_seed(seed, 2))
    est = RhoEstimate(
        value=value, half_width=Z_CI * se, method="dual-lower",
        n_scale=coeffs.noise_scale_n, sample_count=n_particles,
        diagnostics={
            "seed": seed,
            "trace": trace,
            "restart_values": sorted((float(v) for v, _ in finite), reverse=True),
            "crn_objective_at_optimum": float(best_val),
        })
    return est, control


# ---------------------------------------------------------------------------
# backward regression solver


@dataclass(frozen=True)
class RegressionBasisSpec:
    """Regression basis for the backward pass."""

    family: str = "poly"  # or "radial"
    degree: int = 3
    n_centers: int = 7
    ridge: float = 1e-8

    def __post_init__(self):
        if self.family not in ("poly", "radial"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 1:
            raise ValueError("polynomial degree must be at least 1")
        if self.ridge < 0:
            raise ValueError("ridge penalty must be nonnegative")

    def size(self, m: int) -> int:
        if self.family == "poly":
            return 1 + m * self.degree
        return 1 + self.n_centers

    def design(self, X: np.ndarray) -> np.ndarray:
        n, m = X.shape
        if self.family == "poly":
            cols = [np.ones(n)]
            for j in range(m):
                for deg in range(1, self.degree + 1):
                    cols.append(X[:, j] ** deg)
            return np.column_stack(cols)
        qs = np.linspace(0.05, 0.95, self.n_centers)
        centers = np.quantile(X[:, 0], qs)
        h = max((centers[-1] - centers[0]) / max(self.n_centers - 1, 1), 1e-8)
        cols = [np.ones(n)]
        for c in centers:
            cols.append(np.exp(-((X[:, 0] - c) ** 2) / (2 * h * h)))
        return np.column_stack(cols)


def _ridge_fit(design: np.ndarray, targets: np.ndarray, ridge: float,
               step: int) -> tuple[np.ndarray, float]:
    """Least squares with scaled ridge; returns fitted values and cond number."""
    scale = np.linalg.norm(design, axis=0) / math.sqrt(design.shape[0])
    scale[scale < 1e-12] = 1.0
    A = design / scale
    gram = A.T @ A / A.shape[0] + ridge * np.eye(A.shape[1])
    cond = float(np.linalg.cond(gram))
    if cond > CONDITION_LIMIT:
        raise RegressionIllConditioned(step, cond)
    rhs = A.T @ targets / A.shape[0]
    coef = np.linalg.solve(gram, rhs)
    return A @ coef, cond


def bsde_lsmc(F, coeffs: CoefficientSet, grid: TimeGrid, generator: CostFunction,
              basis: RegressionBasisSpec = RegressionBasisSpec(),
              n_particles: int = 50_000, seed: int = 0,
              init: InitSpec | None = None) -> RhoEstimate:
    """Backward least-squares Monte Carlo along uncontrolled forward paths.

    At each step the continuation is projected on the basis and the
    integrand control variable comes from the martingale-increment
    projection; the generator (Lipschitz, e.g. a truncation rung) is then
    integrated explicitly.  Forward increments are regenerated from their
    counter-based streams instead of being stored.
    """
    init = init or InitSpec.point_mass(np.zeros(coeffs.state_dim))
    m, d = coeffs.state_dim, coeffs.noise_dim
    if n_particles < basis.size(m) * 50:
        raise ValueError("need at least 50 samples per basis function")
    ens = simulate_mckv(coeffs, grid, init, n_particles, seed=seed, retention="full")
    dt = grid.dt
    nodes = grid.nodes
    root_dt = math.sqrt(dt)
    X_T = ens.at(grid.steps)
    Y = F.values(X_T, X_T.mean(axis=0))
    se_terminal = float(np.std(Y) / math.sqrt(n_particles))
    worst_cond = 0.0
    resid_acc = 0.0
    for k in range(grid.steps - 1, -1, -1):
        X = ens.at(k)
        mu_mean = X.mean(axis=0)
        dw = step_normals(seed, k, (n_particles, d)) * root_dt
        degenerate = bool(np.all(np.ptp(X, axis=0) < 1e-12))
        if degenerate:
            cont = np.full(n_particles, Y.mean())
            resid = Y - cont
            Z = (dw * resid[:, None]).mean(axis=0, keepdims=True) / dt
            Z = np.broadcast_to(Z, (n_particles, d))
        else:
            design = basis.design(X)
            cont, cond = _ridge_fit(design, Y, basis.ridge, k)
            worst_cond = max(worst_cond, cond)
            resid = Y - cont  # centering the increment tames the 1/dt variance
            resid_acc += float(np.mean(resid ** 2))
            Z = np.empty((n_particles, d))
            for j in range(d):
                Z[:, j], _ = _ridge_fit(design, resid * dw[:, j] / dt, basis.ridge, k)
        Y = cont + generator.total(Z, t=nodes[k], x=X, mu_mean=mu_mean) * dt
    value = float(np.mean(Y))
    return RhoEstimate(
        value=value, half_width=Z_CI * se_terminal, method="lsmc",
        n_scale=coeffs.noise_scale_n, sample_count=n_particles,
        diagnostics={
            "seed": seed,
            "mean_sq_residual": resid_acc / max(grid.steps, 1),
            "worst_condition": worst_cond,
        })


# ---------------------------------------------------------------------------
# truncation ladder and duality gap


@dataclass
class TruncationLadder:
    rows: list  # (radius, RhoEstimate)

    def values(self) -> np.ndarray:
        return np.array([est.value for _, est in self.rows])

    def nondecreasing_within(self, slack_factor: float = 2.0) -> bool:
        """Empirical monotonicity, allowing per-step CI-sized dips."""
        ok = True
        for (_, a), (_, b) in zip(self.rows, self.rows[1:]):
            slack = slack_factor * (a.half_width + b.half_width)
            ok &= b.value >= a.value - slack
        return ok


def rho_truncated_sequence(F, coeffs: CoefficientSet, grid: TimeGrid,
                           g: CostFunction, radii, method: str = "lsmc",
                           seed: int = 0, init: InitSpec | None = None,
                           n_particles: int = 50_000,
                           basis: RegressionBasisSpec = RegressionBasisSpec(),
                           template: ControlTemplate = ControlTemplate(),
                           budget: int = 3000,
                           opt_particles: int | None = None) -> TruncationLadder:
    """Risk values along the truncation ladder of the cost.

    Each rung bounds the dual variable by the radius: the regression route
    uses the truncated conjugate as its generator, the dual route caps the
    control template (the truncated cost agrees with g inside the ball).
    """
    radii = list(radii)
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("truncation radii must be strictly increasing")
    init = init or InitSpec.point_mass(np.zeros(coeffs.state_dim))
    rows = []
    for i, radius in enumerate(radii):
        if method == "lsmc":
            pair = truncate_pair(g, radius)
            est = bsde_lsmc(F, coeffs, grid, pair.primal, basis=basis,
                            n_particles=n_particles, seed=substream_seed(seed, i),
                            init=init)
        elif method == "dual":
            capped = ControlTemplate(template.mode, template.cells, cap=float(radius))
            est, _ = rho_dual_lower(F, coeffs, grid, init, g, template=capped,
                                    budget=budget, seed=substream_seed(seed, i),
                                    n_particles=n_particles,
                                    opt_particles=opt_particles)
        else:
            raise ValueError("method must be 'lsmc' or 'dual'")
        rows.append((radius, est))
    return TruncationLadder(rows=rows)


@dataclass
class DualGapReport:
    primal: RhoEstimate
    dual: RhoEstimate
    gap: float
    combined_half_width: float
    certificate_ok: bool


def dual_gap_report(F, coeffs: CoefficientSet, grid: TimeGrid, init: InitSpec,
                    g: CostFunction, seed: int = 0, n_particles: int = 200_000,
                    budget: int = 3000, template: ControlTemplate = ControlTemplate(),
                    opt_particles: int | None = None) -> DualGapReport:
    """Primal value, dual lower bound, and their gap, for the quadratic cost.

    Only the quadratic family has the independent primal oracle, so the gap
    here is a genuine two-sided diagnostic: nonnegative up to noise, small
    at converged budgets.
    """
    if g.kind != "quadratic":
        raise ValueError("the primal oracle requires a quadratic cost")
    n = coeffs.noise_scale_n
    ens = simulate_mckv(coeffs, grid, init, n_particles,
                        seed=substream_seed(seed, 10), retention="final")
    # quadratic cost with scale s at noise 1/sqrt(n) exponentiates at rate n/s
    primal = rho_log_mgf_mc(F, ens, n_scale=n / g.scale)
    dual, _ = rho_dual_lower(F, coeffs, grid, init, g, template=template,
                             budget=budget, seed=seed, n_particles=n_particles,
                             opt_particles=opt_particles)
    gap = primal.value - dual.value
    combined = primal.half_width + dual.half_width
    return DualGapReport(primal=primal, dual=dual, gap=gap,
                         combined_half_width=combined,
                         certificate_ok=gap >= -3.0 * combined)
