"""Zero-noise control problems: the limits the stochastic estimators approach.

A single deterministic characteristic follows the controlled ODE

    dPhi/dt = b(t, Phi, delta_Phi) + sigma(t, Phi, delta_Phi) phi(t),

with the measure argument frozen at the point mass of the current state.
The module maximizes terminal payoff minus accumulated control cost over
piecewise-constant open-loop controls, reconstructs the minimal control
energy needed to follow a given path (infinite when the path leaves the
range of sigma), and solves the random-start variant where a cloud of
characteristics is transported by one feedback field and the payoff averages
over the transported empirical law.

Controls are piecewise constant on their own cell grid; keeping simulation
cells an integer multiple of control cells makes the cost integral exact
cell by cell for state-free costs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from mvlimits._rng import TAG_INIT, TAG_OPT, stream
from mvlimits.costs import CostFunction
from mvlimits.particles import (
    CoefficientSet,
    ControlField,
    InitSpec,
    SimulationError,
    TimeGrid,
)

__all__ = [
    "ControlVector",
    "FeedbackField",
    "DeterministicPath",
    "ActionValue",
    "RateValue",
    "EllipticityError",
    "integrate_ode",
    "action_value",
    "maximize_action",
    "rate_function",
    "flow_value_random_init",
    "control_to_csv",
    "path_to_csv",
]

UNREACHABLE_RTOL = 1e-6  # least-squares residual threshold for the +inf flag


class EllipticityError(ValueError):
    """The diffusion matrix violates its declared ellipticity constant."""


@dataclass(eq=False)
class ControlVector:
    """Open-loop control, one vector per cell of [start, 1]."""

    values: np.ndarray  # (cells, d)
    start: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")

    @property
    def cells(self) -> int:
        return self.values.shape[0]

    def at(self, t: float) -> np.ndarray:
        frac = (t - self.start) / max(1.0 - self.start, 1e-300)
        return self.values[min(max(int(frac * self.cells), 0), self.cells - 1)]

    def energy(self) -> float:
        """Squared-norm integral sum(|phi_k|^2 dt)."""
        dt = (1.0 - self.start) / self.cells
        return float(np.sum(self.values ** 2) * dt)

    def as_control_field(self, cap: float | None = None) -> ControlField:
        return ControlField.open_loop(self.values, start=self.start, cap=cap)


@dataclass(eq=False)
class FeedbackField:
    """Per-cell affine state feedback, centered at the transported mean."""

    intercepts: np.ndarray  # (cells, d)
    gains: np.ndarray       # (cells, d, m)
    start: float = 0.0

    def __post_init__(self):
        self.intercepts = np.atleast_2d(np.asarray(self.intercepts, dtype=float))
        self.gains = np.asarray(self.gains, dtype=float)
        if not (np.all(np.isfinite(self.intercepts)) and np.all(np.isfinite(self.gains))):
            raise ValueError("feedback parameters must be finite")

    @property
    def cells(self) -> int:
        return self.intercepts.shape[0]

    def at(self, t: float, X: np.ndarray, mu_mean) -> np.ndarray:
        frac = (t - self.start) / max(1.0 - self.start, 1e-300)
        c = min(max(int(frac * self.cells), 0), self.cells - 1)
        return self.intercepts[c] + (X - mu_mean) @ self.gains[c].T


@dataclass(eq=False)
class DeterministicPath:
    states: np.ndarray  # (K+1, m)
    grid: TimeGrid

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class ActionValue:
    payoff: float
    running_cost: float

    @property
    def total(self) -> float:
        return self.payoff - self.running_cost


@dataclass
class RateValue:
    value: float
    unreachable: bool
    worst_residual: float

    def __float__(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# integration


def _field(coeffs: CoefficientSet, t: float, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    X = x[None, :]
    out = coeffs.drift(t, X, x) + coeffs.diffusion.apply(t, X, x, phi[None, :])
    return out[0]


def integrate_ode(coeffs: CoefficientSet, grid: TimeGrid, x0,
                  control: ControlVector) -> DeterministicPath:
    """Classical fourth-order integration of the controlled characteristic."""
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    if x.shape[0] != coeffs.state_dim:
        raise ValueError("initial state dimension does not match the coefficients")
    dt = grid.dt
    nodes = grid.nodes
    states = np.empty((grid.steps + 1, x.shape[0]))
    states[0] = x
    for k in range(grid.steps):
        t = nodes[k]
        # one control cell per step: look the cell up at the step midpoint so
        # a step never straddles the jump at its own right endpoint
        phi = control.at(t + dt / 2)
        k1 = _field(coeffs, t, x, phi)
        k2 = _field(coeffs, t + dt / 2, x + dt * k1 / 2, phi)
        k3 = _field(coeffs, t + dt / 2, x + dt * k2 / 2, phi)
        k4 = _field(coeffs, t + dt, x + dt * k3, phi)
        x = x + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if not np.all(np.isfinite(x)):
            raise SimulationError(k)
        states[k + 1] = x
    return DeterministicPath(states=states, grid=grid)


def action_value(path: DeterministicPath, control: ControlVector, F,
                 g: CostFunction) -> ActionValue:
    """Terminal payoff minus the cell-summed running cost along the path."""
    grid = path.grid
    dt = grid.dt
    terminal = path.final
    payoff = float(F.values(terminal[None, :], terminal)[0])
    cost = 0.0
    for k in range(grid.steps):
        t = grid.nodes[k]
        phi = control.at(t + dt / 2)
        x = path.states[k]
        cost += float(g.total(phi[None, :], t=t, x=x[None, :], mu_mean=x)[0]) * dt
    return ActionValue(payoff=payoff, running_cost=cost)


# ---------------------------------------------------------------------------
# action maximization


def _nm_multistart(objective, dim: int, budget: int, restarts: int, seed: int,
                   spread: float = 1.0):
    rng = stream(seed, TAG_OPT)
    starts = [np.zeros(dim)]
    starts += [rng.normal(scale=spread, size=dim) for _ in range(max(restarts - 1, 0))]
    per_start = max((3 * budget) // (4 * len(starts)), 50)
    best_val, best_theta, values = -math.inf, starts[0], []
    for theta0 in starts:
        res = minimize(lambda th: -objective(th), theta0, method="Nelder-Mead",
                       options={"maxfev": per_start, "xatol": 1e-7, "fatol": 1e-11})
        val = -res.fun
        values.append(float(val))
        if np.isfinite(val) and val > best_val:
            best_val, best_theta = val, res.x
    if not np.isfinite(best_val):
        raise RuntimeError("every optimizer start diverged")
    # restarting from the incumbent with a fresh simplex polishes stalled runs
    res = minimize(lambda th: -objective(th), best_theta, method="Nelder-Mead",
                   options={"maxfev": max(budget // 4, 50),
                            "xatol": 1e-8, "fatol": 1e-12})
    if np.isfinite(-res.fun) and -res.fun > best_val:
        best_val, best_theta = -res.fun, res.x
    return best_theta, best_val, sorted(values, reverse=True)


def maximize_action(coeffs: CoefficientSet, grid: TimeGrid, x0, F, g: CostFunction,
                    budget: int = 20_000, restarts: int = 5, cells: int = 20,
                    seed: int = 0) -> tuple[ActionValue, ControlVector, dict]:
    """Best piecewise-constant control of the deterministic characteristic.

    Derivative-free (Nelder-Mead) multistart search over cells x d control
    parameters; the spread of the restart optima is reported as a
    local-optimum diagnostic.
    """
    if budget < 1:
        raise ValueError("optimizer budget must be positive")
    d = coeffs.noise_dim

    def objective(theta):
        control = ControlVector(theta.reshape(cells, d), start=grid.start)
        try:
            path = integrate_ode(coeffs, grid, x0, control)
        except SimulationError:
            return -math.inf
        return action_value(path, control, F, g).total

    theta, _, restart_values = _nm_multistart(objective, cells * d, budget,
                                              restarts, seed)
    control = ControlVector(theta.reshape(cells, d), start=grid.start)
    path = integrate_ode(coeffs, grid, x0, control)
    value = action_value(path, control, F, g)
    diagnostics = {
        "restart_values": restart_values,
        "restart_spread": float(restart_values[0] - restart_values[-1])
        if len(restart_values) > 1 else 0.0,
    }
    return value, control, diagnostics


# ---------------------------------------------------------------------------
# minimal control energy of a target path


def rate_function(coeffs: CoefficientSet, grid: TimeGrid,
                  target: DeterministicPath) -> RateValue:
    """Half the squared-control energy needed to steer along ``target``.

    The minimal-energy control is reconstructed cell by cell through the
    least-squares pseudo-inverse of sigma; a residual beyond tolerance means
    the required motion leaves range(sigma) and the value is infinite.
    """
    dt = grid.dt
    states = target.states
    if states.shape[0] != grid.steps + 1:
        raise ValueError("target path does not match the grid")
    energy = 0.0
    worst = 0.0
    for k in range(grid.steps):
        t = grid.nodes[k]
        x = states[k]
        sigma = coeffs.diffusion.matrix_at(t, x, x)
        if coeffs.c2 > 0:
            smallest = float(np.linalg.eigvalsh(sigma @ sigma.T).min())
            if smallest < coeffs.c2:
                raise EllipticityError(
                    f"sigma sigma^T eigenvalue {smallest:.3e} below the declared "
                    f"constant {coeffs.c2:.3e} at step {k}")
        rhs = (states[k + 1] - x) / dt - coeffs.drift(t, x[None, :], x)[0]
        phi, *_ = np.linalg.lstsq(sigma, rhs, rcond=None)
        residual = float(np.linalg.norm(sigma @ phi - rhs))
        worst = max(worst, residual / (1.0 + float(np.linalg.norm(rhs))))
        if residual > UNREACHABLE_RTOL * (1.0 + float(np.linalg.norm(rhs))):
            return RateValue(value=math.inf, unreachable=True, worst_residual=worst)
        energy += float(phi @ phi) * dt
    return RateValue(value=0.5 * energy, unreachable=False, worst_residual=worst)


# ---------------------------------------------------------------------------
# random initial condition: transported cloud under one feedback field


def _transport(coeffs: CoefficientSet, grid: TimeGrid, X0: np.ndarray,
               field: FeedbackField, g: CostFunction, F):
    """RK4 transport of M characteristics coupled through their mean.

    Returns the averaged action: the running cost uses the left-endpoint
    rule, exact per cell for open-loop-like fields and O(dt) otherwise.
    """
    dt = grid.dt
    X = X0.copy()
    cost = np.zeros(X.shape[0])

    def vel(t, Xs, t_cell):
        mu = Xs.mean(axis=0)
        q = field.at(t_cell, Xs, mu)
        return coeffs.drift(t, Xs, mu) + coeffs.diffusion.apply(t, Xs, mu, q)

    for k in range(grid.steps):
        t = grid.nodes[k]
        tc = t + dt / 2  # pin the feedback cell for the whole step
        mu = X.mean(axis=0)
        q = field.at(tc, X, mu)
        cost += g.total(q, t=t, x=X, mu_mean=mu) * dt
        k1 = vel(t, X, tc)
        k2 = vel(t + dt / 2, X + dt * k1 / 2, tc)
        k3 = vel(t + dt / 2, X + dt * k2 / 2, tc)
        k4 = vel(t + dt, X + dt * k3, tc)
        X = X + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if not np.all(np.isfinite(X)):
            raise SimulationError(k)
    payoff = F.values(X, X.mean(axis=0))
    return float(np.mean(payoff - cost)), X


def flow_value_random_init(coeffs: CoefficientSet, grid: TimeGrid, init: InitSpec,
                           F, g: CostFunction, cells: int = 10, m_samples: int = 200,
                           budget: int = 20_000, restarts: int = 5,
                           seed: int = 0) -> tuple[float, FeedbackField, dict]:
    """Best feedback field transporting a sampled initial cloud, by value.

    The M sampled characteristics move under zero noise with the coupling
    measure replaced by their empirical law; one affine-per-cell feedback
    field steers them all, and the objective averages payoff minus cost over
    the cloud.
    """
    if m_samples < 100:
        raise ValueError("need at least 100 transported characteristics")
    m, d = coeffs.state_dim, coeffs.noise_dim
    X0 = init.sample(m_samples, stream(seed, TAG_INIT))
    split = cells * d

    def build(theta):
        return FeedbackField(theta[:split].reshape(cells, d),
                             theta[split:].reshape(cells, d, m), start=grid.start)

    def objective(theta):
        try:
            value, _ = _transport(coeffs, grid, X0, build(theta), g, F)
        except SimulationError:
            return -math.inf
        return value

    theta, best, restart_values = _nm_multistart(
        objective, cells * d * (1 + m), budget, restarts, seed)
    field = build(theta)
    diagnostics = {
        "restart_values": restart_values,
        "restart_spread": float(restart_values[0] - restart_values[-1])
        if len(restart_values) > 1 else 0.0,
    }
    return float(best), field, diagnostics


# ---------------------------------------------------------------------------
# exports


def control_to_csv(control: ControlVector, path) -> None:
    dt = (1.0 - control.start) / control.cells
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"phi_{j + 1}" for j in range(control.values.shape[1])])
        for k in range(control.cells):
            t = control.start + k * dt
            w.writerow([repr(float(t))] + [repr(float(v)) for v in control.values[k]])


def path_to_csv(path_obj: DeterministicPath, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x_{j + 1}" for j in range(path_obj.states.shape[1])])
        for t, row in zip(path_obj.grid.nodes, path_obj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
