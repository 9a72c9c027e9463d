"""Convex running costs and their Legendre-Fenchel machinery.

A cost splits into a convex part acting on the control/slope argument and an
optional bounded state-measure offset:

    cost(t, z, x, mu) = base(t, z) + offset(t, x, mu).

The base part comes from a small catalog (quadratic, power-p, grid-sampled
tables) closed under the transforms implemented here: conjugation,
biconjugation (convex envelope), truncation of the dual ball, Lipschitz
regularization, and small-noise rescaling.  Quadratic and power families use
closed forms; everything else runs through dense grid double loops, which is
plenty at desk scale (dimension <= 3, a few thousand nodes per axis).

Grid transforms watch for the dominant numerical failure mode of discrete
conjugates: an argmax pinned to the sampling box boundary.  Any transform
whose inner maximizer touches the boundary at an interior evaluation point is
flagged ``box_clipped`` in the result metadata instead of silently returning
a clipped value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ConvexityError",
    "OffsetTerm",
    "CostFunction",
    "ConjugatePair",
    "legendre_transform",
    "biconjugate",
    "truncate_pair",
    "pasch_hausdorff",
    "viscosity_scale",
    "grid_to_csv",
    "grid_from_csv",
]

# discrete second differences may dip this far below zero and still count as convex
CONVEXITY_TOL = 1e-12
DEFAULT_OFFSET_BOUND = 1e3


class ConvexityError(ValueError):
    """Raised when a grid table fails the discrete convexity check.

    Carries the worst offending second difference and its location so the
    caller sees a concrete convexity-violation report, not just a refusal.
    """

    def __init__(self, message: str, worst: float, where: tuple):
        super().__init__(f"{message}: second difference {worst:.3e} at index {where}")
        self.worst = worst
        self.where = where


def _time_factor(table, t: float) -> float:
    """Piecewise-constant multiplier over [0, 1]; None means 1."""
    if table is None:
        return 1.0
    cells = len(table)
    k = min(int(t * cells), cells - 1)
    return float(table[k])


@dataclass(frozen=True)
class OffsetTerm:
    """Bounded-Lipschitz state/measure part of a cost or payoff.

    Catalog: ``constant``; ``affine_x`` (slope * x + const, clipped);
    ``affine_mean`` (slope * mean(mu) + const, clipped).  Clipping to
    ``+-bound`` keeps every entry bounded and Lipschitz by construction.
    An optional piecewise-constant time table multiplies the value.
    """

    kind: str = "constant"
    const: float = 0.0
    slope: float = 0.0
    bound: float = DEFAULT_OFFSET_BOUND
    time_table: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "affine_x", "affine_mean"):
            raise ValueError(f"unknown offset kind {self.kind!r}")
        if self.bound <= 0:
            raise ValueError("offset bound must be positive")

    def __call__(self, t: float, x=None, mu_mean=None):
        if self.kind == "constant":
            raw = self.const
        elif self.kind == "affine_x":
            if x is None:
                raise ValueError("affine_x offset needs a state argument")
            raw = self.slope * np.asarray(x).sum(axis=-1) + self.const
        else:
            if mu_mean is None:
                raise ValueError("affine_mean offset needs the measure mean")
            raw = self.slope * float(np.sum(mu_mean)) + self.const
        return _time_factor(self.time_table, t) * np.clip(raw, -self.bound, self.bound)

    def negated(self) -> "OffsetTerm":
        return replace(self, const=-self.const, slope=-self.slope)


def _as_box(domain, dim: int) -> list[tuple[float, float]]:
    """Normalize a box spec: (lo, hi) or ((lo1,hi1), ...) per axis."""
    arr = np.asarray(domain, dtype=float)
    if arr.shape == (2,):
        box = [(float(arr[0]), float(arr[1]))] * dim
    elif arr.ndim == 2 and arr.shape[1] == 2:
        if arr.shape[0] != dim:
            raise ValueError(f"box has {arr.shape[0]} axes, cost has dimension {dim}")
        box = [(float(lo), float(hi)) for lo, hi in arr]
    else:
        raise ValueError("domain must be (lo, hi) or a sequence of per-axis pairs")
    for lo, hi in box:
        if not lo < hi:
            raise ValueError(f"empty domain [{lo}, {hi}]")
    return box


def _resolutions(resolution, dim: int) -> list[int]:
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (dim,)).tolist()
    for r in res:
        if r < 3:
            raise ValueError("grid resolution must be at least 3 points per axis")
    return res


@dataclass(eq=False)
class CostFunction:
    """One member of the convex cost catalog.

    kind:
      * ``quadratic``: scale * ||z||^2 / 2
      * ``power``: scale * ||z||^p / p with p > 1
      * ``grid``: values sampled on a uniform tensor grid over a box
      * ``truncated_conjugate``: sup over ||q|| <= radius of (q.z - source(q));
        closed form used by the truncation ladder of quadratic/power costs
      * ``ball_restricted``: source(q) inside ||q|| <= radius, +inf outside

    Instances are immutable; grid tables are stored read-only.
    """

    kind: str
    dim: int = 1
    scale: float = 1.0
    p: float = 2.0
    axes: tuple[np.ndarray, ...] | None = None
    values: np.ndarray | None = None
    radius: float | None = None
    source: "CostFunction | None" = None
    offset: OffsetTerm | None = None
    time_table: tuple | None = None
    meta: dict = field(default_factory=dict)

    # -- constructors ---------------------------------------------------

    @classmethod
    def quadratic(cls, scale: float = 1.0, dim: int = 1, offset: OffsetTerm | None = None,
                  time_table: tuple | None = None) -> "CostFunction":
        if scale <= 0:
            raise ValueError("quadratic scale must be positive")
        return cls("quadratic", dim=dim, scale=scale, offset=offset, time_table=time_table)

    @classmethod
    def power(cls, p: float, scale: float = 1.0, dim: int = 1,
              offset: OffsetTerm | None = None, time_table: tuple | None = None) -> "CostFunction":
        if p <= 1:
            raise ValueError("power exponent must exceed 1 (coercivity)")
        if scale <= 0:
            raise ValueError("power scale must be positive")
        return cls("power", dim=dim, scale=scale, p=p, offset=offset, time_table=time_table)

    @classmethod
    def from_grid(cls, axes, values, offset: OffsetTerm | None = None,
                  meta: dict | None = None) -> "CostFunction":
        axes = tuple(np.ascontiguousarray(a, dtype=float) for a in
                     (axes if isinstance(axes, (tuple, list)) else (axes,)))
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != tuple(len(a) for a in axes):
            raise ValueError("grid values shape does not match axes")
        for a in axes:
            if len(a) < 3 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be strictly increasing with >= 3 nodes")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        for a in axes:
            a.setflags(write=False)
        values.setflags(write=False)
        return cls("grid", dim=len(axes), axes=axes, values=values,
                   offset=offset, meta=dict(meta or {}))

    # -- evaluation -----------------------------------------------------

    def __call__(self, z, t: float = 0.0) -> np.ndarray:
        """Base part at slope argument ``z`` (shape (..., dim) or scalar for dim 1)."""
        z = np.asarray(z, dtype=float)
        if self.dim == 1 and (z.ndim == 0 or z.shape[-1] != 1):
            z = z[..., None]
        if z.shape[-1] != self.dim:
            raise ValueError(f"argument dimension {z.shape[-1]} != cost dimension {self.dim}")
        r = np.linalg.norm(z, axis=-1)
        tf = _time_factor(self.time_table, t)
        if self.kind == "quadratic":
            return tf * self.scale * r ** 2 / 2.0
        if self.kind == "power":
            return tf * self.scale * r ** self.p / self.p
        if self.kind == "grid":
            return self._interpolate(z)
        if self.kind == "truncated_conjugate":
            return tf * self._truncated_value(r)
        if self.kind == "ball_restricted":
            inside = self.source(z, t)
            return np.where(r <= self.radius * (1 + 1e-12), inside, np.inf)
        raise ValueError(f"unknown cost kind {self.kind!r}")

    def total(self, z, t: float = 0.0, x=None, mu_mean=None) -> np.ndarray:
        out = self(z, t)
        if self.offset is not None:
            out = out + self.offset(t, x=x, mu_mean=mu_mean)
        return out

    def _truncated_value(self, r: np.ndarray) -> np.ndarray:
        # source is the dual cost g; value is sup_{|q|<=radius} (q.z - g(q)),
        # linear with slope `radius` once the unconstrained maximizer leaves the ball
        g = self.source
        n = self.radius
        if g.kind == "quadratic":
            s = g.scale
            inner = r ** 2 / (2.0 * s)
            outer = n * r - s * n ** 2 / 2.0
            return np.where(r <= n * s, inner, outer)
        if g.kind == "power":
            pbar = g.p
            s = g.scale
            pconj = pbar / (pbar - 1.0)
            sconj = s ** (-1.0 / (pbar - 1.0))
            rho_star = (r / s) ** (1.0 / (pbar - 1.0))
            inner = sconj * r ** pconj / pconj
            outer = n * r - s * n ** pbar / pbar
            return np.where(rho_star <= n, inner, outer)
        raise ValueError("closed-form truncation only wraps quadratic/power sources")

    def _interpolate(self, z: np.ndarray) -> np.ndarray:
        if self.dim == 1:
            xq = z[..., 0]
            nodes, vals = self.axes[0], self.values
            out = np.interp(xq, nodes, vals)
            # linear extension beyond the box with the edge slopes
            lo_slope = (vals[1] - vals[0]) / (nodes[1] - nodes[0])
            hi_slope = (vals[-1] - vals[-2]) / (nodes[-1] - nodes[-2])
            out = np.where(xq < nodes[0], vals[0] + lo_slope * (xq - nodes[0]), out)
            out = np.where(xq > nodes[-1], vals[-1] + hi_slope * (xq - nodes[-1]), out)
            return out
        from scipy.interpolate import RegularGridInterpolator

        itp = RegularGridInterpolator(self.axes, self.values, method="linear",
                                      bounds_error=False, fill_value=None)
        return itp(z.reshape(-1, self.dim)).reshape(z.shape[:-1])

    # -- grid helpers ---------------------------------------------------

    def grid_points(self) -> np.ndarray:
        """All grid nodes as an array of shape (n_points, dim)."""
        if self.kind != "grid":
            raise ValueError("grid_points is only defined for grid-sampled costs")
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def check_convexity(self) -> None:
        """Discrete convexity along every axis (grid kind only)."""
        if self.kind != "grid":
            return
        worst, where = np.inf, ()
        for ax in range(self.dim):
            d2 = np.diff(self.values, n=2, axis=ax)
            if d2.size == 0:
                continue
            idx = np.unravel_index(np.argmin(d2), d2.shape)
            if d2[idx] < worst:
                worst, where = float(d2[idx]), tuple(int(i) for i in idx)
        if worst < -CONVEXITY_TOL:
            raise ConvexityError("cost table is not convex along a grid axis", worst, where)

    def check_normalization(self, tol: float = 1e-9) -> None:
        """Assumption check: base(0) = 0 and base >= 0 on the grid."""
        zero = np.zeros(self.dim)
        v0 = float(self(zero))
        if abs(v0) > tol:
            raise ValueError(f"cost at the origin is {v0:.3e}, expected 0")
        if self.kind == "grid" and float(self.values.min()) < -tol:
            raise ValueError("cost table takes negative values")


@dataclass(eq=False)
class ConjugatePair:
    """A primal cost and its convex conjugate, kept together.

    ``provenance`` records whether the pairing is closed-form or came out of
    a grid transform; grid metadata (boxes, resolutions, clipping flags)
    travels in ``grid_meta``.
    """

    primal: CostFunction
    dual: CostFunction
    provenance: str  # "closed-form" | "numeric-grid"
    grid_meta: dict = field(default_factory=dict)

    def young_gap(self, z: np.ndarray, q: np.ndarray, t: float = 0.0) -> np.ndarray:
        """primal(z) + dual(q) - q.z; nonnegative up to grid tolerance."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        dot = np.einsum("...i,...i->...", z, q)
        return self.primal(z, t) + self.dual(q, t) - dot


# ---------------------------------------------------------------------------
# transforms


def _raw_grid_conjugate(points: np.ndarray, values: np.ndarray, dual_axes: tuple,
                        interior_mask: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Discrete sup_{z in points} (q.z - f(z)) on the dual tensor grid.

    Returns the dual table and whether any evaluation (restricted to
    ``interior_mask`` of the dual grid when given) had its argmax on the
    boundary of the primal point cloud's bounding box.
    """
    dim = points.shape[1]
    mesh = np.meshgrid(*dual_axes, indexing="ij")
    dual_pts = np.stack([m.ravel() for m in mesh], axis=-1)
    # scores[j, i] = q_j . z_i - f(z_i); chunk the dual loop to bound memory
    out = np.empty(dual_pts.shape[0])
    arg = np.empty(dual_pts.shape[0], dtype=np.intp)
    chunk = max(1, int(4e6) // max(points.shape[0], 1))
    for start in range(0, dual_pts.shape[0], chunk):
        block = dual_pts[start:start + chunk]
        scores = block @ points.T - values[None, :]
        arg[start:start + chunk] = np.argmax(scores, axis=1)
        out[start:start + chunk] = np.take_along_axis(
            scores, arg[start:start + chunk, None], axis=1)[:, 0]
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    on_edge = np.zeros(dual_pts.shape[0], dtype=bool)
    argmax_pts = points[arg]
    for ax in range(dim):
        on_edge |= np.isclose(argmax_pts[:, ax], lo[ax]) | np.isclose(argmax_pts[:, ax], hi[ax])
    if interior_mask is not None:
        on_edge = on_edge & interior_mask
    shape = tuple(len(a) for a in dual_axes)
    return out.reshape(shape), bool(on_edge.any())


def _uniform_axes(box: list[tuple[float, float]], res: list[int]) -> tuple[np.ndarray, ...]:
    return tuple(np.linspace(lo, hi, r) for (lo, hi), r in zip(box, res))


def _sampled(f: CostFunction, box, res) -> tuple[np.ndarray, np.ndarray, tuple]:
    axes = _uniform_axes(_as_box(box, f.dim), _resolutions(res, f.dim))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = f(pts).ravel()
    return pts, vals, axes


def legendre_transform(f: CostFunction, domain, resolution,
                       dual_domain=None, dual_resolution=None) -> CostFunction:
    """Convex conjugate g(q) = sup_z (q.z - f(z)).

    Quadratic and power kinds return their closed-form conjugates and ignore
    the grids.  Everything else is sampled on ``domain`` and maximized over
    the sample, with the result tabulated on ``dual_domain`` (defaults to
    ``domain``).  Non-convex tables are rejected; see :func:`biconjugate`
    for the envelope computation that accepts them.
    """
    _as_box(domain, f.dim)
    dual_off = f.offset.negated() if f.offset is not None else None
    if f.kind == "quadratic":
        tt = tuple(1.0 / v for v in f.time_table) if f.time_table else None
        return CostFunction.quadratic(scale=1.0 / f.scale, dim=f.dim,
                                      offset=dual_off, time_table=tt)
    if f.kind == "power":
        pbar = f.p / (f.p - 1.0)
        sconj = f.scale ** (-1.0 / (f.p - 1.0))
        tt = tuple(v ** (-1.0 / (f.p - 1.0)) for v in f.time_table) if f.time_table else None
        return CostFunction.power(p=pbar, scale=sconj, dim=f.dim,
                                  offset=dual_off, time_table=tt)
    if f.kind == "ball_restricted":
        # conjugate of (g + ball indicator) is the truncated sup, by definition
        return CostFunction("truncated_conjugate", dim=f.dim, radius=f.radius,
                            source=f.source, offset=dual_off)
    if f.time_table is not None:
        raise ValueError("grid transforms require a time-constant cost")
    f.check_convexity()
    pts, vals, _ = _sampled(f, domain, resolution)
    dd = dual_domain if dual_domain is not None else domain
    dr = dual_resolution if dual_resolution is not None else resolution
    dual_axes = _uniform_axes(_as_box(dd, f.dim), _resolutions(dr, f.dim))
    table, clipped = _raw_grid_conjugate(pts, vals, dual_axes)
    return CostFunction.from_grid(dual_axes, table, offset=dual_off,
                                  meta={"box_clipped": clipped, "transform": "conjugate"})


def _slope_box(axes: tuple, values: np.ndarray, pad: float = 0.05) -> list[tuple[float, float]]:
    """Per-axis range of discrete slopes; the natural dual box of a table."""
    box = []
    for ax in range(values.ndim):
        d = np.diff(values, axis=ax)
        h = np.diff(axes[ax])
        h = h.reshape([-1 if a == ax else 1 for a in range(values.ndim)])
        slopes = d / h
        lo, hi = float(slopes.min()), float(slopes.max())
        width = max(hi - lo, 1e-6)
        box.append((lo - pad * width, hi + pad * width))
    return box


def biconjugate(f: CostFunction, domain, resolution, dual_resolution=None) -> CostFunction:
    """Double conjugate f** on the sampling grid.

    Equals f (up to grid tolerance) for convex inputs and the lower convex
    envelope otherwise, so no convexity gate is applied.  The intermediate
    dual box is derived from the sampled slope range; its resolution defaults
    to four times the primal one, which keeps the envelope gap well below
    the advertised grid tolerance at desk scale.
    """
    if f.kind in ("quadratic", "power"):
        return f  # self-biconjugate, exactly
    if f.time_table is not None:
        raise ValueError("grid transforms require a time-constant cost")
    pts, vals, axes = _sampled(f, domain, resolution)
    res = _resolutions(resolution, f.dim)
    dres = (_resolutions(dual_resolution, f.dim) if dual_resolution is not None
            else [4 * r + 1 for r in res])
    dual_axes = _uniform_axes(_slope_box(axes, vals.reshape([len(a) for a in axes])), dres)
    dual_table, _ = _raw_grid_conjugate(pts, vals, dual_axes)
    dmesh = np.meshgrid(*dual_axes, indexing="ij")
    dual_pts = np.stack([m.ravel() for m in dmesh], axis=-1)
    table, clipped = _raw_grid_conjugate(dual_pts, dual_table.ravel(), axes)
    return CostFunction.from_grid(axes, table, offset=f.offset,
                                  meta={"box_clipped": clipped, "transform": "biconjugate"})


def truncate_pair(g: CostFunction, radius: float, domain=None, resolution=None) -> ConjugatePair:
    """Lipschitz truncation ladder step.

    Builds f_n(z) = sup over the dual ball ||q|| <= radius of (q.z - g(q)),
    which is radius-Lipschitz, increases with the radius, and stays below the
    full conjugate; its own conjugate g_n dominates g and agrees with it
    inside the ball.  Quadratic and power duals get closed forms; grid duals
    need a primal ``domain``/``resolution`` for the tabulated pair.
    """
    if radius <= 0:
        raise ValueError("truncation radius must be positive")
    primal_off = g.offset.negated() if g.offset is not None else None
    if g.kind in ("quadratic", "power"):
        f_n = CostFunction("truncated_conjugate", dim=g.dim, radius=float(radius),
                           source=g, offset=primal_off)
        g_n = CostFunction("ball_restricted", dim=g.dim, radius=float(radius),
                           source=g, offset=g.offset)
        return ConjugatePair(primal=f_n, dual=g_n, provenance="closed-form")
    if g.kind != "grid":
        raise ValueError("truncation needs a quadratic, power, or grid cost")
    if domain is None or resolution is None:
        raise ValueError("grid truncation needs a primal domain and resolution")
    g.check_convexity()
    if abs(float(g(np.zeros(g.dim)))) > 1e-9:
        raise ValueError("dual cost must vanish at the origin")
    dual_pts = g.grid_points()
    dual_vals = g.values.ravel()
    keep = np.linalg.norm(dual_pts, axis=1) <= radius * (1 + 1e-12)
    if not keep.any():
        raise ValueError("truncation ball contains no dual grid point")
    axes = _uniform_axes(_as_box(domain, g.dim), _resolutions(resolution, g.dim))
    table, clipped = _raw_grid_conjugate(dual_pts[keep], dual_vals[keep], axes)
    f_n = CostFunction.from_grid(axes, table, offset=primal_off,
                                 meta={"box_clipped": clipped, "transform": "truncate"})
    pts = f_n.grid_points()
    g_table, g_clipped = _raw_grid_conjugate(pts, table.ravel(), g.axes)
    g_n = CostFunction.from_grid(g.axes, g_table, offset=g.offset,
                                 meta={"box_clipped": g_clipped, "transform": "truncate-dual"})
    return ConjugatePair(primal=f_n, dual=g_n, provenance="numeric-grid",
                         grid_meta={"radius": float(radius)})


def pasch_hausdorff(nodes, values, slope: float) -> np.ndarray:
    """Largest ``slope``-Lipschitz minorant of a sampled function.

    Computes min over grid points y of (F(y) + slope * |x - y|) for every
    grid point x.  ``nodes`` is one axis (1-D) or a tuple of axes; the result
    has the shape of ``values``.
    """
    if slope <= 0:
        raise ValueError("slope must be positive")
    axes = nodes if isinstance(nodes, (tuple, list)) else (nodes,)
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty function table")
    if values.shape != tuple(len(a) for a in axes):
        raise ValueError("values shape does not match nodes")
    if not np.all(np.isfinite(values)):
        raise ValueError("function table must be bounded")
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    flat = values.ravel()
    out = np.empty_like(flat)
    chunk = max(1, int(4e6) // max(pts.shape[0], 1))
    for start in range(0, pts.shape[0], chunk):
        d = np.linalg.norm(pts[start:start + chunk, None, :] - pts[None, :, :], axis=-1)
        out[start:start + chunk] = np.min(flat[None, :] + slope * d, axis=1)
    return out.reshape(values.shape)


def viscosity_scale(g: CostFunction, n: int) -> CostFunction:
    """Small-noise rescaling q -> g(q / sqrt(n)).

    For the closed-form families the rescaling folds into the scale factor;
    a grid table keeps its values with the axes stretched by sqrt(n).
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("scale index must be a positive integer")
    if n == 1:
        return g
    root = math.sqrt(n)
    if g.kind == "quadratic":
        return replace(g, scale=g.scale / n)
    if g.kind == "power":
        return replace(g, scale=g.scale / root ** g.p)
    if g.kind == "grid":
        axes = tuple(a * root for a in g.axes)
        return CostFunction.from_grid(axes, g.values, offset=g.offset,
                                      meta={**g.meta, "viscosity_n": int(n)})
    raise ValueError(f"cannot rescale cost kind {g.kind!r}")


# ---------------------------------------------------------------------------
# CSV import/export of grid tables


def grid_to_csv(f: CostFunction, path) -> None:
    if f.kind != "grid":
        raise ValueError("only grid-sampled costs export to CSV")
    pts = f.grid_points()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"coord{i + 1}" for i in range(f.dim)] + ["value"])
        for pt, v in zip(pts, f.values.ravel()):
            w.writerow([repr(float(c)) for c in pt] + [repr(float(v))])


def grid_from_csv(path) -> CostFunction:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][-1] != "value":
        raise ValueError("expected a header row 'coord...,value'")
    dim = len(rows[0]) - 1
    data = np.array([[float(c) for c in row] for row in rows[1:]])
    axes = tuple(np.unique(data[:, i]) for i in range(dim))
    shape = tuple(len(a) for a in axes)
    if math.prod(shape) != data.shape[0]:
        raise ValueError("CSV rows do not form a full tensor grid")
    order = np.lexsort([data[:, i] for i in reversed(range(dim))])
    values = data[order, -1].reshape(shape)
    return CostFunction.from_grid(axes, values)
