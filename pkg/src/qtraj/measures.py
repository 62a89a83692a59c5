"""Empirical measures on pure states, exact transport distances, and the
closed-form qubit angle densities used as oracles.

Wasserstein-1 distances are computed in primal transport form: a linear
program over couplings with the Fubini-Study ground metric (or the induced
circle metric |sin((t - s)/2)| for qubit angles).  Uniform measures with
equal atom counts reduce to an assignment problem and are solved as such.
No entropic or sliced approximations anywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.optimize
import scipy.sparse

from .operators import ProjectivePoint, overlap_gram

__all__ = [
    "EmpiricalMeasure",
    "AngleDensity",
    "FitResult",
    "wasserstein1",
    "transport_cost",
    "qubit_angle",
    "qubit_angles",
    "bloch_coordinates",
    "circle_w1",
    "circle_cost",
    "sample_invariant",
    "fit_rate",
]

SIZE_BUDGET = 10_000_000
Y_TOL = 1e-6


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms on projective space: unit row vectors plus weights."""

    points: np.ndarray = field(repr=False)   # (n, k) complex, unit rows
    weights: np.ndarray = field(repr=False)  # (n,), nonnegative, sums to 1

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=np.complex128)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a nonempty (n, k) array")
        nrm = np.linalg.norm(pts, axis=1)
        if np.any(np.abs(nrm - 1.0) > 1e-9):
            raise ValueError("atom representatives must be unit vectors")
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (n,):
                raise ValueError("weights shape mismatch")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-10:
                raise ValueError(f"weights must sum to one, got {w.sum()!r}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_projective_points(cls, pts, weights=None) -> "EmpiricalMeasure":
        return cls(np.stack([p.vec for p in pts]), weights)

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n_atoms, atol=1e-12))

    def subsample(self, m: int, seed: int) -> "EmpiricalMeasure":
        """Uniform resample of m atoms (with replacement by weight)."""
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.n_atoms, size=m, p=self.weights)
        return EmpiricalMeasure(self.points[idx])

    def to_rows(self) -> np.ndarray:
        """Atom components re/im interleaved, then the weight column."""
        cols = np.empty((self.n_atoms, 2 * self.dim))
        cols[:, 0::2] = self.points.real
        cols[:, 1::2] = self.points.imag
        return np.column_stack([cols, self.weights])


def transport_cost(cost: np.ndarray, w_row: np.ndarray, w_col: np.ndarray,
                   method: str = "auto") -> float:
    """Exact optimal transport cost for a dense cost matrix.

    method 'assignment' (equal-count uniform marginals only) solves the
    underlying assignment problem; 'lp' solves the transportation linear
    program with HiGHS; 'auto' picks the former when applicable.
    """
    n, m = cost.shape
    if n * m > SIZE_BUDGET:
        raise ValueError(
            f"transport problem size {n}x{m} exceeds the {SIZE_BUDGET:.0e} budget; "
            "subsample or bin the inputs"
        )
    uniform = (
        n == m
        and np.allclose(w_row, 1.0 / n, atol=1e-12)
        and np.allclose(w_col, 1.0 / m, atol=1e-12)
    )
    if method == "auto":
        method = "assignment" if uniform else "lp"
    if method == "assignment":
        if not uniform:
            raise ValueError("assignment method needs equal-count uniform marginals")
        rows, cols = scipy.optimize.linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / n)
    if method != "lp":
        raise ValueError(f"unknown method {method!r}")
    # min <c, x> s.t. row sums = w_row, col sums = w_col, x >= 0; the last
    # column constraint is redundant and dropped
    c = cost.ravel()
    data, rows_idx, cols_idx = [], [], []
    for i in range(n):
        rows_idx.extend([i] * m)
        cols_idx.extend(range(i * m, (i + 1) * m))
        data.extend([1.0] * m)
    for j in range(m - 1):
        rows_idx.extend([n + j] * n)
        cols_idx.extend(range(j, n * m, m))
        data.extend([1.0] * n)
    a_eq = scipy.sparse.csr_matrix(
        (data, (rows_idx, cols_idx)), shape=(n + m - 1, n * m)
    )
    b_eq = np.concatenate([w_row, w_col[:-1]])
    res = scipy.optimize.linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                                 method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein1(mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                 method: str = "auto") -> float:
    """Order-1 Wasserstein distance under the Fubini-Study ground metric."""
    if mu.dim != nu.dim:
        raise ValueError("measures live on different projective spaces")
    cost = overlap_gram(mu.points, nu.points)
    return transport_cost(cost, mu.weights, nu.weights, method=method)


# ---------------------------------------------------------------------------
# qubit circle
# ---------------------------------------------------------------------------

def bloch_coordinates(x) -> tuple[float, float, float]:
    """(X, Y, Z) expectation values of the Pauli matrices for a pure qubit."""
    v = x.vec if isinstance(x, ProjectivePoint) else np.asarray(x, complex)
    if v.size != 2:
        raise ValueError("Bloch coordinates need a 2-dimensional state")
    cross = v[0].conjugate() * v[1]
    return (2.0 * cross.real, 2.0 * cross.imag,
            float(abs(v[0]) ** 2 - abs(v[1]) ** 2))


def qubit_angle(x, y_tol: float = Y_TOL) -> float:
    """Angle of a qubit state on the circle through the poles.

    The circle is the set of states with vanishing Y coordinate, where the
    examples' invariant measures live; the angle satisfies
    (X, Z) = (sin t, cos t).  States with |Y| > y_tol are rejected: leakage
    off the circle signals integrator drift, the dynamics preserve it.
    """
    bx, by, bz = bloch_coordinates(x)
    if abs(by) > y_tol:
        raise ValueError(f"state is off the circle: |Y| = {abs(by):.3e} > {y_tol:g}")
    return float(np.arctan2(bx, bz))


def qubit_angles(points: np.ndarray, y_tol: float = Y_TOL) -> np.ndarray:
    """Vectorized qubit_angle over unit rows (n, 2)."""
    pts = np.asarray(points, dtype=np.complex128)
    cross = pts[:, 0].conjugate() * pts[:, 1]
    by = 2.0 * cross.imag
    bad = np.abs(by) > y_tol
    if np.any(bad):
        raise ValueError(
            f"{int(bad.sum())} of {len(pts)} states are off the circle "
            f"(max |Y| = {np.abs(by).max():.3e})"
        )
    bx = 2.0 * cross.real
    bz = np.abs(pts[:, 0]) ** 2 - np.abs(pts[:, 1]) ** 2
    return np.arctan2(bx, bz)


def circle_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|sin((a - b)/2)| pairwise: the Fubini-Study metric through the circle
    embedding."""
    return np.abs(np.sin(0.5 * (np.asarray(a)[:, None] - np.asarray(b)[None, :])))


@dataclass
class AngleDensity:
    """Probability density on the angle circle (-pi, pi].

    pdf_raw is the unnormalized density; normalization and the quantile
    table are computed lazily on a fine grid (trapezoid + interpolation).
    """

    pdf_raw: callable
    params: dict
    name: str = ""
    grid_size: int = 8192
    _norm: float | None = field(default=None, repr=False)
    _grid: np.ndarray | None = field(default=None, repr=False)
    _cdf: np.ndarray | None = field(default=None, repr=False)

    def _ensure_tables(self):
        if self._norm is not None:
            return
        g = np.linspace(-np.pi, np.pi, self.grid_size + 1)
        vals = np.array([max(self.pdf_raw(t), 0.0) for t in g])
        cdf = scipy.integrate.cumulative_trapezoid(vals, g, initial=0.0)
        norm = cdf[-1]
        if not np.isfinite(norm) or norm <= 0:
            raise RuntimeError("density normalization failed")
        self._norm = float(norm)
        self._grid = g
        self._cdf = cdf / norm

    @property
    def normalization(self) -> float:
        self._ensure_tables()
        return self._norm

    def pdf(self, theta: float) -> float:
        self._ensure_tables()
        return self.pdf_raw(float(theta)) / self._norm

    def quantile_atoms(self, m: int) -> np.ndarray:
        """m equal-mass atoms at the quantile midpoints (inverse CDF)."""
        self._ensure_tables()
        probs = (np.arange(m) + 0.5) / m
        return np.interp(probs, self._cdf, self._grid)

    def check_normalized(self, tol: float = 1e-6) -> bool:
        self._ensure_tables()
        g, n = self._grid, self._norm
        vals = np.array([self.pdf(t) for t in g])
        total = np.trapezoid(vals, g)
        return abs(total - 1.0) <= tol


def circle_w1(sample_angles, ref: AngleDensity, m_atoms: int = 512,
              max_sample_atoms: int = 4096) -> float:
    """Distance between sampled angles and a reference angle density.

    The reference is discretized into m_atoms equal-mass atoms by inverse
    CDF; samples beyond max_sample_atoms are binned into that many
    equal-width angle bins (weighted atoms), which perturbs the distance by
    at most half a bin of arc.  The ground metric is |sin((t - s)/2)|.
    """
    angles = np.asarray(sample_angles, dtype=float)
    if angles.ndim != 1 or angles.size == 0:
        raise ValueError("sample_angles must be a nonempty 1-d array")
    ref_atoms = ref.quantile_atoms(m_atoms)
    if angles.size > max_sample_atoms:
        edges = np.linspace(-np.pi, np.pi, max_sample_atoms + 1)
        idx = np.clip(np.digitize(angles, edges) - 1, 0, max_sample_atoms - 1)
        counts = np.bincount(idx, minlength=max_sample_atoms)
        keep = counts > 0
        centers = 0.5 * (edges[:-1] + edges[1:])[keep]
        weights = counts[keep] / angles.size
        cost = circle_cost(centers, ref_atoms)
        return transport_cost(cost, weights, np.full(m_atoms, 1.0 / m_atoms))
    cost = circle_cost(angles, ref_atoms)
    if angles.size == m_atoms:
        return transport_cost(cost, np.full(angles.size, 1.0 / angles.size),
                              np.full(m_atoms, 1.0 / m_atoms), method="assignment")
    return transport_cost(cost, np.full(angles.size, 1.0 / angles.size),
                          np.full(m_atoms, 1.0 / m_atoms))


# ---------------------------------------------------------------------------
# invariant-measure sampling and rate fitting
# ---------------------------------------------------------------------------

def sample_invariant(model, cfg, burn_in: float, n_samples: int, thinning: float,
                     x0=None) -> EmpiricalMeasure:
    """Empirical invariant measure from one long trajectory.

    Records the state every `thinning` time units after `burn_in`, from a
    single run (exponential mixing makes the time average consistent and
    amortizes the burn-in).  Warns when the mean-evolution ergodicity check
    fails, since the sampled measure then depends on the starting point.
    """
    from .lindblad import check_l_erg
    from .sim import SimConfig, simulate_sse_trajectory

    report = check_l_erg(model)
    if not report.holds:
        warnings.warn(
            "ergodicity check fails: the invariant measure is not unique and "
            "the sample depends on the initial state",
            stacklevel=2,
        )
    if x0 is None:
        x0 = ProjectivePoint.basis(model.dim, 0)
    dt = cfg.dt
    thin_steps = max(1, int(round(thinning / dt)))
    burn_steps = int(round(burn_in / dt))
    first = burn_steps + thin_steps
    rec = first + thin_steps * np.arange(n_samples)
    horizon = rec[-1] * dt
    run_cfg = SimConfig(dt=dt, horizon=horizon, seed=cfg.seed,
                        max_jump_prob=cfg.max_jump_prob, scheme=cfg.scheme)
    traj = simulate_sse_trajectory(model, x0, run_cfg, rec * dt)
    return EmpiricalMeasure(traj.states)


@dataclass(frozen=True)
class FitResult:
    """Weighted log-linear fit value ~ C exp(-rate t) on the tail window."""

    prefactor: float
    rate: float
    r_squared: float
    decaying: bool
    window: tuple[int, int]


def fit_rate(t_grid, values, stderrs=None, tail_fraction: float = 0.5) -> FitResult:
    """Fit log(values) = log C - rate * t by weighted least squares.

    Only the trailing `tail_fraction` of the grid is used (early transients
    contaminate the asymptotic rate).  Weights are inverse variances of
    log(values) propagated from stderrs when given.  Values must be positive
    on the window; a rate indistinguishable from zero is flagged as
    non-decaying.
    """
    t = np.asarray(t_grid, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1 or t.size < 3:
        raise ValueError("need matching 1-d grids with at least 3 points")
    start = int(np.floor(t.size * (1.0 - tail_fraction)))
    start = min(start, t.size - 3)
    tw, vw = t[start:], v[start:]
    if np.any(vw <= 0):
        raise ValueError("values must be positive on the fit window")
    logv = np.log(vw)
    if stderrs is not None:
        se = np.asarray(stderrs, dtype=float)[start:]
        sigma = np.where(se > 0, se / vw, np.inf)
        finite = np.isfinite(sigma)
        if not np.any(finite):
            w = np.ones_like(logv)
        else:
            floor = sigma[finite].min() if sigma[finite].min() > 0 else 1.0
            w = 1.0 / np.maximum(sigma, 1e-3 * floor) ** 2
            w = np.where(np.isfinite(w), w, w[np.isfinite(w)].max())
    else:
        w = np.ones_like(logv)
    wsum = w.sum()
    tbar = (w * tw).sum() / wsum
    ybar = (w * logv).sum() / wsum
    stt = (w * (tw - tbar) ** 2).sum()
    sty = (w * (tw - tbar) * (logv - ybar)).sum()
    slope = sty / stt
    intercept = ybar - slope * tbar
    resid = logv - (intercept + slope * tw)
    ss_res = (w * resid ** 2).sum()
    ss_tot = (w * (logv - ybar) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    rate = -slope
    span = tw[-1] - tw[0]
    decaying = rate > 0 and rate * span > 1e-6
    return FitResult(prefactor=float(np.exp(intercept)), rate=float(rate),
                     r_squared=float(r2), decaying=bool(decaying),
                     window=(start, t.size))
