"""Stochastic integration of trajectory equations and the linear propagator.

Three objects are evolved with a shared weak-order-1 scheme (linear
propagate, then normalize):

* pure-state trajectories x_t (state diffusion plus detection jumps),
* density-matrix trajectories rho_t,
* the linear propagator S_t, under either the reference measure (unit-rate
  jumps, centered Brownian increments) or the physical measure of an initial
  state (state-dependent rates and drifted increments).

Per step, with total jump probability sum_j n_j dt, at most one jump fires
(thinning); otherwise the state is multiplied by Id + K dt + sum_i L_i dW_i
and renormalized, where dW_i = dB_i + v_i dt carries the measurement drift.
The propagator tracks an overall log scale so that matrix entries stay O(1)
while the true S_t grows or decays exponentially.

Randomness: one uniform per step (when jump channels exist) followed by one
standard normal per diffusive channel.  Ensembles are split into fixed-size
chunks, each with an independent stream derived from (seed, chunk index), so
results do not depend on the thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .lindblad import OperatorModel
from .operators import (
    DensityMatrix,
    ProjectivePoint,
    top_right_singular_vector,
    wedge_distance_rows,
    wedge_norm_batch,
)

__all__ = [
    "SimConfig",
    "SseStepResult",
    "SmeStepResult",
    "PropagatorState",
    "sse_step",
    "sme_step",
    "propagate_S",
    "likelihood_matrix",
    "ml_estimate",
    "Curve",
    "EnsembleRecords",
    "PropagatorRecords",
    "TrajectoryRecord",
    "simulate_sse_ensemble",
    "simulate_sme_ensemble",
    "simulate_propagator_ensemble",
    "simulate_sse_trajectory",
    "estimate_f",
    "coupling_distance",
    "point_mass_sampler",
    "circle_uniform_sampler",
    "haar_sampler",
]

CHUNK_SIZE = 1024
_KERNEL_BLOCK = 65536
_DEGENERATE_JUMP_TOL = 1e-14

SCHEMES = ("linear_normalize", "euler_direct")


@dataclass(frozen=True)
class SimConfig:
    """Integrator configuration.

    The per-step jump budget sum_j n_j dt must stay below max_jump_prob or
    the step is rejected with an error (the dt is too large for the model).
    """

    dt: float
    horizon: float
    seed: int
    max_jump_prob: float = 0.1
    scheme: str = "linear_normalize"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if not (0 < self.max_jump_prob <= 1):
            raise ValueError("max_jump_prob must be in (0, 1]")
        int(self.seed)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def _draw_step_noise(model: OperatorModel, cfg: SimConfig, rng):
    """Noise of one step: (uniform for jump thinning, Brownian increments).

    The increments have variance dt. Layout: the uniform is drawn first and
    only when jump channels exist; normals only when diffusive channels do.
    """
    u = float(rng.random()) if model.n_jump else None
    if model.n_diffusive:
        db = rng.standard_normal(model.n_diffusive) * np.sqrt(cfg.dt)
    else:
        db = np.zeros(0)
    return u, db


def _check_budget(ptot, cfg: SimConfig):
    if np.max(ptot, initial=0.0) > cfg.max_jump_prob:
        raise RuntimeError(
            "per-step jump probability "
            f"{float(np.max(ptot)):.3g} exceeds max_jump_prob={cfg.max_jump_prob}; "
            "reduce dt"
        )


# ---------------------------------------------------------------------------
# single-step operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SseStepResult:
    state: ProjectivePoint
    jump: int | None
    db: np.ndarray
    dw: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class SmeStepResult:
    state: DensityMatrix
    jump: int | None
    db: np.ndarray
    dw: np.ndarray
    degenerate: bool = False


def _thin_jump(njs: np.ndarray, u, dt: float):
    """Channel index for the at-most-one-jump thinning, or None."""
    probs = njs * dt
    ptot = float(probs.sum())
    if u is None or u >= ptot:
        return None
    acc = 0.0
    for j, p in enumerate(probs):
        acc += p
        if u < acc:
            return j
    return len(probs) - 1


def sse_step(model: OperatorModel, x: ProjectivePoint, cfg: SimConfig, rng, *, noise=None):
    """One step of the pure-state trajectory.

    With probability n_j dt the state jumps to C_j x / ||C_j x||; otherwise
    x' = normalize((Id + K dt + sum_i L_i dW_i) x) with dW_i = dB_i + v_i dt
    and v_i = <x, (L_i + L_i*) x>.  `noise` injects (uniform, dB) explicitly,
    bypassing rng, for coupling and equivalence tests.
    """
    vec = x.vec
    u, db = _draw_step_noise(model, cfg, rng) if noise is None else noise
    njs = np.array([np.linalg.norm(c @ vec) ** 2 for c in model.jump])
    if njs.size:
        _check_budget(njs.sum() * cfg.dt, cfg)
    ch = _thin_jump(njs, u, cfg.dt)
    if ch is not None:
        if njs[ch] < _DEGENERATE_JUMP_TOL:
            # resample as no-jump; probability of this branch is O(dt * 1e-14)
            return replace(_sse_diffusive(model, vec, cfg, db), degenerate=True)
        new = model.jump[ch] @ vec
        return SseStepResult(
            ProjectivePoint.from_unnormalized(new), ch, np.asarray(db), np.asarray(db)
        )
    return _sse_diffusive(model, vec, cfg, db)


def _sse_diffusive(model, vec, cfg, db) -> SseStepResult:
    dt = cfg.dt
    vs = np.array([2.0 * np.vdot(vec, l @ vec).real for l in model.diffusive])
    db = np.asarray(db, dtype=float)
    if cfg.scheme == "linear_normalize":
        dw = db + vs * dt
        y = vec + dt * (model.drift_matrix() @ vec)
        for i, l in enumerate(model.diffusive):
            y = y + dw[i] * (l @ vec)
        return SseStepResult(ProjectivePoint.from_unnormalized(y), None, db, dw)
    # euler_direct: integrate the nonlinear equation as written, without
    # renormalizing, as a cross-check on the default scheme
    njs = np.array([np.linalg.norm(c @ vec) ** 2 for c in model.jump])
    k = model.dim
    dmat = model.drift_matrix().astype(np.complex128)
    for i, l in enumerate(model.diffusive):
        dmat = dmat + 0.5 * vs[i] * (l - 0.25 * vs[i] * np.eye(k))
    dmat = dmat + 0.5 * njs.sum() * np.eye(k)
    y = vec + dt * (dmat @ vec)
    for i, l in enumerate(model.diffusive):
        y = y + db[i] * ((l - 0.5 * vs[i] * np.eye(k)) @ vec)
    out = ProjectivePoint.from_unnormalized(y)  # projective class; norm drift O(dt^{3/2})
    return SseStepResult(out, None, db, db + vs * dt)


def sme_step(model: OperatorModel, rho: DensityMatrix, cfg: SimConfig, rng, *, noise=None):
    """One step of the density-matrix trajectory (matrix analogue of sse_step)."""
    r = rho.mat
    u, db = _draw_step_noise(model, cfg, rng) if noise is None else noise
    njs = np.array([np.trace(c @ r @ c.conj().T).real for c in model.jump])
    if njs.size:
        _check_budget(njs.sum() * cfg.dt, cfg)
    ch = _thin_jump(njs, u, cfg.dt)
    if ch is not None:
        if njs[ch] < _DEGENERATE_JUMP_TOL:
            return replace(_sme_diffusive(model, r, cfg, db), degenerate=True)
        c = model.jump[ch]
        new = c @ r @ c.conj().T
        return SmeStepResult(
            DensityMatrix.repair(new / np.trace(new).real), ch, np.asarray(db), np.asarray(db)
        )
    return _sme_diffusive(model, r, cfg, db)


def _sme_diffusive(model, r, cfg, db) -> SmeStepResult:
    dt = cfg.dt
    k = model.dim
    vs = np.array([np.trace((l + l.conj().T) @ r).real for l in model.diffusive])
    db = np.asarray(db, dtype=float)
    if cfg.scheme == "linear_normalize":
        dw = db + vs * dt
        g = np.eye(k) + dt * model.drift_matrix()
        for i, l in enumerate(model.diffusive):
            g = g + dw[i] * l
        new = g @ r @ g.conj().T
        return SmeStepResult(
            DensityMatrix.repair(new / np.trace(new).real), None, db, dw
        )
    from .lindblad import lindblad_apply

    new = r + dt * lindblad_apply(model, r)
    for i, l in enumerate(model.diffusive):
        new = new + db[i] * (l @ r + r @ l.conj().T - vs[i] * r)
    for j, c in enumerate(model.jump):
        nj = np.trace(c @ r @ c.conj().T).real
        if nj > _DEGENERATE_JUMP_TOL:
            new = new - dt * (c @ r @ c.conj().T / nj - r) * nj
    return SmeStepResult(DensityMatrix.repair(new / np.trace(new).real), None, db, db + vs * dt)


# ---------------------------------------------------------------------------
# linear propagator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropagatorState:
    """Rescaled linear propagator with its log scale and jump counters.

    The true propagator is exp(log_scale) * s; the Frobenius norm of s is
    kept at 1 by an unconditional rescale after every step, so the stored
    matrix always has norm in [0.5, 2].  The weight of the tracked initial
    state rho0 is exp(z_log) = tr(s* s rho0) * exp(2 log_scale).
    """

    s: np.ndarray = field(repr=False)
    log_scale: float = 0.0
    t: float = 0.0
    rho0: np.ndarray | None = field(default=None, repr=False)
    jump_counts: tuple = ()

    @classmethod
    def identity(cls, dim: int, rho0=None, n_jump: int = 0) -> "PropagatorState":
        s = np.eye(dim, dtype=np.complex128) / np.sqrt(dim)
        r = None if rho0 is None else np.asarray(
            rho0.mat if isinstance(rho0, DensityMatrix) else rho0, dtype=np.complex128
        )
        return cls(s=s, log_scale=0.5 * np.log(dim), t=0.0, rho0=r,
                   jump_counts=(0,) * n_jump)

    @property
    def dim(self) -> int:
        return self.s.shape[0]

    @property
    def z_log(self) -> float:
        if self.rho0 is None:
            raise ValueError("no initial state is tracked by this propagator")
        val = np.einsum("ab,ac,cb->", self.s.conj(), self.s, self.rho0).real
        return float(np.log(val) + 2.0 * self.log_scale)

    def true_matrix(self) -> np.ndarray:
        return self.s * np.exp(self.log_scale)


def _rescaled(s: np.ndarray, log_scale: float) -> tuple[np.ndarray, float]:
    nrm = np.linalg.norm(s)
    if nrm == 0.0:
        return s, log_scale
    return s / nrm, log_scale + float(np.log(nrm))


def propagate_S(model: OperatorModel, prop: PropagatorState, cfg: SimConfig, rng,
                measure: str = "reference", *, noise=None) -> PropagatorState:
    """One step of the propagator under the reference or physical measure.

    Reference measure: every jump channel fires with probability dt and the
    Brownian increments are centered.  Physical measure: rates and drifts
    are those of the trajectory of prop.rho0, computed from the propagator
    itself (rho_t = S rho0 S* / tr), so the propagator and the trajectory it
    implies share one noise realization.
    """
    if measure not in ("reference", "physical"):
        raise ValueError("measure must be 'reference' or 'physical'")
    k = model.dim
    s = prop.s
    u, db = _draw_step_noise(model, cfg, rng) if noise is None else noise
    if measure == "physical":
        if prop.rho0 is None:
            raise ValueError("physical measure requires a tracked rho0")
        rho_t = s @ prop.rho0 @ s.conj().T
        tr = np.trace(rho_t).real
        if tr <= 0:
            raise RuntimeError("propagator weight vanished under the physical measure")
        rho_t = rho_t / tr
        njs = np.array([np.trace(c @ rho_t @ c.conj().T).real for c in model.jump])
        vs = np.array([np.trace((l + l.conj().T) @ rho_t).real for l in model.diffusive])
    else:
        njs = np.ones(model.n_jump)
        vs = np.zeros(model.n_diffusive)
    if njs.size:
        _check_budget(njs.sum() * cfg.dt, cfg)
    ch = _thin_jump(njs, u, cfg.dt)
    counts = list(prop.jump_counts) or [0] * model.n_jump
    if ch is not None:
        new = model.jump[ch] @ s
        counts[ch] += 1
    else:
        g = np.eye(k) + cfg.dt * (model.drift_matrix() + 0.5 * model.n_jump * np.eye(k))
        dw = np.asarray(db, dtype=float) + vs * cfg.dt
        for i, l in enumerate(model.diffusive):
            g = g + dw[i] * l
        new = g @ s
    new, ls = _rescaled(new, prop.log_scale)
    return PropagatorState(s=new, log_scale=ls, t=prop.t + cfg.dt,
                           rho0=prop.rho0, jump_counts=tuple(counts))


def likelihood_matrix(prop: PropagatorState) -> DensityMatrix:
    """S* S / tr(S* S); invariant under the log-scale rescaling."""
    g = prop.s.conj().T @ prop.s
    tr = np.trace(g).real
    if tr <= 0:
        raise ValueError("propagator is zero; likelihood matrix undefined")
    return DensityMatrix.repair(g / tr)


def ml_estimate(prop: PropagatorState) -> tuple[ProjectivePoint, ProjectivePoint]:
    """Most-likely initial point and its image: (argmax ||S x||, S . argmax)."""
    z = top_right_singular_vector(prop.s)
    y = ProjectivePoint.from_unnormalized(prop.s @ z.vec)
    return z, y


# ---------------------------------------------------------------------------
# vectorized ensemble drivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Curve:
    """Sampled scalar statistic on a time grid with its standard error."""

    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray

    def rows(self):
        return np.column_stack([self.t, self.mean, self.stderr])


@dataclass(frozen=True)
class EnsembleRecords:
    """States of an ensemble at the requested record times."""

    times: np.ndarray
    states: np.ndarray          # (n_rec, n, k) or (n_rec, n, k, k)
    jump_counts: np.ndarray     # (n, n_jump), cumulative at the horizon


@dataclass(frozen=True)
class PropagatorRecords:
    """Rescaled propagators of an ensemble at the requested record times."""

    times: np.ndarray
    s: np.ndarray               # (n_rec, n, k, k)
    log_scale: np.ndarray       # (n_rec, n)
    jump_counts: np.ndarray     # (n, n_jump)
    x0: np.ndarray | None = None
    rho0: np.ndarray | None = None

    def wedge_norms(self) -> np.ndarray:
        """||wedge^2 S_t|| per record and sample, true scale."""
        return wedge_norm_batch(self.s) * np.exp(2.0 * self.log_scale)

    def z_weights(self, rho0=None) -> np.ndarray:
        """tr(S* S rho0) per record and sample, true scale."""
        r = self.rho0 if rho0 is None else np.asarray(rho0, dtype=np.complex128)
        if r is None:
            raise ValueError("no rho0 available")
        raw = np.einsum("tnab,tnac,cb->tn", self.s.conj(), self.s, r).real
        return raw * np.exp(2.0 * self.log_scale)

    def likelihood_matrices(self, i_rec: int) -> np.ndarray:
        g = np.einsum("nba,nbc->nac", self.s[i_rec].conj(), self.s[i_rec])
        tr = np.einsum("naa->n", g).real
        return g / tr[:, None, None]


def _record_steps(t_grid, dt: float, n_steps: int) -> np.ndarray:
    steps = np.unique(np.round(np.asarray(t_grid, dtype=float) / dt).astype(np.int64))
    if np.any(steps < 0) or np.any(steps > n_steps):
        raise ValueError("record times outside the simulated horizon")
    return steps


def _chunk_streams(seed: int, n_traj: int, chunk_size: int = CHUNK_SIZE):
    starts = list(range(0, n_traj, chunk_size))
    return [
        (np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ci,))),
         min(chunk_size, n_traj - s0))
        for ci, s0 in enumerate(starts)
    ]


def _run_chunks(runner, seed: int, n_traj: int, threads: int = 1):
    streams = _chunk_streams(seed, n_traj)
    if threads > 1 and len(streams) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda sr: runner(*sr), streams))
    else:
        parts = [runner(rng, n) for rng, n in streams]
    return parts


def _batch_jump_choice(njs: np.ndarray, u: np.ndarray, dt: float, cfg: SimConfig):
    """Vectorized thinning: per-sample channel index, -1 for no jump."""
    probs = njs * dt
    ptot = probs.sum(axis=1)
    _check_budget(ptot, cfg)
    cum = np.cumsum(probs, axis=1)
    jumping = u < ptot
    ch = np.full(u.shape, -1, dtype=np.int64)
    if np.any(jumping):
        idx = (u[jumping, None] >= cum[jumping]).sum(axis=1)
        ch[jumping] = np.minimum(idx, njs.shape[1] - 1)
    return ch


def _require_default_scheme(cfg: SimConfig, what: str):
    if cfg.scheme != "linear_normalize":
        raise ValueError(f"{what} supports only the linear_normalize scheme")


def simulate_sse_ensemble(model: OperatorModel, x0, cfg: SimConfig, t_grid,
                          n_traj: int, threads: int = 1) -> EnsembleRecords:
    """Independent pure-state trajectories from a common initial point.

    x0 is a ProjectivePoint, a unit vector, or an (n_traj, k) array of unit
    rows (per-trajectory starts).
    """
    _require_default_scheme(cfg, "simulate_sse_ensemble")
    k = model.dim
    steps = _record_steps(t_grid, cfg.dt, cfg.n_steps)
    x0 = x0.vec if isinstance(x0, ProjectivePoint) else np.asarray(x0, dtype=np.complex128)
    per_traj_start = x0.ndim == 2

    kmat = model.drift_matrix()
    ls = np.stack(model.diffusive) if model.n_diffusive else np.zeros((0, k, k), complex)
    cs = np.stack(model.jump) if model.n_jump else np.zeros((0, k, k), complex)
    offsets = np.cumsum([0] + [n for _, n in _chunk_streams(cfg.seed, n_traj)])

    def runner_with_offset(ci, rng, n):
        if per_traj_start:
            x = x0[offsets[ci]: offsets[ci] + n].copy()
        else:
            x = np.broadcast_to(x0, (n, k)).copy()
        return _sse_chunk(model, kmat, ls, cs, x, cfg, steps, rng)

    streams = _chunk_streams(cfg.seed, n_traj)
    if threads > 1 and len(streams) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(lambda a: runner_with_offset(a[0], *a[1]), enumerate(streams))
            )
    else:
        parts = [runner_with_offset(ci, rng, n) for ci, (rng, n) in enumerate(streams)]
    states = np.concatenate([p[0] for p in parts], axis=1)
    jumps = np.concatenate([p[1] for p in parts], axis=0)
    return EnsembleRecords(times=steps * cfg.dt, states=states, jump_counts=jumps)


def _sse_chunk(model, kmat, ls, cs, x, cfg, steps, rng):
    n, k = x.shape
    nb, n_p = ls.shape[0], cs.shape[0]
    dt, sq = cfg.dt, np.sqrt(cfg.dt)
    out = np.empty((len(steps), n, k), dtype=np.complex128)
    jump_counts = np.zeros((n, n_p), dtype=np.int64)
    rec = {int(s): i for i, s in enumerate(steps)}
    if 0 in rec:
        out[rec[0]] = x
    for step in range(1, cfg.n_steps + 1):
        if n_p:
            cx = np.einsum("jab,nb->nja", cs, x)
            njs = np.einsum("nja,nja->nj", cx.conj(), cx).real
            u = rng.random(n)
            ch = _batch_jump_choice(njs, u, dt, cfg)
        else:
            ch = None
        db = rng.standard_normal((n, nb)) * sq if nb else np.zeros((n, 0))
        if nb:
            vs = 2.0 * np.einsum("na,iab,nb->ni", x.conj(), ls, x).real
            dw = db + vs * dt
            y = x + dt * (x @ kmat.T) + np.einsum("ni,iab,nb->na", dw, ls, x)
        else:
            y = x + dt * (x @ kmat.T)
        if ch is not None:
            live = ch >= 0
            if np.any(live):
                # a sampled jump with vanishing rate is kept as the diffusive branch
                good = njs[live, ch[live]] >= _DEGENERATE_JUMP_TOL
                rows = np.where(live)[0][good]
                y[rows] = cx[rows, ch[rows]]
                np.add.at(jump_counts, (rows, ch[rows]), 1)
        x = y / np.linalg.norm(y, axis=1, keepdims=True)
        if step in rec:
            out[rec[step]] = x
    return out, jump_counts


def simulate_sme_ensemble(model: OperatorModel, rho0: DensityMatrix, cfg: SimConfig,
                          t_grid, n_traj: int, threads: int = 1) -> EnsembleRecords:
    """Independent density-matrix trajectories from a common initial state."""
    _require_default_scheme(cfg, "simulate_sme_ensemble")
    k = model.dim
    steps = _record_steps(t_grid, cfg.dt, cfg.n_steps)
    r0 = rho0.mat if isinstance(rho0, DensityMatrix) else np.asarray(rho0, complex)
    kmat = model.drift_matrix()
    ls = np.stack(model.diffusive) if model.n_diffusive else np.zeros((0, k, k), complex)
    lpl = ls + np.conj(np.swapaxes(ls, 1, 2))
    cs = np.stack(model.jump) if model.n_jump else np.zeros((0, k, k), complex)

    def runner(rng, n):
        rho = np.broadcast_to(r0, (n, k, k)).copy()
        return _sme_chunk(model, kmat, ls, lpl, cs, rho, cfg, steps, rng)

    parts = _run_chunks(runner, cfg.seed, n_traj, threads)
    states = np.concatenate([p[0] for p in parts], axis=1)
    jumps = np.concatenate([p[1] for p in parts], axis=0)
    return EnsembleRecords(times=steps * cfg.dt, states=states, jump_counts=jumps)


def _sme_chunk(model, kmat, ls, lpl, cs, rho, cfg, steps, rng):
    n, k, _ = rho.shape
    nb, n_p = ls.shape[0], cs.shape[0]
    dt, sq = cfg.dt, np.sqrt(cfg.dt)
    eye = np.eye(k, dtype=np.complex128)
    out = np.empty((len(steps), n, k, k), dtype=np.complex128)
    jump_counts = np.zeros((n, n_p), dtype=np.int64)
    rec = {int(s): i for i, s in enumerate(steps)}
    if 0 in rec:
        out[rec[0]] = rho
    for step in range(1, cfg.n_steps + 1):
        if n_p:
            njs = np.einsum("jab,nbc,jac->nj", cs, rho, cs.conj(),
                            optimize=True).real
            u = rng.random(n)
            ch = _batch_jump_choice(njs, u, dt, cfg)
        else:
            ch = None
        db = rng.standard_normal((n, nb)) * sq if nb else np.zeros((n, 0))
        if nb:
            vs = np.einsum("iab,nba->ni", lpl, rho).real
            dw = db + vs * dt
            g = eye + dt * kmat + np.einsum("ni,iab->nab", dw, ls)
        else:
            g = np.broadcast_to(eye + dt * kmat, (n, k, k)).copy()
        new = np.einsum("nab,nbc,ndc->nad", g, rho, g.conj(), optimize=True)
        if ch is not None:
            live = ch >= 0
            if np.any(live):
                rows = np.where(live)[0]
                picked = njs[rows, ch[rows]]
                good = picked >= _DEGENERATE_JUMP_TOL
                rows = rows[good]
                cj = cs[ch[rows]]
                new[rows] = np.einsum("nab,nbc,ndc->nad", cj, rho[rows], cj.conj(),
                                      optimize=True)
                np.add.at(jump_counts, (rows, ch[rows]), 1)
        tr = np.einsum("naa->n", new).real
        rho = new / tr[:, None, None]
        if step in rec:
            out[rec[step]] = rho
    return out, jump_counts


def simulate_propagator_ensemble(model: OperatorModel, cfg: SimConfig, t_grid,
                                 n_traj: int, measure: str = "reference",
                                 rho0=None, x0=None,
                                 threads: int = 1) -> PropagatorRecords:
    """Ensemble of linear propagators under the reference or physical measure.

    Under the physical measure the state driving the rates is derived from
    the propagator itself: rho_t = S rho0 S*/tr for a matrix rho0, or the
    pure trajectory normalize(S x0) when x0 (one unit row per trajectory, or
    a single one) is given.
    """
    _require_default_scheme(cfg, "simulate_propagator_ensemble")
    if measure not in ("reference", "physical"):
        raise ValueError("measure must be 'reference' or 'physical'")
    k = model.dim
    steps = _record_steps(t_grid, cfg.dt, cfg.n_steps)
    x0v = None
    r0 = None
    if measure == "physical":
        if (rho0 is None) == (x0 is None):
            raise ValueError("physical measure requires exactly one of rho0, x0")
        if rho0 is not None:
            r0 = rho0.mat if isinstance(rho0, DensityMatrix) else np.asarray(rho0, complex)
        else:
            x0v = x0.vec if isinstance(x0, ProjectivePoint) else np.asarray(x0, complex)

    kmat = model.drift_matrix() + 0.5 * model.n_jump * np.eye(k)
    ls = np.stack(model.diffusive) if model.n_diffusive else np.zeros((0, k, k), complex)
    lpl = ls + np.conj(np.swapaxes(ls, 1, 2))
    cs = np.stack(model.jump) if model.n_jump else np.zeros((0, k, k), complex)
    cdc = (np.einsum("jba,jbc->jac", cs.conj(), cs)
           if model.n_jump else np.zeros((0, k, k), complex))
    offsets = np.cumsum([0] + [n for _, n in _chunk_streams(cfg.seed, n_traj)])

    def runner(ci, rng, n):
        if x0v is not None and x0v.ndim == 2:
            xs = x0v[offsets[ci]: offsets[ci] + n].copy()
        elif x0v is not None:
            xs = np.broadcast_to(x0v, (n, k)).copy()
        else:
            xs = None
        return _prop_chunk(model, kmat, ls, lpl, cs, cdc, cfg, steps, rng, n,
                           measure, r0, xs)

    streams = _chunk_streams(cfg.seed, n_traj)
    if threads > 1 and len(streams) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: runner(a[0], *a[1]), enumerate(streams)))
    else:
        parts = [runner(ci, rng, n) for ci, (rng, n) in enumerate(streams)]

    s = np.concatenate([p[0] for p in parts], axis=1)
    lsc = np.concatenate([p[1] for p in parts], axis=1)
    jumps = np.concatenate([p[2] for p in parts], axis=0)
    full_x0 = None
    if x0v is not None:
        full_x0 = x0v if x0v.ndim == 2 else np.broadcast_to(x0v, (n_traj, k)).copy()
    return PropagatorRecords(times=steps * cfg.dt, s=s, log_scale=lsc,
                             jump_counts=jumps, x0=full_x0, rho0=r0)


def _prop_chunk(model, kmat, ls, lpl, cs, cdc, cfg, steps, rng, n, measure, r0, xs):
    k = model.dim
    nb, n_p = ls.shape[0], cs.shape[0]
    dt, sq = cfg.dt, np.sqrt(cfg.dt)
    eye = np.eye(k, dtype=np.complex128)
    s = np.broadcast_to(eye / np.sqrt(k), (n, k, k)).copy()
    logsc = np.full(n, 0.5 * np.log(k))
    out_s = np.empty((len(steps), n, k, k), dtype=np.complex128)
    out_l = np.empty((len(steps), n), dtype=float)
    jump_counts = np.zeros((n, n_p), dtype=np.int64)
    rec = {int(st): i for i, st in enumerate(steps)}
    if 0 in rec:
        out_s[rec[0]] = s
        out_l[rec[0]] = logsc
    for step in range(1, cfg.n_steps + 1):
        if measure == "physical":
            if r0 is not None:
                rho = np.einsum("nab,bc,ndc->nad", s, r0, s.conj(), optimize=True)
                tr = np.einsum("naa->n", rho).real
                rho = rho / tr[:, None, None]
            else:
                xv = np.einsum("nab,nb->na", s, xs)
                xv = xv / np.linalg.norm(xv, axis=1, keepdims=True)
                rho = np.einsum("na,nb->nab", xv, xv.conj())
            vs = np.einsum("iab,nba->ni", lpl, rho).real if nb else np.zeros((n, 0))
            njs = np.einsum("jab,nba->nj", cdc, rho).real if n_p else None
        else:
            vs = np.zeros((n, nb))
            njs = np.ones((n, n_p)) if n_p else None
        if n_p:
            u = rng.random(n)
            ch = _batch_jump_choice(njs, u, dt, cfg)
        else:
            ch = None
        db = rng.standard_normal((n, nb)) * sq if nb else np.zeros((n, 0))
        if nb:
            dw = db + vs * dt
            g = eye + dt * kmat + np.einsum("ni,iab->nab", dw, ls)
            new = np.einsum("nab,nbc->nac", g, s)
        else:
            g = eye + dt * kmat
            new = np.einsum("ab,nbc->nac", g, s)
        if ch is not None:
            rows = np.where(ch >= 0)[0]
            if rows.size:
                new[rows] = np.einsum("nab,nbc->nac", cs[ch[rows]], s[rows])
                np.add.at(jump_counts, (rows, ch[rows]), 1)
        nrm = np.linalg.norm(new, axis=(1, 2))
        alive = nrm > 0
        s = np.where(alive[:, None, None], new / np.where(alive, nrm, 1.0)[:, None, None], new)
        logsc = logsc + np.where(alive, np.log(np.where(alive, nrm, 1.0)), 0.0)
        if step in rec:
            out_s[rec[step]] = s
            out_l[rec[step]] = logsc
    return out_s, out_l, jump_counts


# ---------------------------------------------------------------------------
# compiled single-trajectory driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray          # (n_rec, k)
    jump_counts: np.ndarray     # (n_rec, n_jump), cumulative at record times
    total_jumps: np.ndarray     # (n_jump,)
    degenerate_count: int


def simulate_sse_trajectory(model: OperatorModel, x0, cfg: SimConfig,
                            t_record) -> TrajectoryRecord:
    """One long pure-state trajectory, recorded at the given times.

    Runs the same scheme as the ensemble driver through a compiled kernel,
    which makes invariant-measure sampling runs (millions of steps)
    practical.
    """
    _require_default_scheme(cfg, "simulate_sse_trajectory")
    k = model.dim
    x = (x0.vec if isinstance(x0, ProjectivePoint) else np.asarray(x0, complex)).copy()
    steps = _record_steps(t_record, cfg.dt, cfg.n_steps)
    if steps.size and steps[0] == 0:
        raise ValueError("record times must be positive for the trajectory driver")
    n_steps = cfg.n_steps
    nb, n_p = model.n_diffusive, model.n_jump
    kmat = np.ascontiguousarray(model.drift_matrix())
    ls = np.ascontiguousarray(
        np.stack(model.diffusive) if nb else np.zeros((0, k, k), complex))
    cs = np.ascontiguousarray(
        np.stack(model.jump) if n_p else np.zeros((0, k, k), complex))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))

    rec_states = np.empty((len(steps), k), dtype=np.complex128)
    rec_jumps = np.zeros((len(steps), n_p), dtype=np.int64)
    jump_counts = np.zeros(n_p, dtype=np.int64)
    rec_ptr = 0
    degenerate = 0
    done = 0
    sq = float(np.sqrt(cfg.dt))
    while done < n_steps:
        m = min(_KERNEL_BLOCK, n_steps - done)
        uniforms = rng.random(m) if n_p else np.zeros(m)
        normals = rng.standard_normal((m, nb)) if nb else np.zeros((m, 0))
        rec_ptr, deg, flag = _kernels.sse_block(
            x, kmat, ls, cs, cfg.dt, sq, cfg.max_jump_prob,
            uniforms, normals, done, steps, rec_ptr, rec_states, rec_jumps,
            jump_counts,
        )
        degenerate += deg
        if flag:
            raise RuntimeError(
                f"per-step jump probability exceeded max_jump_prob={cfg.max_jump_prob} "
                f"at step {flag - 1}; reduce dt"
            )
        done += m
    return TrajectoryRecord(times=steps * cfg.dt, states=rec_states,
                            jump_counts=rec_jumps, total_jumps=jump_counts,
                            degenerate_count=degenerate)


# ---------------------------------------------------------------------------
# derived statistics
# ---------------------------------------------------------------------------

def _mean_stderr(values: np.ndarray, axis=-1):
    n = values.shape[axis]
    mean = values.mean(axis=axis)
    if n > 1:
        stderr = values.std(axis=axis, ddof=1) / np.sqrt(n)
    else:
        stderr = np.zeros_like(mean)
    return mean, stderr


@dataclass(frozen=True)
class FDecayResult:
    curve: Curve
    prefactor: float
    rate: float
    r_squared: float


def estimate_f(model: OperatorModel, t_grid, n_samples: int, cfg: SimConfig,
               threads: int = 1) -> FDecayResult:
    """Monte Carlo estimate of the mean wedge norm of the propagator.

    Simulates the propagator under the reference measure, averages
    ||wedge^2 S_t|| on the grid, and fits log mean against t on the tail
    half of the grid by weighted least squares.
    """
    recs = simulate_propagator_ensemble(model, cfg, t_grid, n_samples,
                                        measure="reference", threads=threads)
    wedge = recs.wedge_norms()
    mean, stderr = _mean_stderr(wedge, axis=1)
    curve = Curve(t=recs.times, mean=mean, stderr=stderr)
    from .measures import fit_rate

    fit = fit_rate(curve.t, curve.mean, curve.stderr)
    return FDecayResult(curve=curve, prefactor=fit.prefactor, rate=fit.rate,
                        r_squared=fit.r_squared)


@dataclass(frozen=True)
class CouplingResult:
    """Distance between a trajectory and its record-only reconstruction."""

    curve: Curve
    median: np.ndarray
    distances: np.ndarray       # (n_rec, n)
    bounds: np.ndarray          # (n_rec, n), pathwise wedge bound
    violations: int


def coupling_distance(model: OperatorModel, mu0_sampler, t_grid, n_samples: int,
                      cfg: SimConfig, threads: int = 1) -> CouplingResult:
    """Distance between the physical trajectory and the most-likely estimate.

    The trajectory and the propagator share one noise realization; at each
    record time the trajectory is S_t . x0, the estimate is S_t . argmax
    ||S_t x||, and each sample is checked against the pathwise bound
    d <= ||wedge^2 S_t|| / ||S_t x0||^2 (floating-point tolerance 1e-10).
    """
    rng0 = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                        spawn_key=(0xA11CE,)))
    x0 = mu0_sampler(rng0, n_samples)
    recs = simulate_propagator_ensemble(model, cfg, t_grid, n_samples,
                                        measure="physical", x0=x0, threads=threads)
    n_rec, n = recs.s.shape[:2]
    d = np.empty((n_rec, n))
    bound = np.empty((n_rec, n))
    for i in range(n_rec):
        s = recs.s[i]
        sx = np.einsum("nab,nb->na", s, recs.x0)
        sxn = np.linalg.norm(sx, axis=1)
        xt = sx / sxn[:, None]
        zt = _batch_top_right_singular(s)
        yt = np.einsum("nab,nb->na", s, zt)
        yt = yt / np.linalg.norm(yt, axis=1, keepdims=True)
        d[i] = wedge_distance_rows(xt, yt)
        bound[i] = wedge_norm_batch(s) / sxn ** 2
    violations = int(np.sum(d > bound * (1.0 + 1e-9) + 1e-12))
    mean, stderr = _mean_stderr(d, axis=1)
    return CouplingResult(curve=Curve(t=recs.times, mean=mean, stderr=stderr),
                          median=np.median(d, axis=1), distances=d,
                          bounds=bound, violations=violations)


def _batch_top_right_singular(s: np.ndarray) -> np.ndarray:
    """Top right singular vectors for a stack, with the deterministic
    smallest-index rule on (near-)degenerate top singular values."""
    _, sv, vh = np.linalg.svd(s)
    out = vh[:, 0, :].conj().copy()
    k = s.shape[-1]
    if k >= 2:
        ties = sv[:, 0] - sv[:, 1] <= 1e-13 * np.maximum(sv[:, 0], 1e-300)
        for idx in np.where(ties)[0]:
            out[idx] = top_right_singular_vector(s[idx]).vec
    return out


# ---------------------------------------------------------------------------
# initial-distribution samplers
# ---------------------------------------------------------------------------

def point_mass_sampler(x0):
    """All trajectories start at the same point."""
    v = x0.vec if isinstance(x0, ProjectivePoint) else np.asarray(x0, complex)

    def sample(rng, n):
        return np.broadcast_to(v, (n, v.size)).copy()

    return sample


def circle_uniform_sampler():
    """Uniform angle on the qubit circle through the poles (dimension 2)."""

    def sample(rng, n):
        theta = rng.uniform(-np.pi, np.pi, size=n)
        return np.column_stack([np.cos(theta / 2), np.sin(theta / 2)]).astype(complex)

    return sample


def haar_sampler(dim: int):
    """Unitarily invariant distribution on pure states."""

    def sample(rng, n):
        z = rng.standard_normal((n, dim)) + 1j * rng.standard_normal((n, dim))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    return sample
