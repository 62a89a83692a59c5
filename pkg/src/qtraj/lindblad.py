"""Mean evolution of a continuously monitored system.

The model is a Hamiltonian plus two families of measurement operators:
diffusive channels (Brownian signal) and jump channels (counting signal).
This module provides the generator of the unconditioned semigroup, its
matrix representation, the semigroup itself, the stationary-state structure
and the ergodicity check (simplicity of the zero eigenvalue, spectral gap).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .operators import (
    DensityMatrix,
    hermitize,
    matrix_from_json,
    matrix_to_json,
    trace_norm,
)

__all__ = [
    "OperatorModel",
    "ErgodicityReport",
    "lindblad_apply",
    "vectorized_generator",
    "evolve_master",
    "stationary_states",
    "check_l_erg",
    "invariant_projector_test",
    "direct_sum_model",
]

# eigenvalues with |mu| below this times the generator norm count as zero
GAP_TOL = 1e-8


@dataclass(frozen=True)
class OperatorModel:
    """Hamiltonian plus diffusive and jump measurement operators.

    Either operator family may be empty; both empty is a purely Hamiltonian
    model. All matrices are dim x dim complex.
    """

    dim: int
    hamiltonian: np.ndarray = field(repr=False)
    diffusive: tuple = field(default=(), repr=False)
    jump: tuple = field(default=(), repr=False)

    def __init__(self, hamiltonian, diffusive=(), jump=()):
        h = hermitize(hamiltonian)
        k = h.shape[0]
        diff = tuple(np.asarray(m, dtype=np.complex128) for m in diffusive)
        jmp = tuple(np.asarray(m, dtype=np.complex128) for m in jump)
        for m in diff + jmp:
            if m.shape != (k, k):
                raise ValueError(f"operator shape {m.shape} does not match dim {k}")
            if not np.all(np.isfinite(m.view(np.float64))):
                raise ValueError("operator has non-finite entries")
        for m in diff + jmp:
            m.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "dim", k)
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "diffusive", diff)
        object.__setattr__(self, "jump", jmp)

    @property
    def n_diffusive(self) -> int:
        return len(self.diffusive)

    @property
    def n_jump(self) -> int:
        return len(self.jump)

    def all_noise(self) -> tuple:
        return self.diffusive + self.jump

    def drift_matrix(self) -> np.ndarray:
        """K = -iH - (1/2) (sum L*L + sum C*C), the no-event drift."""
        k = -1j * self.hamiltonian
        for m in self.all_noise():
            k = k - 0.5 * (m.conj().T @ m)
        return k

    # -- JSON model files ---------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "H": matrix_to_json(self.hamiltonian),
            "diffusive": [matrix_to_json(m) for m in self.diffusive],
            "jump": [matrix_to_json(m) for m in self.jump],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "OperatorModel":
        k = int(data["dim"])
        h = matrix_from_json(data["H"], k)
        diff = [matrix_from_json(m, k) for m in data.get("diffusive", [])]
        jmp = [matrix_from_json(m, k) for m in data.get("jump", [])]
        return cls(h, diff, jmp)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "OperatorModel":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def lindblad_apply(model: OperatorModel, rho) -> np.ndarray:
    """Generator of the mean evolution applied to a matrix.

    -i[H, rho] + sum_V (V rho V* - (1/2){V*V, rho}) over all measurement
    operators. Trace-free; maps Hermitian to Hermitian.
    """
    rho = np.asarray(rho, dtype=np.complex128)
    if rho.shape != (model.dim, model.dim):
        raise ValueError(f"state shape {rho.shape} does not match dim {model.dim}")
    h = model.hamiltonian
    out = -1j * (h @ rho - rho @ h)
    for v in model.all_noise():
        vv = v.conj().T @ v
        out = out + v @ rho @ v.conj().T - 0.5 * (vv @ rho + rho @ vv)
    return out


def vectorized_generator(model: OperatorModel) -> np.ndarray:
    """Matrix of the generator on column-stacked matrices (dim^2 x dim^2)."""
    k = model.dim
    eye = np.eye(k, dtype=np.complex128)
    h = model.hamiltonian
    mat = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for v in model.all_noise():
        vv = v.conj().T @ v
        mat = mat + np.kron(v.conj(), v)
        mat = mat - 0.5 * (np.kron(eye, vv) + np.kron(vv.T, eye))
    return mat


def _vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho, dtype=np.complex128).ravel(order="F")


def _unvec(v: np.ndarray, k: int) -> np.ndarray:
    return v.reshape(k, k, order="F")


def evolve_master(model: OperatorModel, rho0: DensityMatrix, t: float) -> DensityMatrix:
    """Mean state at time t, exp(tL) applied to rho0.

    Uses the scaling-and-squaring matrix exponential of the vectorized
    generator; the output is PSD-repaired (eigenvalue clipping plus trace
    renormalization, perturbation <= dim * 1e-10).
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t == 0:
        return rho0
    gen = vectorized_generator(model)
    prop = scipy.linalg.expm(t * gen)
    out = _unvec(prop @ _vec(rho0.mat), model.dim)
    return DensityMatrix.repair(out, clip_tol=1e-8)


@dataclass(frozen=True)
class ErgodicityReport:
    """Outcome of the unique-stationary-state check.

    holds is true iff the zero eigenvalue of the generator is simple; in
    that case stationary_state is the unique invariant state.  spectral_gap
    is minus the largest real part among the eigenvalues not counted as
    zero.  degenerate_structure flags a kernel whose dimension exceeds the
    number of minimal invariant blocks (invariant states then form a
    continuum rather than a simplex).
    """

    holds: bool
    zero_multiplicity: int
    spectral_gap: float
    stationary_state: DensityMatrix | None = None
    degenerate_structure: bool = False

    def to_json_dict(self) -> dict:
        out = {
            "holds": self.holds,
            "zero_multiplicity": self.zero_multiplicity,
            "spectral_gap": self.spectral_gap,
            "degenerate_structure": self.degenerate_structure,
        }
        if self.stationary_state is not None:
            out["stationary_state"] = matrix_to_json(self.stationary_state.mat)
        return out


def _kernel_projection(gen: np.ndarray, rtol: float = GAP_TOL) -> np.ndarray:
    """Spectral projector onto ker(gen) along ran(gen).

    Valid because zero is a semisimple eigenvalue for generators of bounded
    semigroups. Built from SVD null spaces of gen and gen*, which is robust
    even when the eigenvector matrix is ill conditioned.
    """
    scale = np.linalg.norm(gen, 2)
    if scale == 0.0:
        return np.eye(gen.shape[0], dtype=np.complex128)
    kb = scipy.linalg.null_space(gen, rcond=rtol)
    kl = scipy.linalg.null_space(gen.conj().T, rcond=rtol)
    if kb.shape[1] != kl.shape[1] or kb.shape[1] == 0:
        raise RuntimeError("kernel extraction failed: left/right dimensions differ")
    mid = np.linalg.solve(kl.conj().T @ kb, kl.conj().T)
    return kb @ mid


def _hermitian_kernel_basis(gen: np.ndarray, k: int, rtol: float = GAP_TOL) -> list[np.ndarray]:
    """Real-linear basis of Hermitian fixed points of the generator."""
    null = scipy.linalg.null_space(gen, rcond=rtol)
    cands = []
    for c in null.T:
        x = _unvec(c, k)
        cands.append(0.5 * (x + x.conj().T))
        cands.append((x - x.conj().T) / 2j)
    # reduce to a real-linearly independent orthonormal family (HS inner product)
    dim_target = null.shape[1]
    rows = np.array([np.concatenate([m.real.ravel(), m.imag.ravel()]) for m in cands])
    q, r = np.linalg.qr(rows.T)
    keep = np.abs(np.diag(r)) > 1e-10
    basis = []
    for col in q.T[: len(keep)][keep][:dim_target]:
        m = col[: k * k].reshape(k, k) + 1j * col[k * k:].reshape(k, k)
        basis.append(0.5 * (m + m.conj().T))
    return basis


def stationary_states(model: OperatorModel, rtol: float = GAP_TOL):
    """Extremal stationary states of the mean semigroup.

    Returns (states, degenerate_structure).  The states are PSD trace-one
    fixed points with pairwise orthogonal supports, one per minimal
    invariant block; they are found by compressing the kernel to the
    maximal invariant support and splitting it with the eigen-decomposition
    of a random Hermitian kernel combination.  degenerate_structure is set
    when the kernel dimension exceeds the number of blocks found (the fixed
    point set then has matrix blocks of size > 1 and the extreme points form
    a continuum; the returned states are a representative family).
    """
    k = model.dim
    gen = vectorized_generator(model)
    p0 = _kernel_projection(gen, rtol)
    kernel_dim = int(np.round(np.trace(p0).real))

    # maximal-support invariant state: kernel projection of the mixed state
    rho_avg = _unvec(p0 @ _vec(np.eye(k) / k), k)
    rho_avg = 0.5 * (rho_avg + rho_avg.conj().T)
    rho_avg = rho_avg / np.trace(rho_avg).real
    w, u = np.linalg.eigh(rho_avg)
    support = w > 1e-9
    basis = u[:, support]  # k x v, orthonormal columns
    v = basis.shape[1]
    weights = np.clip(w[support], 0.0, None)

    if v == 0:
        raise RuntimeError("no invariant support found")

    herm = _hermitian_kernel_basis(gen, k, rtol)
    w_mat = (basis.conj().T @ rho_avg @ basis)
    w_mat = 0.5 * (w_mat + w_mat.conj().T)
    ew, eu = np.linalg.eigh(w_mat)
    ew = np.clip(ew, 1e-14, None)
    w_inv_half = (eu / np.sqrt(ew)) @ eu.conj().T

    # An accidental eigenvalue collision in one random combination can merge
    # two blocks, so keep the attempt that refines the support the most.
    rng = np.random.default_rng(0x5EED)
    gen_scale = max(1.0, np.linalg.norm(gen, 2))
    best: list[DensityMatrix] | None = None
    for _ in range(8):
        coef = rng.standard_normal(len(herm))
        a = sum(c * m for c, m in zip(coef, herm))
        a_v = basis.conj().T @ a @ basis
        c_mat = w_inv_half @ a_v @ w_inv_half
        c_mat = 0.5 * (c_mat + c_mat.conj().T)
        evals, evecs = np.linalg.eigh(c_mat)
        # cluster eigenvalues; each cluster's eigenspace is one invariant block
        scale = max(np.abs(evals).max(), 1.0)
        splits = np.where(np.diff(evals) > 1e-6 * scale)[0]
        groups = np.split(np.arange(v), splits + 1)
        states = []
        ok = True
        for g in groups:
            blk = basis @ evecs[:, g]  # k x m block basis
            comp = blk.conj().T @ rho_avg @ blk
            comp = 0.5 * (comp + comp.conj().T)
            tr = np.trace(comp).real
            if tr <= 1e-12:
                ok = False
                break
            rho_l = blk @ (comp / tr) @ blk.conj().T
            if trace_norm(lindblad_apply(model, rho_l)) > 1e-8 * gen_scale:
                ok = False
                break
            states.append(DensityMatrix.repair(rho_l, clip_tol=1e-8))
        if ok and (best is None or len(states) > len(best)):
            best = states
            if len(best) == kernel_dim:
                break
    if best is None:
        raise RuntimeError("block splitting did not stabilize; kernel may be ill conditioned")
    return best, kernel_dim > len(best)


def check_l_erg(model: OperatorModel, rtol: float = GAP_TOL) -> ErgodicityReport:
    """Ergodicity of the mean semigroup: is the zero eigenvalue simple?

    zero_multiplicity counts generator eigenvalues with |mu| below
    rtol * ||generator||; the spectral gap is minus the largest real part of
    the remaining spectrum.
    """
    gen = vectorized_generator(model)
    scale = np.linalg.norm(gen, 2)
    if scale == 0.0:
        return ErgodicityReport(
            holds=False,
            zero_multiplicity=model.dim ** 2,
            spectral_gap=0.0,
            degenerate_structure=True,
        )
    evals = scipy.linalg.eigvals(gen)
    zero = np.abs(evals) < rtol * scale
    mult = int(zero.sum())
    nonzero = evals[~zero]
    gap = float(-nonzero.real.max()) if nonzero.size else 0.0
    holds = mult == 1
    stationary = None
    degenerate = False
    if holds:
        states, degenerate = stationary_states(model, rtol)
        if len(states) != 1:
            raise RuntimeError("simple zero eigenvalue but multiple stationary states")
        stationary = states[0]
    else:
        try:
            _, degenerate = stationary_states(model, rtol)
        except RuntimeError:
            degenerate = True
    return ErgodicityReport(
        holds=holds,
        zero_multiplicity=mult,
        spectral_gap=gap,
        stationary_state=stationary,
        degenerate_structure=degenerate,
    )


def invariant_projector_test(model: OperatorModel, pi, tol: float = 1e-10) -> bool:
    """Whether (Id - pi) X pi vanishes for every measurement operator X.

    pi must be an orthogonal projector. Note this tests the measurement
    operators only, not the Hamiltonian, so a passing projector need not be
    invariant for the full dynamics.
    """
    pi = np.asarray(pi, dtype=np.complex128)
    if pi.shape != (model.dim, model.dim):
        raise ValueError("projector shape mismatch")
    if np.linalg.norm(pi @ pi - pi) > 1e-10 * max(1.0, np.linalg.norm(pi)):
        raise ValueError("input is not idempotent")
    if np.linalg.norm(pi - pi.conj().T) > 1e-10 * max(1.0, np.linalg.norm(pi)):
        raise ValueError("input is not self adjoint")
    comp = np.eye(model.dim) - pi
    for x in model.all_noise():
        if np.linalg.norm(comp @ x @ pi) > tol * max(1.0, np.linalg.norm(x)):
            return False
    return True


def direct_sum_model(m1: OperatorModel, m2: OperatorModel) -> OperatorModel:
    """Block-diagonal direct sum of two models (noise acts blockwise)."""
    def embed_upper(x):
        return scipy.linalg.block_diag(x, np.zeros((m2.dim, m2.dim)))

    def embed_lower(x):
        return scipy.linalg.block_diag(np.zeros((m1.dim, m1.dim)), x)

    h = scipy.linalg.block_diag(m1.hamiltonian, m2.hamiltonian)
    diffusive = [embed_upper(x) for x in m1.diffusive] + [embed_lower(x) for x in m2.diffusive]
    jump = [embed_upper(x) for x in m1.jump] + [embed_lower(x) for x in m2.jump]
    return OperatorModel(h, diffusive, jump)
