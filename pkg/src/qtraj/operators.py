"""Dense complex linear algebra at small fixed dimension.

States and operators are plain ``complex128`` numpy arrays; the classes in
this module are thin wrappers that enforce the invariants the rest of the
package relies on (unit norm and phase canonicalization for pure states,
hermiticity / positivity / unit trace for density matrices).  Everything is
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

__all__ = [
    "ProjectivePoint",
    "DensityMatrix",
    "hermitize",
    "make_projector",
    "fs_distance",
    "fs_distance_vectors",
    "overlap_gram",
    "wedge_square",
    "wedge_norm",
    "top_right_singular_vector",
    "trace_norm",
    "trace_distance",
    "matrix_to_json",
    "matrix_from_json",
]

# Singular values closer (relatively) than this are treated as a degenerate
# top cluster in top_right_singular_vector.
_SV_TIE_TOL = 1e-13


def _as_complex_matrix(a, name: str = "operator") -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a.view(np.float64))):
        raise ValueError(f"{name} has non-finite entries")
    return a


def hermitize(a, tol: float = 1e-12) -> np.ndarray:
    """Return the Hermitian part (a + a*)/2, rejecting badly non-Hermitian input.

    The symmetrization is exact for input that is already Hermitian in
    floating point, so Hermitian matrices round-trip unchanged.
    """
    a = _as_complex_matrix(a)
    h = 0.5 * (a + a.conj().T)
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - h) > tol * max(scale, 1.0):
        raise ValueError("matrix is not Hermitian within tolerance")
    return h


@dataclass(frozen=True)
class ProjectivePoint:
    """A pure state, i.e. a point of complex projective space.

    The stored representative is a unit vector rotated so that its first
    component of nonnegligible magnitude is real and positive.  Equality is
    modulo global phase: two points are equal iff the modulus of their
    overlap is 1 up to 1e-10.
    """

    vec: np.ndarray = field(repr=False)

    def __init__(self, vec):
        v = np.asarray(vec, dtype=np.complex128).ravel()
        if v.ndim != 1 or v.size < 1:
            raise ValueError("representative must be a nonempty vector")
        if not np.all(np.isfinite(v.view(np.float64))):
            raise ValueError("representative has non-finite entries")
        nrm = np.linalg.norm(v)
        if abs(nrm - 1.0) > 1e-12:
            raise ValueError(f"representative must be unit norm, got {nrm!r}")
        v = v / nrm
        # canonical global phase: first component with |v_i| > 1e-12 made real > 0
        idx = int(np.argmax(np.abs(v) > 1e-12))
        pivot = v[idx]
        v = v * (pivot.conjugate() / abs(pivot))
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    @classmethod
    def from_unnormalized(cls, vec) -> "ProjectivePoint":
        v = np.asarray(vec, dtype=np.complex128).ravel()
        nrm = np.linalg.norm(v)
        if nrm < 1e-300:
            raise ValueError("cannot projectivize the zero vector")
        return cls(v / nrm)

    @classmethod
    def basis(cls, dim: int, index: int) -> "ProjectivePoint":
        v = np.zeros(dim, dtype=np.complex128)
        v[index] = 1.0
        return cls(v)

    @property
    def dim(self) -> int:
        return self.vec.size

    def overlap(self, other: "ProjectivePoint") -> float:
        """|<x, y>| for unit representatives."""
        return float(abs(np.vdot(self.vec, other.vec)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProjectivePoint):
            return NotImplemented
        if self.dim != other.dim:
            return False
        return self.overlap(other) >= 1.0 - 1e-10

    # equality is tolerance-based, so only the dimension can be hashed safely
    def __hash__(self) -> int:
        return hash(("ProjectivePoint", self.dim))


@dataclass(frozen=True)
class DensityMatrix:
    """Positive semidefinite trace-one matrix.

    Construction symmetrizes the input, clips eigenvalues in [-1e-10, 0) to
    zero and requires |trace - 1| <= 1e-10.  Input that is already Hermitian,
    PSD and trace one round-trips its entries exactly.
    """

    mat: np.ndarray = field(repr=False)

    def __init__(self, mat, *, clip_tol: float = 1e-10):
        m = hermitize(mat)
        tr = float(np.trace(m).real)
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"trace must be one, got {tr!r}")
        w = np.linalg.eigvalsh(m)
        if w[0] < -clip_tol:
            raise ValueError(f"matrix is not PSD: min eigenvalue {w[0]:.3e}")
        if w[0] < 0.0:
            # clip the tiny negative part, keeping the entries otherwise intact
            w2, u = np.linalg.eigh(m)
            w2 = np.clip(w2, 0.0, None)
            m = (u * w2) @ u.conj().T
            m = 0.5 * (m + m.conj().T)
        m.setflags(write=False)
        object.__setattr__(self, "mat", m)

    @classmethod
    def repair(cls, mat, clip_tol: float = 1e-8) -> "DensityMatrix":
        """Clip negative eigenvalues up to clip_tol and renormalize the trace.

        Intended for integrator output; the perturbation is bounded by
        dim * clip_tol in trace norm.
        """
        m = 0.5 * (np.asarray(mat, dtype=np.complex128) + np.asarray(mat).conj().T)
        w, u = np.linalg.eigh(m)
        if w[0] < -clip_tol:
            raise ValueError(f"matrix is too far from PSD to repair: {w[0]:.3e}")
        w = np.clip(w, 0.0, None)
        m = (u * w) @ u.conj().T
        m = 0.5 * (m + m.conj().T)
        tr = float(np.trace(m).real)
        if tr <= 0.0:
            raise ValueError("repair produced a zero matrix")
        return cls(m / tr)

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        return cls(np.eye(dim, dtype=np.complex128) / dim)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def eigvals(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.mat)


def make_projector(x: ProjectivePoint) -> DensityMatrix:
    """Rank-one orthogonal projector onto the line spanned by x."""
    v = x.vec
    return DensityMatrix(np.outer(v, v.conj()))


def fs_distance(x: ProjectivePoint, y: ProjectivePoint) -> float:
    """Fubini-Study sine distance sqrt(1 - |<x,y>|^2), in [0, 1]."""
    return fs_distance_vectors(x.vec, y.vec)


def fs_distance_vectors(x: np.ndarray, y: np.ndarray) -> float:
    """fs_distance on raw unit vectors (no wrapping overhead)."""
    ov = abs(np.vdot(x, y)) ** 2
    return float(np.sqrt(max(0.0, 1.0 - min(ov, 1.0))))


def overlap_gram(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pairwise fs_distance matrix between two stacks of unit row vectors."""
    g = np.abs(xs.conj() @ ys.T) ** 2
    return np.sqrt(np.clip(1.0 - g, 0.0, 1.0))


def wedge_distance_rows(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """fs_distance between paired unit rows, computed from the wedge
    components x_p y_q - x_q y_p.

    Equivalent to sqrt(1 - |<x,y>|^2) but with absolute error O(eps) even
    for nearly parallel vectors, where the overlap form loses half the
    digits; used for pathwise contraction bounds.
    """
    outer = xs[:, :, None] * ys[:, None, :]
    anti = outer - np.swapaxes(outer, 1, 2)
    iu = np.triu_indices(xs.shape[1], k=1)
    comps = anti[:, iu[0], iu[1]]
    return np.minimum(np.linalg.norm(comps, axis=1), 1.0)


def _wedge_index_pairs(k: int) -> list[tuple[int, int]]:
    return list(combinations(range(k), 2))


def wedge_square(a) -> np.ndarray:
    """Second exterior power of a, acting on the alternating-form space.

    The basis of the wedge space is {e_p ^ e_q : p < q} in lexicographic
    order, so the output is C(k,2) x C(k,2) and its entries are the 2x2
    minors of a.  Functorial: wedge_square(A @ B) = wedge_square(A) @
    wedge_square(B).
    """
    a = _as_complex_matrix(a)
    k = a.shape[0]
    if k < 2:
        raise ValueError("wedge_square requires dimension >= 2")
    pairs = _wedge_index_pairs(k)
    p = np.array([pq[0] for pq in pairs])
    q = np.array([pq[1] for pq in pairs])
    # minor((p,q),(r,s)) = a[p,r] a[q,s] - a[q,r] a[p,s]
    out = (
        a[np.ix_(p, p)] * a[np.ix_(q, q)]
        - a[np.ix_(q, p)] * a[np.ix_(p, q)]
    )
    return out


def wedge_norm(a) -> float:
    """Product of the two largest singular values of a.

    Equals the operator norm of wedge_square(a); measures how the map
    contracts 2-dimensional volumes.
    """
    a = _as_complex_matrix(a)
    if a.shape[0] < 2:
        raise ValueError("wedge_norm requires dimension >= 2")
    s = np.linalg.svd(a, compute_uv=False)
    return float(s[0] * s[1])


def wedge_norm_batch(a: np.ndarray) -> np.ndarray:
    """wedge_norm over a stack of matrices (n, k, k)."""
    s = np.linalg.svd(a, compute_uv=False)
    return s[..., 0] * s[..., 1]


def top_right_singular_vector(a) -> ProjectivePoint:
    """Unit x maximizing ||A x||, i.e. the top right singular vector.

    When the top singular value is degenerate the maximizer is not unique;
    the point returned is then the normalized projection of the basis vector
    with the smallest index that has a nonzero component in the top singular
    subspace.  The choice is deterministic across calls.
    """
    a = _as_complex_matrix(a)
    nrm = np.linalg.norm(a)
    if nrm == 0.0:
        raise ValueError("zero matrix has no distinguished singular vector")
    _, s, vh = np.linalg.svd(a)
    top = s >= s[0] * (1.0 - _SV_TIE_TOL)
    basis = vh[top].conj().T  # columns span the top singular subspace
    if basis.shape[1] == 1:
        return ProjectivePoint(basis[:, 0])
    # degenerate: project e_i for the smallest i with nonzero projection
    for i in range(a.shape[0]):
        proj = basis @ basis[i].conj()
        if np.linalg.norm(proj) > 1e-9:
            return ProjectivePoint.from_unnormalized(proj)
    raise RuntimeError("unreachable: top singular subspace is nontrivial")


def trace_norm(a) -> float:
    """Schatten 1-norm (sum of singular values)."""
    return float(np.linalg.svd(np.asarray(a, dtype=np.complex128), compute_uv=False).sum())


def trace_distance(rho, sigma) -> float:
    """(1/2) || rho - sigma ||_1 between two states."""
    r = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho)
    s = sigma.mat if isinstance(sigma, DensityMatrix) else np.asarray(sigma)
    return 0.5 * trace_norm(r - s)


# ---------------------------------------------------------------------------
# JSON codec: a k x k operator is a flat row-major list of [re, im] pairs.
# ---------------------------------------------------------------------------

def matrix_to_json(a) -> list[list[float]]:
    a = np.asarray(a, dtype=np.complex128)
    return [[float(z.real), float(z.imag)] for z in a.ravel(order="C")]


def matrix_from_json(data, dim: int) -> np.ndarray:
    flat = np.array([complex(re, im) for re, im in data], dtype=np.complex128)
    if flat.size != dim * dim:
        raise ValueError(f"expected {dim * dim} entries, got {flat.size}")
    return flat.reshape(dim, dim)


def dumps_matrix(a) -> str:
    return json.dumps(matrix_to_json(a))
