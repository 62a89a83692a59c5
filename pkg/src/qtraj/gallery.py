"""Named example models with known behavior, used as oracles and demos.

Each constructor returns the model together with its expected properties:
whether the mean evolution is ergodic, whether the purification condition
holds, and the analytic invariant measure when one is available (an angle
density on the qubit circle, a finite atom list, or the stationary vector
of an embedded classical chain).  The gallery doubles as a regression
suite: the checkers must reproduce every expected field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.linalg

from .lindblad import OperatorModel
from .measures import AngleDensity
from .operators import ProjectivePoint

__all__ = [
    "NamedExample",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "SIGMA_PLUS",
    "SIGMA_MINUS",
    "qnd_model",
    "qnd_density",
    "qnd_scaling_distance",
    "thermal_diffusive_model",
    "thermal_diffusive_density",
    "thermal_jump_model",
    "markov_embedding_model",
    "cyclic_generator",
    "markov_stationary",
    "counterexample_model",
    "circle_point",
    "GALLERY",
    "gallery_build",
]

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)


def circle_point(theta: float) -> ProjectivePoint:
    """The pure state at angle theta on the qubit circle: Bloch vector
    (sin theta, 0, cos theta)."""
    return ProjectivePoint(np.array([np.cos(theta / 2), np.sin(theta / 2)],
                                    dtype=complex))


@dataclass(frozen=True)
class NamedExample:
    """A model plus everything the checkers and samplers should reproduce."""

    name: str
    model: OperatorModel
    params: dict
    erg_holds: bool
    pur_verdict: str                     # "holds" or "fails"
    stationary: np.ndarray | None = field(default=None, repr=False)
    pur_witness: np.ndarray | None = field(default=None, repr=False)
    density: AngleDensity | None = None
    atoms: list | None = None            # [(ProjectivePoint, weight)]
    markov_generator: np.ndarray | None = field(default=None, repr=False)
    default_start: ProjectivePoint | None = None
    notes: str = ""


# ---------------------------------------------------------------------------
# non-demolition measurement tilted by a transverse field
# ---------------------------------------------------------------------------

def qnd_model(gamma: float = 1.0) -> NamedExample:
    """Qubit with Hamiltonian along y and diffusive monitoring along z.

    Ergodic with the maximally mixed invariant state; purification holds;
    the trajectory's invariant measure lives on the Y = 0 circle with the
    density of qnd_density.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    model = OperatorModel(SIGMA_Y, diffusive=[np.sqrt(gamma) * SIGMA_Z])
    return NamedExample(
        name="qnd",
        model=model,
        params={"gamma": gamma},
        erg_holds=True,
        pur_verdict="holds",
        stationary=np.eye(2, dtype=complex) / 2,
        density=qnd_density(gamma),
        default_start=circle_point(np.pi / 2),
        notes="diffusive z-monitoring against a y-field",
    )


def _qnd_tau_raw(theta: float, gamma: float) -> float:
    """Unnormalized invariant angle density of the monitored qubit.

    On (0, pi) equals (1 + c^2)^{3/2} * integral_{-inf}^{c} of
    exp((w - c)/gamma) (1 + w^2)^{-3/2} dw with c = cot(theta); extended
    pi-periodically.  Both endpoint limits equal gamma (removable), which is
    used at the grid endpoints.
    """
    t = theta % np.pi
    if t < 1e-9 or np.pi - t < 1e-9:
        return gamma
    c = 1.0 / np.tan(t)
    # the exponential factor truncates 45 decay lengths below c; breakpoints
    # mark the hump of (1+w^2)^{-3/2} at w ~ 0 and the onset of the decay,
    # which adaptive quadrature misses at large gamma otherwise
    w_lo = c - 45.0 * gamma
    pts = sorted({p for p in (-1.0, 0.0, 1.0, c - gamma, c - 0.05 * gamma)
                  if w_lo < p < c})
    val, err = scipy.integrate.quad(
        lambda w: np.exp((w - c) / gamma) * (1.0 + w * w) ** -1.5,
        w_lo, c, points=pts, epsabs=1e-300, epsrel=1e-10, limit=500,
    )
    if not np.isfinite(val) or val <= 0:
        raise RuntimeError(f"quadrature failed at theta={theta}")
    return float((1.0 + c * c) ** 1.5 * val)


def qnd_density(gamma: float) -> AngleDensity:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return AngleDensity(
        pdf_raw=lambda th: _qnd_tau_raw(th, gamma),
        params={"gamma": gamma},
        name="qnd",
    )


def qnd_scaling_distance(gamma: float, theta_min: float = 0.05,
                         theta_max: float = 20.0, n_grid: int = 2000) -> float:
    """Truncated L1 distance between the rescaled density tau(theta/gamma) /
    (2 gamma^3) and its strong-noise limit theta^-3 exp(-1/theta).

    Uses the unnormalized density, matching the limit statement; quadrature
    only, no simulation.
    """
    grid = np.linspace(theta_min, theta_max, n_grid)
    lhs = np.array([_qnd_tau_raw(t / gamma, gamma) for t in grid]) / (2 * gamma ** 3)
    rhs = grid ** -3.0 * np.exp(-1.0 / grid)
    return float(np.trapezoid(np.abs(lhs - rhs), grid))


# ---------------------------------------------------------------------------
# thermal qubit, diffusive detection
# ---------------------------------------------------------------------------

def thermal_diffusive_model(a: float, b: float) -> NamedExample:
    """Qubit exchanging quanta with a bath, homodyne-type diffusive signal.

    Raising at rate a, lowering at rate b, no Hamiltonian.  Ergodic,
    purification holds, invariant angle density in closed form.
    """
    if a <= 0 or b <= 0:
        raise ValueError("rates must be positive")
    model = OperatorModel(
        np.zeros((2, 2), dtype=complex),
        diffusive=[np.sqrt(a) * SIGMA_PLUS, np.sqrt(b) * SIGMA_MINUS],
    )
    return NamedExample(
        name="thermal_diffusive",
        model=model,
        params={"a": a, "b": b},
        erg_holds=True,
        pur_verdict="holds",
        stationary=np.diag([a / (a + b), b / (a + b)]).astype(complex),
        density=thermal_diffusive_density(a, b),
        default_start=circle_point(np.pi / 2),
        notes="raising/lowering monitored diffusively",
    )


def thermal_diffusive_density(a: float, b: float) -> AngleDensity:
    """Closed-form invariant angle density of the diffusive thermal qubit."""
    z = (a - b) / (a + b)
    sig = (a + b) / (2.0 * np.sqrt(a * b))

    def raw(theta: float) -> float:
        ct = np.cos(theta)
        return float(
            np.exp(sig * z * np.arctan(sig * (ct - z)))
            / (ct * ct + 1.0 - 2.0 * z * ct) ** 1.5
        )

    return AngleDensity(pdf_raw=raw, params={"a": a, "b": b, "z": z, "sigma": sig},
                        name="thermal_diffusive")


# ---------------------------------------------------------------------------
# thermal qubit, photon counting
# ---------------------------------------------------------------------------

def thermal_jump_model(a: float, b: float) -> NamedExample:
    """Thermal qubit with counting detection only: a two-point invariant
    measure, weight a/(a+b) on the up state and b/(a+b) on the down state."""
    if a <= 0 or b <= 0:
        raise ValueError("rates must be positive")
    model = OperatorModel(
        np.zeros((2, 2), dtype=complex),
        jump=[np.sqrt(a) * SIGMA_PLUS, np.sqrt(b) * SIGMA_MINUS],
    )
    atoms = [
        (ProjectivePoint.basis(2, 0), a / (a + b)),
        (ProjectivePoint.basis(2, 1), b / (a + b)),
    ]
    return NamedExample(
        name="thermal_jump",
        model=model,
        params={"a": a, "b": b},
        erg_holds=True,
        pur_verdict="holds",
        stationary=np.diag([a / (a + b), b / (a + b)]).astype(complex),
        atoms=atoms,
        default_start=ProjectivePoint.basis(2, 0),
        notes="pure jump process between the poles",
    )


# ---------------------------------------------------------------------------
# classical Markov chain embedding
# ---------------------------------------------------------------------------

def cyclic_generator(rates) -> np.ndarray:
    """Generator of the cyclic chain i -> i+1 (mod n) with the given rates."""
    rates = np.asarray(rates, dtype=float)
    n = rates.size
    q = np.zeros((n, n))
    for i in range(n):
        q[i, (i + 1) % n] = rates[i]
        q[i, i] = -rates[i]
    return q


def markov_stationary(q: np.ndarray) -> np.ndarray:
    """Stationary row vector of a generator (left kernel, normalized)."""
    ns = scipy.linalg.null_space(q.T)
    if ns.shape[1] != 1:
        raise ValueError("generator does not have a unique stationary distribution")
    pi = ns[:, 0].real
    pi = np.abs(pi)
    return pi / pi.sum()


def markov_embedding_model(q, h_diag=None) -> NamedExample:
    """Embed a finite-state Markov jump process as counting channels.

    For each ordered pair (i, j) with rate q[i, j] > 0 there is a jump
    operator sqrt(q[i, j]) |e_j><e_i|; the Hamiltonian is diagonal (default
    zero).  Started in a basis state, the trajectory is distributionally the
    chain itself: constant between jumps, jumping i -> j at rate q[i, j].
    """
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    if q.ndim != 2 or q.shape[1] != n:
        raise ValueError("generator must be square")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise ValueError("off-diagonal rates must be nonnegative")
    if np.any(np.abs(q.sum(axis=1)) > 1e-10):
        raise ValueError("generator rows must sum to zero")
    if np.any(off.sum(axis=1) <= 0):
        raise ValueError("every state needs at least one outgoing rate")
    h = np.zeros((n, n), dtype=complex) if h_diag is None else np.diag(
        np.asarray(h_diag, dtype=float)).astype(complex)
    jumps = []
    for i in range(n):
        for j in range(n):
            if i != j and q[i, j] > 0:
                c = np.zeros((n, n), dtype=complex)
                c[j, i] = np.sqrt(q[i, j])
                jumps.append(c)
    model = OperatorModel(h, jump=jumps)
    try:
        pi = markov_stationary(q)
        erg = True
        atoms = [(ProjectivePoint.basis(n, i), float(pi[i])) for i in range(n)]
        stationary = np.diag(pi).astype(complex)
    except ValueError:
        erg = False
        atoms = None
        stationary = None
    return NamedExample(
        name="markov",
        model=model,
        params={"q": q.tolist(), "h_diag": None if h_diag is None else list(h_diag)},
        erg_holds=erg,
        pur_verdict="holds",
        stationary=stationary,
        atoms=atoms,
        markov_generator=q,
        default_start=ProjectivePoint.basis(n, 0),
        notes="classical chain embedded via counting channels",
    )


# ---------------------------------------------------------------------------
# the purification counterexample
# ---------------------------------------------------------------------------

def counterexample_model() -> NamedExample:
    """Three-level model that purifies although the algebraic condition fails.

    Two diffusive channels plus one counting channel; the observables all
    compress to scalars on span{e2, e3}, so the purification condition has a
    rank-two witness, yet the first count resets the state to a known pure
    state and trajectories purify anyway.  The mean evolution is ergodic
    with a positive definite invariant state.
    """
    e1, e2, e3 = np.eye(3, dtype=complex)
    u = (e1 + e2 + e3) / np.sqrt(3)
    v = (e1 + e3) / np.sqrt(2)
    l0 = np.outer(e1, u.conj())
    l1 = 2 * np.outer(v, v.conj()) + np.outer(e2, e2.conj())
    c2 = np.outer(u, e1.conj())
    model = OperatorModel(np.zeros((3, 3), dtype=complex),
                          diffusive=[l0, l1], jump=[c2])
    witness = np.diag([0.0, 1.0, 1.0]).astype(complex)
    return NamedExample(
        name="counterexample",
        model=model,
        params={},
        erg_holds=True,
        pur_verdict="fails",
        pur_witness=witness,
        default_start=ProjectivePoint(u),
        notes="rank-two witness on span{e2,e3}; first count resets to a pure state",
    )


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

GALLERY = {
    "qnd": {"factory": qnd_model, "defaults": {"gamma": 1.0}},
    "thermal_diffusive": {"factory": thermal_diffusive_model,
                          "defaults": {"a": 2.0, "b": 1.0}},
    "thermal_jump": {"factory": thermal_jump_model, "defaults": {"a": 2.0, "b": 1.0}},
    "markov3": {
        "factory": lambda rates=(1.0, 2.0, 3.0): markov_embedding_model(
            cyclic_generator(rates)),
        "defaults": {"rates": (1.0, 2.0, 3.0)},
    },
    "counterexample": {"factory": counterexample_model, "defaults": {}},
}


def gallery_build(name: str, **params) -> NamedExample:
    if name not in GALLERY:
        raise KeyError(f"unknown gallery model {name!r}; known: {sorted(GALLERY)}")
    entry = GALLERY[name]
    kwargs = dict(entry["defaults"])
    kwargs.update({k: v for k, v in params.items() if v is not None})
    return entry["factory"](**kwargs)
