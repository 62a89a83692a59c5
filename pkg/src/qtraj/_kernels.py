"""Compiled single-trajectory stepping kernel.

The ensemble drivers in sim.py are vectorized numpy; this kernel exists for
the long single trajectories used in invariant-measure sampling, where a
python-level step loop would dominate the runtime.  Noise is pregenerated in
blocks by the caller (one uniform per step when jump channels exist, then one
normal per diffusive channel per step), so the kernel is deterministic given
the arrays.  Falls back to plain python transparently when numba is missing.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


@njit(cache=True)
def sse_block(
    x,            # complex128[k], updated in place
    kmat,         # complex128[k, k], no-event drift K
    ls,           # complex128[nb, k, k]
    cs,           # complex128[np_, k, k]
    dt,
    sq_dt,
    max_jump_prob,
    uniforms,     # float64[m] (ignored when np_ == 0)
    normals,      # float64[m, nb]
    start_step,   # global index of the first step in this block
    rec_steps,    # int64[:], sorted global step indices to record (post-step)
    rec_ptr,      # next position in rec_steps to fill
    rec_states,   # complex128[n_rec, k]
    rec_jumps,    # int64[n_rec, np_]
    jump_counts,  # int64[np_], cumulative
):
    """Run len(uniforms) steps of the linear-propagate-then-normalize scheme.

    Returns (rec_ptr, degenerate_count, budget_flag). budget_flag > 0 means
    the per-step jump probability exceeded max_jump_prob at that global step
    plus one (the step was not taken).
    """
    k = x.shape[0]
    nb = ls.shape[0]
    np_ = cs.shape[0]
    m = normals.shape[0]
    y = np.empty(k, dtype=np.complex128)
    w = np.empty(k, dtype=np.complex128)
    njs = np.empty(max(np_, 1), dtype=np.float64)
    degenerate = 0

    for i in range(m):
        step = start_step + i
        jumped = False
        if np_ > 0:
            ptot = 0.0
            for j in range(np_):
                nj = 0.0
                for a in range(k):
                    acc = 0.0 + 0.0j
                    for b in range(k):
                        acc += cs[j, a, b] * x[b]
                    nj += acc.real * acc.real + acc.imag * acc.imag
                njs[j] = nj
                ptot += nj * dt
            if ptot > max_jump_prob:
                return rec_ptr, degenerate, step + 1
            u = uniforms[i]
            if u < ptot:
                acc_p = 0.0
                ch = -1
                for j in range(np_):
                    acc_p += njs[j] * dt
                    if u < acc_p:
                        ch = j
                        break
                if njs[ch] < 1e-14:
                    degenerate += 1
                else:
                    inv = 1.0 / np.sqrt(njs[ch])
                    for a in range(k):
                        acc = 0.0 + 0.0j
                        for b in range(k):
                            acc += cs[ch, a, b] * x[b]
                        y[a] = acc * inv
                    for a in range(k):
                        x[a] = y[a]
                    jump_counts[ch] += 1
                    jumped = True
        if not jumped:
            # y = (Id + K dt) x, then add (dB_i + v_i dt) L_i x per channel
            for a in range(k):
                acc = 0.0 + 0.0j
                for b in range(k):
                    acc += kmat[a, b] * x[b]
                y[a] = x[a] + dt * acc
            for ib in range(nb):
                vre = 0.0
                for a in range(k):
                    acc = 0.0 + 0.0j
                    for b in range(k):
                        acc += ls[ib, a, b] * x[b]
                    w[a] = acc
                    vre += (x[a].conjugate() * acc).real
                v = 2.0 * vre
                dwi = sq_dt * normals[i, ib] + v * dt
                for a in range(k):
                    y[a] += dwi * w[a]
            nrm = 0.0
            for a in range(k):
                nrm += y[a].real * y[a].real + y[a].imag * y[a].imag
            inv = 1.0 / np.sqrt(nrm)
            for a in range(k):
                x[a] = y[a] * inv
        if rec_ptr < rec_steps.shape[0] and rec_steps[rec_ptr] == step + 1:
            for a in range(k):
                rec_states[rec_ptr, a] = x[a]
            for j in range(np_):
                rec_jumps[rec_ptr, j] = jump_counts[j]
            rec_ptr += 1
    return rec_ptr, degenerate, 0
