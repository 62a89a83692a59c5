import numpy as np
import pytest

from qtraj.operators import (
    DensityMatrix,
    ProjectivePoint,
    fs_distance,
    hermitize,
    make_projector,
    matrix_from_json,
    matrix_to_json,
    top_right_singular_vector,
    trace_norm,
    wedge_distance_rows,
    wedge_norm,
    wedge_square,
)


def random_unit(rng, k):
    v = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    return ProjectivePoint(v / np.linalg.norm(v))


def random_matrix(rng, k):
    return rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))


class TestProjectivePoint:
    def test_requires_unit_norm(self):
        with pytest.raises(ValueError):
            ProjectivePoint(np.array([1.0, 1.0]))

    def test_phase_canonicalization(self):
        v = np.array([0.6, 0.8j])
        p = ProjectivePoint(v * np.exp(0.7j))
        assert p.vec[0].real > 0
        assert abs(p.vec[0].imag) < 1e-14

    def test_equality_mod_phase(self):
        rng = np.random.default_rng(0)
        p = random_unit(rng, 3)
        q = ProjectivePoint(p.vec * np.exp(1.23j))
        assert p == q
        assert p != random_unit(rng, 3)

    def test_first_nonzero_pivot(self):
        p = ProjectivePoint(np.array([0.0, 1j]))
        assert p.vec[1] == 1.0 + 0.0j


class TestMakeProjector:
    def test_basis_projector(self):
        pi = make_projector(ProjectivePoint.basis(2, 0))
        assert np.allclose(pi.mat, np.diag([1.0, 0.0]))

    def test_plus_state(self):
        x = ProjectivePoint(np.array([1.0, 1.0]) / np.sqrt(2))
        sx = np.array([[0, 1], [1, 0]], dtype=complex)
        assert np.allclose(make_projector(x).mat, 0.5 * (np.eye(2) + sx))

    def test_uniform_superposition(self):
        u = ProjectivePoint(np.ones(3) / np.sqrt(3))
        assert np.allclose(make_projector(u).mat, np.full((3, 3), 1 / 3))

    def test_rank_one_and_fixes_vector(self):
        rng = np.random.default_rng(1)
        x = random_unit(rng, 4)
        pi = make_projector(x).mat
        assert np.allclose(pi @ x.vec, x.vec)
        assert np.allclose(pi @ pi, pi, atol=1e-12)
        assert abs(np.trace(pi) - 1) < 1e-12


class TestFsDistance:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(2)
        x = random_unit(rng, 3)
        assert fs_distance(x, x) == 0.0

    def test_orthogonal_vectors(self):
        assert fs_distance(ProjectivePoint.basis(2, 0),
                           ProjectivePoint.basis(2, 1)) == 1.0

    def test_circle_embedding_formula(self):
        # d(circle(t), circle(s)) = |sin((t-s)/2)|: with representatives
        # (cos(t/2), sin(t/2)) the overlap is cos((t-s)/2)
        # abs tolerance is the sqrt(eps) accuracy floor of sqrt(1 - |<x,y>|^2)
        thetas = np.linspace(-np.pi, np.pi, 23)
        for t in thetas:
            for s in thetas:
                x = ProjectivePoint(np.array([np.cos(t / 2), np.sin(t / 2)]))
                y = ProjectivePoint(np.array([np.cos(s / 2), np.sin(s / 2)]))
                assert fs_distance(x, y) == pytest.approx(
                    abs(np.sin((t - s) / 2)), abs=2e-8)

    def test_metric_axioms_random(self):
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            k = rng.integers(2, 5)
            x, y, z = (random_unit(rng, k) for _ in range(3))
            dxy, dyz, dxz = fs_distance(x, y), fs_distance(y, z), fs_distance(x, z)
            assert dxy == pytest.approx(fs_distance(y, x), abs=1e-15)
            assert dxz <= dxy + dyz + 1e-9
            assert 0.0 <= dxy <= 1.0

    def test_wedge_distance_rows_matches_and_is_stable(self):
        rng = np.random.default_rng(4)
        xs = rng.standard_normal((50, 3)) + 1j * rng.standard_normal((50, 3))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        ys = rng.standard_normal((50, 3)) + 1j * rng.standard_normal((50, 3))
        ys /= np.linalg.norm(ys, axis=1, keepdims=True)
        d = wedge_distance_rows(xs, ys)
        for i in range(50):
            expect = np.sqrt(max(0.0, 1 - abs(np.vdot(xs[i], ys[i])) ** 2))
            assert d[i] == pytest.approx(expect, abs=1e-12)
        # near-parallel pair: absolute accuracy far below the sqrt(eps) floor
        eps = 1e-11
        x = xs[0]
        y = x + eps * ys[0]
        y = y / np.linalg.norm(y)
        dd = wedge_distance_rows(x[None, :], y[None, :])[0]
        assert dd < 3 * eps


class TestWedge:
    def test_identity(self):
        for k in (2, 3, 5):
            assert np.allclose(wedge_square(np.eye(k)), np.eye(k * (k - 1) // 2))

    def test_diag_minors_oracle(self):
        # minors of diag(3,2,1) computed by hand: {6, 3, 2}
        w = wedge_square(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(w, np.diag([6.0, 3.0, 2.0]))

    def test_entries_are_minors_brute_force(self):
        rng = np.random.default_rng(5)
        a = random_matrix(rng, 4)
        w = wedge_square(a)
        pairs = [(p, q) for p in range(4) for q in range(p + 1, 4)]
        for r, (p, q) in enumerate(pairs):
            for c, (u, v) in enumerate(pairs):
                minor = a[p, u] * a[q, v] - a[q, u] * a[p, v]
                assert w[r, c] == pytest.approx(minor, abs=1e-12)

    def test_functoriality(self):
        rng = np.random.default_rng(6)
        for k in (2, 3, 4):
            a, b = random_matrix(rng, k), random_matrix(rng, k)
            lhs = wedge_square(a @ b)
            rhs = wedge_square(a) @ wedge_square(b)
            assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(1, np.linalg.norm(lhs))

    def test_rejects_dim_one(self):
        with pytest.raises(ValueError):
            wedge_square(np.eye(1))
        with pytest.raises(ValueError):
            wedge_norm(np.eye(1))

    def test_wedge_norm_identity_and_diag(self):
        assert wedge_norm(np.eye(5)) == pytest.approx(1.0)
        assert wedge_norm(np.diag([3.0, 2.0, 1.0])) == pytest.approx(6.0)

    def test_wedge_norm_rank_one(self):
        rng = np.random.default_rng(7)
        u = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        v = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        assert wedge_norm(np.outer(u, v.conj())) == pytest.approx(0.0, abs=1e-12)

    def test_wedge_norm_vs_operator_norm_of_wedge_square(self):
        rng = np.random.default_rng(8)
        for _ in range(40):
            k = rng.integers(2, 6)
            a = random_matrix(rng, k)
            direct = wedge_norm(a)
            via_matrix = np.linalg.norm(wedge_square(a), 2)
            assert direct == pytest.approx(via_matrix, rel=1e-9)

    def test_wedge_norm_submultiplicative_and_bounded(self):
        rng = np.random.default_rng(9)
        for _ in range(60):
            k = rng.integers(2, 6)
            a, b = random_matrix(rng, k), random_matrix(rng, k)
            assert wedge_norm(a) <= np.linalg.norm(a, 2) ** 2 + 1e-10
            assert wedge_norm(a @ b) <= wedge_norm(a) * wedge_norm(b) * (1 + 1e-10)


class TestTopRightSingularVector:
    def test_diag_gap(self):
        assert top_right_singular_vector(np.diag([2.0, 1.0])) == \
            ProjectivePoint.basis(2, 0)

    def test_unitary_deterministic(self):
        rng = np.random.default_rng(10)
        q, _ = np.linalg.qr(random_matrix(rng, 3))
        first = top_right_singular_vector(q)
        for _ in range(3):
            assert top_right_singular_vector(q) == first

    def test_tiny_gap_respected(self):
        z = top_right_singular_vector(np.diag([1.0, 1.0 + 1e-12]))
        assert z == ProjectivePoint.basis(2, 1)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            top_right_singular_vector(np.zeros((2, 2)))


class TestDensityMatrix:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(11)
        a = random_matrix(rng, 3)
        rho = a @ a.conj().T
        rho = rho / np.trace(rho).real
        dm = DensityMatrix(rho)
        assert np.array_equal(dm.mat, 0.5 * (rho + rho.conj().T))

    def test_clips_tiny_negative(self):
        rho = np.diag([1.0 + 5e-11, -5e-11]).astype(complex)
        dm = DensityMatrix(rho)
        assert dm.eigvals()[0] >= 0

    def test_rejects_bad_trace_and_negativity(self):
        with pytest.raises(ValueError):
            DensityMatrix(np.diag([0.7, 0.7]).astype(complex))
        with pytest.raises(ValueError):
            DensityMatrix(np.diag([1.5, -0.5]).astype(complex))

    def test_repair_renormalizes(self):
        rho = np.diag([0.9, 0.11, -1e-9]).astype(complex)
        dm = DensityMatrix.repair(rho)
        assert abs(np.trace(dm.mat) - 1) < 1e-12
        assert dm.eigvals()[0] >= 0

    def test_hermitize_rejects_non_hermitian(self):
        with pytest.raises(ValueError):
            hermitize(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_trace_norm_is_singular_value_sum():
    rng = np.random.default_rng(12)
    a = random_matrix(rng, 4)
    s = np.linalg.svd(a, compute_uv=False)
    assert trace_norm(a) == pytest.approx(s.sum())


def test_matrix_json_roundtrip():
    rng = np.random.default_rng(13)
    a = random_matrix(rng, 3)
    back = matrix_from_json(matrix_to_json(a), 3)
    assert np.array_equal(a, back)
    assert len(matrix_to_json(a)) == 9  # flat row-major [re, im] pairs
