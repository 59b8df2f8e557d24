import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from grace.numerics import (
    ConvergenceError,
    Tape,
    Var,
    absolute,
    grad_check,
    log,
    matmul,
    mul,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    softmax,
    spectral_norm,
    sym_eigen,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def power_iteration_norm(m, iters=5000):
    rng = np.random.default_rng(123)
    v = rng.standard_normal(m.shape[1])
    g = m.T @ m
    for _ in range(iters):
        v = g @ v
        v /= np.linalg.norm(v)
    return float(np.sqrt(v @ g @ v))


def random_symmetric(seed, n):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return a + a.T


# -- matmul -----------------------------------------------------------------


def test_matmul_identity_and_arithmetic():
    assert_array_equal(matmul(np.eye(2), [[3.0], [4.0]]).value, [[3.0], [4.0]])
    assert_array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]).value, [[11.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    assert_allclose(matmul(a, b).value, triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- tape -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_matmul_adjoints(seed):
    rng = np.random.default_rng(seed)
    A = Var(rng.standard_normal((3, 3)), requires_grad=True)
    B = Var(rng.standard_normal((3, 3)), requires_grad=True)
    G = rng.standard_normal((3, 3))
    with Tape() as tape:
        C = A @ B
    tape.backward(C, seed=G)
    assert_allclose(A.grad, G @ B.value.T, rtol=0, atol=1e-12)
    assert_allclose(B.grad, A.value.T @ G, rtol=0, atol=1e-12)


def test_tape_replay_reproduces_outputs():
    rng = np.random.default_rng(1)
    x = Var(rng.standard_normal((4, 3)), requires_grad=True)
    w = Var(rng.standard_normal((3, 2)), requires_grad=True)
    with Tape() as tape:
        y = reduce_sum(log(softmax(relu(x @ w)), floor=1e-12))
    replayed = tape.replay()
    for op, value in zip(tape.ops, replayed):
        assert_array_equal(op.output.value, value)
    assert tape.ops[-1].output is y


def test_backward_visits_each_node_once():
    x = Var(np.array([[2.0]]), requires_grad=True)
    with Tape() as tape:
        y = x @ x  # x used twice by one op
        z = reduce_sum(mul(y, y))
    calls = []
    for op in tape.ops:
        inner = op.backward
        op.backward = lambda g, inner=inner, op=op: calls.append(op.kind) or inner(g)
    tape.backward(z)
    assert calls == ["sum", "mul", "matmul"]
    # z = x^4, dz/dx = 4 x^3
    assert_allclose(x.grad, [[32.0]])


def test_constants_are_not_recorded():
    with Tape() as tape:
        matmul(np.eye(2), np.eye(2))
    assert tape.ops == []


def test_broadcast_gradients_reduce_to_input_shape():
    b = Var(np.array([1.0, 2.0]), requires_grad=True)
    x = Var(np.ones((3, 4, 2)))
    with Tape() as tape:
        y = reduce_sum(x + b)
    tape.backward(y)
    assert_array_equal(b.grad, [12.0, 12.0])


def test_power_rejects_nonpositive():
    with pytest.raises(ValueError):
        power(np.array([1.0, 0.0]), -0.5)


# -- eigensolver ------------------------------------------------------------


def test_sym_eigen_trivial_cases():
    assert_allclose(sym_eigen([[2.0, 0.0], [0.0, 3.0]]).eigenvalues, [2.0, 3.0])
    assert_allclose(sym_eigen([[0.0, 1.0], [1.0, 0.0]]).eigenvalues, [-1.0, 1.0], atol=1e-15)


def test_sym_eigen_reconstruction_6x6():
    m = random_symmetric(3, 6)
    r = sym_eigen(m)
    U, lam = r.eigenvectors, r.eigenvalues
    assert np.linalg.norm(U @ np.diag(lam) @ U.T - m) <= 1e-8
    assert_allclose(lam, np.linalg.eigvalsh(m), atol=1e-10)


def test_sym_eigen_rejects_non_square_and_asymmetric():
    with pytest.raises(ValueError, match="square"):
        sym_eigen(np.ones((2, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        sym_eigen([[1.0, 2.0], [0.0, 1.0]])


def test_sym_eigen_budget_exhaustion_reports_residual():
    with pytest.raises(ConvergenceError) as info:
        sym_eigen(random_symmetric(0, 5), max_sweeps=0)
    assert info.value.achieved > 0


def test_sym_eigen_symmetrizes_small_asymmetry():
    m = random_symmetric(4, 4)
    m[0, 1] += 1e-12
    r = sym_eigen(m)
    assert_allclose(r.eigenvalues, np.linalg.eigvalsh(0.5 * (m + m.T)), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_sym_eigen_invariants(n, seed, mag):
    m = mag * random_symmetric(seed, n)
    r = sym_eigen(m)
    lam, U = r.eigenvalues, r.eigenvectors
    scale = max(1.0, np.abs(m).sum(axis=1).max())
    assert np.all(np.diff(lam) >= 0)
    assert np.max(np.abs(m @ U - U * lam)) <= 1e-8 * scale
    assert np.max(np.abs(U.T @ U - np.eye(n))) <= 1e-8
    assert abs(lam.sum() - np.trace(m)) <= 1e-8 * max(1.0, np.linalg.norm(m))


def test_sym_eigen_deterministic():
    m = random_symmetric(9, 7)
    a, b = sym_eigen(m), sym_eigen(m)
    assert_array_equal(a.eigenvalues, b.eigenvalues)
    assert_array_equal(a.eigenvectors, b.eigenvectors)


def test_sym_eigen_degenerate_spectrum():
    # K4 adjacency: eigenvalues {-1, -1, -1, 3}
    m = np.ones((4, 4)) - np.eye(4)
    assert_allclose(sym_eigen(m).eigenvalues, [-1, -1, -1, 3], atol=1e-12)


# -- spectral norm ----------------------------------------------------------


def test_spectral_norm_trivial():
    assert spectral_norm(np.diag([1.0, -5.0])) == pytest.approx(5.0, rel=1e-12)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_matches_power_iteration():
    m = np.random.default_rng(5).standard_normal((4, 7))
    assert spectral_norm(m) == pytest.approx(power_iteration_norm(m), rel=1e-6)


def test_spectral_norm_homogeneous():
    m = np.random.default_rng(6).standard_normal((5, 5))
    assert spectral_norm(10 * m) == pytest.approx(10 * spectral_norm(m), rel=1e-12)


# -- gradient checking ------------------------------------------------------


def test_grad_check_linear():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert grad_check(lambda v: reduce_sum(v), x, 1e-5) <= 1e-9


def test_grad_check_l1_away_from_kink():
    rng = np.random.default_rng(1)
    h = 1e-5
    x = rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(20 * h, 2.0, size=(4, 3))
    assert grad_check(lambda v: reduce_sum(absolute(v)), x, h) <= 1e-6


def test_grad_check_composite():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 2))

    def f(v):
        return reduce_mean(log(softmax(matmul(v, w)), floor=1e-12))

    assert grad_check(f, rng.standard_normal((4, 3)), 1e-5) <= 1e-6


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        grad_check(lambda v: reduce_sum(v), np.ones((2, 2)), 1e-2)


def test_grad_check_non_finite_reports_index():
    def f(v):
        val = reduce_sum(v)
        if val.value > 2.0 + 1e-9:
            return Var(np.inf)
        return val

    with pytest.raises(ValueError, match="perturbation index 0"):
        grad_check(f, np.array([1.0, 1.0]), 1e-5)
