import dataclasses

import numpy as np
import pytest
import sympy as sy

from viscoplastic.fem import assemble, load_vector, p1_gradients
from viscoplastic.mesh import build_structured_cavity, refine_midpoints
from viscoplastic.stokes import StokesError, StokesKernel, factorize

TOL = 1e-12


def make(n, bc=None):
    coarse = build_structured_cavity(n)
    ops = assemble(refine_midpoints(coarse), coarse, bc)
    return ops, StokesKernel(ops)


@pytest.fixture(scope="module")
def lid():
    return make(6, lambda x: np.column_stack([np.where(np.abs(x[:, 1] - 1) < 1e-12, 1.0, 0.0),
                                              0 * x[:, 0]]))


def manufactured():
    """Divergence-free u* from a stream function, zero-mean p*, and the force
    of -Div(D u*) + grad p* = f."""
    x, y = sy.symbols("x y")
    psi = x ** 2 * (1 - x) ** 2 * y ** 2 * (1 - y) ** 2
    u = sy.Matrix([sy.diff(psi, y), -sy.diff(psi, x)])
    p = (x - sy.Rational(1, 2)) * (y - sy.Rational(1, 2)) + sy.sin(sy.pi * x) - 2 / sy.pi
    X = [x, y]
    D = sy.Matrix(2, 2, lambda i, j: (sy.diff(u[i], X[j]) + sy.diff(u[j], X[i])) / 2)
    div_D = sy.Matrix([sum(sy.diff(D[i, j], X[j]) for j in range(2)) for i in range(2)])
    f = -div_D + sy.Matrix([sy.diff(p, x), sy.diff(p, y)])
    lam = lambda e: sy.lambdify((x, y), e, "numpy")
    grad_u = [[lam(sy.diff(u[i], X[j])) for j in range(2)] for i in range(2)]
    fx, fy = lam(f[0]), lam(f[1])
    force = lambda pts: np.column_stack([fx(pts[:, 0], pts[:, 1]) + 0 * pts[:, 0],
                                         fy(pts[:, 0], pts[:, 1]) + 0 * pts[:, 0]])
    return force, grad_u


def h1_error(ops, u_h, grad_u):
    """Gradient error against the exact field, 3-point edge-midpoint quadrature."""
    fine = ops.fine
    g = np.einsum("tkd,tkc->tcd", p1_gradients(fine), u_h.reshape(-1, 2)[fine.triangles])
    pts = fine.vertices[fine.triangles]
    total = 0.0
    for k in range(3):
        m = 0.5 * (pts[:, k] + pts[:, (k + 1) % 3])
        for i in range(2):
            for j in range(2):
                ex = grad_u[i][j](m[:, 0], m[:, 1]) + 0 * m[:, 0]
                total += fine.areas @ (g[:, i, j] - ex) ** 2 / 3
    return np.sqrt(total)


def test_zero_data_gives_zero():
    ops, ker = make(4)
    u, p, rep = ker.solve(2.0)
    assert not u.any() and not p.any()
    assert rep.outer_iterations <= 1


def test_manufactured_solution_converges_first_order():
    force, grad_u = manufactured()
    errors = []
    for n in (8, 16):
        ops, ker = make(n)
        u, p, rep = ker.solve(1.0, None, load_vector(force, ops.fine), tol=TOL)
        assert rep.final_div_norm <= TOL
        errors.append(h1_error(ops, u, grad_u))
    ratio = errors[0] / errors[1]
    assert 1.6 <= ratio <= 2.4, errors


def test_solution_properties(lid):
    ops, ker = lid
    rng = np.random.default_rng(0)
    t = rng.normal(size=(ops.n_elements, 3))
    load = rng.normal(size=ops.n_velocity) * 1e-2
    u, p, rep = ker.solve(0.7, t, load, tol=TOL)
    assert rep.final_div_norm <= TOL
    np.testing.assert_array_equal(u[ops.dirichlet_dofs], ops.dirichlet_values)
    assert abs(ops.mean_pressure(p)) <= 1e-13
    res = ker.momentum_residual(0.7, u, p, t, load)
    assert np.abs(res).max() <= 1e-10
    assert ops.pressure_norm(np.linalg.solve(ops.Mp.toarray(), ops.B @ u)) <= TOL


def test_warm_start_does_not_change_answer(lid):
    ops, ker = lid
    t = np.random.default_rng(1).normal(size=(ops.n_elements, 3))
    u_cold, p_cold, _ = ker.solve(2.0, t, tol=TOL)
    u_warm, _, rep = ker.solve(2.0, t, p_warm=p_cold + 0.1 * np.sin(np.arange(ops.n_pressure)),
                               tol=TOL)
    assert ops.norm_q(ops.sym_grad(u_cold - u_warm)) <= 10 * TOL
    _, _, rep_hot = ker.solve(2.0, t, p_warm=p_cold, tol=TOL)
    assert rep_hot.outer_iterations <= rep.outer_iterations


def test_scaling_linearity():
    ops, ker = make(5)
    rng = np.random.default_rng(2)
    t, load = rng.normal(size=(ops.n_elements, 3)), rng.normal(size=ops.n_velocity)
    u1, p1, _ = ker.solve(1.0, t, load, tol=TOL)
    u2, p2, _ = ker.solve(2.0, 2 * t, 2 * load, tol=TOL)
    assert ops.norm_q(ops.sym_grad(u1 - u2)) <= 1e-10
    np.testing.assert_allclose(p2, 2 * p1, atol=1e-9)


def test_factorization_is_deterministic():
    ops, _ = make(3)
    t = np.random.default_rng(3).normal(size=(ops.n_elements, 3))
    a = factorize(ops).solve(1.5, t)
    b = factorize(ops).solve(1.5, t)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_smallest_mesh():
    ops, ker = make(1)
    assert ker.K_ff.shape[0] == 2 * (ops.fine.n_vertices - len(ops.fine.boundary_vertices))
    assert ker.n_free == 10


def test_degenerate_dof_sets_rejected():
    ops, _ = make(1)
    every = np.arange(ops.n_velocity)
    no_free = dataclasses.replace(ops, dirichlet_dofs=every, free_dofs=every[:0],
                                  dirichlet_values=np.zeros(ops.n_velocity))
    with pytest.raises(StokesError):
        StokesKernel(no_free)
    no_bc = dataclasses.replace(ops, dirichlet_dofs=every[:0], free_dofs=every,
                                dirichlet_values=np.zeros(0))
    with pytest.raises(StokesError):
        StokesKernel(no_bc)


def test_iteration_cap_raises_with_report(lid):
    ops, ker = lid
    t = np.random.default_rng(4).normal(size=(ops.n_elements, 3))
    with pytest.raises(StokesError) as info:
        ker.solve(1.0, t, tol=1e-300)
    assert info.value.report is not None
    assert info.value.report.outer_iterations >= 1


def test_bad_arguments(lid):
    _, ker = lid
    with pytest.raises(ValueError):
        ker.solve(0.0)
    with pytest.raises(ValueError):
        ker.solve(1.0, tol=0.0)
