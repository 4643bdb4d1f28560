"""P1-iso-P2 / P1 velocity-pressure pair with P0 tensors on the fine mesh.

Degree-of-freedom layout
------------------------
* velocity: interleaved, dof ``2*i + d`` is component ``d`` at fine vertex ``i``
* pressure: one value per coarse vertex
* tensors: per fine element the three raw components ``(t11, t22, t12)``;
  the factor 2 of the off-diagonal entry is applied only inside inner
  products and norms.

The divergence coupling is ``B[q, j] = int psi_q div phi_j`` and the Stokes
systems read ``scale * K u - B^T p = rhs``, ``B u = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import CoarseMesh, FineMesh, MeshError, TriMesh

# Frobenius weights of the stored components of a symmetric 2x2 tensor
TENSOR_WEIGHTS = np.array([1.0, 1.0, 2.0])


@dataclass(frozen=True, eq=False)
class VelocityField:
    mesh: FineMesh
    values: np.ndarray  # (n_vertices, 2)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True, eq=False)
class PressureField:
    mesh: CoarseMesh
    values: np.ndarray  # (n_coarse_vertices,)


@dataclass(frozen=True, eq=False)
class TensorField:
    mesh: FineMesh
    values: np.ndarray  # (n_elements, 3)

    def norm(self) -> np.ndarray:
        """Pointwise Frobenius norm per element."""
        return frobenius(self.values)


def frobenius(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    return np.sqrt(t[..., 0] ** 2 + t[..., 1] ** 2 + 2.0 * t[..., 2] ** 2)


def p1_gradients(mesh: TriMesh) -> np.ndarray:
    """Gradients of the three P1 basis functions per triangle, shape (nt, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    two_a = 2.0 * mesh.signed_areas
    gx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]])
    gy = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]])
    return np.stack([gx, gy], axis=-1) / two_a[:, None, None]


@dataclass(frozen=True, eq=False)
class DiscreteOperators:
    fine: FineMesh
    coarse: CoarseMesh
    D: sp.csr_matrix          # symmetric gradient, (3 ne, 2 nv)
    div: sp.csr_matrix        # elementwise divergence, (ne, 2 nv)
    B: sp.csr_matrix          # (np, 2 nv)
    Mp: sp.csr_matrix         # coarse P1 mass
    prolong: sp.csr_matrix    # coarse P1 -> fine vertex values
    areas: np.ndarray
    mq: np.ndarray            # (3 ne,) weights of the Q inner product
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    free_dofs: np.ndarray

    @property
    def n_velocity(self) -> int:
        return 2 * self.fine.n_vertices

    @property
    def n_pressure(self) -> int:
        return self.coarse.n_vertices

    @property
    def n_elements(self) -> int:
        return self.fine.n_triangles

    def sym_grad(self, u: np.ndarray) -> np.ndarray:
        return (self.D @ np.asarray(u).reshape(-1)).reshape(-1, 3)

    def div_adjoint(self, t: np.ndarray) -> np.ndarray:
        """``D^T M_q t``: the weak divergence of a tensor field."""
        return self.D.T @ (self.mq * np.asarray(t).reshape(-1))

    def inner_q(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.mq, (np.asarray(a) * np.asarray(b)).reshape(-1)))

    def norm_q(self, a: np.ndarray, r: float = 2.0) -> float:
        return lp_norm(frobenius(a), self.areas, r)

    def lift(self, values: np.ndarray | None = None) -> np.ndarray:
        """Velocity vector that is zero except for the Dirichlet values."""
        u = np.zeros(self.n_velocity)
        u[self.dirichlet_dofs] = self.dirichlet_values if values is None else values
        return u

    def pressure_norm(self, q: np.ndarray, r: float = 2.0) -> float:
        """L^r norm of a coarse P1 function (edge-midpoint rule, exact for r=2)."""
        tri = self.coarse.triangles
        qv = np.asarray(q)[tri]
        mids = 0.5 * (qv + qv[:, [1, 2, 0]])
        vals = np.abs(mids) ** r
        return float((self.coarse.areas @ vals.sum(axis=1) / 3.0) ** (1.0 / r))

    def mean_pressure(self, q: np.ndarray) -> float:
        return float(np.sum(self.Mp @ q) / np.sum(self.coarse.areas))


def lp_norm(pointwise: np.ndarray, areas: np.ndarray, r: float) -> float:
    if r == 2.0:
        return float(np.sqrt(np.dot(areas, pointwise * pointwise)))
    return float(np.dot(areas, pointwise ** r) ** (1.0 / r))


def assemble(fine: FineMesh, coarse: CoarseMesh,
             boundary_velocity: Callable[[np.ndarray], np.ndarray] | None = None) -> DiscreteOperators:
    """Assemble all operators on the fine/coarse pair.

    ``boundary_velocity(points)`` returns the Dirichlet velocity at the given
    boundary points, shape (m, 2); ``None`` means homogeneous data.
    """
    if fine.coarse is not coarse or fine.n_triangles != 4 * coarse.n_triangles:
        raise MeshError("fine mesh is not the midpoint refinement of the given coarse mesh")
    nv, ne, nc = fine.n_vertices, fine.n_triangles, coarse.n_vertices
    tri = fine.triangles
    grads = p1_gradients(fine)
    areas = fine.areas.copy()
    gx, gy = grads[..., 0], grads[..., 1]

    # symmetric gradient
    e = np.arange(ne)
    rows = np.concatenate([
        np.repeat(3 * e, 3),
        np.repeat(3 * e + 1, 3),
        np.repeat(3 * e + 2, 3),
        np.repeat(3 * e + 2, 3),
    ])
    cols = np.concatenate([
        (2 * tri).ravel(),
        (2 * tri + 1).ravel(),
        (2 * tri).ravel(),
        (2 * tri + 1).ravel(),
    ])
    vals = np.concatenate([gx.ravel(), gy.ravel(), 0.5 * gy.ravel(), 0.5 * gx.ravel()])
    D = sp.csr_matrix((vals, (rows, cols)), shape=(3 * ne, 2 * nv))
    div = sp.csr_matrix(
        (np.concatenate([gx.ravel(), gy.ravel()]),
         (np.concatenate([np.repeat(e, 3)] * 2), np.concatenate([(2 * tri).ravel(), (2 * tri + 1).ravel()]))),
        shape=(ne, 2 * nv))

    # coarse P1 values at fine vertices
    n_mid = nv - nc
    mid_edges = coarse.edges
    if len(mid_edges) != n_mid:
        raise MeshError("fine vertex count does not match coarse vertices + edges")
    prow = np.concatenate([np.arange(nc), np.repeat(nc + np.arange(n_mid), 2)])
    pcol = np.concatenate([np.arange(nc), mid_edges.ravel()])
    pval = np.concatenate([np.ones(nc), np.full(2 * n_mid, 0.5)])
    prolong = sp.csr_matrix((pval, (prow, pcol)), shape=(nv, nc))

    # pressure basis at fine centroids (exact: psi is linear on each child)
    psi_c = sp.csr_matrix(
        (np.full(3 * ne, 1.0 / 3.0), (np.repeat(e, 3), tri.ravel())), shape=(ne, nv)) @ prolong
    B = (psi_c.T @ sp.diags(areas) @ div).tocsr()

    ct = coarse.triangles
    ca = coarse.areas
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    Mp = sp.csr_matrix(
        ((ca[:, None, None] * local[None]).ravel(),
         (np.repeat(ct, 3, axis=1).ravel(), np.tile(ct, (1, 3)).ravel())),
        shape=(nc, nc))

    mq = (areas[:, None] * TENSOR_WEIGHTS[None, :]).ravel()

    bverts = fine.boundary_vertices
    dofs = np.column_stack([2 * bverts, 2 * bverts + 1]).ravel()
    if boundary_velocity is None:
        dvals = np.zeros(len(dofs))
    else:
        dvals = np.asarray(boundary_velocity(fine.vertices[bverts]), dtype=float).reshape(-1)
    free = np.setdiff1d(np.arange(2 * nv), dofs)

    return DiscreteOperators(
        fine=fine, coarse=coarse, D=D, div=div, B=B, Mp=Mp, prolong=prolong,
        areas=areas, mq=mq, dirichlet_dofs=dofs, dirichlet_values=dvals, free_dofs=free)


def _check_same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise MeshError("fields live on different meshes")


def inner_q(a: TensorField, b: TensorField) -> float:
    """Integral of the Frobenius product of two P0 tensor fields."""
    _check_same_mesh(a, b)
    w = (a.mesh.areas[:, None] * TENSOR_WEIGHTS).ravel()
    return float(np.dot(w, (a.values * b.values).ravel()))


def norm_q(a: TensorField, r: float = 2.0) -> float:
    if r < 1:
        raise ValueError("exponent must be >= 1")
    return lp_norm(frobenius(a.values), a.mesh.areas, r)


def error_norm_u(u: VelocityField, ref: VelocityField, r: float = 2.0) -> float:
    """Full W^{1,r} norm of ``u - ref``.

    The L^r part uses the edge-midpoint rule on every element, which is exact
    for r = 2; the gradient part is exact for any r.
    """
    _check_same_mesh(u, ref)
    return w1r_norm(u.mesh, u.values - ref.values, r)


def w1r_norm(mesh: FineMesh, e: np.ndarray, r: float = 2.0, grads: np.ndarray | None = None) -> float:
    e = np.asarray(e).reshape(-1, 2)
    if grads is None:
        grads = p1_gradients(mesh)
    ev = e[mesh.triangles]  # (nt, 3, 2)
    mids = 0.5 * (ev + ev[:, [1, 2, 0]])
    val = np.sqrt((mids ** 2).sum(axis=2))
    l_part = mesh.areas @ (val ** r).sum(axis=1) / 3.0
    g = np.einsum("tkd,tkc->tcd", grads, ev)  # g[t, c, d] = d e_c / d x_d
    gn = np.sqrt((g ** 2).sum(axis=(1, 2)))
    g_part = mesh.areas @ gn ** r
    return float((l_part + g_part) ** (1.0 / r))


def load_vector(f: Callable[[np.ndarray], np.ndarray] | None, fine: FineMesh) -> np.ndarray:
    """``int f . phi_i`` for every velocity dof, edge-midpoint quadrature.

    The rule is exact for quadratic integrands, so linear forces are
    integrated exactly against the P1 basis.
    """
    nv = fine.n_vertices
    out = np.zeros((nv, 2))
    if f is None:
        return out.reshape(-1)
    p = fine.vertices[fine.triangles]
    tri = fine.triangles
    w = fine.areas / 6.0
    fm = [np.asarray(f(0.5 * (p[:, k] + p[:, (k + 1) % 3])), dtype=float).reshape(-1, 2) for k in range(3)]
    # vertex k touches the midpoints of edges (k, k+1) and (k-1, k)
    for k in range(3):
        contrib = w[:, None] * (fm[k] + fm[(k - 1) % 3])
        np.add.at(out, tri[:, k], contrib)
    return out.reshape(-1)
