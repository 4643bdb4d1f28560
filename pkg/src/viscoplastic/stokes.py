"""Stokes subproblems by the preconditioned conjugate gradient Uzawa method.

Every outer iteration of the flow solvers needs the solution of

    scale * K u - B^T p = g,     B u = 0,     u = u_D on the boundary,

with ``K = D^T M_q D``. The velocity block is factorized once per mesh and
reused for any ``scale``; conjugate gradients run on the pressure Schur
complement with the coarse pressure mass matrix as preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .fem import DiscreteOperators


class StokesError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class StokesReport:
    outer_iterations: int
    final_div_norm: float
    inner_solve_count: int


class StokesKernel:
    """Reusable factorization of the velocity block on the free dofs."""

    def __init__(self, ops: DiscreteOperators):
        self.ops = ops
        free = ops.free_dofs
        if len(free) == 0 or len(ops.dirichlet_dofs) == 0:
            raise StokesError("velocity block is singular: need free and Dirichlet dofs")
        K = (ops.D.T @ sp.diags(ops.mq) @ ops.D).tocsr()
        self.K = K
        self.K_ff = K[free][:, free].tocsc()
        self.K_fd = K[free][:, ops.dirichlet_dofs].tocsr()
        self.B_f = ops.B[:, free].tocsr()
        self.B_fT = self.B_f.T.tocsr()
        self.B_d = ops.B[:, ops.dirichlet_dofs].tocsr()
        # a bandwidth-reducing pre-permutation keeps the minimum degree
        # ordering fast on locally refined meshes
        self._perm = reverse_cuthill_mckee(self.K_ff.tocsr(), symmetric_mode=True)
        self._iperm = np.argsort(self._perm)
        try:
            self._lu = spla.splu(self.K_ff[self._perm][:, self._perm].tocsc(),
                                 permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise StokesError(f"velocity block factorization failed: {exc}") from exc
        diag = np.abs(self._lu.U.diagonal())
        if diag.min() <= 1e-14 * diag.max():
            raise StokesError("velocity block is numerically singular")
        self._mp = spla.splu(ops.Mp.tocsc())
        self.n_inner = 0

    @property
    def n_free(self) -> int:
        return len(self.ops.free_dofs)

    def _solve_k(self, rhs):
        self.n_inner += 1
        return self._lu.solve(rhs[self._perm])[self._iperm]

    def solve(self, scale: float, tensor_rhs=None, body_load=None, p_warm=None,
              tol: float = 1e-12, r: float = 2.0, boundary_values=None):
        """Solve the Stokes problem; returns ``(u, p, report)``.

        ``tensor_rhs`` enters as ``D^T M_q tensor_rhs``, ``body_load`` is an
        assembled load vector. Iteration stops once the L^r norm of the
        projected divergence of ``u`` is at most ``tol``.
        """
        if scale <= 0:
            raise ValueError("viscosity scale must be positive")
        if tol <= 0:
            raise ValueError("tolerance must be positive")
        ops = self.ops
        free, ddofs = ops.free_dofs, ops.dirichlet_dofs
        g = np.zeros(ops.n_velocity)
        if body_load is not None:
            g += body_load
        if tensor_rhs is not None:
            g += ops.div_adjoint(tensor_rhs)
        ud = ops.dirichlet_values if boundary_values is None else np.asarray(boundary_values)
        g_f = g[free] - scale * (self.K_fd @ ud)
        c_d = self.B_d @ ud

        p = np.zeros(ops.n_pressure) if p_warm is None else np.array(p_warm, dtype=float)
        start = self.n_inner
        u_f = self._solve_k(g_f + self.B_fT @ p) / scale
        res = self.B_f @ u_f + c_d
        z = self._mp.solve(res)
        div_norm = ops.pressure_norm(z, r)
        it = 0
        cap = 10 * ops.n_pressure
        if div_norm > tol:
            d = z.copy()
            delta = float(res @ z)
            while True:
                xi = self._solve_k(self.B_fT @ d) / scale
                Sd = self.B_f @ xi
                curv = float(d @ Sd)
                if not curv > 0:
                    raise StokesError(
                        f"Schur complement lost positive definiteness (d.Sd = {curv:g}) "
                        f"at div norm {div_norm:g}",
                        StokesReport(it, div_norm, self.n_inner - start))
                alpha = delta / curv
                p -= alpha * d
                u_f -= alpha * xi
                res -= alpha * Sd
                z = self._mp.solve(res)
                it += 1
                div_norm = ops.pressure_norm(z, r)
                if div_norm <= tol:
                    break
                if it >= cap:
                    raise StokesError(
                        f"PCGU did not reach tolerance {tol:g} in {cap} iterations "
                        f"(div norm {div_norm:g})",
                        StokesReport(it, div_norm, self.n_inner - start))
                delta_new = float(res @ z)
                d = z + (delta_new / delta) * d
                delta = delta_new

        p -= ops.mean_pressure(p)
        u = np.empty(ops.n_velocity)
        u[free] = u_f
        u[ddofs] = ud
        return u, p, StokesReport(it, div_norm, self.n_inner - start)

    def momentum_residual(self, scale, u, p, tensor_rhs=None, body_load=None) -> np.ndarray:
        """``scale K u - B^T p - rhs`` on the free dofs."""
        ops = self.ops
        g = np.zeros(ops.n_velocity)
        if body_load is not None:
            g += body_load
        if tensor_rhs is not None:
            g += ops.div_adjoint(tensor_rhs)
        full = scale * (self.K @ u) - ops.B.T @ p - g
        return full[ops.free_dofs]


def factorize(ops: DiscreteOperators) -> StokesKernel:
    return StokesKernel(ops)
