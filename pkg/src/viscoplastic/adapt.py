"""Residual-driven adaptive refinement: solve, mark, refine, transfer, repeat."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constitutive import ConstitutiveModel
from .fem import DiscreteOperators, TensorField, frobenius
from .mesh import (CoarseMesh, FineMesh, build_structured_cavity, interpolate_cellwise,
                   interpolate_nodal, refine_marked, refine_midpoints)
from .optim import SolverConfig, SolverResult, WarmStart, solve
from .stokes import StokesKernel


class AdaptError(RuntimeError):
    """A cycle failed to converge; ``partial`` holds everything computed so far."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass
class RefinementPlan:
    percentile: float = 60.0
    cycles: int = 3
    marks: list = field(default_factory=list)  # one set of coarse indices per cycle

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise ValueError(f"percentile must lie in (0, 100), got {self.percentile}")
        if self.cycles < 0:
            raise ValueError(f"number of cycles must be >= 0, got {self.cycles}")


@dataclass
class CycleTiming:
    cycle: int
    n_coarse_triangles: int
    n_fine_triangles: int
    iterations: int
    assemble_seconds: float
    solve_seconds: float
    refine_seconds: float
    initial_residual: float
    final_residual: float
    max_element_residual: float


@dataclass
class AdaptiveResult:
    result: SolverResult
    ops: DiscreteOperators
    meshes: list
    timing: list
    plan: RefinementPlan
    total_seconds: float = 0.0

    @property
    def converged(self) -> bool:
        return self.result.converged


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """Smallest sample value with at least ``percentile`` % of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if len(v) == 0:
        return 0.0
    rank = max(1, math.ceil(percentile / 100.0 * len(v)))
    return float(v[rank - 1])


def element_residual(residual) -> np.ndarray:
    """Per-element magnitude from a tensor field, a raw tensor array, or magnitudes."""
    if isinstance(residual, TensorField):
        return residual.norm()
    arr = np.asarray(residual, dtype=float)
    return frobenius(arr) if arr.ndim == 2 and arr.shape[1] == 3 else arr.ravel()


def mark_by_residual(residual, fine: FineMesh, percentile: float = 60.0) -> set:
    """Coarse triangles with at least one child above the residual percentile."""
    r = element_residual(residual)
    if len(r) != fine.n_triangles:
        raise ValueError("residual must have one value per fine element")
    if np.any(r < 0):
        raise ValueError("residual magnitudes must be nonnegative")
    threshold = nearest_rank(r, percentile)
    return {int(c) for c in np.unique(fine.parent[r > threshold])}


def _transfer(result: SolverResult, old_coarse: CoarseMesh, old_fine: FineMesh,
              new_coarse: CoarseMesh, new_fine: FineMesh) -> WarmStart:
    tau = interpolate_cellwise(new_fine, old_fine, result.tau.values)
    gamma = interpolate_cellwise(new_fine, old_fine, result.gamma.values)
    p = interpolate_nodal(new_coarse.vertices, old_coarse, result.p.values)
    return WarmStart(tau=tau, gamma=gamma, p=p)


def refine_loop(scenario, model: ConstitutiveModel, config: SolverConfig, cycles: int,
                percentile: float = 60.0, coarse: CoarseMesh | None = None) -> AdaptiveResult:
    """Alternate solve and red-green refinement for ``cycles`` rounds.

    Each round re-assembles the operators and refactorizes the Stokes kernel,
    then warm-starts from the transferred stress, strain rate and pressure.
    Returns the final solution on the last mesh; raises :class:`AdaptError`
    with partial results if any solve fails to converge.
    """
    plan = RefinementPlan(percentile, cycles)
    start = time.perf_counter()
    coarse = build_structured_cavity(scenario.n) if coarse is None else coarse
    meshes, timing = [coarse], []
    warm = None
    while True:
        cycle = len(timing)
        t0 = time.perf_counter()
        fine = refine_midpoints(coarse)
        ops = scenario.operators(coarse, fine)
        kernel = StokesKernel(ops)
        t1 = time.perf_counter()
        result = solve(scenario, ops, kernel, model, config, initial=warm)
        t2 = time.perf_counter()
        res_tensor = ops.sym_grad(result.u.flat) - result.gamma.values
        res_elem = frobenius(res_tensor)
        entry = CycleTiming(cycle, coarse.n_triangles, fine.n_triangles, result.iterations,
                            t1 - t0, t2 - t1, 0.0, result.record.grad_residual[0],
                            result.record.grad_residual[-1], float(res_elem.max()))
        timing.append(entry)
        if not result.converged:
            partial = AdaptiveResult(result, ops, meshes, timing, plan,
                                     time.perf_counter() - start)
            raise AdaptError(f"cycle {cycle} did not converge in {config.max_iterations} "
                             f"iterations", partial)
        if cycle == cycles:
            break
        marks = mark_by_residual(res_elem, fine, percentile)
        plan.marks.append(marks)
        new_coarse = refine_marked(coarse, marks)
        new_fine = refine_midpoints(new_coarse)
        warm = _transfer(result, coarse, fine, new_coarse, new_fine)
        entry.refine_seconds = time.perf_counter() - t2
        coarse = new_coarse
        meshes.append(coarse)
    return AdaptiveResult(result, ops, meshes, timing, plan, time.perf_counter() - start)


def uniform_solve(scenario, model: ConstitutiveModel, config: SolverConfig,
                  n: int | None = None):
    """Plain solve on a structured mesh; returns ``(result, ops, seconds)``
    with the same cost accounting as :func:`refine_loop`."""
    start = time.perf_counter()
    coarse = build_structured_cavity(scenario.n if n is None else n)
    fine = refine_midpoints(coarse)
    ops = scenario.operators(coarse, fine)
    kernel = StokesKernel(ops)
    result = solve(scenario, ops, kernel, model, config)
    return result, ops, time.perf_counter() - start
