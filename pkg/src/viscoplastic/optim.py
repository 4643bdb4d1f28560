"""Outer iterations on the dual problem: FISTA*, ISTA* and ALG2.

Every solver works on raw arrays internally (tensors ``(ne, 3)``, velocity
as the interleaved dof vector, pressure on coarse vertices) and wraps them
into field objects only on return.
"""

from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constitutive import (ConstitutiveModel, dual_gradient, dual_potential, lipschitz,
                           primal_energy, prox_alg2)
from .fem import (DiscreteOperators, PressureField, TensorField, VelocityField,
                  p1_gradients, w1r_norm)
from .stokes import StokesKernel

CSV_COLUMNS = ("iter", "cpu_seconds", "grad_residual", "dual_objective",
               "primal_objective", "L", "restarted", "error_vs_reference")

# relative slack on the descent inequality, absorbs round-off in F
DESCENT_SLACK = 1e-12


class BacktrackError(RuntimeError):
    pass


class Algorithm(str, enum.Enum):
    FISTA_STAR = "fista_star"
    ISTA_STAR = "ista_star"
    ALG2 = "alg2"

    @classmethod
    def parse(cls, value) -> "Algorithm":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("*", "_star").replace("-", "_")
        aliases = {"fista": "fista_star", "ista": "ista_star", "admm": "alg2"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown algorithm {value!r}; expected one of "
                             f"{[a.value for a in cls]}") from None


class PrimalMode(str, enum.Enum):
    LEADING_POINT = "leading_point"
    PROX = "prox"
    LEAST_SQUARES = "least_squares"

    @classmethod
    def parse(cls, value) -> "PrimalMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown primal mode {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


@dataclass
class SolverConfig:
    algorithm: Algorithm = Algorithm.FISTA_STAR
    grad_tol: float = 1e-6
    stokes_tol: float = 1e-12
    max_iterations: int = 5000
    restart: bool = False
    primal_mode: PrimalMode = PrimalMode.LEADING_POINT
    L0: float = 0.5
    eta: float = 1.1
    rho: float = 2.0
    s: float = 2.0
    max_magnifications: int = 60
    stop_on_tolerance: bool = True  # False runs exactly max_iterations

    def __post_init__(self):
        self.algorithm = Algorithm.parse(self.algorithm)
        self.primal_mode = PrimalMode.parse(self.primal_mode)
        checks = [
            ("grad_tol", self.grad_tol > 0, "must be > 0"),
            ("stokes_tol", 0 < self.stokes_tol <= self.grad_tol * 1e-3,
             "must be > 0 and <= 1e-3 * grad_tol"),
            ("max_iterations", int(self.max_iterations) >= 1, "must be >= 1"),
            ("L0", self.L0 > 0, "must be > 0"),
            ("eta", self.eta > 1, "must be > 1"),
            ("rho", self.rho >= 0, "must be >= 0"),
            ("s", self.s > 0, "must be > 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"solver.{name} {msg}, got {getattr(self, name)!r}")
        self.max_iterations = int(self.max_iterations)

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm.value, "gradTol": self.grad_tol,
                "stokesTol": self.stokes_tol, "max_iterations": self.max_iterations,
                "restart": self.restart, "primal_mode": self.primal_mode.value,
                "L0": self.L0, "eta": self.eta, "rho": self.rho, "s": self.s}


@dataclass
class ConvergenceRecord:
    """Per-iteration history; one row per outer iteration."""

    iters: list = field(default_factory=list)
    cpu_seconds: list = field(default_factory=list)
    grad_residual: list = field(default_factory=list)
    dual_objective: list = field(default_factory=list)
    primal_objective: list = field(default_factory=list)
    L: list = field(default_factory=list)
    restarted: list = field(default_factory=list)
    error_vs_reference: list = field(default_factory=list)
    magnifications: list = field(default_factory=list)
    stokes_iterations: list = field(default_factory=list)

    def append(self, k, seconds, residual, dual, primal, L, restarted, error,
               magnifications=0, stokes_iterations=0):
        if self.iters and k <= self.iters[-1]:
            raise ValueError("iteration counter must increase")
        self.iters.append(int(k))
        self.cpu_seconds.append(float(seconds))
        self.grad_residual.append(float(residual))
        self.dual_objective.append(float(dual))
        self.primal_objective.append(float(primal))
        self.L.append(None if L is None else float(L))
        self.restarted.append(bool(restarted))
        self.error_vs_reference.append(None if error is None else float(error))
        self.magnifications.append(int(magnifications))
        self.stokes_iterations.append(int(stokes_iterations))

    def __len__(self):
        return len(self.iters)

    @property
    def n_restarts(self) -> int:
        return int(sum(self.restarted))

    def column(self, name: str) -> np.ndarray:
        key = "iters" if name == "iter" else name
        return np.array([np.nan if v is None else v for v in getattr(self, key)], dtype=float)

    def rows(self):
        for i in range(len(self.iters)):
            yield [self.iters[i], self.cpu_seconds[i], self.grad_residual[i],
                   self.dual_objective[i], self.primal_objective[i], self.L[i],
                   int(self.restarted[i]), self.error_vs_reference[i]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                            for v in row])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceRecord":
        rec = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"unexpected convergence log header {reader.fieldnames}")
            for row in reader:
                opt = lambda s: None if s == "" else float(s)  # noqa: E731
                rec.append(int(row["iter"]), float(row["cpu_seconds"]),
                           float(row["grad_residual"]), float(row["dual_objective"]),
                           float(row["primal_objective"]), opt(row["L"]),
                           row["restarted"] == "1", opt(row["error_vs_reference"]))
        return rec


@dataclass
class DualState:
    """Snapshot handed to callbacks after the stress update of iteration k."""

    k: int
    tau: np.ndarray
    tau_prev: np.ndarray
    tau_hat: np.ndarray
    gamma_hat: np.ndarray
    u_hat: np.ndarray
    p: np.ndarray
    t: float
    L: float | None
    restarted: bool = False


@dataclass
class WarmStart:
    tau: np.ndarray
    gamma: np.ndarray | None = None
    p: np.ndarray | None = None


@dataclass
class SolverResult:
    u: VelocityField
    gamma: TensorField
    tau: TensorField
    p: PressureField
    record: ConvergenceRecord
    converged: bool
    algorithm: Algorithm

    @property
    def iterations(self) -> int:
        return len(self.record)

    def __iter__(self):
        return iter((self.u, self.gamma, self.tau, self.p, self.record))


@dataclass
class StepResult:
    u: np.ndarray
    p: np.ndarray
    Du: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    L: float | None = None
    magnifications: int = 0
    stokes_iterations: int = 0


def next_t(t: float) -> float:
    """Extrapolation scalar recursion."""
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))


def body_load(scenario, ops: DiscreteOperators) -> np.ndarray:
    """Assembled load from a scenario, an explicit vector, or nothing."""
    if scenario is None:
        return np.zeros(ops.n_velocity)
    if isinstance(scenario, np.ndarray):
        return scenario
    return scenario.load(ops.fine)


def proximal_gradient_step(kernel: StokesKernel, model: ConstitutiveModel, tau_hat, L: float,
                           load, p_warm, stokes_tol: float) -> StepResult:
    """Gradient evaluation, Stokes solve and stress update at fixed L."""
    ops = kernel.ops
    gamma_hat = dual_gradient(model, tau_hat)
    u, p, rep = kernel.solve(1.0 / L, gamma_hat / L - tau_hat, load, p_warm, stokes_tol)
    Du = ops.sym_grad(u)
    tau = tau_hat + (Du - gamma_hat) / L
    return StepResult(u, p, Du, gamma_hat, tau, L, 0, rep.outer_iterations)


def descent_holds(model: ConstitutiveModel, ops: DiscreteOperators, tau, tau_hat,
                  gamma_hat, L: float, slack: float = DESCENT_SLACK) -> bool:
    """Quadratic upper bound of F around ``tau_hat`` evaluated at ``tau``."""
    diff = tau - tau_hat
    lhs = dual_potential(model, tau, ops.areas)
    f_hat = dual_potential(model, tau_hat, ops.areas)
    rhs = f_hat + ops.inner_q(gamma_hat, diff) + 0.5 * L * ops.inner_q(diff, diff)
    return lhs <= rhs + slack * max(1.0, abs(lhs), abs(f_hat))


def backtrack(model: ConstitutiveModel, tau_hat, L_trial: float, eta: float,
              kernel: StokesKernel, load, p_warm, stokes_tol: float,
              max_magnifications: int = 60) -> StepResult:
    """Increase L geometrically until the descent criterion holds."""
    if not eta > 1:
        raise ValueError("magnifying factor must be > 1")
    if not L_trial > 0:
        raise ValueError("trial Lipschitz constant must be > 0")
    ops = kernel.ops
    L = float(L_trial)
    iters = 0
    for m in range(max_magnifications + 1):
        step = proximal_gradient_step(kernel, model, tau_hat, L, load, p_warm, stokes_tol)
        iters += step.stokes_iterations
        if descent_holds(model, ops, step.tau, tau_hat, step.gamma, L):
            step.magnifications = m
            step.stokes_iterations = iters
            return step
        L *= eta
    raise BacktrackError(f"descent criterion not met after {max_magnifications} magnifications "
                         f"(L = {L / eta:g})")


def alg2_step(kernel: StokesKernel, model: ConstitutiveModel, tau_prev, gamma_prev, rho: float,
              s: float, load, p_warm, stokes_tol: float) -> StepResult:
    """One ADMM sweep: velocity solve, strain-rate prox, multiplier update."""
    ops = kernel.ops
    u, p, rep = kernel.solve(rho, rho * gamma_prev - tau_prev, load, p_warm, stokes_tol)
    Du = ops.sym_grad(u)
    gamma = prox_alg2(model, tau_prev, Du, rho)
    tau = tau_prev + s * (Du - gamma)
    return StepResult(u, p, Du, gamma, tau, None, 0, rep.outer_iterations)


class _Monitor:
    """Objectives, reference errors and timing shared by all solvers."""

    def __init__(self, ops, model, load, reference):
        self.ops, self.model, self.load = ops, model, load
        self.inhomogeneous = bool(np.any(ops.dirichlet_values != 0))
        self.reference = None if reference is None else np.asarray(reference, float).reshape(-1)
        self._grads = p1_gradients(ops.fine) if reference is not None else None
        self.start = time.perf_counter()
        self.record = ConvergenceRecord()

    def dual_objective(self, tau, p) -> float:
        ops = self.ops
        val = dual_potential(self.model, tau, ops.areas)
        if self.inhomogeneous:
            d = ops.dirichlet_dofs
            r = ops.div_adjoint(tau)[d] - (ops.B.T @ p)[d] - self.load[d]
            val -= float(r @ ops.dirichlet_values)
        return val

    def add(self, k, u, Du, residual, tau, p, L, restarted, mags, stokes_its):
        ops = self.ops
        primal = primal_energy(self.model, u, Du, self.load, ops.areas)
        err = None
        if self.reference is not None:
            err = w1r_norm(ops.fine, u - self.reference, self.model.r, self._grads)
        self.record.append(k, time.perf_counter() - self.start, residual,
                           self.dual_objective(tau, p), primal, L, restarted, err,
                           mags, stokes_its)


def _wrap(ops, u, gamma, tau, p, record, converged, algorithm) -> SolverResult:
    return SolverResult(
        u=VelocityField(ops.fine, u.reshape(-1, 2)),
        gamma=TensorField(ops.fine, gamma),
        tau=TensorField(ops.fine, tau),
        p=PressureField(ops.coarse, p),
        record=record, converged=converged, algorithm=algorithm)


def _initial(ops, initial: WarmStart | None):
    ne, npr = ops.n_elements, ops.n_pressure
    if initial is None:
        return np.zeros((ne, 3)), np.zeros((ne, 3)), np.zeros(npr)
    tau = np.array(initial.tau, dtype=float).reshape(ne, 3)
    gamma = (np.zeros((ne, 3)) if initial.gamma is None
             else np.array(initial.gamma, dtype=float).reshape(ne, 3))
    p = np.zeros(npr) if initial.p is None else np.array(initial.p, dtype=float)
    return tau, gamma, p


def _dual_gradient_method(scenario, ops, kernel, model, config, accelerate, initial,
                          reference, callback) -> SolverResult:
    load = body_load(scenario, ops)
    fixed_L = lipschitz(model)
    L = fixed_L if fixed_L is not None else config.L0
    tau, _, p = _initial(ops, initial)
    tau_prev, tau_hat = tau.copy(), tau.copy()
    p_aux = p.copy()
    t = 1.0
    mode = config.primal_mode if accelerate else PrimalMode.LEADING_POINT
    mon = _Monitor(ops, model, load, reference)
    algorithm = Algorithm.FISTA_STAR if accelerate else Algorithm.ISTA_STAR
    converged = False
    u = gamma = None

    for k in range(1, config.max_iterations + 1):
        if fixed_L is not None:
            step = proximal_gradient_step(kernel, model, tau_hat, L, load, p, config.stokes_tol)
        else:
            step = backtrack(model, tau_hat, L, config.eta, kernel, load, p,
                             config.stokes_tol, config.max_magnifications)
            L = step.L
        p, tau = step.p, step.tau
        stokes_its = step.stokes_iterations

        if mode is PrimalMode.LEADING_POINT:
            u, Du, gamma = step.u, step.Du, step.gamma
        else:
            gamma = dual_gradient(model, tau)
            if mode is PrimalMode.PROX:
                u, p_aux, rep = kernel.solve(1.0 / L, gamma / L - tau, load, p_aux, config.stokes_tol)
            else:
                u, p_aux, rep = kernel.solve(1.0, gamma, None, p_aux, config.stokes_tol)
            Du = ops.sym_grad(u)
            stokes_its += rep.outer_iterations
        residual = ops.norm_q(Du - gamma)

        restarted = False
        if accelerate and config.restart:
            restarted = ops.inner_q(step.Du - step.gamma, tau - tau_prev) < 0

        mon.add(k, u, Du, residual, tau, p, L, restarted, step.magnifications, stokes_its)
        if callback is not None:
            callback(DualState(k, tau, tau_prev, tau_hat, step.gamma, step.u, p, t, L, restarted))
        converged = residual <= config.grad_tol
        if converged and config.stop_on_tolerance:
            break

        if not accelerate:
            tau_hat = tau
        elif restarted:
            t, tau_hat = 1.0, tau
        else:
            t_new = next_t(t)
            tau_hat = tau + ((t - 1.0) / t_new) * (tau - tau_prev)
            t = t_new
        tau_prev = tau

    return _wrap(ops, u, gamma, tau, p, mon.record, converged, algorithm)


def fista_star(scenario, ops: DiscreteOperators, kernel: StokesKernel, model: ConstitutiveModel,
               config: SolverConfig, *, initial: WarmStart | None = None, reference=None,
               callback: Callable[[DualState], None] | None = None) -> SolverResult:
    """Accelerated dual proximal gradient method.

    Parameters
    ----------
    scenario
        Object with a ``load(fine_mesh)`` method, an assembled load vector,
        or ``None`` for no body force.
    ops, kernel
        Assembled operators and the factorized Stokes kernel on the same mesh.
    reference
        Optional reference velocity (fine vertex values); enables the
        ``error_vs_reference`` column.
    callback
        Called with a :class:`DualState` after every stress update.
    """
    return _dual_gradient_method(scenario, ops, kernel, model, config, True, initial,
                                 reference, callback)


def ista_star(scenario, ops: DiscreteOperators, kernel: StokesKernel, model: ConstitutiveModel,
              config: SolverConfig, *, initial: WarmStart | None = None, reference=None,
              callback: Callable[[DualState], None] | None = None) -> SolverResult:
    """Dual proximal gradient method without extrapolation."""
    return _dual_gradient_method(scenario, ops, kernel, model, config, False, initial,
                                 reference, callback)


def alg2(scenario, ops: DiscreteOperators, kernel: StokesKernel, model: ConstitutiveModel,
         config: SolverConfig, *, initial: WarmStart | None = None, reference=None,
         callback: Callable[[DualState], None] | None = None) -> SolverResult:
    """Alternating direction method of multipliers with penalty ``rho`` and step ``s``."""
    if not config.rho > 0:
        raise ValueError("ALG2 needs a positive penalty parameter rho")
    load = body_load(scenario, ops)
    tau, gamma, p = _initial(ops, initial)
    mon = _Monitor(ops, model, load, reference)
    converged = False
    u = None
    for k in range(1, config.max_iterations + 1):
        step = alg2_step(kernel, model, tau, gamma, config.rho, config.s, load, p,
                         config.stokes_tol)
        tau_prev = tau
        u, p, gamma, tau = step.u, step.p, step.gamma, step.tau
        residual = ops.norm_q(step.Du - gamma)
        mon.add(k, u, step.Du, residual, tau, p, None, False, 0, step.stokes_iterations)
        if callback is not None:
            callback(DualState(k, tau, tau_prev, tau_prev, gamma, u, p, 1.0, None))
        converged = residual <= config.grad_tol
        if converged and config.stop_on_tolerance:
            break
    return _wrap(ops, u, gamma, tau, p, mon.record, converged, Algorithm.ALG2)


SOLVERS = {Algorithm.FISTA_STAR: fista_star, Algorithm.ISTA_STAR: ista_star, Algorithm.ALG2: alg2}


def solve(scenario, ops, kernel, model, config: SolverConfig, **kwargs) -> SolverResult:
    """Dispatch on ``config.algorithm``."""
    return SOLVERS[config.algorithm](scenario, ops, kernel, model, config, **kwargs)
