"""Direct sparse solves, the Picard loop and the Backward Euler time loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .forms import Assembler, CoupledSystem, Discretization, ProblemConfig, SolutionState

log = logging.getLogger(__name__)

RESIDUAL_TARGET = 1e-10


class SolverError(RuntimeError):
    """Linear factorization failure; ``pivot`` is the offending index if known."""

    def __init__(self, message, pivot: Optional[int] = None):
        super().__init__(message if pivot is None else f"{message} (pivot {pivot})")
        self.pivot = pivot


class PicardError(RuntimeError):
    def __init__(self, message, increment: float, step: Optional[int] = None):
        super().__init__(message)
        self.increment = increment
        self.step = step


class NonConvergenceError(PicardError):
    pass


class DivergenceError(PicardError):
    pass


@dataclass
class PicardSettings:
    max_iter: int = 50
    rel_tol: float = 1e-8
    divergence_guard: float = 10.0
    damping: float = 1.0
    floor: float = 1e-14
    # "previous": lag the last time level; "extrapolate": polynomial
    # extrapolation through the last (up to three) computed levels
    warm_start: str = "previous"

    def __post_init__(self):
        if self.warm_start not in ("previous", "extrapolate"):
            raise ValueError("warm_start must be 'previous' or 'extrapolate'")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class TimeSettings:
    tau: float = 0.01
    t_end: float = 1.0

    def __post_init__(self):
        if not 0 < self.tau <= self.t_end:
            raise ValueError("need 0 < tau <= t_end")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.tau))


@dataclass
class StepRecord:
    step: int
    time: float
    picard_iterations: int
    final_increment: float
    linear_residual: float
    energy: float
    converged: bool = True


@dataclass
class RunTrace:
    records: list = field(default_factory=list)

    FIELDS = ("step", "time", "picard_iterations", "final_increment", "linear_residual", "energy", "converged")

    def append(self, rec: StepRecord):
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self):
        return len(self.records)


def _structural_singularity(A: sp.spmatrix) -> Optional[int]:
    A = A.tocsc()
    cols = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(cols):
        return int(cols[0])
    rows = np.flatnonzero(np.diff(A.tocsr().indptr) == 0)
    return int(rows[0]) if len(rows) else None


try:
    from cvxopt import matrix as _cvx_matrix, spmatrix as _cvx_spmatrix, umfpack as _umfpack
except ImportError:  # pragma: no cover - exercised only without cvxopt
    _umfpack = None


class SparseLU:
    """Sparse direct solver that keeps the symbolic analysis across calls.

    Picard iterates and time steps share one sparsity pattern, so only the
    numeric factorization is repeated. UMFPACK (through cvxopt) is used when
    available, SuperLU otherwise.
    """

    def __init__(self, backend: Optional[str] = None):
        if backend is None:
            backend = "umfpack" if _umfpack is not None else "superlu"
        if backend not in ("umfpack", "superlu"):
            raise ValueError(f"unknown backend {backend!r}")
        if backend == "umfpack" and _umfpack is None:
            raise ValueError("umfpack backend needs cvxopt")
        self.backend = backend
        self._pattern = None
        self._symbolic = None

    def _same_pattern(self, A):
        p = self._pattern
        return (p is not None and p[0] == A.shape and len(p[2]) == len(A.indices)
                and np.array_equal(p[1], A.indptr) and np.array_equal(p[2], A.indices))

    def factor(self, A: sp.csc_matrix) -> Callable:
        """Factor ``A`` and return a function solving A x = b."""
        if self.backend == "superlu":
            try:
                lu = sla.splu(A)
            except RuntimeError as exc:
                raise SolverError(f"sparse factorization failed: {exc}", _structural_singularity(A)) from exc
            return lu.solve
        A = A.copy()
        A.sort_indices()
        cols = np.repeat(np.arange(A.shape[1]), np.diff(A.indptr))
        C = _cvx_spmatrix(_cvx_matrix(A.data), _cvx_matrix(A.indices.astype(np.int64)),
                          _cvx_matrix(cols.astype(np.int64)), A.shape)
        try:
            if not self._same_pattern(A):
                self._symbolic = _umfpack.symbolic(C)
                self._pattern = (A.shape, A.indptr.copy(), A.indices.copy())
            num = _umfpack.numeric(C, self._symbolic)
        except (ArithmeticError, ValueError) as exc:
            self._pattern = None
            raise SolverError(f"sparse factorization failed: {exc}", _structural_singularity(A)) from exc

        def solve(b):
            B = _cvx_matrix(np.asarray(b, dtype=float).copy())
            _umfpack.solve(C, num, B)
            return np.array(B).ravel()
        return solve

    def solve(self, A, b, refine: int = 2):
        A = sp.csc_matrix(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        if A.shape[0] == 0:
            return np.zeros(0), 0.0
        solve = self.factor(A)
        x = solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverError("factorization produced non-finite values", _structural_singularity(A))
        bn = np.linalg.norm(b)
        res = A @ x - b
        rel = np.linalg.norm(res) / bn if bn > 0 else np.linalg.norm(res)
        for _ in range(refine):
            if rel <= RESIDUAL_TARGET:
                break
            x = x - solve(res)
            res = A @ x - b
            rel = np.linalg.norm(res) / bn if bn > 0 else np.linalg.norm(res)
        if rel > RESIDUAL_TARGET:
            log.warning("linear residual %.3e above target %.0e", rel, RESIDUAL_TARGET)
        return x, float(rel)


def solve_linear(system, rhs: Optional[np.ndarray] = None, refine: int = 2,
                 solver: Optional[SparseLU] = None):
    """Sparse LU solve of ``system`` (a CoupledSystem or a matrix with ``rhs``).

    Returns ``(x, residual)`` with the backward residual ||Ax - b|| / ||b||.
    Up to ``refine`` rounds of iterative refinement are applied while the
    residual exceeds 1e-10.
    """
    if isinstance(system, CoupledSystem):
        A, b = system.matrix, system.rhs
    else:
        A, b = system, rhs
    return (solver or SparseLU()).solve(A, b, refine)


@dataclass
class PicardResult:
    state: SolutionState
    iterations: int
    increments: list
    linear_residual: float
    system: CoupledSystem


def picard_solve(assembler: Assembler, prev_time: SolutionState, t_new: float, tau: float,
                 settings: Optional[PicardSettings] = None,
                 initial_guess: Optional[SolutionState] = None,
                 solver: Optional[SparseLU] = None) -> PicardResult:
    """Fixed-point iteration with viscosities lagged one iterate behind.

    Stops when ||x_k - x_{k-1}|| / max(||x_k||, floor) < rel_tol. A linear
    problem (all laws Newtonian) needs exactly one solve.
    """
    settings = settings or PicardSettings()
    solver = solver or SparseLU()
    disc = assembler.disc
    lagged = initial_guess if initial_guess is not None else prev_time
    x_lag = lagged.to_vector()
    linear = assembler.config.is_linear
    increments = []
    growth = 0
    for k in range(1, settings.max_iter + 1):
        system = assembler.assemble_system(prev_time, lagged, t_new, tau)
        xf, res = solver.solve(system.matrix, system.rhs)
        x_new = system.expand(xf)
        if settings.damping < 1.0 and not linear:
            x_new = settings.damping * x_new + (1.0 - settings.damping) * x_lag
        delta = np.linalg.norm(x_new - x_lag) / max(np.linalg.norm(x_new), settings.floor)
        increments.append(float(delta))
        state = SolutionState.from_vector(disc, x_new, t_new)
        if linear or delta < settings.rel_tol:
            return PicardResult(state, k, increments, res, system)
        if len(increments) > 1 and delta > settings.divergence_guard * increments[-2]:
            growth += 1
            if growth >= 3:
                raise DivergenceError(f"Picard increments grew for 3 iterations (last {delta:.3e})", delta)
        else:
            growth = 0
        lagged, x_lag = state, x_new
    raise NonConvergenceError(
        f"Picard did not converge in {settings.max_iter} iterations (last increment {increments[-1]:.3e})",
        increments[-1])


def discrete_energy_vec(assembler: Assembler, state: SolutionState) -> float:
    cfg = assembler.config
    ape = assembler.assemble_ape()
    return float(cfg.s0 * np.dot(assembler.p_area * state.pp, state.pp) + state.eta @ (ape @ state.eta))


def time_loop(assembler: Assembler, time: TimeSettings, picard: Optional[PicardSettings] = None,
              snapshot_every: Optional[int] = 1, callback: Optional[Callable] = None,
              initial: Optional[SolutionState] = None):
    """Backward Euler from the projected initial data.

    Returns ``(final_state, trace, snapshots)``; ``snapshots`` holds the
    initial state and every ``snapshot_every``-th step (none if ``None``).
    ``callback(step, state, result)`` is called after every step.
    """
    picard = picard or PicardSettings()
    state = initial if initial is not None else assembler.initial_state(0.0)
    trace = RunTrace()
    snapshots = [state] if snapshot_every else []
    tau = time.tau
    solver = SparseLU()
    history = []  # computed levels, newest last; the projected initial data is not one
    for n in range(1, time.n_steps + 1):
        t_new = n * tau
        guess = None
        if picard.warm_start == "extrapolate" and len(history) >= 2:
            xs = [h.to_vector() for h in history[-3:]]
            if len(xs) == 3:
                x = 3.0 * xs[2] - 3.0 * xs[1] + xs[0]
            else:
                x = 2.0 * xs[1] - xs[0]
            guess = SolutionState.from_vector(assembler.disc, x, t_new)
        try:
            result = picard_solve(assembler, state, t_new, tau, picard, guess, solver)
        except PicardError as exc:
            exc.step = n
            exc.args = (f"step {n} (t={t_new:g}): {exc.args[0]}",)
            raise
        state = result.state
        history = (history + [state])[-3:]
        trace.append(StepRecord(n, t_new, result.iterations, result.increments[-1],
                                result.linear_residual, discrete_energy_vec(assembler, state)))
        log.debug("step %d t=%g picard=%d delta=%.2e", n, t_new, result.iterations, result.increments[-1])
        if snapshot_every and (n % snapshot_every == 0 or n == time.n_steps):
            snapshots.append(state)
        if callback is not None:
            callback(n, state, result)
    return state, trace, snapshots


def run(disc: Discretization, config: ProblemConfig, time: TimeSettings,
        picard: Optional[PicardSettings] = None, **kw):
    return time_loop(Assembler(disc, config), time, picard, **kw)


def nonlinear_residual(assembler: Assembler, prev_time: SolutionState, state: SolutionState,
                       tau: float) -> float:
    """||A(x) x - b|| / ||b|| with the system re-assembled at the solution itself."""
    system = assembler.assemble_system(prev_time, state, state.time, tau)
    x = state.to_vector()[system.free]
    r = system.matrix @ x - system.rhs
    bn = np.linalg.norm(system.rhs)
    return float(np.linalg.norm(r) / bn) if bn > 0 else float(np.linalg.norm(r))


def constraint_residual(system: CoupledSystem, state: SolutionState) -> tuple[float, float]:
    """Norm of the interface-constraint rows of A x - b, and ||b||."""
    x = state.to_vector()[system.free]
    rows = system.block_rows("lam")
    r = (system.matrix[rows] @ x) - system.rhs[rows]
    return float(np.linalg.norm(r)), float(np.linalg.norm(system.rhs))


__all__ = ["SparseLU", "PicardSettings", "TimeSettings", "RunTrace", "StepRecord", "SolverError", "PicardError",
           "NonConvergenceError", "DivergenceError", "solve_linear", "picard_solve", "time_loop",
           "run", "nonlinear_residual", "constraint_residual", "discrete_energy_vec"]
