"""Levenberg-Marquardt over the global pose and all node affines/translations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .energy import EnergyParams, FrameProblem, Residuals, assemble
from .warpfield import WarpField

log = logging.getLogger(__name__)

LAMBDA_MAX = 1e12


@dataclass
class SolverConfig:
    max_iterations: int = 10
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    convergence_tol: float = 1e-3
    step_tol: float = 1e-8
    absolute_tol: float = 1e-6  # energy decrease per residual (mm^2) below which progress is noise

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.damping_up > 1:
            raise ValueError("damping_up must exceed 1")
        if not 0 < self.damping_down < 1:
            raise ValueError("damping_down must lie in (0, 1)")
        if self.convergence_tol <= 0 or self.step_tol <= 0 or self.initial_damping <= 0 or self.absolute_tol < 0:
            raise ValueError("tolerances and damping must be positive")


@dataclass
class SolveReport:
    iterations: int
    initial_energy: float
    final_energy: float
    trace: list[float] = field(default_factory=list)  # energy after each accepted step, starting point first
    termination: str = "max-iter"  # converged | max-iter | stalled
    last_step_norm: float = 0.0
    final: Residuals | None = field(default=None, repr=False)

    def to_row(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_energy": self.initial_energy,
            "final_energy": self.final_energy,
            "termination": self.termination,
        }


@numba.njit(cache=True)
def _bandwidth(indptr, indices, pos, ns):
    bw = 0
    for i in range(len(indptr) - 1):
        lo, hi = ns, -1
        for p in range(indptr[i], indptr[i + 1]):
            q = pos[indices[p]]
            if q < ns:
                lo = min(lo, q)
                hi = max(hi, q)
        if hi >= 0:
            bw = max(bw, hi - lo)
    return bw


@numba.njit(cache=True)
def _accumulate(indptr, indices, data, pos, ns, nd, bw):
    """Upper band of the sparse block, coupling and dense blocks of J^T J.

    The band is returned as ``abT[j, bw + i - j] = H[i, j]`` (i <= j) so that
    ``abT.T`` is LAPACK upper band storage in Fortran order.
    """
    band = np.zeros((ns, bw + 1))
    B = np.zeros((ns, nd))
    C = np.zeros((nd, nd))
    width = 0
    for i in range(len(indptr) - 1):
        width = max(width, indptr[i + 1] - indptr[i])
    qs = np.empty(width, dtype=np.int64)
    vs = np.empty(width)
    for i in range(len(indptr) - 1):
        a0, a1 = indptr[i], indptr[i + 1]
        cnt = a1 - a0
        # insertion sort of the row by permuted position
        for p in range(cnt):
            q = pos[indices[a0 + p]]
            v = data[a0 + p]
            j = p
            while j > 0 and qs[j - 1] > q:
                qs[j] = qs[j - 1]
                vs[j] = vs[j - 1]
                j -= 1
            qs[j] = q
            vs[j] = v
        for p in range(cnt):
            qp = qs[p]
            vp = vs[p]
            if qp < ns:
                for q in range(p, cnt):
                    qq = qs[q]
                    if qq < ns:
                        band[qq, bw + qp - qq] += vp * vs[q]
                    else:
                        B[qp, qq - ns] += vp * vs[q]
            else:
                for q in range(p, cnt):
                    qq = qs[q]
                    C[qp - ns, qq - ns] += vp * vs[q]
                    if qq != qp:
                        C[qq - ns, qp - ns] += vp * vs[q]
    return band, B, C


def _block_bandwidth(order: np.ndarray, pattern: sp.coo_matrix) -> int:
    if len(order) == 0:
        return 0
    where = np.empty_like(order)
    where[order] = np.arange(len(order))
    return int(np.max(np.abs(where[pattern.row] - where[pattern.col]), initial=0))


class NormalEquations:
    """Gauss-Newton system ``J^T J`` / ``J^T r`` for one linearisation point.

    Built once per accepted state and re-solved for every damping value.
    Parameters come in blocks of ``block`` (one node each) followed by
    ``n_dense`` globally coupled ones (the pose). Node blocks are ordered
    to keep the band narrow and the sparse part is factorised as a band;
    the dense tail is eliminated by Schur complement. Pass ``order`` from a
    previous system over the same nodes to skip the reordering.
    """

    def __init__(
        self,
        J: sp.csr_matrix,
        r: np.ndarray,
        n_dense: int = 6,
        block: int = 12,
        positions: np.ndarray | None = None,
        order: np.ndarray | None = None,
    ):
        J = sp.csr_matrix(J)
        J.sum_duplicates()
        self.J = J
        self.g = J.T @ r
        n = J.shape[1]
        ns = n - n_dense
        self.n_dense, self.ns = n_dense, ns
        if ns % block:
            block = 1
        nb = ns // block
        if order is None or len(order) != nb:
            order = self._order(J, ns, nb, block, positions)
        self.order = order
        self.perm = (order[:, None] * block + np.arange(block)).ravel()
        pos = np.empty(n, dtype=np.int64)
        pos[self.perm] = np.arange(ns)
        pos[ns:] = np.arange(ns, n)
        indices = J.indices.astype(np.int64)
        indptr = J.indptr.astype(np.int64)
        self.bandwidth = int(_bandwidth(indptr, indices, pos, ns))
        band, self.B, self.C = _accumulate(indptr, indices, J.data, pos, ns, n_dense, self.bandwidth)
        self.ab = band.T  # Fortran-ordered (bw + 1, ns)
        diag = np.empty(n)
        diag[self.perm] = self.ab[-1]
        diag[ns:] = np.diag(self.C)
        floor = 1e-12 * max(float(diag.max(initial=0.0)), 1.0)
        self.D = np.maximum(diag, floor)

    @staticmethod
    def _order(J, ns, nb, block, positions) -> np.ndarray:
        if nb == 0:
            return np.zeros(0, dtype=np.int64)
        coo = J.tocoo()
        keep = coo.col < ns
        Jb = sp.csr_matrix((np.ones(int(keep.sum())), (coo.row[keep], coo.col[keep] // block)), shape=(J.shape[0], nb))
        Jb.data[:] = 1.0
        pattern = (Jb.T @ Jb).tocoo()
        candidates = [reverse_cuthill_mckee(pattern.tocsr(), symmetric_mode=True)]
        if positions is not None:
            # slicing across the longest extent keeps fronts short
            P = np.asarray(positions, dtype=np.float64).reshape(nb, -1)
            axis = np.linalg.svd(P - P.mean(axis=0), full_matrices=False)[2][0]
            candidates.append(np.argsort(P @ axis, kind="stable"))
        return min(candidates, key=lambda o: _block_bandwidth(o, pattern)).astype(np.int64)

    def matvec(self, x: np.ndarray, lam: float) -> np.ndarray:
        return self.J.T @ (self.J @ x) + lam * self.D * x

    def _factor(self, lam: float, b: np.ndarray):
        """Factorise at ``lam`` and solve for ``b`` in the same pass."""
        ns = self.ns
        ab = self.ab.copy(order="F")
        ab[-1] += lam * self.D[:ns][self.perm]
        cb = sla.cholesky_banded(ab, overwrite_ab=True, lower=False, check_finite=False)
        rhs = np.column_stack([self.B, b[:ns][self.perm]])
        Y = sla.cho_solve_banded((cb, False), rhs, check_finite=False)
        X, y = Y[:, : self.n_dense], Y[:, self.n_dense]
        S = None
        out = np.empty_like(b)
        if self.n_dense:
            S = sla.cho_factor(self.C + np.diag(lam * self.D[ns:]) - self.B.T @ X, check_finite=False)
            xd = sla.cho_solve(S, b[ns:] - self.B.T @ y, check_finite=False)
            y = y - X @ xd
            out[ns:] = xd
        out[self.perm] = y
        return (cb, X, S), out

    def _apply(self, fac, b: np.ndarray) -> np.ndarray:
        cb, X, S = fac
        ns = self.ns
        y = sla.cho_solve_banded((cb, False), b[:ns][self.perm], check_finite=False)
        out = np.empty_like(b)
        if self.n_dense:
            xd = sla.cho_solve(S, b[ns:] - self.B.T @ y, check_finite=False)
            y = y - X @ xd
            out[ns:] = xd
        out[self.perm] = y
        return out

    def solve(self, lam: float) -> np.ndarray:
        """Damped step ``(J^T J + lam diag(J^T J)) delta = -J^T r``.

        Zero diagonal entries (unobserved parameters) are floored to a tiny
        fraction of the largest diagonal so the damped system stays definite.
        """
        b = -self.g
        try:
            fac, delta = self._factor(lam, b)
            direct = lambda rhs: self._apply(fac, rhs)  # noqa: E731
        except np.linalg.LinAlgError:
            H = (self.J.T @ self.J + sp.diags(lam * self.D)).tocsc()
            direct = spla.splu(H).solve
            delta = direct(b)
        if not np.all(np.isfinite(delta)):
            raise np.linalg.LinAlgError("non-finite step")
        scale = max(np.linalg.norm(b), 1e-300)
        resid = b - self.matvec(delta, lam)
        if np.linalg.norm(resid) > 1e-8 * scale:
            # one round of iterative refinement
            delta = delta + direct(resid)
            resid = b - self.matvec(delta, lam)
            if np.linalg.norm(resid) > 1e-6 * scale:
                raise np.linalg.LinAlgError(f"normal equations residual {np.linalg.norm(resid):.3e}")
        return delta


def solve_normal_equations(J: sp.csr_matrix, r: np.ndarray, lam: float, n_dense: int = 6) -> np.ndarray:
    """One-shot damped Gauss-Newton step; see :class:`NormalEquations`."""
    return NormalEquations(J, r, n_dense).solve(lam)


def solve(
    field: WarpField,
    problem: FrameProblem,
    params: EnergyParams,
    config: SolverConfig | None = None,
    on_iteration=None,
) -> tuple[WarpField, SolveReport]:
    """Minimise the assembled energy starting from ``field``.

    Visibility is re-predicted at every evaluated state. A step is accepted
    when it does not increase the energy; otherwise it is discarded and the
    damping grows. ``on_iteration(it, residuals, accepted)`` is called once
    for the starting state (``it == 0``) and after every trial.
    """
    config = config or SolverConfig()
    current = field
    res = assemble(problem, current, params)
    if len(res.r) == 0:
        raise ValueError("problem has no residuals")
    E = res.total
    report = SolveReport(iterations=0, initial_energy=E, final_energy=E, trace=[E])
    lam = config.initial_damping
    if on_iteration is not None:
        on_iteration(0, res, True)

    if E <= 1e-20:
        report.termination = "converged"
        report.final = res
        return current, report

    it = 0
    system = None
    order = None
    while it < config.max_iterations:
        if system is None:
            system = NormalEquations(res.J, res.r, positions=current.g, order=order)
            order = system.order
        if np.linalg.norm(system.g) <= 1e-14 * max(1.0, E):
            report.termination = "converged"
            break
        try:
            delta = system.solve(lam)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            log.debug("linear solve failed at lambda=%g: %s", lam, exc)
            lam *= config.damping_up
            if lam > LAMBDA_MAX:
                report.termination = "stalled"
                break
            continue
        it += 1
        trial = current.retract(delta)
        trial_res = assemble(problem, trial, params, jacobian=False)
        E_trial = trial_res.total
        accepted = np.isfinite(E_trial) and E_trial <= E
        if on_iteration is not None:
            on_iteration(it, trial_res, accepted)
        step = float(np.linalg.norm(delta))
        report.last_step_norm = step
        if accepted:
            gain = E - E_trial
            rel = gain / max(E, 1e-300)
            small = gain < config.absolute_tol * len(trial_res.r)
            current = trial
            res = assemble(problem, current, params, visibility=trial_res.visibility)
            system = None
            E = res.total
            report.trace.append(E)
            lam = max(lam * config.damping_down, 1e-15)
            if rel < config.convergence_tol or small or step < config.step_tol:
                report.termination = "converged"
                break
        else:
            lam *= config.damping_up
            if lam > LAMBDA_MAX:
                report.termination = "stalled"
                break
            # a rejected trial this close to the current energy means we are at the noise floor
            if np.isfinite(E_trial) and (E_trial - E) / max(E, 1e-300) < config.convergence_tol:
                report.termination = "converged"
                break
            if step < config.step_tol:
                report.termination = "converged"
                break
    report.iterations = it
    report.final_energy = E
    report.final = res
    return current, report
