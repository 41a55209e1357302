"""
Active-Set QP Solver
Primal active-set method for strictly convex QPs, used as a reference solver
"""

import logging
from typing import Dict, List, Optional

import numpy as np

from core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


class ActiveSetSolver:
    """
    min 0.5 x'Qx + c'x  s.t.  Gx <= h

    Q must be positive definite. Starts from a feasible point (zero by
    default) and keeps a working set of active rows; each iteration solves
    the equality-constrained subproblem through its KKT system.
    """

    def __init__(self, max_iter: int = 500, tol: float = 1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def solve(self, Q, c, G, h, x0: Optional[np.ndarray] = None) -> Dict:
        Q = np.asarray(Q, dtype=float)
        c = np.asarray(c, dtype=float)
        G = np.asarray(G, dtype=float).reshape(-1, Q.shape[0])
        h = np.asarray(h, dtype=float)
        n = Q.shape[0]

        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
        if np.any(G @ x > h + self.tol):
            raise ConfigurationError("active-set start point violates the constraints")

        working: List[int] = [int(i) for i in np.flatnonzero(np.abs(G @ x - h) <= self.tol)]
        working = self._independent(G, working)

        for iteration in range(self.max_iter):
            p, lam = self._equality_step(Q, c, G, x, working)

            if np.linalg.norm(p, np.inf) <= 1e-12 * (1.0 + np.linalg.norm(x, np.inf)):
                if not working or lam.min() >= -self.tol:
                    multipliers = np.zeros(G.shape[0])
                    multipliers[working] = lam if working else 0.0
                    return {
                        'x': x,
                        'multipliers': multipliers,
                        'active': sorted(working),
                        'iterations': iteration + 1,
                        'status': 'optimal',
                    }
                working.pop(int(np.argmin(lam)))
                continue

            # ------------------------------------------------------- step length
            Gp = G @ p
            alpha, blocking = 1.0, None
            for i in range(G.shape[0]):
                if i in working or Gp[i] <= self.tol:
                    continue
                ratio = (h[i] - G[i] @ x) / Gp[i]
                if ratio < alpha:
                    alpha, blocking = max(ratio, 0.0), i
            x = x + alpha * p
            if blocking is not None:
                working.append(blocking)

        logger.warning("active-set solver hit %d iterations", self.max_iter)
        return {'x': x, 'multipliers': np.zeros(G.shape[0]), 'active': sorted(working),
                'iterations': self.max_iter, 'status': 'max_iter'}

    # ------------------------------------------------------------ internals

    @staticmethod
    def _independent(G, rows: List[int]) -> List[int]:
        kept: List[int] = []
        for i in rows:
            trial = kept + [i]
            if np.linalg.matrix_rank(G[trial]) == len(trial):
                kept = trial
        return kept

    @staticmethod
    def _equality_step(Q, c, G, x, working):
        n = Q.shape[0]
        grad = Q @ x + c
        if not working:
            return np.linalg.solve(Q, -grad), np.zeros(0)
        Gw = G[working]
        m = len(working)
        KKT = np.block([
            [Q, Gw.T],
            [Gw, np.zeros((m, m))],
        ])
        rhs = np.concatenate([-grad, np.zeros(m)])
        sol = np.linalg.solve(KKT, rhs)
        return sol[:n], sol[n:]
