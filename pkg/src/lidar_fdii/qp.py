"""Dense strictly convex QP by the Goldfarb-Idnani dual active-set method.

Solves ``min 0.5 x'Gx + a'x  s.t.  C x >= d`` with ``G`` positive definite.
The method starts from the unconstrained minimiser and adds the most
violated constraint at each major iteration, dropping active constraints
whose multipliers would turn negative. Each iterate is optimal for the
current active set, so the dual objective rises monotonically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, solve_triangular


class QPError(RuntimeError):
    pass


class QPInfeasible(QPError):
    pass


class QPMaxIter(QPError):
    pass


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    objective: float
    active: tuple[int, ...]
    multipliers: np.ndarray  # full length m, zero for inactive
    iterations: int


def _directions(Jinv: np.ndarray, active: list[int], C: np.ndarray, npl: np.ndarray):
    """Primal step z and dual step r for adding constraint normal ``npl``.

    Works in the scaled space ``y = L' x`` where ``G = L L'``: the active
    normals become ``L^{-1} N``; a QR of those splits the space into the
    active range and its complement.
    """
    nt = Jinv @ npl
    if not active:
        return Jinv.T @ nt, np.empty(0)
    Nt = Jinv @ C[active].T
    Q, R = np.linalg.qr(Nt, mode="reduced")
    proj = Q.T @ nt
    z = Jinv.T @ (nt - Q @ proj)
    r = solve_triangular(R, proj)
    return z, r


def solve_qp(G, a, C=None, d=None, max_iter: int = 500, tol: float = 1e-8) -> QPResult:
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    n = len(a)
    C = np.zeros((0, n)) if C is None else np.asarray(C, dtype=float).reshape(-1, n)
    d = np.zeros(0) if d is None else np.asarray(d, dtype=float).ravel()
    m = len(d)
    try:
        L, _ = cho_factor(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise QPError("Hessian is not positive definite") from exc
    L = np.tril(L)
    Jinv = solve_triangular(L, np.eye(n), lower=True)  # L^{-1}

    x = -(Jinv.T @ (Jinv @ a))
    active: list[int] = []
    u = np.zeros(0)
    scale = 1.0 + np.abs(d)
    it = 0
    while True:
        if m == 0:
            break
        s = C @ x - d
        viol = s / scale
        if active:
            viol[active] = np.inf
        p = int(np.argmin(viol))
        if viol[p] >= -tol:
            break
        u_plus = 0.0
        npl = C[p]
        while True:
            it += 1
            if it > max_iter:
                raise QPMaxIter(f"no convergence in {max_iter} iterations")
            z, r = _directions(Jinv, active, C, npl)
            # partial step: largest dual step keeping active multipliers >= 0
            t1, drop = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-12:
                    tj = u[j] / rj
                    if tj < t1:
                        t1, drop = tj, j
            zn = float(z @ npl)
            t2 = np.inf
            if np.linalg.norm(z) > 1e-12 and zn > 1e-14:
                t2 = -float(npl @ x - d[p]) / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QPInfeasible(f"constraint {p} cannot be satisfied")
            if np.isfinite(t2):
                x = x + t * z
            u = u - t * r
            u_plus += t
            if t == t2:
                active.append(p)
                u = np.append(u, u_plus)
                break
            del active[drop]
            u = np.delete(u, drop)
    lam = np.zeros(m)
    if active:
        lam[active] = u
    obj = 0.5 * float(x @ G @ x) + float(a @ x)
    return QPResult(x, obj, tuple(active), lam, it)


def kkt_residual(G, a, C, d, res: QPResult) -> float:
    """Max of stationarity, primal feasibility and complementarity violations."""
    G, a = np.asarray(G, float), np.asarray(a, float)
    C = np.asarray(C, float).reshape(-1, len(a))
    d = np.asarray(d, float).ravel()
    grad = G @ res.x + a - C.T @ res.multipliers
    slack = C @ res.x - d if len(d) else np.zeros(0)
    parts = [np.abs(grad).max(initial=0.0),
             np.maximum(-slack, 0).max(initial=0.0),
             np.abs(res.multipliers * slack).max(initial=0.0),
             np.maximum(-res.multipliers, 0).max(initial=0.0)]
    return float(max(parts))
