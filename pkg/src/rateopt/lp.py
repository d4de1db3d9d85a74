"""Dense two-phase primal simplex with Bland's rule.

Small problems only: a full tableau is kept and pivoted in place. The
solution returned is always a basic feasible solution (a vertex).
"""

from __future__ import annotations

import numpy as np

TOL = 1e-9


class InfeasibleError(ValueError):
    pass


class UnboundedError(ValueError):
    pass


def _pivot(tab, basis, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]
    basis[row] = col


def _iterate(tab, basis, n_cols, tol, cap):
    """Pivot until optimal; the last tableau row holds reduced costs."""
    for _ in range(cap):
        cost = tab[-1, :n_cols]
        entering = np.flatnonzero(cost < -tol)
        if entering.size == 0:
            return
        col = int(entering[0])  # Bland: lowest index
        column = tab[:-1, col]
        rows = np.flatnonzero(column > tol)
        if rows.size == 0:
            raise UnboundedError("linear program is unbounded")
        ratios = tab[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * max(1.0, abs(best))]
        row = int(min(ties, key=lambda r: basis[r]))  # Bland: lowest basic index leaves
        _pivot(tab, basis, row, col)
    raise RuntimeError("simplex iteration cap reached")


def solve_standard(c, A_eq, b_eq, tol=TOL, cap=50_000):
    """Minimize ``c @ x`` subject to ``A_eq @ x = b_eq``, ``x >= 0``.

    Returns ``(x, objective, basis)``. Raises :class:`InfeasibleError` or
    :class:`UnboundedError`.
    """
    c = np.asarray(c, dtype=float)
    A = np.array(A_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    rows, n = A.shape
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0

    # phase 1: artificial variables n..n+rows-1
    tab = np.zeros((rows + 1, n + rows + 1))
    tab[:rows, :n] = A
    tab[:rows, n:n + rows] = np.eye(rows)
    tab[:rows, -1] = b
    tab[-1, :n] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    basis = list(range(n, n + rows))
    _iterate(tab, basis, n + rows, tol, cap)
    if -tab[-1, -1] > tol * max(1.0, float(np.abs(b).max(initial=0.0))):
        raise InfeasibleError("linear program is infeasible")

    # drive remaining artificials out of the basis; drop redundant rows
    keep = []
    for r in range(rows):
        if basis[r] >= n:
            candidates = np.flatnonzero(np.abs(tab[r, :n]) > tol)
            if candidates.size:
                _pivot(tab, basis, r, int(candidates[0]))
                keep.append(r)
        else:
            keep.append(r)
    tab = np.vstack([tab[keep][:, list(range(n)) + [-1]], np.zeros((1, n + 1))])
    basis = [basis[r] for r in keep]

    # phase 2
    tab[-1, :n] = c
    for r, j in enumerate(basis):
        tab[-1] -= c[j] * tab[r]
    _iterate(tab, basis, n, tol, cap)
    x = np.zeros(n)
    for r, j in enumerate(basis):
        x[j] = tab[r, -1]
    x[np.abs(x) < tol * 1e-3] = 0.0
    return x, float(c @ x), basis


def solve_simplex_mixture(objective, constraints, epsilon, tol=TOL):
    """Minimize ``<p, objective>`` over distributions ``p`` with ``constraints @ p <= epsilon``.

    ``objective`` has length T, ``constraints`` shape (m, T). Returns the
    vertex solution ``p``.
    """
    g0 = np.asarray(objective, dtype=float)
    G = np.asarray(constraints, dtype=float).reshape(-1, g0.size)
    m, T = G.shape
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float), (m,))
    # variables: p (T), slacks (m)
    A = np.zeros((m + 1, T + m))
    A[:m, :T] = G
    A[:m, T:] = np.eye(m)
    A[m, :T] = 1.0
    b = np.concatenate([eps, [1.0]])
    c = np.concatenate([g0, np.zeros(m)])
    x, _, _ = solve_standard(c, A, b, tol=tol)
    p = np.maximum(x[:T], 0.0)
    return p / p.sum()


def minimal_feasible_epsilon(constraints, tol=TOL):
    """``min_p max_i <p, g_i>`` over the simplex, by the same simplex method."""
    G = np.asarray(constraints, dtype=float)
    m, T = G.shape
    if m == 0:
        return -np.inf
    # variables: p (T), t+ , t-, slacks (m); rows: G p - t + s = 0, sum p = 1
    A = np.zeros((m + 1, T + 2 + m))
    A[:m, :T] = G
    A[:m, T] = -1.0
    A[:m, T + 1] = 1.0
    A[:m, T + 2:] = np.eye(m)
    A[m, :T] = 1.0
    b = np.concatenate([np.zeros(m), [1.0]])
    c = np.zeros(T + 2 + m)
    c[T], c[T + 1] = 1.0, -1.0
    _, value, _ = solve_standard(c, A, b, tol=tol)
    return value
