"""Dense matrix primitives.

Matrices are plain numpy arrays. Storage elsewhere in the package is float32;
every reduction here runs in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_NORM_EPS = 1e-12


class SVDError(RuntimeError):
    """Raised when the singular value decomposition fails to converge."""


def as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def cosine(u, v) -> float:
    """Cosine similarity, 0.0 when either vector has (near) zero norm."""
    u = as_f64(u).ravel()
    v = as_f64(v).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine length mismatch: {u.size} vs {v.size}")
    nu = float(np.sqrt(np.dot(u, u)))
    nv = float(np.sqrt(np.dot(v, v)))
    if nu < _NORM_EPS or nv < _NORM_EPS:
        return 0.0
    # dot is symmetric and nu*nv commutes exactly, so cosine(u, v) == cosine(v, u) bitwise
    c = float(np.dot(u, v)) / (nu * nv) if nu <= nv else float(np.dot(v, u)) / (nv * nu)
    return min(1.0, max(-1.0, c))


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD returning ``(U, sigma, V)`` with ``m = U @ diag(sigma) @ V.T``.

    Backed by LAPACK. ``V`` is returned with singular vectors as columns, not
    the transposed convention numpy uses.
    """
    m = as_f64(m)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDError(str(exc)) from exc
    return u, s, vt.T


def singular_values(m) -> np.ndarray:
    m = as_f64(m)
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SVDError(str(exc)) from exc


def assignment_score(score, perm) -> float:
    """Sum of ``score[i, perm[i]]`` accumulated in row order."""
    score = as_f64(score)
    total = 0.0
    for i, j in enumerate(perm):
        total += float(score[i, j])
    return total


def _hungarian_max(score: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method, O(n^3).

    Solves the maximisation by minimising ``-score``. Returns the row->column
    assignment and the dual potentials (u, v) of the minimisation problem.
    """
    n = score.shape[0]
    cost = -score
    inf = np.inf
    # 1-indexed potentials; column 0 is the virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            cols = np.flatnonzero(free[1:]) + 1
            better = cur[cols - 1] < minv[cols]
            upd = cols[better]
            minv[upd] = cur[upd - 1]
            way[upd] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _lexmin_tight(assign: np.ndarray, tight: np.ndarray) -> np.ndarray:
    """Rotate ``assign`` to the lexicographically smallest perfect matching of ``tight``.

    ``assign`` must itself be a perfect matching inside ``tight``. Rows are
    fixed in order; row i takes the smallest column reachable through an
    alternating cycle among the rows not yet fixed.
    """
    n = assign.size
    assign = assign.copy()
    mate = np.empty(n, dtype=np.int64)
    mate[assign] = np.arange(n)
    for i in range(n):
        free_rows = np.arange(i, n)
        # reverse reachability: rows r that can reach row i via r -> mate[c], c tight for r
        reach = np.zeros(n, dtype=bool)
        reach[i] = True
        stack = [i]
        while stack:
            r2 = stack.pop()
            c = assign[r2]
            preds = free_rows[tight[free_rows, c]]
            for r in preds:
                if not reach[r]:
                    reach[r] = True
                    stack.append(r)
        target = None
        for c in np.flatnonzero(tight[i]):
            r = mate[c]
            if r < i:
                continue
            if c == assign[i] or reach[r]:
                target = c
                break
        if target is None or target == assign[i]:
            continue
        # forward BFS from mate[target] to row i through free rows
        start = mate[target]
        prev = {start: -1}
        queue = [start]
        head = 0
        while head < len(queue):
            r = queue[head]
            head += 1
            if r == i:
                break
            for c in np.flatnonzero(tight[r]):
                r2 = mate[c]
                if r2 >= i and r2 not in prev:
                    prev[r2] = r
                    queue.append(r2)
        path = []
        r = i
        while r != -1:
            path.append(r)
            r = prev[r]
        path.reverse()  # start ... i; each row takes the column of the next row
        cols = [assign[r] for r in path]
        new_assign = {path[k]: cols[k + 1] for k in range(len(path) - 1)}
        new_assign[i] = target
        for r, c in new_assign.items():
            assign[r] = c
            mate[c] = r
    return assign


def solve_assignment(score) -> np.ndarray:
    """Permutation ``p`` maximising ``sum_i score[i, p[i]]``.

    Among optimal permutations the lexicographically smallest mapping is
    returned, so reruns and tied inputs are deterministic.
    """
    score = as_f64(score)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ShapeError(f"assignment needs a square score matrix, got {score.shape}")
    n = score.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(score)):
        raise ValueError("assignment score matrix contains non-finite entries")
    assign, u, v = _hungarian_max(score)
    scale = max(1.0, float(np.max(np.abs(score))))
    reduced = -score - u[:, None] - v[None, :]
    tight = np.abs(reduced) <= 1e-9 * scale * n
    tight[np.arange(n), assign] = True
    refined = _lexmin_tight(assign, tight)
    if assignment_score(score, refined) < assignment_score(score, assign):
        return assign
    return refined


def invert_permutation(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def is_permutation(p, n: int | None = None) -> bool:
    p = np.asarray(p)
    if p.ndim != 1 or (n is not None and p.size != n):
        return False
    return bool(np.array_equal(np.sort(p), np.arange(p.size)))
