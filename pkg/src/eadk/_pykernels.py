"""Pure-Python kernels, used when the compiled extension is unavailable.

Must stay behaviourally identical to ``_ckernels.pyx``.
"""
import numpy as np


def assignment_core(cost):
    """Shortest-augmenting-path assignment of every column to a distinct row.

    ``cost`` is (n_rows, n_cols) with n_rows >= n_cols.  Returns
    ``(rows, col_pot, row_pot)`` where ``rows[j]`` is the row assigned to
    column j and the potentials form an optimal dual: reduced costs
    ``cost[i, j] - col_pot[j] - row_pot[i]`` are >= 0, zero on the
    assignment, and ``row_pot`` is 0 on unassigned rows.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    a = cost.T.tolist()  # columns become the side that is fully assigned
    inf = float("inf")
    u = [0.0] * (m + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows = np.full(m, -1, dtype=np.intp)
    for j in range(1, n + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows, np.array(u[1:]), np.array(v[1:])


def greedy_match(ious, thr):
    """Greedy one-to-one matching of score-ordered detections to ground truth.

    ``ious`` is (n_det, n_gt) with detections already sorted by descending
    score.  Each detection takes the unmatched ground truth with the highest
    IoU (lowest index on ties) provided that IoU >= ``thr``.  Returns the
    matched ground-truth index per detection, -1 for false positives.
    """
    ious = np.asarray(ious, dtype=np.float64)
    n_det, n_gt = ious.shape
    taken = [False] * n_gt
    out = np.full(n_det, -1, dtype=np.intp)
    rows = ious.tolist()
    for d in range(n_det):
        best, best_iou = -1, thr
        row = rows[d]
        for g in range(n_gt):
            if taken[g]:
                continue
            val = row[g]
            if val >= best_iou and (best < 0 or val > best_iou):
                best, best_iou = g, val
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out
