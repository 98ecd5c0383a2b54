"""Compiled CART builder shared by decision trees, forests and boosting.

Split quality is the weighted between-child sum of squares
``S_l^2/W_l + S_r^2/W_r`` (S = sum of w*y, W = sum of w). For 0/1 targets
maximising it is exactly minimising weighted Gini impurity; for real targets
it is variance reduction.

Leaf modes: 0 stores the weighted mean of ``y`` (positive fraction);
1 stores the Newton step ``sum(w*y) / (sum(w*h) + reg)`` used by boosting.
"""
import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True, nogil=True)
def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15))
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _pick_features(p, k, key, node_counter, ranks_out):
    """First k entries of a keyed Fisher-Yates shuffle of 0..p-1, sorted."""
    perm = np.arange(p)
    state = _splitmix64(np.uint64(key) ^ _splitmix64(np.uint64(node_counter)))
    for i in range(k):
        state = _splitmix64(state)
        j = i + np.int64(state % np.uint64(p - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    for i in range(k):
        ranks_out[i] = perm[i]
    ranks_out[:k].sort()


@njit(cache=True, nogil=True)
def _node_value(S, W, H, leaf_mode, reg):
    if leaf_mode == 0:
        return S / W if W > 0 else 0.0
    return S / (H + reg)


@njit(cache=True, nogil=True)
def build_tree(SO, SR, uniq, uniq_off, y, w, h, feature_order, max_depth, min_samples_split,
               min_samples_leaf, max_features, key, leaf_mode, reg, seg_ws, srk_ws):
    """Grow one tree.

    ``SO[f]`` lists row indices sorted by column f and ``SR[f, t]`` is the
    rank of row ``SO[f, t]`` among the column's sorted distinct values
    ``uniq[uniq_off[f]:uniq_off[f + 1]]``. ``seg_ws``/``srk_ws`` are p x n
    int32 scratch arrays reused across trees (fresh pages are expensive). Every node owns the same segment of
    each per-feature sorted list, kept consistent by stable partitioning, so
    no sorting happens below the root. Thresholds are midpoints between
    consecutive distinct values. Rows with w == 0 are ignored.

    ``feature_order[r]`` is the column index of the r-th feature in name
    order; ties in split quality go to the lower rank, then the lower
    threshold. Returns (feature, threshold, left, right, value, weight, gain).
    """
    p, n = SO.shape
    m = 0
    for i in range(n):
        if w[i] > 0:
            m += 1
    # seg[f] holds row ids in column-f order; srk[f] their ranks, permuted in
    # lockstep so the split scan reads ranks sequentially.
    seg = seg_ws
    srk = srk_ws
    for f in range(p):
        if m == n:
            seg[f, :] = SO[f, :]
            srk[f, :] = SR[f, :]
            continue
        j = 0
        for t in range(n):
            i = SO[f, t]
            if w[i] > 0:
                seg[f, j] = i
                srk[f, j] = SR[f, t]
                j += 1
    # (w, w*y) side by side: one cache line per row in the scan
    wy = np.empty((n, 2))
    for i in range(n):
        wy[i, 0] = w[i]
        wy[i, 1] = w[i] * y[i]

    cap = 2 * m + 1
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    weight = np.zeros(cap)
    gain = np.zeros(cap)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    ranks = np.empty(p, dtype=np.int64)
    goes_left = np.zeros(n, dtype=np.int64)
    buf = np.empty(m, dtype=np.int32)
    rbuf = np.empty(m, dtype=np.int32)
    counter = 0

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]

        S = 0.0
        W = 0.0
        H = 0.0
        y_min = np.inf
        y_max = -np.inf
        for t in range(start, end):
            r = seg[0, t]
            S += w[r] * y[r]
            W += w[r]
            H += w[r] * h[r]
            if y[r] < y_min:
                y_min = y[r]
            if y[r] > y_max:
                y_max = y[r]
        value[node] = _node_value(S, W, H, leaf_mode, reg)
        weight[node] = W

        if (max_depth >= 0 and depth >= max_depth) or W < min_samples_split or y_min == y_max \
                or W < 2 * min_samples_leaf:
            continue

        if max_features >= p:
            for q in range(p):
                ranks[q] = q
            k = p
        else:
            _pick_features(p, max_features, key, counter, ranks)
            k = max_features
        counter += 1

        parent_score = S * S / W
        best_score = parent_score + 1e-12 * (abs(parent_score) + 1.0)
        best_feat = -1
        best_rank = -1
        for q in range(k):
            f = feature_order[ranks[q]]
            order = seg[f]
            rk = srk[f]
            Wl = 0.0
            Sl = 0.0
            for t in range(start, end - 1):
                r = order[t]
                Wl += wy[r, 0]
                Sl += wy[r, 1]
                a = rk[t]
                if a == rk[t + 1]:
                    continue
                Wr = W - Wl
                if Wl < min_samples_leaf or Wr < min_samples_leaf:
                    continue
                Sr = S - Sl
                score = Sl * Sl / Wl + Sr * Sr / Wr
                if score > best_score:
                    best_score = score
                    best_feat = f
                    best_rank = a

        if best_feat < 0:
            continue

        n_left = 0
        for t in range(start, end):
            r = seg[best_feat, t]
            if srk[best_feat, t] <= best_rank:
                goes_left[r] = 1
                n_left += 1
            else:
                goes_left[r] = 0
        mid = start + n_left
        # stable partition of every feature's segment: left rows first
        for f in range(p):
            a_pos = start
            b_pos = 0
            # branch-free: write both destinations, advance one (a_pos <= t)
            for t in range(start, end):
                r = seg[f, t]
                k = srk[f, t]
                g = goes_left[r]
                seg[f, a_pos] = r
                srk[f, a_pos] = k
                buf[b_pos] = r
                rbuf[b_pos] = k
                a_pos += g
                b_pos += 1 - g
            for t in range(b_pos):
                seg[f, mid + t] = buf[t]
                srk[f, mid + t] = rbuf[t]

        a_val = uniq[uniq_off[best_feat] + best_rank]
        b_val = uniq[uniq_off[best_feat] + srk[best_feat, mid]]
        thr = a_val + (b_val - a_val) / 2.0
        if thr >= b_val:
            thr = a_val

        feature[node] = best_feat
        threshold[node] = thr
        gain[node] = best_score - parent_score
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is numbered first
        stack_node[top] = rnode
        stack_start[top] = mid
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lnode
        stack_start[top] = start
        stack_end[top] = mid
        stack_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), weight[:n_nodes].copy(), gain[:n_nodes].copy())


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True, nogil=True)
def tree_contributions(X, feature, threshold, left, right, value, out):
    """Add each row's path value changes to out[row, feature] (Saabas attribution)."""
    n = X.shape[0]
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            f = feature[node]
            if X[i, f] <= threshold[node]:
                child = left[node]
            else:
                child = right[node]
            out[i, f] += value[child] - value[node]
            node = child
