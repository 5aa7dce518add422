"""Compiled inner loops for the random forest learner.

Trees are stored in preorder: the left child of an internal node ``i`` is
always ``i + 1``. Leaves carry ``feature == -1``. Every node owns exactly one
real parameter: the split threshold for internal nodes, the class-1
probability for leaves.
"""

import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def _mix64(z):
    # splitmix64 finalizer on uint64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _pick_features(tree_key, node_id, n_features, max_features, out):
    """Choose ``max_features`` distinct features for one node, ascending."""
    keys = np.empty(n_features, dtype=np.uint64)
    base = _mix64(tree_key ^ (np.uint64(node_id) * np.uint64(0x9E3779B97F4A7C15)))
    for f in range(n_features):
        keys[f] = _mix64(base + np.uint64(f + 1))
    order = np.argsort(keys, kind="mergesort")
    chosen = np.sort(order[:max_features])
    for i in range(max_features):
        out[i] = chosen[i]


@njit(cache=True)
def build_tree(X, y, weight, tree_key, max_features, max_depth, min_leaf):
    """Grow one gini tree on the rows of ``X`` with positive ``weight``.

    Returns ``(feature, right, param)`` arrays in preorder.
    """
    n_samples, n_features = X.shape
    idx = np.empty(n_samples, dtype=np.int64)
    n_active = 0
    for i in range(n_samples):
        if weight[i] > 0:
            idx[n_active] = i
            n_active += 1
    idx = idx[:n_active]

    cap = 2 * n_active + 1
    feature = np.full(cap, LEAF, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    param = np.zeros(cap, dtype=np.float64)

    # stack entries: start, end, depth, parent (set parent's right pointer when >= 0)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_parent = np.empty(cap, dtype=np.int64)
    top = 0
    st_start[0] = 0
    st_end[0] = n_active
    st_depth[0] = 0
    st_parent[0] = -1
    top = 1

    feats = np.empty(max_features, dtype=np.int64)
    buf = np.empty(n_active, dtype=np.int64)
    n_nodes = 0

    while top > 0:
        top -= 1
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        parent = st_parent[top]

        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            right[parent] = node

        w0 = 0.0
        w1 = 0.0
        for t in range(start, end):
            i = idx[t]
            if y[i] == 1:
                w1 += weight[i]
            else:
                w0 += weight[i]
        w_tot = w0 + w1
        param[node] = w1 / w_tot if w_tot > 0 else 0.0

        if depth >= max_depth or w_tot < 2 * min_leaf or w0 == 0.0 or w1 == 0.0:
            continue

        parent_crit = w_tot - (w0 * w0 + w1 * w1) / w_tot
        best_crit = parent_crit - 1e-12
        best_f = -1
        best_thr = 0.0

        _pick_features(tree_key, node, n_features, max_features, feats)
        n_node = end - start
        vals = np.empty(n_node, dtype=np.float64)
        for fi in range(max_features):
            f = feats[fi]
            for t in range(n_node):
                vals[t] = X[idx[start + t], f]
            order = np.argsort(vals, kind="mergesort")
            l0 = 0.0
            l1 = 0.0
            for t in range(n_node - 1):
                i = idx[start + order[t]]
                if y[i] == 1:
                    l1 += weight[i]
                else:
                    l0 += weight[i]
                lo = vals[order[t]]
                hi = vals[order[t + 1]]
                if not lo < hi:
                    continue
                wl = l0 + l1
                wr = w_tot - wl
                if wl < min_leaf or wr < min_leaf:
                    continue
                r0 = w0 - l0
                r1 = w1 - l1
                crit = (wl - (l0 * l0 + l1 * l1) / wl) + (wr - (r0 * r0 + r1 * r1) / wr)
                if crit < best_crit:
                    best_crit = crit
                    best_f = f
                    thr = lo + (hi - lo) / 2.0
                    if not thr > lo:
                        thr = hi
                    best_thr = thr

        if best_f < 0:
            continue

        feature[node] = best_f
        param[node] = best_thr
        n_left = 0
        n_right = 0
        for t in range(start, end):
            i = idx[t]
            if X[i, best_f] < best_thr:
                idx[start + n_left] = i
                n_left += 1
            else:
                buf[n_right] = i
                n_right += 1
        for t in range(n_right):
            idx[start + n_left + t] = buf[t]
        mid = start + n_left

        # right pushed first so the left subtree is emitted next (preorder)
        st_start[top] = mid
        st_end[top] = end
        st_depth[top] = depth + 1
        st_parent[top] = node
        top += 1
        st_start[top] = start
        st_end[top] = mid
        st_depth[top] = depth + 1
        st_parent[top] = -1
        top += 1

    return feature[:n_nodes].copy(), right[:n_nodes].copy(), param[:n_nodes].copy()


@njit(cache=True)
def predict(X, feature, right, param, tree_offsets):
    """Mean leaf value over trees for every row of ``X``."""
    n = X.shape[0]
    n_trees = tree_offsets.shape[0] - 1
    out = np.zeros(n, dtype=np.float64)
    for r in range(n):
        acc = 0.0
        for t in range(n_trees):
            node = tree_offsets[t]
            while feature[node] != LEAF:
                if X[r, feature[node]] < param[node]:
                    node = node + 1
                else:
                    node = tree_offsets[t] + right[node]
            acc += param[node]
        out[r] = acc / n_trees
    return out


@njit(cache=True)
def parse_preorder(is_leaf, n_trees):
    """Recover tree-local right-child indices and tree offsets from leaf flags.

    ``is_leaf`` is the concatenated preorder leaf mask of ``n_trees`` trees.
    Returns ``(right, offsets, ok)``; ``ok`` is False when the mask does not
    split into exactly ``n_trees`` complete binary trees.
    """
    n = is_leaf.shape[0]
    right = np.full(n, -1, dtype=np.int32)
    offsets = np.zeros(n_trees + 1, dtype=np.int64)
    pending = np.empty(n + 1, dtype=np.int64)
    top = 0
    tree = 0
    start = 0
    for i in range(n):
        if tree >= n_trees:
            return right, offsets, False
        if is_leaf[i]:
            if top > 0:
                top -= 1
                right[pending[top]] = i + 1 - start
            else:
                tree += 1
                offsets[tree] = i + 1
                start = i + 1
        else:
            pending[top] = i
            top += 1
    return right, offsets, tree == n_trees and top == 0
