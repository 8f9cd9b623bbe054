"""Histogram tree kernels shared by the boosted and forest learners.

A tree is grown on binned features to minimise a second-order objective:
each node with gradient sum ``G`` and hessian sum ``H`` takes the value
``-G / (H + lam)`` and a split is worth
``G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)``.  Squared-error
regression uses ``g = -y, h = 1``; boosting passes loss derivatives; the
causal forest passes ``g = -w~ y~, h = w~^2`` (residual-on-residual effect).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

MAX_BINS = 32


# --------------------------------------------------------------------------
# Binning


def fit_bin_edges(X: np.ndarray, max_bins: int = MAX_BINS) -> list[np.ndarray]:
    """Per-feature split thresholds; bin ``b`` holds ``edges[b-1] < x <= edges[b]``."""
    edges = []
    for j in range(X.shape[1]):
        col = X[:, j]
        uniq = np.unique(col)
        if uniq.size <= max_bins:
            e = uniq[:-1]
        else:
            q = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1], method="lower")
            e = np.unique(q)
            e = e[e < uniq[-1]]
        edges.append(np.ascontiguousarray(e, dtype=np.float64))
    return edges


def bin_features(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.uint8)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


# --------------------------------------------------------------------------
# Growing


@njit(cache=True)
def _histogram(Xb, g, h, idx, start, end, chosen, m, max_b, out):
    """Interleaved (gradient, hessian, count) histogram of rows idx[start:end]."""
    for jf in range(m):
        f = chosen[jf]
        base = 3 * f * max_b
        for k in range(base, base + 3 * max_b):
            out[k] = 0.0
    for i in range(start, end):
        r = idx[i]
        gr = g[r]
        hr = h[r]
        for jf in range(m):
            f = chosen[jf]
            k = 3 * (f * max_b + Xb[r, f])
            out[k] += gr
            out[k + 1] += hr
            out[k + 2] += 1.0


@njit(cache=True)
def _grow(Xb, n_bins, g, h, rows, max_depth, min_leaf, min_hess, lam, min_gain, mtry, seed):
    n_rows = rows.size
    d = Xb.shape[1]
    cap = 2 * (n_rows // max(min_leaf, 1)) + 3
    if max_depth < 30:
        cap = min(cap, 2 ** (max_depth + 1) + 1)
    feature = np.full(cap, -1, dtype=np.int32)
    thr_bin = np.full(cap, -1, dtype=np.int32)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)
    gsum = np.zeros(cap)
    hsum = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)

    idx = rows.copy()
    buf = np.empty(n_rows, dtype=rows.dtype)
    max_b = 0
    for j in range(d):
        if n_bins[j] > max_b:
            max_b = n_bins[j]
    width = 3 * d * max_b
    hist = np.zeros(width)
    # with every feature a candidate at every node, a child's histogram is
    # the parent's minus its sibling's; keep one per pending node
    subtract = mtry >= d and cap <= 4097
    store = np.zeros((cap if subtract else 1, width))
    has = np.zeros(cap, dtype=np.bool_)
    feats = np.arange(d)
    chosen = feats
    m = d if mtry >= d else mtry
    np.random.seed(seed)

    st_node = np.zeros(cap, dtype=np.int64)
    st_start = np.zeros(cap, dtype=np.int64)
    st_end = np.zeros(cap, dtype=np.int64)
    st_depth = np.zeros(cap, dtype=np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n_rows
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        G = 0.0
        H = 0.0
        for i in range(start, end):
            r = idx[i]
            G += g[r]
            H += h[r]
        gsum[node] = G
        hsum[node] = H
        count[node] = end - start
        value[node] = -G / (H + lam) if H + lam > 0 else 0.0
        if depth >= max_depth or end - start < 2 * min_leaf or n_nodes + 2 > cap:
            continue

        if mtry < d:
            chosen = np.random.permutation(d)[:mtry]
        if subtract and has[node]:
            cur = store[node]
        else:
            _histogram(Xb, g, h, idx, start, end, chosen, m, max_b, hist)
            cur = hist

        parent = G * G / (H + lam) if H + lam > 0 else 0.0
        best_gain = min_gain
        best_f = -1
        best_b = -1
        n = end - start
        for jf in range(m):
            f = chosen[jf]
            base = 3 * f * max_b
            GL = 0.0
            HL = 0.0
            CL = 0
            for b in range(n_bins[f] - 1):
                k = base + 3 * b
                GL += cur[k]
                HL += cur[k + 1]
                CL += int(cur[k + 2])
                CR = n - CL
                if CL < min_leaf:
                    continue
                if CR < min_leaf:
                    break
                HR = H - HL
                if HL < min_hess or HR < min_hess:
                    continue
                GR = G - GL
                gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
        if best_f < 0:
            continue

        # stable partition keeps row order canonical within each child
        nl = 0
        nr = 0
        for i in range(start, end):
            r = idx[i]
            if Xb[r, best_f] <= best_b:
                idx[start + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for k in range(nr):
            idx[start + nl + k] = buf[k]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        thr_bin[node] = best_b
        left[node] = lc
        right[node] = rc
        if subtract and depth + 1 < max_depth and (nl >= 2 * min_leaf or nr >= 2 * min_leaf):
            if nl <= nr:
                small, big, s0, s1 = lc, rc, start, start + nl
            else:
                small, big, s0, s1 = rc, lc, start + nl, end
            _histogram(Xb, g, h, idx, s0, s1, chosen, m, max_b, store[small])
            for k in range(width):
                store[big, k] = cur[k] - store[small, k]
            has[small] = True
            has[big] = True
        st_node[top] = rc
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes], thr_bin[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gsum[:n_nodes], hsum[:n_nodes], count[:n_nodes])


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    # bin index thresholds from growth; only valid for the training binning
    threshold_bin: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
        )

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _apply(np.ascontiguousarray(X, dtype=np.float64), self.feature,
                      self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def predict_binned(self, Xb: np.ndarray) -> np.ndarray:
        """Prediction on the binned matrix the tree was grown on."""
        return self.value[_apply(Xb, self.feature, self.threshold_bin, self.left, self.right)]


def grow_tree(Xb, edges, g, h, rows=None, *, max_depth=3, min_leaf=20, min_hess=0.0,
              lam=0.0, min_gain=1e-12, mtry=None, seed=0):
    """Grow one tree; returns ``(Tree, node_gradient_sums, node_hessian_sums, node_counts)``."""
    n, d = Xb.shape
    rows = np.arange(n, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    n_bins = np.array([e.size + 1 for e in edges], dtype=np.int64)
    mtry = d if mtry is None else int(min(max(mtry, 1), d))
    f, b, l, r, v, G, H, C = _grow(Xb, n_bins, np.ascontiguousarray(g, dtype=np.float64),
                                   np.ascontiguousarray(h, dtype=np.float64), rows,
                                   int(max_depth), int(min_leaf), float(min_hess), float(lam),
                                   float(min_gain), mtry, int(seed) % (2 ** 32))
    thr = np.full(f.size, np.nan)
    split = f >= 0
    for k in np.flatnonzero(split):
        thr[k] = edges[f[k]][b[k]]
    return Tree(f, thr, l, r, v, b), G, H, C


# --------------------------------------------------------------------------
# Prediction


@njit(cache=True)
def _apply(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True)
def _sum_trees(X, feature, threshold, left, right, value, offsets):
    n = X.shape[0]
    out = np.zeros(n)
    for t in range(offsets.size - 1):
        base = offsets[t]
        for i in range(n):
            node = 0
            while left[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i] += value[base + node]
    return out


class TreeStack:
    """Flat concatenation of trees for fast summed prediction."""

    def __init__(self, trees: list[Tree]):
        self.trees = trees
        sizes = [t.n_nodes for t in trees]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if trees:
            self.feature = np.concatenate([t.feature for t in trees]).astype(np.int32)
            self.threshold = np.concatenate([t.threshold for t in trees])
            self.left = np.concatenate([t.left for t in trees]).astype(np.int32)
            self.right = np.concatenate([t.right for t in trees]).astype(np.int32)
            self.value = np.concatenate([t.value for t in trees])
        else:
            self.feature = self.left = self.right = np.zeros(0, dtype=np.int32)
            self.threshold = self.value = np.zeros(0)

    def __len__(self) -> int:
        return len(self.trees)

    def sum(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if not self.trees:
            return np.zeros(X.shape[0])
        return _sum_trees(X, self.feature, self.threshold, self.left, self.right,
                          self.value, self.offsets)


def canonical_order(X: np.ndarray, *cols: np.ndarray) -> np.ndarray:
    """Row permutation that depends only on row contents, not input order."""
    keys = [np.asarray(c) for c in reversed(cols)] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys) if keys else np.arange(X.shape[0])
