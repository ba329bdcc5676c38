"""Pure numpy implementations of the BART inner-loop kernels.

Same signatures and semantics as the compiled ``_kernels`` module. Trees are
flat node arrays: ``var[i] < 0`` marks a leaf; an observation goes left at an
internal node when its cutpoint code is ``<= cut[i]``.
"""
import numpy as np

BACKEND = "python"

# elements per chunk in predict_forests
_CHUNK = 1 << 21


def grow_stats(leaf_of, X, r, node, var, cut):
    mask = leaf_of == node
    go_left = X[mask, var] <= cut
    rr = r[mask]
    nl = int(np.count_nonzero(go_left))
    sl = float(rr[go_left].sum())
    return nl, sl, rr.shape[0] - nl, float(rr.sum()) - sl


def apply_grow(leaf_of, X, node, var, cut, left_id, right_id):
    idx = np.flatnonzero(leaf_of == node)
    leaf_of[idx] = np.where(X[idx, var] <= cut, left_id, right_id)


def relabel(leaf_of, a, b, target):
    leaf_of[(leaf_of == a) | (leaf_of == b)] = target


def reroute(leaf_of, X, var, cut, left, right, in_sub, start, out):
    out[:] = leaf_of
    idx = np.flatnonzero(in_sub[leaf_of].astype(bool))
    nodes = np.full(idx.shape[0], start, dtype=leaf_of.dtype)
    while idx.size:
        v = var[nodes]
        internal = v >= 0
        if not internal.any():
            break
        ii, nn, vv = idx[internal], nodes[internal], v[internal]
        go_left = X[ii, vv] <= cut[nn]
        nodes[internal] = np.where(go_left, left[nn], right[nn])
    out[idx] = nodes


def node_stats(leaf_of, r, n_nodes):
    counts = np.bincount(leaf_of, minlength=n_nodes).astype(np.int64)
    sums = np.bincount(leaf_of, weights=r, minlength=n_nodes)
    return counts[:n_nodes], sums[:n_nodes]


def add_leaf_values(r, leaf_of, values, sign):
    r += sign * values[leaf_of]


def predict_forests(var, cut, left, right, value, roots, X):
    D, G = roots.shape
    n = X.shape[0]
    out = np.zeros((D, n))
    if n == 0 or D == 0:
        return out
    step = max(1, _CHUNK // max(1, G * n))
    rows = np.arange(n)[None, :]
    for d0 in range(0, D, step):
        r = roots[d0:d0 + step].reshape(-1)
        nodes = np.repeat(r[:, None], n, axis=1)
        while True:
            v = var[nodes]
            internal = v >= 0
            if not internal.any():
                break
            vc = np.where(internal, v, 0)
            go_left = X[np.broadcast_to(rows, nodes.shape), vc] <= cut[nodes]
            nodes = np.where(internal, np.where(go_left, left[nodes], right[nodes]), nodes)
        out[d0:d0 + step] = value[nodes].reshape(-1, G, n).sum(axis=1)
    return out


def draw_leaves(leaf_of, r, value, leaves, sigma2, tau2, z):
    """Redraw leaf values from their normal full conditionals, then subtract
    the tree's new fit from ``r`` in place. Returns False if a leaf is empty."""
    n_nodes = int(leaves.max()) + 1
    counts, sums = node_stats(leaf_of, r, n_nodes)
    n_l = counts[leaves]
    if np.any(n_l == 0):
        return False
    prec = n_l / sigma2 + 1.0 / tau2
    value[leaves] = sums[leaves] / sigma2 / prec + z / np.sqrt(prec)
    r -= value[leaf_of]
    return True
