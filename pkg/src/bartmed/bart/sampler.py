"""Bayesian backfitting MCMC for the sum-of-trees mediator model.

Per sweep each tree is updated in turn: form the partial residual, propose
one structure move (grow / prune / change / swap) accepted by
Metropolis-Hastings on the leaf-marginalised likelihood, redraw the leaf
values from their normal full conditionals, and subtract the new fit. The
residual variance is then redrawn from its scaled-inverse-chi-square full
conditional. Everything runs on the response standardised to [-0.5, 0.5].

Tree prior: a node at depth d is internal with probability
``alpha * (1 + d) ** -beta``; its rule picks a covariate uniformly among
those with cutpoints and a cutpoint uniformly from that covariate's grid.
Trees with an empty leaf get prior mass zero, so proposals producing one are
rejected.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from ..errors import NumericalError
from ._backend import get_kernels

log = logging.getLogger(__name__)

GROW, PRUNE, CHANGE, SWAP = range(4)


def split_probability(depth, alpha, beta):
    """Prior probability that a node at ``depth`` is internal."""
    return alpha * (1.0 + depth) ** (-beta)


def make_cutpoints(column, n_cutpoints: int) -> np.ndarray:
    """Cutpoint grid: midpoints between distinct values when there are few,
    otherwise ``n_cutpoints`` interior empirical quantiles."""
    u = np.unique(np.asarray(column, dtype=float))
    if u.size < 2:
        return np.empty(0)
    if u.size <= n_cutpoints + 1:
        return 0.5 * (u[:-1] + u[1:])
    q = np.quantile(column, np.arange(1, n_cutpoints + 1) / (n_cutpoints + 1))
    q = np.unique(q)
    return q[(q >= u[0]) & (q < u[-1])]


def encode(Z, cutpoints) -> np.ndarray:
    """Map raw covariates to cutpoint codes: ``code <= j`` iff ``z <= cut_j``."""
    Z = np.asarray(Z, dtype=float)
    codes = np.empty(Z.shape, dtype=np.int32)
    for j, cuts in enumerate(cutpoints):
        codes[:, j] = np.searchsorted(cuts, Z[:, j], side="left")
    return codes


class Tree:
    """Mutable binary tree over flat node arrays with a free list."""

    __slots__ = ("var", "cut", "left", "right", "parent", "depth", "value", "size", "leaves", "free")

    def __init__(self, capacity: int = 16):
        self.var = np.full(capacity, -1, dtype=np.int32)
        self.cut = np.zeros(capacity, dtype=np.int32)
        self.left = np.full(capacity, -1, dtype=np.int32)
        self.right = np.full(capacity, -1, dtype=np.int32)
        self.parent = np.full(capacity, -1, dtype=np.int32)
        self.depth = np.zeros(capacity, dtype=np.int32)
        self.value = np.zeros(capacity)
        self.size = 1
        self.leaves = [0]
        self.free = []

    def _alloc(self) -> int:
        if self.free:
            return self.free.pop()
        if self.size == self.var.shape[0]:
            cap = 2 * self.size
            for name, fill in (("var", -1), ("cut", 0), ("left", -1), ("right", -1),
                               ("parent", -1), ("depth", 0), ("value", 0)):
                old = getattr(self, name)
                new = np.full(cap, fill, dtype=old.dtype)
                new[:self.size] = old[:self.size]
                setattr(self, name, new)
        i = self.size
        self.size += 1
        return i

    def grow(self, node, var, cut):
        lo, hi = self._alloc(), self._alloc()
        d = self.depth[node] + 1
        for c in (lo, hi):
            self.var[c] = -1
            self.parent[c] = node
            self.depth[c] = d
            self.value[c] = 0.0
        self.var[node], self.cut[node] = var, cut
        self.left[node], self.right[node] = lo, hi
        self.leaves.remove(node)
        self.leaves += [lo, hi]
        return lo, hi

    def prune(self, node):
        lo, hi = int(self.left[node]), int(self.right[node])
        self.var[node] = -1
        self.left[node] = self.right[node] = -1
        self.leaves.remove(lo)
        self.leaves.remove(hi)
        self.leaves.append(node)
        for c in (lo, hi):
            self.parent[c] = -1
            self.value[c] = 0.0
        self.free += [hi, lo]

    def is_leaf(self, node) -> bool:
        return self.var[node] < 0

    def internal_nodes(self) -> list:
        return [int(i) for i in np.flatnonzero(self.var[:self.size] >= 0)]

    def nog_nodes(self) -> list:
        """Internal nodes whose two children are both leaves."""
        var, left, right = self.var, self.left, self.right
        return [i for i in self.internal_nodes() if var[left[i]] < 0 and var[right[i]] < 0]

    def subtree_leaves(self, node) -> list:
        out, stack = [], [int(node)]
        while stack:
            i = stack.pop()
            if self.var[i] < 0:
                out.append(i)
            else:
                stack += [int(self.left[i]), int(self.right[i])]
        return out

    def n_leaves(self) -> int:
        return len(self.leaves)


class BartSampler:
    """One MCMC chain. ``y`` is already standardised; ``codes`` are cutpoint codes.

    Parameters
    ----------
    codes
        ``n x p`` int32 matrix from :func:`encode`.
    n_cuts
        Number of cutpoints per covariate.
    y
        Standardised response.
    sigma2
        Initial residual variance (standardised units).
    lam, nu
        Scaled-inverse-chi-square prior on the residual variance.
    """

    def __init__(self, codes, n_cuts, y, *, n_trees, alpha, beta, tau, nu, lam, sigma2,
                 move_probs, rng, kernels=None):
        self.k = get_kernels(kernels)
        self.X = np.ascontiguousarray(codes, dtype=np.int32)
        self.n, self.p = self.X.shape
        self.n_cuts = [int(c) for c in n_cuts]
        self.eligible = [j for j, c in enumerate(self.n_cuts) if c > 0]
        self.y = np.ascontiguousarray(y, dtype=float)
        self.G = int(n_trees)
        self.alpha, self.beta = float(alpha), float(beta)
        self.tau2 = float(tau) ** 2
        self.nu, self.lam = float(nu), float(lam)
        self.sigma2 = float(sigma2)
        probs = np.asarray(move_probs, dtype=float)
        self.move_cdf = [float(v) for v in np.cumsum(probs / probs.sum())]
        self.log_p = [math.log(v) if v > 0 else -math.inf for v in probs / probs.sum()]
        self.rng = rng
        self.trees = [Tree() for _ in range(self.G)]
        self.leaf_of = np.zeros((self.G, self.n), dtype=np.int32)
        self.r = self.y.copy()
        self._buf = np.empty(self.n, dtype=np.int32)
        self.sweeps = 0
        self.accepted = np.zeros(4, dtype=np.int64)
        self.proposed = np.zeros(4, dtype=np.int64)

    # -- likelihood -------------------------------------------------------

    def _leaf_ll(self, n, s):
        """Leaf-marginal log-likelihood up to terms common to all trees."""
        s2, t2 = self.sigma2, self.tau2
        return -0.5 * math.log1p(n * t2 / s2) + t2 * s * s / (2.0 * s2 * (s2 + n * t2))

    def _psplit(self, d):
        return self.alpha * (1.0 + d) ** (-self.beta)

    # -- moves ------------------------------------------------------------

    def _draw_rule(self, u1, u2):
        v = self.eligible[int(u1 * len(self.eligible))]
        return v, int(u2 * self.n_cuts[v])

    def _grow(self, tree, lo, R, u):
        leaves = tree.leaves
        node = leaves[int(u[1] * len(leaves))]
        v, c = self._draw_rule(u[2], u[3])
        nl, sl, nr, sr = self.k.grow_stats(lo, self.X, R, node, v, c)
        if nl == 0 or nr == 0:
            return False
        d = int(tree.depth[node])
        ps, psc = self._psplit(d), self._psplit(d + 1)
        par = int(tree.parent[node])
        n_nog = len(tree.nog_nodes())
        if par >= 0:
            sib = tree.right[par] if tree.left[par] == node else tree.left[par]
            if tree.var[sib] < 0:
                n_nog -= 1
        n_nog += 1
        log_ratio = (self._leaf_ll(nl, sl) + self._leaf_ll(nr, sr) - self._leaf_ll(nl + nr, sl + sr)
                     + math.log(ps) + 2.0 * math.log1p(-psc) - math.log1p(-ps)
                     + self.log_p[PRUNE] - math.log(n_nog) - self.log_p[GROW] + math.log(len(leaves)))
        if math.log(u[4]) < log_ratio:
            a, b = tree.grow(node, v, c)
            self.k.apply_grow(lo, self.X, node, v, c, a, b)
            return True
        return False

    def _prune(self, tree, lo, R, u, counts, sums):
        nog = tree.nog_nodes()
        if not nog:
            return False
        node = nog[int(u[1] * len(nog))]
        a, b = int(tree.left[node]), int(tree.right[node])
        na, sa, nb, sb = counts[a], sums[a], counts[b], sums[b]
        d = int(tree.depth[node])
        ps, psc = self._psplit(d), self._psplit(d + 1)
        n_leaves_after = len(tree.leaves) - 1
        log_ratio = (self._leaf_ll(na + nb, sa + sb) - self._leaf_ll(na, sa) - self._leaf_ll(nb, sb)
                     - math.log(ps) - 2.0 * math.log1p(-psc) + math.log1p(-ps)
                     + self.log_p[GROW] - math.log(n_leaves_after) - self.log_p[PRUNE] + math.log(len(nog)))
        if math.log(u[4]) < log_ratio:
            tree.prune(node)
            self.k.relabel(lo, a, b, node)
            return True
        return False

    def _reroute_ratio(self, tree, lo, R, top, counts, sums):
        """Log-likelihood ratio after the rules under ``top`` changed, or None if a leaf empties."""
        leaves = tree.subtree_leaves(top)
        in_sub = np.zeros(tree.size, dtype=np.uint8)
        in_sub[leaves] = 1
        self.k.reroute(lo, self.X, tree.var, tree.cut, tree.left, tree.right, in_sub, top, self._buf)
        nc, ns = self.k.node_stats(self._buf, R, tree.size)
        if any(nc[i] == 0 for i in leaves):
            return None
        return sum(self._leaf_ll(nc[i], ns[i]) - self._leaf_ll(counts[i], sums[i]) for i in leaves)

    def _change(self, tree, lo, R, u, counts, sums):
        internal = tree.internal_nodes()
        if not internal:
            return False
        node = internal[int(u[1] * len(internal))]
        old = int(tree.var[node]), int(tree.cut[node])
        tree.var[node], tree.cut[node] = self._draw_rule(u[2], u[3])
        ratio = self._reroute_ratio(tree, lo, R, node, counts, sums)
        if ratio is not None and math.log(u[4]) < ratio:
            lo[:] = self._buf
            return True
        tree.var[node], tree.cut[node] = old
        return False

    def _swap(self, tree, lo, R, u, counts, sums):
        pairs = []
        for i in tree.internal_nodes():
            for c in (int(tree.left[i]), int(tree.right[i])):
                if tree.var[c] >= 0:
                    pairs.append((i, c))
        if not pairs:
            return False
        par, ch = pairs[int(u[1] * len(pairs))]
        var, cut = tree.var, tree.cut
        var[par], var[ch] = var[ch], var[par]
        cut[par], cut[ch] = cut[ch], cut[par]
        ratio = self._reroute_ratio(tree, lo, R, par, counts, sums)
        if ratio is not None and math.log(u[4]) < ratio:
            lo[:] = self._buf
            return True
        var[par], var[ch] = var[ch], var[par]
        cut[par], cut[ch] = cut[ch], cut[par]
        return False

    # -- sweep ------------------------------------------------------------

    def update_tree(self, g, u):
        tree, lo, R = self.trees[g], self.leaf_of[g], self.r
        k = self.k
        k.add_leaf_values(R, lo, tree.value, 1.0)
        u0, cdf = u[0], self.move_cdf
        move = GROW if u0 < cdf[0] else PRUNE if u0 < cdf[1] else CHANGE if u0 < cdf[2] else SWAP
        self.proposed[move] += 1
        if move == GROW:
            ok = self._grow(tree, lo, R, u)
        else:
            counts, sums = k.node_stats(lo, R, tree.size)
            if move == PRUNE:
                ok = self._prune(tree, lo, R, u, counts, sums)
            elif move == CHANGE:
                ok = self._change(tree, lo, R, u, counts, sums)
            else:
                ok = self._swap(tree, lo, R, u, counts, sums)
        if ok:
            self.accepted[move] += 1
        leaves = np.array(tree.leaves, dtype=np.int32)
        z = self.rng.standard_normal(leaves.size)
        filled = k.draw_leaves(lo, R, tree.value, leaves, self.sigma2, self.tau2, z)
        assert filled, "empty leaf after tree update"

    def draw_sigma2(self):
        ssr = float(self.r @ self.r)
        self.sigma2 = (self.nu * self.lam + ssr) / self.rng.chisquare(self.nu + self.n)

    def sweep(self, update_sigma: bool = True):
        u = self.rng.random((self.G, 5))
        u[:, 4] = np.where(u[:, 4] > 0, u[:, 4], np.finfo(float).tiny)
        for g in range(self.G):
            self.update_tree(g, u[g])
        if not np.all(np.isfinite(self.r)):
            raise NumericalError(f"non-finite residual at sweep {self.sweeps}", sweep=self.sweeps)
        if update_sigma:
            self.draw_sigma2()
        self.sweeps += 1

    def snapshot(self):
        """Copy of the current forest as (var, cut, left, right, value) lists per tree."""
        out = []
        for t in self.trees:
            s = t.size
            out.append((t.var[:s].copy(), t.cut[:s].copy(), t.left[:s].copy(),
                        t.right[:s].copy(), t.value[:s].copy()))
        return out

    def fitted(self) -> np.ndarray:
        return self.y - self.r
