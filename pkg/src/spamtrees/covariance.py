"""Non-separable multivariate cross-covariance and per-node conditional factors.

Variables are embedded in a latent domain; only their pairwise latent
distances ``delta_latent[i, j]`` enter the kernel

    C(h, D) = exp(-phi h / (1 + alpha D)^(beta/2)) / (1 + alpha D)^beta

so that ``C_ii(h) = s1_i^2 C(h, 0) + s2_i^2 exp(-phi_i h)`` and
``C_ij(h) = s1_i s1_j C(h, delta_ij)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotri
from scipy.spatial.distance import cdist

from .treegraph import TreedDag

JITTER_START = 1e-9
JITTER_MAX = 1e-5


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky failed even after jitter escalation."""

    def __init__(self, msg, node=None):
        super().__init__(msg)
        self.node = node


# ---------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------

@dataclass
class ThetaParams:
    sigma1: np.ndarray
    sigma2: np.ndarray
    phi_margin: np.ndarray
    delta_latent: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0
    phi: float = 1.0

    def __post_init__(self):
        self.sigma1 = np.atleast_1d(np.asarray(self.sigma1, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.phi_margin = np.atleast_1d(np.asarray(self.phi_margin, dtype=float))
        self.delta_latent = np.atleast_2d(np.asarray(self.delta_latent, dtype=float))
        self.alpha, self.beta, self.phi = float(self.alpha), float(self.beta), float(self.phi)

    @property
    def q(self):
        return len(self.sigma1)

    @property
    def n_params(self):
        q = self.q
        return 3 * q + q * (q - 1) // 2 + 3

    def validate(self):
        q = self.q
        if not (len(self.sigma2) == len(self.phi_margin) == q
                and self.delta_latent.shape == (q, q)):
            raise ValueError("inconsistent parameter dimensions")
        if np.any(self.sigma2 < 0) or np.any(self.phi_margin <= 0):
            raise ValueError("sigma2 must be >= 0 and phi_margin > 0")
        d = self.delta_latent
        if not np.allclose(d, d.T) or np.any(np.diag(d) != 0) or np.any(d < 0):
            raise ValueError("delta_latent must be symmetric, >= 0, zero diagonal")
        if min(self.alpha, self.beta, self.phi) <= 0:
            raise ValueError("alpha, beta, phi must be positive")
        return self

    # unconstrained parametrization: identity for sigma1, log elsewhere
    def to_vector(self) -> np.ndarray:
        iu = np.triu_indices(self.q, 1)
        with np.errstate(divide="ignore"):
            return np.concatenate([
                self.sigma1, np.log(self.sigma2), np.log(self.phi_margin),
                np.log(self.delta_latent[iu]),
                np.log([self.alpha, self.beta, self.phi]),
            ])

    @classmethod
    def from_vector(cls, q, x):
        x = np.asarray(x, dtype=float)
        k = q * (q - 1) // 2
        d = np.zeros((q, q))
        iu = np.triu_indices(q, 1)
        d[iu] = np.exp(x[3 * q:3 * q + k])
        d = d + d.T
        a, b, p = np.exp(x[3 * q + k:])
        return cls(x[:q], np.exp(x[q:2 * q]), np.exp(x[2 * q:3 * q]), d, a, b, p)

    @staticmethod
    def names(q):
        out = [f"sigma1_{i}" for i in range(q)]
        out += [f"sigma2_{i}" for i in range(q)]
        out += [f"phi_{i}" for i in range(q)]
        out += [f"delta_{i}{j}" for i in range(q) for j in range(i + 1, q)]
        return out + ["alpha", "beta", "phi"]

    def copy(self):
        return ThetaParams(self.sigma1.copy(), self.sigma2.copy(), self.phi_margin.copy(),
                           self.delta_latent.copy(), self.alpha, self.beta, self.phi)


# ---------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------

def base_corr(h, D, alpha, beta, phi):
    s = 1.0 + alpha * np.asarray(D, dtype=float)
    return np.exp(-phi * np.asarray(h) / s ** (beta / 2)) / s ** beta


def cross_cov(theta: ThetaParams, loc_a, loc_b) -> float:
    """Covariance between two expanded-domain locations ``(coords, var)``."""
    (xa, i), (xb, j) = loc_a, loc_b
    h = float(np.linalg.norm(np.atleast_1d(xa) - np.atleast_1d(xb)))
    c = theta.sigma1[i] * theta.sigma1[j] * base_corr(
        h, theta.delta_latent[i, j], theta.alpha, theta.beta, theta.phi)
    if i == j:
        c += theta.sigma2[i] ** 2 * np.exp(-theta.phi_margin[i] * h)
    return float(c)


def _var_tables(theta):
    s = 1.0 + theta.alpha * theta.delta_latent
    amp = np.outer(theta.sigma1, theta.sigma1) / s ** theta.beta
    rate = theta.phi / s ** (theta.beta / 2)
    return amp, rate


def cov_matrix(theta: ThetaParams, ca, va, cb=None, vb=None, tables=None) -> np.ndarray:
    ca = np.asarray(ca, dtype=float)
    if ca.ndim == 1:
        ca = ca[:, None]
    va = np.asarray(va, dtype=int)
    sym = cb is None
    if sym:
        cb, vb = ca, va
    else:
        cb = np.asarray(cb, dtype=float)
        if cb.ndim == 1:
            cb = cb[:, None]
        vb = np.asarray(vb, dtype=int)
    amp, rate = tables if tables is not None else _var_tables(theta)
    h = cdist(ca, cb)
    ia, ib = va[:, None], vb[None, :]
    K = amp[ia, ib] * np.exp(-h * rate[ia, ib])
    if np.any(theta.sigma2):
        same = ia == ib
        s2 = theta.sigma2 ** 2
        K += np.where(same, s2[va][:, None] * np.exp(-h * theta.phi_margin[va][:, None]), 0.0)
    return K


# ---------------------------------------------------------------------
# factorization helpers
# ---------------------------------------------------------------------

def _potrf(A):
    """Lower Cholesky factor via LAPACK, or None if A is not PD."""
    c, info = dpotrf(A, lower=1, clean=1, overwrite_a=0)
    return c if info == 0 else None


def chol_jitter(A, node=None):
    """Lower Cholesky factor; jitter is added only if the plain factor fails."""
    if A.shape[0] == 0:
        return A.copy()
    L = _potrf(A)
    if L is not None:
        return L
    scale = float(np.mean(np.diag(A)))
    eps = JITTER_START
    while eps <= JITTER_MAX * (1 + 1e-12):
        L = _potrf(A + eps * scale * np.eye(len(A)))
        if L is not None:
            return L
        eps *= 10
    raise NotPositiveDefinite(f"matrix not positive definite at node {node}", node)


def inv_from_chol(L):
    if L.shape[0] == 0:
        return L.copy()
    inv, info = dpotri(L, lower=1)
    if info != 0:
        raise NotPositiveDefinite("singular Cholesky factor")
    out = inv + inv.T  # dpotri fills the lower triangle only
    out.flat[::len(out) + 1] *= 0.5
    return out


def spd_inv(A, node=None):
    L = chol_jitter(A, node)
    return inv_from_chol(L), 2.0 * np.log(np.diag(L)).sum()


def nested_inverse(Cinv_pa, H, Rinv):
    """Inverse of cov([pa(i), i]) from inv(C_pa), H_i and inv(R_i)."""
    HtRi = H.T @ Rinv
    J = Cinv_pa.shape[0]
    n = Rinv.shape[0]
    out = np.empty((J + n, J + n))
    out[:J, :J] = Cinv_pa + HtRi @ H
    out[:J, J:] = -HtRi
    out[J:, :J] = -HtRi.T
    out[J:, J:] = Rinv
    return out


@dataclass
class NodeFactors:
    H: np.ndarray  # n_j x J_j
    R: np.ndarray  # n_j x n_j (branch) or n_j vector (leaf)
    R_chol: np.ndarray | None
    Rinv: np.ndarray
    RinvH: np.ndarray
    logdet_R: float
    C_parent_inv: np.ndarray | None
    closure_inv: np.ndarray | None = None  # inv cov([pa(j), j])
    F: np.ndarray | None = None  # sum over children of H^T R^-1 H restricted to j


@dataclass
class FactorSet:
    theta: ThetaParams
    nodes: list
    parent_cache: dict = field(default_factory=dict)

    def __getitem__(self, k):
        return self.nodes[k]

    def __len__(self):
        return len(self.nodes)

    @property
    def logdet_R(self):
        return float(sum(f.logdet_R for f in self.nodes))


class _Block:
    """Distances and variable-pair codes between two location lists.

    The geometry of a fitted dag never changes, so kernel evaluation under a
    new theta reduces to table lookups and exponentials.
    """

    __slots__ = ("h", "code", "same", "same_h", "same_var")

    def __init__(self, coords, var, q, rows, cols):
        self.h = cdist(coords[rows], coords[cols])
        va, vb = var[rows], var[cols]
        self.code = va[:, None] * q + vb[None, :]
        same = np.flatnonzero((va[:, None] == vb[None, :]).ravel())
        self.same = same
        self.same_h = self.h.ravel()[same]
        self.same_var = np.broadcast_to(va[:, None], self.h.shape).ravel()[same]

    def cov(self, tables):
        amp, rate, s2sq, phim = tables
        K = amp.ravel()[self.code] * np.exp(-self.h * rate.ravel()[self.code])
        if s2sq is not None and len(self.same):
            v = self.same_var
            K.ravel()[self.same] += s2sq[v] * np.exp(-self.same_h * phim[v])
        return K


def factor_tables(theta):
    amp, rate = _var_tables(theta)
    s2sq = theta.sigma2 ** 2 if np.any(theta.sigma2) else None
    return amp, rate, s2sq, theta.phi_margin


class Layout:
    """Index bookkeeping shared by factor, precision and sampler code."""

    def __init__(self, dag: TreedDag):
        self.dag = dag
        self.pa_locs = [dag.parent_locations(k) for k in range(len(dag))]
        # column slice of each parent inside H_k
        self.pa_cols = []
        for k in range(len(dag)):
            cols, off = {}, 0
            for p in dag.parents[k]:
                cols[p] = slice(off, off + dag.sizes[p])
                off += dag.sizes[p]
            self.pa_cols.append(cols)
        self.closure_source = []
        for k in range(len(dag)):
            ps = dag.parents[k]
            src = -1
            if len(ps) > 1:
                last = ps[-1]
                if tuple(dag.parents[last]) + (last,) == tuple(ps):
                    src = last
            elif len(ps) == 1 and not dag.parents[ps[0]]:
                src = ps[0]  # a root's closure is just its own block
            self.closure_source.append(src)
        needs = set(s for s in self.closure_source if s >= 0)
        self.needs_closure = np.zeros(len(dag), dtype=bool)
        self.needs_closure[list(needs)] = True
        self.by_level = dag.levels()
        self._geom = {}

    def block(self, key, rows, cols):
        g = self._geom.get(key)
        if g is None:
            dag = self.dag
            g = self._geom[key] = _Block(dag.coords, dag.var, dag.q, rows, cols)
        return g


def node_factors(theta, dag, node, cache, layout=None, tables=None):
    """Conditional factors of one node given its parents.

    ``cache`` maps node positions to already computed factors (the nested
    inverse needs the closure of the last parent) and parent tuples to
    parent-set inverses.
    """
    k = dag.pos(node)
    layout = layout or Layout(dag)
    tables = tables if tables is not None else factor_tables(theta)
    mem = dag.members[k]
    ps = dag.parents[k]
    leaf = bool(dag.is_leaf[k])

    if ps:
        Cpi = _parent_inverse(dag, k, cache, layout, tables)
        pl = layout.pa_locs[k]
        Cjp = layout.block(("jp", k), mem, pl).cov(tables)
        H = Cjp @ Cpi
    else:
        Cpi = None
        H = np.zeros((len(mem), 0))
        Cjp = H

    if leaf:
        amp, _, s2sq, _ = tables
        diag = np.diag(amp) + (s2sq if s2sq is not None else 0.0)
        d = diag[dag.var[mem]]
        R = d - np.einsum("ij,ij->i", H, Cjp)
        if R.min() <= 0:
            bad = R <= 0
            scale = float(np.mean(d))
            eps = JITTER_START
            while np.any(R <= 0) and eps <= JITTER_MAX * (1 + 1e-12):
                R = np.where(bad, R + eps * scale, R)
                eps *= 10
            if np.any(R <= 0):
                raise NotPositiveDefinite(f"leaf variance not positive at node {dag.node_ids[k]}",
                                          dag.node_ids[k])
        Rinv = 1.0 / R
        return NodeFactors(H=H, R=R, R_chol=None, Rinv=Rinv, RinvH=H * Rinv[:, None],
                           logdet_R=float(np.log(R).sum()), C_parent_inv=Cpi)

    Cjj = layout.block(("jj", k), mem, mem).cov(tables)
    R = Cjj - H @ Cjp.T if ps else Cjj
    R = 0.5 * (R + R.T)
    L = chol_jitter(R, dag.node_ids[k])
    Rinv = inv_from_chol(L)
    f = NodeFactors(H=H, R=R, R_chol=L, Rinv=Rinv, RinvH=Rinv @ H,
                    logdet_R=2.0 * float(np.log(np.diag(L)).sum()), C_parent_inv=Cpi)
    if layout.needs_closure[k]:
        f.closure_inv = nested_inverse(Cpi, H, Rinv) if ps else Rinv
    return f


def _parent_inverse(dag, k, cache, layout, tables):
    src = layout.closure_source[k]
    if src >= 0:
        f = cache.get(src)
        if f is not None and f.closure_inv is not None:
            return f.closure_inv
    key = tuple(dag.parents[k])
    Cpi = cache.get(key)
    if Cpi is None:
        pl = layout.pa_locs[k]
        Cpi, _ = spd_inv(layout.block(("pp",) + key, pl, pl).cov(tables),
                         node=[dag.node_ids[p] for p in key])
        cache[key] = Cpi
    return Cpi


def compute_factors(theta: ThetaParams, dag: TreedDag, layout=None, threads=1) -> FactorSet:
    """All node factors, level by level (closures of level r feed level r+1)."""
    layout = layout or Layout(dag)
    tables = factor_tables(theta)
    cache = {}
    out = [None] * len(dag)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for level_nodes in layout.by_level:
            def one(k):
                return node_factors(theta, dag, k, cache, layout, tables)
            if pool is None:
                res = [one(k) for k in level_nodes]
            else:
                # shared parent-set inverses and geometry first, so workers only read
                for k in level_nodes:
                    if dag.parents[k]:
                        _parent_inverse(dag, k, cache, layout, tables)
                        layout.block(("jp", k), dag.members[k], layout.pa_locs[k])
                    if not dag.is_leaf[k]:
                        layout.block(("jj", k), dag.members[k], dag.members[k])
                res = list(pool.map(one, level_nodes))
            for k, f in zip(level_nodes, res):
                out[k] = f
                cache[k] = f
    finally:
        if pool is not None:
            pool.shutdown()
    _accumulate_child_terms(dag, out, layout)
    parent_cache = {k: v for k, v in cache.items() if isinstance(k, tuple)}
    return FactorSet(theta=theta, nodes=out, parent_cache=parent_cache)


def _accumulate_child_terms(dag, factors, layout):
    """F_i = sum over children c of H_{c,i}^T R_c^-1 H_{c,i}, summed in child order."""
    for i in range(len(dag)):
        n = dag.sizes[i]
        F = np.zeros((n, n))
        for ch in dag.children[i]:
            cols = layout.pa_cols[ch][i]
            f = factors[ch]
            F += f.H[:, cols].T @ f.RinvH[:, cols]
        factors[i].F = F


# ---------------------------------------------------------------------
# induced covariance
# ---------------------------------------------------------------------

def _location_path(dag, a):
    """Base-tree chain from a root down to location ``a``.

    Branch nodes appear as positions; a leaf location contributes a
    singleton pseudo-node ``("loc", a)`` since leaf locations are
    conditionally independent given the leaf's parents.
    """
    k = int(dag.node_of[a])
    tail = []
    if dag.is_leaf[k]:
        tail = [("loc", int(a))]
        k = dag.base_parent[k]
    chain = []
    while k >= 0:
        chain.append(k)
        k = dag.base_parent[k]
    return chain[::-1] + tail


class InducedCov:
    """Covariance of the SpamTree process between assigned locations.

    For two locations the concestor is the deepest node common to both base
    chains. Given the latent values on the shared chain G the two tails are
    independent, so ``Cov = A_a Cov(w_G) A_b^T`` where ``A`` regresses a
    location on ``w_G`` through the hops of its tail. When the parent sets
    overlap the tails start directly below shared parents; when they are
    disjoint each hop composes a factor ``C_{v,u} C_u^{-1}`` (depth one),
    which is the same recursion.
    """

    def __init__(self, theta, dag, factors=None, layout=None):
        self.theta, self.dag = theta, dag
        self.layout = layout or Layout(dag)
        self.factors = factors if factors is not None else compute_factors(theta, dag, self.layout)
        self._chain_cov = {}
        self._coef = {}
        self._paths = {}

    def path(self, a):
        p = self._paths.get(a)
        if p is None:
            p = self._paths[a] = _location_path(self.dag, a)
        return p

    def _members(self, node):
        if isinstance(node, tuple):
            return np.array([node[1]])
        return self.dag.members[node]

    def _cond(self, node):
        """(parent positions, H rows, R) for a path element."""
        dag = self.dag
        if isinstance(node, tuple):
            a = node[1]
            k = int(dag.node_of[a])
            row = int(np.searchsorted(dag.members[k], a))
            f = self.factors[k]
            return dag.parents[k], f.H[row:row + 1], np.array([[f.R[row]]])
        f = self.factors[node]
        return self.dag.parents[node], f.H, f.R

    def chain_cov(self, chain):
        chain = tuple(chain)
        C = self._chain_cov.get(chain)
        if C is not None:
            return C
        if len(chain) == 1:
            ps, H, R = self._cond(chain[0])
            assert not ps
            C = R.copy()
        else:
            prev = self.chain_cov(chain[:-1])
            offs = np.concatenate([[0], np.cumsum([len(self._members(u)) for u in chain[:-1]])])
            where = {u: np.arange(offs[i], offs[i + 1]) for i, u in enumerate(chain[:-1])}
            ps, H, R = self._cond(chain[-1])
            idx = np.concatenate([where[p] for p in ps])
            cross = H @ prev[idx]
            n0 = prev.shape[0]
            n1 = H.shape[0]
            C = np.empty((n0 + n1, n0 + n1))
            C[:n0, :n0] = prev
            C[n0:, :n0] = cross
            C[:n0, n0:] = cross.T
            C[n0:, n0:] = cross[:, idx] @ H.T + R
        self._chain_cov[chain] = C
        return C

    def coef(self, a, m):
        """Regression row of w_a on w over the first ``m`` path elements."""
        key = (a, m)
        out = self._coef.get(key)
        if out is not None:
            return out
        path = self.path(a)
        shared = path[:m]
        offs = np.concatenate([[0], np.cumsum([len(self._members(u)) for u in shared])])
        G = offs[-1]
        rows = {u: np.eye(G)[offs[i]:offs[i + 1]] for i, u in enumerate(shared)}
        for u in path[m:]:
            ps, H, _ = self._cond(u)
            A = np.zeros((H.shape[0], G))
            col = 0
            for p in ps:
                n = self.dag.sizes[p]
                A += H[:, col:col + n] @ rows[p]
                col += n
            rows[u] = A
        last = path[-1]
        mem = self._members(last)
        out = rows[last][int(np.searchsorted(mem, a))]
        self._coef[key] = out
        return out

    def __call__(self, a, b):
        pa_, pb = self.path(int(a)), self.path(int(b))
        m = 0
        while m < min(len(pa_), len(pb)) and pa_[m] == pb[m]:
            m += 1
        if m == 0:
            return 0.0
        C = self.chain_cov(pa_[:m])
        return float(self.coef(int(a), m) @ C @ self.coef(int(b), m))

    def matrix(self, locs=None):
        locs = np.arange(self.dag.n_locations) if locs is None else np.asarray(locs)
        n = len(locs)
        out = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                out[i, j] = out[j, i] = self(locs[i], locs[j])
        return out


def induced_cov(theta, dag, loc_a, loc_b, factors=None):
    """SpamTree covariance between two assigned location ordinals."""
    return InducedCov(theta, dag, factors)(loc_a, loc_b)
