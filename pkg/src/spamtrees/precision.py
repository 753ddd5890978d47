"""Block-sparse precision of the SpamTree prior and graph-native block LDL.

Blocks are keyed by node positions ``(i, j)``; only ``i >= j`` is stored for
symmetric matrices and ``block(j, i)`` is served as a transpose. Leaf
diagonal blocks are diagonal and kept as vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .covariance import FactorSet, Layout, NotPositiveDefinite
from .treegraph import TreedDag


@dataclass
class BlockSparseMatrix:
    dag: TreedDag
    blocks: dict = field(default_factory=dict)

    def block(self, i, j):
        if i >= j:
            return self.blocks.get((i, j))
        b = self.blocks.get((j, i))
        return None if b is None else b.T

    def add(self, i, j, B):
        if i < j:
            i, j, B = j, i, B.T
        cur = self.blocks.get((i, j))
        if cur is None:
            self.blocks[(i, j)] = B.copy()
        else:
            cur += B

    def copy(self):
        return BlockSparseMatrix(self.dag, {k: v.copy() for k, v in self.blocks.items()})

    def add_diagonal(self, diag):
        """Add a diagonal (given in location-ordinal order) to the diagonal blocks."""
        out = self.copy()
        for k in range(len(self.dag)):
            d = np.asarray(diag)[self.dag.members[k]]
            B = out.blocks[(k, k)]
            if B.ndim == 1:
                B += d
            else:
                B[np.diag_indices_from(B)] += d
        return out

    def to_dense(self):
        """Dense matrix in location-ordinal order."""
        dag = self.dag
        n = dag.n_locations
        out = np.zeros((n, n))
        for (i, j), B in self.blocks.items():
            ri, rj = dag.members[i], dag.members[j]
            if B.ndim == 1:
                out[ri, ri] = B
            else:
                out[np.ix_(ri, rj)] = B
                if i != j:
                    out[np.ix_(rj, ri)] = B.T
        return out

    def stored_scalars(self):
        """Structural count: off-diagonal blocks count twice (both triangles)."""
        return int(sum(B.size * (1 if i == j else 2) for (i, j), B in self.blocks.items()))


def assemble_precision(factors: FactorSet, dag: TreedDag, layout=None) -> BlockSparseMatrix:
    """Sum of (I - H)^T R^-1 (I - H) contributions node by node."""
    layout = layout or Layout(dag)
    if len(factors) != len(dag) or any(f is None for f in factors.nodes):
        raise ValueError("factor missing for a node")
    P = BlockSparseMatrix(dag)
    for k in range(len(dag)):
        f = factors[k]
        P.add(k, k, f.Rinv)
        cols = layout.pa_cols[k]
        for p in dag.parents[k]:
            P.add(k, p, -f.RinvH[:, cols[p]])
            Hp = f.H[:, cols[p]]
            for g in dag.parents[k]:
                if g > p:
                    continue
                P.add(p, g, Hp.T @ f.RinvH[:, cols[g]])
    return P


def count_nnz(matrix: BlockSparseMatrix | None, dag: TreedDag) -> int:
    """sum_i 2 n_i J_i + n_i^2 [branch] + n_i [leaf]."""
    n = dag.sizes
    J = np.array([sum(dag.sizes[p] for p in dag.parents[k]) for k in range(len(dag))])
    leaf = dag.is_leaf
    return int(np.sum(2 * n * J + np.where(leaf, n, n * n)))


@dataclass
class BlockLDL:
    dag: TreedDag
    L: dict  # (child, parent) -> block
    D: list  # matrix, or vector for leaves
    D_chol: list

    @property
    def logdet(self):
        tot = 0.0
        for D, Lc in zip(self.D, self.D_chol):
            tot += np.log(D).sum() if D.ndim == 1 else 2.0 * np.log(np.diag(Lc)).sum()
        return float(tot)

    def L_dense(self):
        dag = self.dag
        out = np.zeros((dag.n_locations, dag.n_locations))
        for (j, p), B in self.L.items():
            out[np.ix_(dag.members[j], dag.members[p])] = B
        return out

    def D_dense(self):
        dag = self.dag
        out = np.zeros((dag.n_locations, dag.n_locations))
        for k, D in enumerate(self.D):
            m = dag.members[k]
            if D.ndim == 1:
                out[m, m] = D
            else:
                out[np.ix_(m, m)] = D
        return out

    def solve(self, b):
        """lambda^-1 b via (I-L)^-1 D^-1 (I-L)^-T, vectors in location order."""
        dag = self.dag
        b = np.asarray(b, dtype=float)
        y = {k: b[dag.members[k]].copy() for k in range(len(dag))}
        # (I - L)^T y = b, children first
        for j in range(len(dag) - 1, -1, -1):
            for p in dag.parents[j]:
                y[p] += self.L[(j, p)].T @ y[j]
        for k in range(len(dag)):
            D = self.D[k]
            y[k] = y[k] / D if D.ndim == 1 else cho_solve((self.D_chol[k], True), y[k])
        # (I - L) x = z, parents first
        for j in range(len(dag)):
            for p in dag.parents[j]:
                y[j] += self.L[(j, p)] @ y[p]
        out = np.empty_like(b)
        for k in range(len(dag)):
            out[dag.members[k]] = y[k]
        return out


def block_ldl(lam: BlockSparseMatrix, dag: TreedDag | None = None) -> BlockLDL:
    """Eliminate from the deepest level upward.

    With the convention lambda = (I - L)^T D (I - L), eliminating node j sets
    D_j to its current diagonal block, L_jp = -D_j^-1 lambda_jp and updates
    every parent pair by lambda_pg -= L_jp^T D_j L_jg. Parent pairs of one
    node are already coupled, so there is no fill-in.
    """
    dag = dag or lam.dag
    work = lam.copy()
    L, D, Dc = {}, [None] * len(dag), [None] * len(dag)
    for level in range(dag.M, -1, -1):
        for j in (k for k in range(len(dag)) if dag.level[k] == level):
            Dj = work.blocks[(j, j)]
            D[j] = Dj
            if Dj.ndim == 1:
                if np.any(Dj <= 0):
                    raise NotPositiveDefinite(
                        f"pivot lost positivity at level {level}, node {dag.node_ids[j]}",
                        dag.node_ids[j])
                Dc[j] = np.sqrt(Dj)
            else:
                try:
                    Dc[j] = np.linalg.cholesky(Dj)
                except np.linalg.LinAlgError:
                    raise NotPositiveDefinite(
                        f"pivot lost positivity at level {level}, node {dag.node_ids[j]}",
                        dag.node_ids[j]) from None
            ps = dag.parents[j]
            DL = {}
            for p in ps:
                lam_jp = work.block(j, p)
                if Dj.ndim == 1:
                    L[(j, p)] = -lam_jp / Dj[:, None]
                else:
                    L[(j, p)] = -cho_solve((Dc[j], True), lam_jp)
                DL[p] = -lam_jp  # D_j L_jp
            for a, p in enumerate(ps):
                for g in ps[:a + 1]:
                    work.add(p, g, -L[(j, p)].T @ DL[g])
    return BlockLDL(dag=dag, L=L, D=D, D_chol=Dc)


def block_forward_inverse(ldl: BlockLDL | dict, dag: TreedDag) -> dict:
    """Blocks of (I - L)^-1, keyed (j, p) for p an ancestor-or-self of j.

    Delta_jj = I and Delta_jp = sum over g in pa(j) of L_jg Delta_gp, where
    only g equal to p or descending from p contribute.
    """
    L = ldl.L if isinstance(ldl, BlockLDL) else ldl
    Delta = {}
    for j in range(len(dag)):
        Delta[(j, j)] = np.eye(dag.sizes[j])
        for p in sorted(dag.ancestors(j)):
            acc = None
            for g in dag.parents[j]:
                Dg = Delta.get((g, p))
                if Dg is None:
                    continue
                term = L[(j, g)] @ Dg
                acc = term if acc is None else acc + term
            if acc is not None:
                Delta[(j, p)] = acc
    return Delta


def delta_dense(Delta: dict, dag: TreedDag) -> np.ndarray:
    out = np.zeros((dag.n_locations, dag.n_locations))
    for (j, p), B in Delta.items():
        out[np.ix_(dag.members[j], dag.members[p])] = B
    return out


def integrated_loglik(factors: FactorSet, dag: TreedDag, data, beta, tau2,
                      layout=None, precision=None) -> float:
    """log N(y | X beta, Z C~ Z^T + D) over observed entries, via Woodbury.

    ``data`` provides ``y`` (NaN for missing), ``X``, ``z`` loadings and the
    observed mask in location-ordinal order.
    """
    obs = data.observed
    tau2 = np.asarray(tau2, dtype=float)
    t2 = tau2[dag.var]
    r = np.zeros(dag.n_locations)
    r[obs] = data.y[obs] - data.mean(beta)[obs]
    omega = np.where(obs, data.z ** 2 / t2, 0.0)
    u = np.where(obs, data.z * r / t2, 0.0)
    P = precision if precision is not None else assemble_precision(factors, dag, layout)
    ldl = block_ldl(P.add_diagonal(omega), dag)
    n_obs = int(obs.sum())
    logdet = np.log(t2[obs]).sum() + factors.logdet_R + ldl.logdet
    quad = np.sum(r[obs] ** 2 / t2[obs]) - u @ ldl.solve(u)
    return float(-0.5 * (n_obs * np.log(2 * np.pi) + logdet + quad))
