"""Inspect a small treed DAG: levels, parent sets, coloring and sparsity.

    python3 demos/tree_anatomy.py
"""

import numpy as np

from spamtrees.covariance import ThetaParams, compute_factors
from spamtrees.oracle import dense_spamtree_cov
from spamtrees.precision import assemble_precision, count_nnz
from spamtrees.treegraph import build_tree, color_groups


def main():
    rng = np.random.default_rng(42)
    pts = rng.uniform(size=(300, 2))
    var = rng.integers(0, 2, 300)
    observed = rng.uniform(size=300) < 0.5
    theta = ThetaParams([1.0, 1.5], [0.3, 0.5], [2.0, 4.0], [[0, 1], [1, 0]], 1.0, 1.0, 5.0)
    for delta in (1, 2, 3):
        dag = build_tree(pts, var, observed, M=3, delta=delta, n_s=6, seed=0)
        f = compute_factors(theta, dag)
        P = assemble_precision(f, dag)
        leaf = next(k for k in range(len(dag)) if dag.is_leaf[k])
        print(f"delta={delta}: {len(dag)} nodes, {len(color_groups(dag))} colors, "
              f"nnz {count_nnz(P, dag)} of {300 ** 2}")
        print(f"  a leaf's parents: {[tuple(dag.node_ids[p]) for p in dag.parents[leaf]]}")
        err = np.abs(P.to_dense() @ dense_spamtree_cov(dag, f) - np.eye(300)).max()
        print(f"  max |precision x covariance - I| = {err:.1e}")


if __name__ == "__main__":
    main()
