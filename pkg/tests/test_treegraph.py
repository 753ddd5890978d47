import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spamtrees.treegraph import (ExpandedLocation, NodeId, TreedDag, build_tree, cherry_pick,
                                 color_groups, color_levels, common_descendants,
                                 concestor_and_paths, dump_dag, leaf_parent_set, load_dag,
                                 pick_terminal)


def audit_partition(dag):
    counts = np.zeros(dag.n_locations, dtype=int)
    for m in dag.members:
        np.add.at(counts, m, 1)
    return counts


def check_invariants(dag):
    m_delta = dag.M - dag.delta
    for k, nid in enumerate(dag.node_ids):
        ps = dag.parents[k]
        for p in ps:
            assert dag.level[p] < dag.level[k]
        if dag.is_leaf[k]:
            # a path of branches ending at the terminal branch
            assert ps and ps[-1] == dag.base_parent[k]
            for a, b in zip(ps, ps[1:]):
                assert dag.base_parent[b] == a
        elif nid.level == 0:
            assert ps == ()
        elif nid.level <= m_delta:
            assert len(ps) == 1 and dag.level[ps[0]] == nid.level - 1
        else:
            assert [dag.level[p] for p in ps] == list(range(m_delta, nid.level))
            for p in ps:
                assert set(dag.parents[p]) <= set(ps) or dag.level[p] == m_delta


class TestBuildTree:
    def test_partition_audit(self, rng):
        pts = rng.uniform(size=(100, 2))
        dag = build_tree(pts, np.zeros(100, int), M=2, c=2, n_s=4, seed=0)
        assert np.all(audit_partition(dag) == 1)
        roots = [k for k in range(len(dag)) if dag.level[k] == 0]
        assert all(dag.sizes[k] == 4 for k in roots)
        level1 = [k for k in range(len(dag)) if dag.level[k] == 1 and not dag.is_leaf[k]]
        assert all(dag.sizes[k] <= 4 for k in level1)
        assert dag.reference_mask().sum() < 100

    def test_branching_factor_2d(self, rng):
        pts = rng.uniform(size=(4000, 2))
        dag = build_tree(pts, np.zeros(4000, int), M=3, c=2, n_s=4, seed=0)
        for k in range(len(dag)):
            if not dag.is_leaf[k] and dag.level[k] < dag.M - 1:
                branch_kids = [c for c in dag.children[k]
                               if not dag.is_leaf[c] and dag.level[c] == dag.level[k] + 1]
                assert len(branch_kids) == 4

    def test_single_level_all_reference(self):
        pts = np.linspace(0, 1, 5)[:, None]
        dag = build_tree(pts, np.zeros(5, int), M=1, n_s=5)
        assert dag.M == 1 and len(dag) == 1
        assert dag.parents == [()] and dag.children == [()]
        assert sorted(dag.members[0]) == list(range(5))

    def test_stops_when_subsets_cannot_be_filled(self, rng):
        pts = rng.uniform(size=(40, 2))
        dag = build_tree(pts, np.zeros(40, int), M=6, n_s=8, seed=0)
        assert dag.M < 6
        assert dag.diagnostics["M_requested"] == 6

    @pytest.mark.parametrize("bad", [
        dict(coords=np.zeros((0, 2)), var=np.zeros(0, int)),
        dict(coords=np.array([[0.0, np.inf]]), var=np.zeros(1, int)),
    ])
    def test_rejects_bad_locations(self, bad):
        with pytest.raises(ValueError):
            build_tree(bad["coords"], bad["var"], M=2, n_s=1)

    def test_rejects_oversized_subsets_and_weights(self, rng):
        pts = rng.uniform(size=(10, 2))
        with pytest.raises(ValueError):
            build_tree(pts, np.zeros(10, int), M=2, n_s=11)
        with pytest.raises(ValueError):
            build_tree(pts, np.zeros(10, int), M=2, n_s=2, bias_weights=[0.0])
        with pytest.raises(ValueError):
            build_tree(pts, np.zeros(10, int), M=2, n_s=2, c=0)

    def test_bias_weights_lift_sparse_variable(self, rng):
        n = 2000
        pts = rng.uniform(size=(n, 2))
        var = (rng.uniform(size=n) < 0.1).astype(int)
        share = []
        for w in ([1.0, 1.0], [1.0, 30.0]):
            dag = build_tree(pts, var, M=3, n_s=9, bias_weights=w, seed=3)
            roots = np.concatenate([dag.members[k] for k in range(len(dag)) if dag.level[k] == 0])
            share.append(np.mean(var[roots] == 1))
        assert share[1] > share[0]

    def test_min_fill_keeps_subsets_full(self, rng):
        pts = rng.uniform(size=(3000, 2))
        dag = build_tree(pts, np.zeros(3000, int), M=8, n_s=16, seed=0, min_fill=16)
        sizes = [dag.sizes[k] for k in range(len(dag)) if not dag.is_leaf[k]]
        assert min(sizes) == 16
        assert np.all(audit_partition(dag) == 1)

    def test_seed_determinism(self, rng):
        pts = rng.uniform(size=(300, 2))
        var = rng.integers(0, 2, 300)
        a = build_tree(pts, var, M=3, n_s=5, seed=7)
        b = build_tree(pts, var, M=3, n_s=5, seed=7)
        assert dump_dag(a) == dump_dag(b)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), delta=st.integers(1, 3), q=st.integers(1, 3),
           n=st.integers(20, 250))
    def test_invariants_hold(self, seed, delta, q, n):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(size=(n, 2))
        var = rng.integers(0, q, n)
        obs = rng.uniform(size=n) < 0.6
        obs[0] = True
        dag = build_tree(pts, var, obs, M=3, delta=delta, n_s=3, seed=seed, q=q)
        assert np.all(audit_partition(dag) == 1)
        assert np.all(obs[dag.reference_mask()])
        check_invariants(dag)
        if dag.delta == dag.M:
            for k in range(len(dag)):
                for p in dag.parents[k]:
                    assert set(dag.parents[p]) < set(dag.parents[k])


class TestCherryPick:
    def test_coincident_location_maps_under_its_terminal(self, rng):
        pts = rng.uniform(size=(200, 2))
        var = np.zeros(200, int)
        dag = build_tree(pts, var, M=2, n_s=4, seed=0)
        t = dag.terminal_branches()[3]
        ref = dag.members[t][0]
        terms, _ = pick_terminal(dag, pts[ref][None], [0])
        assert terms[0] == t

    def test_nearest_same_variable_brute_force(self, rng):
        n = 1500
        pts = rng.uniform(size=(n, 2))
        var = rng.integers(0, 2, n)
        dag = build_tree(pts, var, M=3, n_s=6, seed=2)
        terms = dag.terminal_branches()
        refs = np.concatenate([dag.members[t] for t in terms])
        owner = np.concatenate([[t] * dag.sizes[t] for t in terms])
        for k in range(len(dag)):
            if not dag.is_leaf[k]:
                continue
            for u in dag.members[k]:
                same = var[refs] == var[u]
                d = np.linalg.norm(pts[refs[same]] - pts[u], axis=1)
                best = owner[same][np.argmin(d)]
                assert dag.base_parent[k] == best

    def test_east_only_variable(self, rng):
        # variable 1 exists only in the east half
        n = 800
        pts = rng.uniform(size=(n, 2))
        var = np.where((pts[:, 0] > 0.5) & (rng.uniform(size=n) < 0.5), 1, 0)
        dag = build_tree(pts, var, M=2, n_s=4, seed=1)
        terms, fb = pick_terminal(dag, [[0.05, 0.5]], [1])
        t = int(terms[0])
        assert not fb[0]
        assert np.any(var[dag.members[t]] == 1)
        assert dag.coords[dag.members[t]][var[dag.members[t]] == 1, 0].min() > 0.5
        # brute force over all variable-1 reference locations in terminals
        cand = [(np.linalg.norm(pts[u] - [0.05, 0.5]), t2) for t2 in dag.terminal_branches()
                for u in dag.members[t2] if var[u] == 1]
        assert min(cand)[1] == t

    def test_tie_break_lowest(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.2], [0.5, 0.9]])
        dag = TreedDag.from_assignment(pts, np.zeros(4, int), [0, 0, 1, 1], [-1, -1, 0, 1],
                                       [[0], [1], [2], [3]], [False, False, True, True], 1, 1)
        terms, _ = pick_terminal(dag, [[0.5, 0.0]], [0])
        assert terms[0] == 0

    def test_fallback_flagged(self, rng):
        pts = rng.uniform(size=(50, 2))
        var = np.zeros(50, int)
        dag = build_tree(pts, var, M=2, n_s=4, seed=0, q=2)
        _, fb = pick_terminal(dag, [[0.5, 0.5]], [1])
        assert fb[0]

    def test_cherry_pick_returns_leaf(self, rng):
        pts = rng.uniform(size=(200, 2))
        var = rng.integers(0, 2, 200)
        dag = build_tree(pts, var, M=2, n_s=4, seed=0)
        leaf = next(k for k in range(len(dag)) if dag.is_leaf[k])
        u = dag.members[leaf][0]
        nid = cherry_pick(dag, ExpandedLocation(tuple(pts[u]), int(var[u])))
        assert nid == dag.node_ids[leaf]


class TestQueries:
    def test_common_descendants_self(self, small_dags):
        dag = small_dags[3]
        for k in range(len(dag)):
            nid = dag.node_ids[k]
            assert common_descendants(dag, nid, nid) == {nid} | {dag.node_ids[c] for c in dag.children[k]}

    def test_common_descendants_depth_one_parent(self, small_dags):
        dag = small_dags[1]
        for k in range(len(dag)):
            if len(dag.parents[k]) == 1:
                assert common_descendants(dag, k, dag.parents[k][0]) == {dag.node_ids[k]}

    def test_disjoint_roots(self):
        pts = np.array([[0.1, 0.1], [0.9, 0.9], [0.12, 0.1], [0.88, 0.9]])
        dag = TreedDag.from_assignment(pts, np.zeros(4, int), [0, 0, 1, 1], [-1, -1, 0, 1],
                                       [[0], [1], [2], [3]], [False, False, True, True], 1, 1)
        assert common_descendants(dag, NodeId(0, 0), NodeId(0, 1)) == set()
        assert concestor_and_paths(dag, NodeId(1, 0), NodeId(1, 1))["concestor"] is None

    def test_unknown_node(self, small_dags):
        with pytest.raises(KeyError):
            common_descendants(small_dags[1], NodeId(9, 0), NodeId(0, 0))

    def test_concestor_self_and_chain(self):
        # root -> a -> {b, c}, depth one
        pts = np.arange(4.0)[:, None]
        dag = TreedDag.from_assignment(pts, np.zeros(4, int), [0, 1, 2, 2], [-1, 0, 1, 1],
                                       [[0], [1], [2], [3]], [False, False, False, False], 3, 1)
        r = concestor_and_paths(dag, NodeId(2, 0), NodeId(2, 0))
        assert r["concestor"] == NodeId(2, 0) and len(r["shortest_path_i"]) == 1
        r = concestor_and_paths(dag, NodeId(2, 0), NodeId(2, 1))
        assert r["concestor"] == NodeId(1, 0)
        assert r["shortest_path_i"] == [NodeId(1, 0), NodeId(2, 0)]

    def test_concestor_full_depth_is_deepest_shared_parent(self, small_dags):
        dag = small_dags[3]
        branches = [k for k in range(len(dag)) if not dag.is_leaf[k] and dag.level[k] > 0]
        for i, j in itertools.combinations(branches, 2):
            shared = set(dag.parents[i]) & set(dag.parents[j])
            anc_i = dag.ancestors(i) | {i}
            anc_j = dag.ancestors(j) | {j}
            r = concestor_and_paths(dag, i, j)
            common = anc_i & anc_j
            if not common:
                assert r["concestor"] is None
                continue
            deepest = max(common, key=lambda k: dag.level[k])
            assert r["concestor"] == dag.node_ids[deepest]
            if shared and i not in anc_j and j not in anc_i:
                assert deepest in shared
                assert len(r["shortest_path_i"]) == 2  # one direct hop


class TestColoring:
    @pytest.mark.parametrize("delta,ncolors", [(4, 5), (1, 2)])
    def test_color_counts(self, rng, delta, ncolors):
        pts = rng.uniform(size=(3000, 2))
        dag = build_tree(pts, np.zeros(3000, int), M=4, delta=delta, n_s=4, seed=0)
        assert dag.M == 4
        assert len(set(color_levels(dag).values())) == ncolors

    def test_single_node(self):
        dag = build_tree(np.zeros((1, 2)), [0], M=1, n_s=1)
        assert len(set(color_levels(dag).values())) == 1

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 5000), M=st.integers(1, 4), dfrac=st.floats(0, 1))
    def test_no_conflicts_within_color(self, seed, M, dfrac):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(size=(400, 2))
        delta = max(1, int(round(dfrac * M)))
        dag = build_tree(pts, rng.integers(0, 2, 400), M=M, delta=delta, n_s=3, seed=seed)
        col = color_levels(dag)
        for g in color_groups(dag):
            gs = set(g)
            for k in g:
                assert not (set(dag.parents[k]) & gs)
                assert not (set(dag.children[k]) & gs)
            for a, b in itertools.combinations(g, 2):
                assert not (set(dag.children[a]) & set(dag.children[b]))
                assert col[dag.node_ids[a]] == col[dag.node_ids[b]]


def test_serialization_round_trip(small_dags):
    for dag in small_dags.values():
        text = dump_dag(dag)
        back = load_dag(text, dag.coords, dag.var)
        assert dump_dag(back) == text
        assert back.parents == dag.parents


def test_leaf_parent_set_matches_leaves(small_dags):
    for dag in small_dags.values():
        for k in range(len(dag)):
            if dag.is_leaf[k]:
                assert leaf_parent_set(dag, dag.base_parent[k]) == dag.parents[k]
