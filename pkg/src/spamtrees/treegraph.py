"""Treed DAG over a reference set of expanded-domain locations.

Nodes live on levels ``0..M``. Levels ``0..M-1`` hold branch nodes, each owning
a reference subset; level ``M`` holds leaves, which own non-reference
locations assigned by nearest same-variable terminal branch ("cherry picking").

Locations are rows of a coordinate array paired with an integer variable
index; a row is referred to by its ordinal throughout the package.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree


class ExpandedLocation(NamedTuple):
    coords: tuple
    var: int


class NodeId(NamedTuple):
    level: int
    index: int


@dataclass
class TreedDag:
    """Immutable treed DAG.

    Nodes are stored in topological order (level, index_in_level); most
    internals address them by position in ``node_ids``.
    """

    M: int
    delta: int
    node_ids: list
    parents: list  # tuple of node positions, ascending level
    children: list
    members: list  # np.ndarray of location ordinals
    is_leaf: np.ndarray
    coords: np.ndarray
    var: np.ndarray
    q: int
    base_parent: list = field(default_factory=list)
    leaf_var: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self._pos = {nid: k for k, nid in enumerate(self.node_ids)}
        self.level = np.array([nid.level for nid in self.node_ids], dtype=int)
        self.sizes = np.array([len(m) for m in self.members], dtype=int)
        self.node_of = np.full(len(self.coords), -1, dtype=int)
        for k, m in enumerate(self.members):
            self.node_of[m] = k
        # location ordinals in node order; dense matrices use this layout
        self.order = (np.concatenate(self.members).astype(int)
                      if self.members else np.zeros(0, dtype=int))
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self._anc = None

    # ---- lookups -----------------------------------------------------
    def __len__(self):
        return len(self.node_ids)

    @property
    def n_locations(self):
        return len(self.coords)

    @property
    def m_delta(self):
        return self.M - self.delta

    def pos(self, node) -> int:
        if isinstance(node, (int, np.integer)):
            if not 0 <= node < len(self.node_ids):
                raise KeyError(f"unknown node position {node}")
            return int(node)
        try:
            return self._pos[NodeId(*node)]
        except (KeyError, TypeError):
            raise KeyError(f"unknown node {node}") from None

    def levels(self):
        """Node positions grouped per level, ascending."""
        out = []
        for r in range(self.M + 1):
            out.append([k for k in range(len(self)) if self.level[k] == r])
        return out

    def ancestors(self, k) -> frozenset:
        """All ancestors of node position ``k`` through any parent edge."""
        if self._anc is None:
            anc = []
            for j in range(len(self)):
                s = set()
                for p in self.parents[j]:
                    s.add(p)
                    s |= anc[p]
                anc.append(frozenset(s))
            self._anc = anc
        return self._anc[k]

    def parent_locations(self, k) -> np.ndarray:
        if not self.parents[k]:
            return np.zeros(0, dtype=int)
        return np.concatenate([self.members[p] for p in self.parents[k]])

    def terminal_branches(self):
        """Branches with no branch children (their children are leaves, if any)."""
        return [k for k in range(len(self)) if not self.is_leaf[k]
                and not any(not self.is_leaf[c] for c in self.children[k])]

    def reference_mask(self):
        mask = np.zeros(self.n_locations, dtype=bool)
        for k in range(len(self)):
            if not self.is_leaf[k]:
                mask[self.members[k]] = True
        return mask

    # ---- construction helpers ---------------------------------------
    @classmethod
    def from_assignment(cls, coords, var, levels, base_parent, members,
                        is_leaf, M, delta, q=None, leaf_var=None):
        """Assemble a dag from an explicit base tree.

        ``base_parent[k]`` is the depth-one parent of branch ``k`` (``-1`` for
        roots) or, for a leaf, its terminal branch. Parent sets for the
        requested depth are derived from the base tree.
        """
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        var = np.asarray(var, dtype=int)
        q = int(var.max()) + 1 if q is None else q
        order = sorted(range(len(levels)), key=lambda k: (levels[k], k))
        remap = {old: new for new, old in enumerate(order)}
        counters = {}
        node_ids = []
        for old in order:
            r = levels[old]
            node_ids.append(NodeId(r, counters.get(r, 0)))
            counters[r] = counters.get(r, 0) + 1
        bp = [remap[base_parent[o]] if base_parent[o] >= 0 else -1 for o in order]
        mem = [np.asarray(members[o], dtype=int) for o in order]
        leaf = np.array([bool(is_leaf[o]) for o in order])
        lvl = [levels[o] for o in order]
        parents = _derive_parents(lvl, bp, leaf, M, delta)
        children = [[] for _ in order]
        for k, ps in enumerate(parents):
            for p in ps:
                children[p].append(k)
        lv = {}
        if leaf_var is not None:
            lv = {remap[o]: v for o, v in leaf_var.items()}
        return cls(M=M, delta=delta, node_ids=node_ids, parents=parents,
                   children=[tuple(c) for c in children], members=mem,
                   is_leaf=leaf, coords=coords, var=var, q=q, base_parent=bp,
                   leaf_var=lv)


def _derive_parents(levels, base_parent, is_leaf, M, delta):
    m_delta = M - delta

    def chain(k):
        out = []
        while k >= 0:
            out.append(k)
            k = base_parent[k]
        return out[::-1]  # root first

    parents = []
    for k in range(len(levels)):
        b = base_parent[k]
        if b < 0:
            parents.append(())
            continue
        if is_leaf[k]:
            anc = [a for a in chain(b) if levels[a] >= m_delta]
            parents.append(tuple(anc) if anc else (b,))
        elif levels[k] <= m_delta:
            parents.append((b,))
        else:
            parents.append(tuple(a for a in chain(b) if levels[a] >= m_delta))
    return parents


# ---------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------

def _cell_index(x, lo, width, ncell):
    idx = np.floor((x - lo) / width * ncell).astype(int)
    return np.clip(idx, 0, ncell - 1)


def _pick_subset(cand, coords, var, lo, hi, n_s, weights, rng):
    """One weighted pick per axis-parallel sub-cell, topped up or thinned to ``n_s``."""
    d = coords.shape[1]
    k = max(1, int(round(n_s ** (1.0 / d))))
    while k ** d < n_s:
        k += 1
    width = np.where(hi > lo, hi - lo, 1.0)
    sub = _cell_index(coords[cand], lo, width, k)
    key = np.ravel_multi_index(sub.T, (k,) * d) if d > 1 else sub[:, 0]
    picks, pick_w = [], []
    for cell in np.unique(key):
        grp = cand[key == cell]
        w = weights[var[grp]]
        j = rng.choice(len(grp), p=w / w.sum()) if len(grp) > 1 else 0
        picks.append(grp[j])
        pick_w.append(w.sum())
    picks = np.array(picks, dtype=int)
    if len(picks) > n_s:
        pw = np.array(pick_w)
        keep = rng.choice(len(picks), size=n_s, replace=False, p=pw / pw.sum())
        picks = picks[np.sort(keep)]
    elif len(picks) < n_s and len(cand) > len(picks):
        # empty sub-cells: top up from the unpicked candidates
        rest = np.setdiff1d(cand, picks)
        w = weights[var[rest]]
        extra = rng.choice(rest, size=min(n_s - len(picks), len(rest)), replace=False,
                           p=w / w.sum())
        picks = np.concatenate([picks, extra])
    return np.sort(picks)


def build_tree(coords, var, observed=None, *, M, delta=None, c=2, n_s=16,
               bias_weights=None, root_cells=1, seed=0, q=None, min_fill=1) -> TreedDag:
    """Partition the reference set recursively and cherry-pick the rest.

    ``delta=None`` means full depth. ``M`` is an upper bound on the number of
    branch levels; construction stops early once fewer than ``n_s`` eligible
    locations remain, in which case the returned dag has a smaller ``M`` and
    ``delta`` is clipped to it. A cell becomes a node only when it holds at
    least ``min_fill`` eligible locations; ``min_fill=n_s`` keeps every
    reference subset full and leaves sparse cells to the leaves.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    var = np.asarray(var, dtype=int)
    n, d = coords.shape
    if n == 0:
        raise ValueError("empty location list")
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite coordinates")
    if c < 1 or n_s < 1 or M < 1:
        raise ValueError("need M >= 1, c >= 1, n_s >= 1")
    q = int(var.max()) + 1 if q is None else int(q)
    if var.min() < 0 or var.max() >= q:
        raise ValueError("variable index out of range")
    observed = np.ones(n, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    if n_s > n:
        raise ValueError(f"n_s={n_s} exceeds the number of locations ({n})")
    weights = np.ones(q) if bias_weights is None else np.asarray(bias_weights, dtype=float)
    if weights.shape != (q,) or np.any(weights <= 0):
        raise ValueError("bias_weights must be positive, one per variable")
    delta_req = M if delta is None else int(delta)
    if not 1 <= delta_req <= M:
        raise ValueError("delta must lie in 1..M")

    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    width = np.where(hi > lo, hi - lo, 1.0)

    remaining = np.zeros(n, dtype=bool)
    remaining[observed] = True

    levels, base_parent, members, cells = [], [], [], []
    # level 0: root_cells per axis
    frontier = []  # (parent position, cell multi-index, cells per axis)
    for cell in itertools.product(range(root_cells), repeat=d):
        frontier.append((-1, np.array(cell), root_cells))

    r = 0
    while r < M and frontier and remaining.sum() >= n_s:
        rng = np.random.default_rng([seed, r])
        cand_all = np.flatnonzero(remaining)
        new_frontier = []
        for parent, cell, ncell in frontier:
            clo = lo + width * cell / ncell
            chi = lo + width * (cell + 1) / ncell
            ci = _cell_index(coords[cand_all], lo, width, ncell)
            inside = cand_all[np.all(ci == cell, axis=1)]
            if len(inside) < max(1, min_fill):
                continue
            picks = _pick_subset(inside, coords, var, clo, chi, n_s, weights, rng)
            k = len(levels)
            levels.append(r)
            base_parent.append(parent)
            members.append(picks)
            cells.append((cell, ncell))
            for sub in itertools.product(range(c), repeat=d):
                new_frontier.append((k, cell * c + np.array(sub), ncell * c))
        remaining[np.concatenate([members[k] for k in range(len(levels))
                                  if levels[k] == r] or [np.zeros(0, int)])] = False
        frontier = new_frontier
        r += 1

    if not levels:
        raise ValueError("no reference locations could be selected")
    M_eff = max(levels) + 1
    delta_eff = min(delta_req, M_eff)

    branch_pos = list(range(len(levels)))
    has_branch_child = np.zeros(len(levels), dtype=bool)
    for k in branch_pos:
        if base_parent[k] >= 0:
            has_branch_child[base_parent[k]] = True
    terminals = [k for k in branch_pos if not has_branch_child[k]]

    ref = np.zeros(n, dtype=bool)
    for m in members:
        ref[m] = True
    nonref = np.flatnonzero(~ref)
    assigned, fallback = _nearest_terminal(coords, var, members, levels,
                                           terminals, nonref, q)
    leaf_groups = {}
    for u, t in zip(nonref, assigned):
        leaf_groups.setdefault((t, int(var[u])), []).append(u)

    leaf_var = {}
    for (t, v) in sorted(leaf_groups, key=lambda tv: (tv[0], tv[1])):
        k = len(levels)
        levels.append(M_eff)
        base_parent.append(t)
        members.append(np.array(sorted(leaf_groups[(t, v)]), dtype=int))
        leaf_var[k] = v
    is_leaf = [lv == M_eff for lv in levels]

    dag = TreedDag.from_assignment(coords, var, levels, base_parent, members,
                                   is_leaf, M_eff, delta_eff, q=q, leaf_var=leaf_var)
    dag.diagnostics.update({
        "M_requested": M, "delta_requested": delta_req,
        "cherry_pick_fallbacks": int(fallback.sum()),
        "fallback_locations": nonref[fallback].tolist(),
    })
    return dag


def _nearest_terminal(coords, var, members, levels, terminals, query, q,
                      query_coords=None, query_var=None):
    """Index (into branch list) of the nearest same-variable terminal branch.

    Ties are broken on (level, position, location ordinal). Falls back to all
    variables when no terminal branch holds the query's variable.
    """
    if query_coords is None:
        query_coords = coords[query]
        query_var = var[query]
    out = np.empty(len(query_coords), dtype=int)
    fallback = np.zeros(len(query_coords), dtype=bool)
    if len(query_coords) == 0:
        return out, fallback
    pts, owner = [], []
    for t in terminals:
        pts.append(members[t])
        owner.append(np.full(len(members[t]), t))
    pts = np.concatenate(pts)
    owner = np.concatenate(owner)
    # sort so that lowest (level, position, ordinal) comes first
    rank = np.lexsort((pts, owner, np.asarray(levels)[owner]))
    pts, owner = pts[rank], owner[rank]
    trees = {}
    for v in range(q):
        sel = var[pts] == v
        if sel.any():
            trees[v] = (cKDTree(coords[pts[sel]]), np.flatnonzero(sel))
    all_tree = (cKDTree(coords[pts]), np.arange(len(pts)))
    for i, (x, v) in enumerate(zip(query_coords, query_var)):
        tree, idx = trees.get(int(v), (None, None))
        if tree is None:
            tree, idx = all_tree
            fallback[i] = True
        dist, _ = tree.query(x)
        tied = tree.query_ball_point(x, r=dist * (1 + 1e-12) + 1e-300)
        j = idx[min(tied)] if tied else idx[_]
        out[i] = owner[j]
    return out, fallback


# ---------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------

def pick_terminal(dag: TreedDag, coords, var):
    """Terminal branch positions for arbitrary (coords, var) queries."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=int))
    terminals = dag.terminal_branches()
    return _nearest_terminal(dag.coords, dag.var, dag.members, dag.level,
                             terminals, None, dag.q, coords, var)


def leaf_parent_set(dag: TreedDag, terminal: int) -> tuple:
    """Parent positions a leaf under ``terminal`` has at the dag's depth."""
    chain = [terminal]
    while dag.base_parent[chain[-1]] >= 0:
        chain.append(dag.base_parent[chain[-1]])
    anc = tuple(a for a in chain[::-1] if dag.level[a] >= dag.m_delta)
    return anc if anc else (terminal,)


def cherry_pick(dag: TreedDag, u: ExpandedLocation) -> NodeId:
    """Leaf that a non-reference location ``u`` maps to.

    Raises ``LookupError`` when the chosen terminal branch has no leaf for
    ``u``'s variable (a location outside the fitted set); use
    :func:`pick_terminal` and :func:`leaf_parent_set` in that case.
    """
    t, fb = pick_terminal(dag, [u.coords], [u.var])
    t = int(t[0])
    for ch in dag.children[t]:
        if dag.is_leaf[ch] and dag.leaf_var.get(ch) == u.var and dag.base_parent[ch] == t:
            return dag.node_ids[ch]
    raise LookupError(f"terminal {dag.node_ids[t]} has no leaf for variable {u.var}")


def common_descendants(dag: TreedDag, vi, vj) -> set:
    i, j = dag.pos(vi), dag.pos(vj)
    a = {i, *dag.children[i]}
    b = {j, *dag.children[j]}
    return {dag.node_ids[k] for k in a & b}


def concestor_and_paths(dag: TreedDag, vi, vj) -> dict:
    """Last common ancestor-or-self and fewest-hop paths down to each node."""
    i, j = dag.pos(vi), dag.pos(vj)
    common = (dag.ancestors(i) | {i}) & (dag.ancestors(j) | {j})
    if not common:
        return {"concestor": None, "shortest_path_i": None, "shortest_path_j": None}
    z = max(common, key=lambda k: (dag.level[k], -k))
    return {
        "concestor": dag.node_ids[z],
        "shortest_path_i": [dag.node_ids[k] for k in _shortest_path(dag, z, i)],
        "shortest_path_j": [dag.node_ids[k] for k in _shortest_path(dag, z, j)],
    }


def _shortest_path(dag: TreedDag, src: int, dst: int) -> list:
    if src == dst:
        return [src]
    prev = {src: None}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for ch in sorted(dag.children[u]):
            if ch not in prev:
                prev[ch] = u
                if ch == dst:
                    path = [ch]
                    while prev[path[-1]] is not None:
                        path.append(prev[path[-1]])
                    return path[::-1]
                queue.append(ch)
    raise ValueError("no directed path")


def color_levels(dag: TreedDag) -> dict:
    """Fixed coloring for parallel Gibbs sweeps.

    Full depth: one color per level. Depth one: level parity. In between:
    the level itself at or below the nesting boundary, parity above it.
    Leaves take the color their level would have directly under their
    deepest parent, which matters only for unevenly deep trees.
    """
    M, delta = dag.M, dag.delta
    m_delta = M - delta

    def rule(level):
        if delta == M:
            return level
        if delta == 1:
            return level % 2
        return level if level >= m_delta else level % 2

    colors = {}
    for k, nid in enumerate(dag.node_ids):
        if dag.is_leaf[k] and delta != M:
            deepest = max(dag.level[p] for p in dag.parents[k]) if dag.parents[k] else -1
            colors[nid] = rule(max(deepest + 1, m_delta) if delta != 1 else deepest + 1)
        else:
            colors[nid] = rule(int(nid.level))
    return colors


def color_groups(dag: TreedDag) -> list:
    """Node positions per color, in sweep order (deepest colors first)."""
    colors = color_levels(dag)
    groups = {}
    for k, nid in enumerate(dag.node_ids):
        groups.setdefault(colors[nid], []).append(k)
    if dag.delta == 1:
        return [groups[c] for c in sorted(groups)]  # even then odd
    return [groups[c] for c in sorted(groups, reverse=True)]


# ---------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------

def dump_dag(dag: TreedDag) -> str:
    lines = [f"# treed-dag M={dag.M} delta={dag.delta} q={dag.q} n={dag.n_locations}"]
    for k, nid in enumerate(dag.node_ids):
        role = "leaf" if dag.is_leaf[k] else "branch"
        pa = ",".join(f"{dag.node_ids[p].level}:{dag.node_ids[p].index}" for p in dag.parents[k])
        bp = dag.base_parent[k]
        base = f"{dag.node_ids[bp].level}:{dag.node_ids[bp].index}" if bp >= 0 else "-"
        mem = ",".join(str(int(x)) for x in dag.members[k])
        lines.append(f"{nid.level}:{nid.index} {role} base={base} parents={pa or '-'} members={mem or '-'}")
    return "\n".join(lines) + "\n"


def load_dag(text: str, coords, var) -> TreedDag:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    header = dict(tok.split("=") for tok in rows[0].lstrip("# ").split()[1:])
    M, delta, q = int(header["M"]), int(header["delta"]), int(header["q"])
    ids, levels, base, members, leaf = [], [], [], [], []
    for ln in rows[1:]:
        nid, role, b, _pa, mem = ln.split()
        lvl, idx = map(int, nid.split(":"))
        ids.append((lvl, idx))
        levels.append(lvl)
        leaf.append(role == "leaf")
        b = b.split("=", 1)[1]
        base.append(None if b == "-" else tuple(map(int, b.split(":"))))
        m = mem.split("=", 1)[1]
        members.append([] if m == "-" else [int(x) for x in m.split(",")])
    pos = {nid: k for k, nid in enumerate(ids)}
    bp = [pos[b] if b is not None else -1 for b in base]
    var = np.asarray(var, dtype=int)
    leaf_var = {k: int(var[members[k][0]]) for k in range(len(ids)) if leaf[k] and members[k]}
    return TreedDag.from_assignment(coords, var, levels, bp, members, leaf, M, delta,
                                    q=q, leaf_var=leaf_var)
