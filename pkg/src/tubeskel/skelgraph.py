"""Rooted skeleton forests: classification, branches, resampling, rasterization, SWC I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tubeskel.volgrid import Volume

UNCLASSIFIED, ROOT, INTERMEDIATE, BRANCHING, LEAF = 0, 1, 2, 3, 4
CLASS_NAMES = {ROOT: "root", INTERMEDIATE: "intermediate", BRANCHING: "branching", LEAF: "leaf"}
TOPOLOGICAL = (ROOT, BRANCHING, LEAF)


class GraphError(ValueError):
    pass


class CycleError(GraphError):
    pass


class DanglingParentError(GraphError):
    pass


class DuplicateIdError(GraphError):
    pass


def _ro(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Forest of rooted trees stored as parallel node arrays.

    ``parent`` holds node *indices* (-1 for roots), so every edge is directed
    child -> parent, i.e. rootward. ``extra_edges`` only exists for imported
    diagnostics (chords); constructed graphs never have any.
    """

    ids: np.ndarray
    pos: np.ndarray
    radius: np.ndarray
    parent: np.ndarray
    classes: np.ndarray | None = None
    extra_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = len(ids)
        pos = np.asarray(self.pos, dtype=np.float64).reshape(n, 3)
        radius = np.asarray(self.radius, dtype=np.float64).reshape(n)
        parent = np.asarray(self.parent, dtype=np.int64).reshape(n)
        classes = (
            np.zeros(n, np.int8)
            if self.classes is None
            else np.asarray(self.classes, dtype=np.int8).reshape(n)
        )
        extra = np.asarray(self.extra_edges, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(ids)) != n:
            raise DuplicateIdError("duplicate node id")
        if n and (parent.min() < -1 or parent.max() >= n):
            raise DanglingParentError("parent index out of range")
        if np.any(parent == np.arange(n)):
            raise CycleError("node is its own parent")
        if n and np.any(radius <= 0):
            raise GraphError("radii must be positive")
        for name, arr in [("ids", ids), ("pos", pos), ("radius", radius), ("parent", parent),
                          ("classes", classes), ("extra_edges", extra)]:
            object.__setattr__(self, name, _ro(arr))

    @classmethod
    def empty(cls) -> "SkeletonGraph":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_edges(cls, ids, pos, radius, edges) -> "SkeletonGraph":
        """Build from (child_id, parent_id) pairs; edges beyond one parent per node become chords."""
        ids = np.asarray(ids, dtype=np.int64)
        index = {int(i): k for k, i in enumerate(ids)}
        parent = np.full(len(ids), -1, np.int64)
        extra = []
        for c, p in edges:
            ci, pi = index[int(c)], index[int(p)]
            if parent[ci] == -1:
                parent[ci] = pi
            else:
                extra.append((ci, pi))
        return cls(ids, pos, radius, parent, None, np.array(extra, np.int64).reshape(-1, 2))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) array of (child_index, parent_index), chords appended."""
        child = np.nonzero(self.parent >= 0)[0]
        tree = np.stack([child, self.parent[child]], axis=1)
        return np.concatenate([tree, self.extra_edges]) if len(self.extra_edges) else tree

    @property
    def roots(self) -> np.ndarray:
        return np.nonzero(self.parent < 0)[0]

    @property
    def is_classified(self) -> bool:
        return len(self) == 0 or bool(np.all(self.classes > 0))

    def index_of(self, node_id: int) -> int:
        hit = np.nonzero(self.ids == node_id)[0]
        if len(hit) == 0:
            raise KeyError(node_id)
        return int(hit[0])

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(len(self))]
        for c in np.nonzero(self.parent >= 0)[0].tolist():
            kids[int(self.parent[c])].append(c)
        return kids

    def replace(self, **changes) -> "SkeletonGraph":
        kw = dict(ids=self.ids, pos=self.pos, radius=self.radius, parent=self.parent,
                  classes=self.classes, extra_edges=self.extra_edges)
        kw.update(changes)
        return SkeletonGraph(**kw)

    def tree_ids(self) -> np.ndarray:
        """Index of the root of each node's tree (requires a forest)."""
        check_forest(self)
        out = np.full(len(self), -1, np.int64)
        for start in range(len(self)):
            path = []
            v = start
            while out[v] < 0 and self.parent[v] >= 0:
                path.append(v)
                v = int(self.parent[v])
            root = out[v] if out[v] >= 0 else v
            out[v] = root
            out[path] = root
        return out


def check_forest(graph: SkeletonGraph) -> None:
    """Raise CycleError unless the parent links form a forest without chords."""
    if len(graph.extra_edges):
        raise CycleError("graph has chords (non-tree edges)")
    state = np.zeros(len(graph), np.int8)  # 0 new, 1 on stack, 2 done
    parent = graph.parent
    for start in range(len(graph)):
        if state[start]:
            continue
        path = []
        v = start
        while v >= 0 and state[v] == 0:
            state[v] = 1
            path.append(v)
            v = int(parent[v])
        if v >= 0 and state[v] == 1:
            raise CycleError(f"cyclic parent chain through node id {int(graph.ids[v])}")
        state[path] = 2


def classify_nodes(graph: SkeletonGraph) -> SkeletonGraph:
    check_forest(graph)
    n = len(graph)
    nchild = np.bincount(graph.parent[graph.parent >= 0], minlength=n)
    classes = np.full(n, INTERMEDIATE, np.int8)
    classes[nchild == 0] = LEAF
    classes[nchild >= 2] = BRANCHING
    classes[graph.parent < 0] = ROOT
    return graph.replace(classes=classes)


def branches(graph: SkeletonGraph) -> list[list[int]]:
    """Branch decomposition: node-index paths from a leaf/branching node up to the
    next topological node, interior nodes all intermediate. Together they
    partition the edge set."""
    g = graph if graph.is_classified else classify_nodes(graph)
    out = []
    for start in range(len(g)):
        if g.classes[start] not in (LEAF, BRANCHING) or g.parent[start] < 0:
            continue
        path = [start]
        v = int(g.parent[start])
        while g.classes[v] == INTERMEDIATE:
            path.append(v)
            v = int(g.parent[v])
        path.append(v)
        out.append(path)
    return out


def betti_numbers(graph: SkeletonGraph) -> tuple[int, int]:
    n = len(graph)
    if n == 0:
        return 0, 0
    edges = graph.edges
    uf = np.arange(n)

    def find(a):
        while uf[a] != a:
            uf[a] = uf[uf[a]]
            a = uf[a]
        return a

    b0 = n
    for c, p in edges.tolist():
        rc, rp = find(c), find(p)
        if rc != rp:
            uf[rc] = rp
            b0 -= 1
    return b0, len(edges) - n + b0


def resample(graph: SkeletonGraph, step: float) -> SkeletonGraph:
    """Re-place intermediate nodes every ``step`` of arc length along each branch.

    Root, branching and leaf nodes keep their id, position and radius; new
    intermediate nodes get fresh ids above the current maximum. Arc length is
    measured from the rootward end of each branch, so a shorter final segment
    (if any) sits at the distal end.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    g = classify_nodes(graph)
    if len(g) == 0:
        return g
    topo = np.nonzero(np.isin(g.classes, TOPOLOGICAL))[0]
    new_index = {int(v): k for k, v in enumerate(topo)}
    ids = [int(g.ids[v]) for v in topo]
    pos = [g.pos[v] for v in topo]
    rad = [float(g.radius[v]) for v in topo]
    par = [-1] * len(topo)
    next_id = int(g.ids.max()) + 1
    eps = 1e-9 * max(step, 1.0)
    for path in branches(g):
        chain = path[::-1]  # proximal -> distal
        pts = g.pos[chain]
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        prev = new_index[chain[0]]
        k = 1
        while k * step < total - eps:
            s = k * step
            j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
            t = (s - cum[j]) / seg[j] if seg[j] > 0 else 0.0
            p = pts[j] + t * (pts[j + 1] - pts[j])
            r = g.radius[chain[j]] + t * (g.radius[chain[j + 1]] - g.radius[chain[j]])
            ids.append(next_id)
            next_id += 1
            pos.append(p)
            rad.append(float(r))
            par.append(prev)
            prev = len(ids) - 1
            k += 1
        par[new_index[chain[-1]]] = prev
    out = SkeletonGraph(np.array(ids), np.array(pos).reshape(-1, 3), np.array(rad), np.array(par))
    return classify_nodes(out)


def reroot(graph: SkeletonGraph, new_root: int) -> SkeletonGraph:
    """Reverse parent links along the path from ``new_root`` (index) to its current root."""
    parent = graph.parent.copy()
    prev = -1
    v = new_root
    while v >= 0:
        nxt = int(parent[v])
        parent[v] = prev
        prev, v = v, nxt
    return graph.replace(parent=parent, classes=None)


def orient_by_radius(graph: SkeletonGraph) -> SkeletonGraph:
    """Root every tree at its leaf (degree <= 1 node) of maximal radius; ties -> lower index."""
    check_forest(graph)
    g = graph
    degree = np.bincount(g.edges.ravel(), minlength=len(g)) if len(g) else np.zeros(0, int)
    tree = g.tree_ids()
    for root in np.unique(tree):
        members = np.nonzero(tree == root)[0]
        ends = members[degree[members] <= 1]
        best = ends[np.lexsort((ends, -g.radius[ends]))[0]]
        if best != root:
            g = reroot(g, int(best))
    return classify_nodes(g)


def rasterize(graph: SkeletonGraph, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Union of round cones: a voxel is foreground iff within r(t) of some edge, r
    interpolated linearly between endpoint radii. Voxels crossed by an edge's
    centre line are always foreground."""
    dims = tuple(int(d) for d in dims)
    sp = np.asarray(spacing, dtype=np.float64)
    mask = np.zeros(dims, bool)
    if len(graph) == 0:
        return Volume(mask, tuple(sp))
    lo, hi = -0.5, np.asarray(dims) - 0.5
    if np.any(graph.pos < lo) or np.any(graph.pos >= hi):
        raise GraphError("node outside volume dims")
    segs = [(int(c), int(p)) for c, p in graph.edges.tolist()]
    lonely = set(range(len(graph))) - {v for e in segs for v in e}
    segs += [(v, v) for v in sorted(lonely)]
    for c, p in segs:
        a, b = graph.pos[c], graph.pos[p]
        ra, rb = graph.radius[c], graph.radius[p]
        rmax = max(ra, rb)
        reach = np.ceil(rmax / sp) + 1
        lo_i = np.maximum(np.floor(np.minimum(a, b) - reach), 0).astype(int)
        hi_i = np.minimum(np.ceil(np.maximum(a, b) + reach), np.asarray(dims) - 1).astype(int)
        zz, yy, xx = np.mgrid[lo_i[0]:hi_i[0] + 1, lo_i[1]:hi_i[1] + 1, lo_i[2]:hi_i[2] + 1]
        pts = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
        ab = (b - a) * sp
        rel = (pts - a) * sp
        denom = float(ab @ ab)
        t = np.clip(rel @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(pts.shape[:3])
        d = np.linalg.norm(rel - t[..., None] * ab, axis=-1)
        r = ra + t * (rb - ra)
        sub = mask[lo_i[0]:hi_i[0] + 1, lo_i[1]:hi_i[1] + 1, lo_i[2]:hi_i[2] + 1]
        sub |= d <= r
        length = np.linalg.norm(b - a)
        n = max(int(np.ceil(length / 0.25)), 1)
        line = a + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)
        idx = np.clip(np.rint(line).astype(int), 0, np.asarray(dims) - 1)
        mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return Volume(mask, tuple(sp))


def read_swc(path) -> SkeletonGraph:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise GraphError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]),
                         float(parts[4]), float(parts[5]), int(parts[6])))
        except ValueError as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
    ids = [r[0] for r in rows]
    index: dict[int, int] = {}
    for k, i in enumerate(ids):
        if i in index:
            raise DuplicateIdError(f"{path}: duplicate node id {i}")
        index[i] = k
    parent = []
    for r in rows:
        if r[6] == -1:
            parent.append(-1)
        elif r[6] in index:
            parent.append(index[r[6]])
        else:
            raise DanglingParentError(f"{path}: dangling parent id {r[6]} for node {r[0]}")
    pos = np.array([(r[4], r[3], r[2]) for r in rows], dtype=np.float64).reshape(-1, 3)
    classes = np.array([r[1] for r in rows], dtype=np.int8)
    if np.any((classes < 0) | (classes > 4)):
        raise GraphError(f"{path}: unknown class code")
    g = SkeletonGraph(np.array(ids, np.int64), pos, np.array([r[5] for r in rows]),
                      np.array(parent, np.int64), classes)
    check_forest(g)
    return g


def write_swc(graph: SkeletonGraph, path) -> None:
    g = graph if graph.is_classified else classify_nodes(graph)
    lines = ["# id class x y z radius parent_id"]
    for k in range(len(g)):
        z, y, x = g.pos[k]
        p = int(g.ids[g.parent[k]]) if g.parent[k] >= 0 else -1
        lines.append(
            f"{int(g.ids[k])} {int(g.classes[k])} {x:.6f} {y:.6f} {z:.6f} {g.radius[k]:.6f} {p}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
