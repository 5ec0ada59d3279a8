"""Direction-vector guided, multi-root TEASAR.

Tracing runs one lowest-cost search per root over the root's connected
component (costs live on directed 26-neighbour moves), then repeatedly picks
the most root-distant unprocessed voxel, keeps its cheapest root path and
masks the vessel volume around it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from tubeskel import kernels
from tubeskel.flowfield import angle_between, sample_field, vmf
from tubeskel.skelgraph import SkeletonGraph, check_forest, classify_nodes, reroot
from tubeskel.volgrid import Volume, connected_components, euclidean_distance_transform

SNAP_RADIUS = 3.0
TIEBREAK = 1e-6


@dataclass(frozen=True)
class PenaltyParams:
    scale: float = 1_000_000.0
    exponent: int = 16
    use_dbf: bool = True
    use_vmf: bool = True
    use_angle: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("penalty scale must be > 0")
        if self.exponent < 2 or int(self.exponent) != self.exponent or self.exponent % 2:
            raise ValueError("penalty exponent must be an even integer >= 2")


@dataclass(frozen=True)
class PenaltyContext:
    m1: float
    m2: float
    m3: float = 180.0

    @classmethod
    def from_fields(cls, mask: Volume, dbf: Volume, vmf_field: Volume) -> "PenaltyContext":
        fg = np.asarray(mask.data, bool)
        if not fg.any():
            return cls(0.0, 0.0)
        max_dbf = float(dbf.data[fg].astype(np.float64).max())
        max_vmf = float(vmf_field.data[fg].astype(np.float64).max())
        return cls(max_dbf**1.01, max_vmf**1.01)


@dataclass(frozen=True)
class AdaptiveMaskParams:
    """Radius-dependent masking distance. ``r_min``/``r_max`` of None mean the
    5th/95th DBF percentile of the component being traced.

    ``flow_gated`` restricts masking in components holding several roots to
    voxels whose direction vector lands near the traced path.
    """

    s_min: float = 1.1
    s_max: float = 1.5
    c_min: float = 2.0
    c_max: float = 10.0
    r_min: float | None = None
    r_max: float | None = None
    flow_gated: bool = True

    def __post_init__(self):
        if self.s_min > self.s_max or self.c_min > self.c_max:
            raise ValueError("need s_min <= s_max and c_min <= c_max")
        if self.r_min is not None and self.r_max is not None and not self.r_min < self.r_max:
            raise ValueError("need r_min < r_max")


@dataclass(frozen=True)
class RootDetectionParams:
    n_steps: int = 50
    step: float = 1.0
    tolerance: float = 0.1
    min_radius: float = 3.0
    cluster_radius: float = 2.0

    def __post_init__(self):
        if self.n_steps < 1 or not self.step > 0 or not self.tolerance > 0:
            raise ValueError("n_steps, step and tolerance must be positive")
        if self.min_radius < 0:
            raise ValueError("min_radius must be non-negative")


@dataclass(frozen=True)
class PostprocessParams:
    max_distance: float = 5.0
    max_radius_diff: float = 3.0
    max_angle: float = 100.0

    def __post_init__(self):
        if not (self.max_distance > 0 and self.max_radius_diff > 0 and self.max_angle > 0):
            raise ValueError("postprocess thresholds must be positive")


def penalty_value(dbf_n, vmf_n, theta, ctx: PenaltyContext, params: PenaltyParams = PenaltyParams()):
    """Move penalty from the DBF/VMF of the target voxel and the walk angle (vectorised)."""
    e = params.exponent
    total = np.zeros(np.broadcast(np.asarray(dbf_n), np.asarray(vmf_n), np.asarray(theta)).shape)
    if params.use_dbf:
        total = total + (1.0 - np.asarray(dbf_n, np.float64) / ctx.m1) ** e
    if params.use_vmf and ctx.m2 > 0:
        total = total + (np.asarray(vmf_n, np.float64) / ctx.m2) ** e
    if params.use_angle:
        total = total + (np.asarray(theta, np.float64) / ctx.m3) ** e
    out = params.scale * total
    return float(out) if np.ndim(out) == 0 else out


def penalty(p, n, dbf: Volume, field: Volume, ctx: PenaltyContext, params: PenaltyParams = PenaltyParams()) -> float:
    """Penalty of stepping from voxel ``p`` to its 26-neighbour ``n``."""
    p = tuple(int(c) for c in p)
    n = tuple(int(c) for c in n)
    r = np.subtract(n, p)
    if not (np.all(np.abs(r) <= 1) and np.any(r != 0)):
        raise ValueError(f"{n} is not a 26-neighbour of {p}")
    theta = angle_between(field.data[p], r)
    vmf_n = float(np.linalg.norm(field.data[n].astype(np.float64)))
    return penalty_value(float(dbf.data[n]), vmf_n, theta, ctx, params)


def mask_radius(r: float, params: AdaptiveMaskParams, r_min: float | None = None, r_max: float | None = None) -> float:
    lo = params.r_min if r_min is None else r_min
    hi = params.r_max if r_max is None else r_max
    if lo is None or hi is None:
        raise ValueError("radius bounds unresolved")
    if hi > lo:
        alpha = min(max((r - lo) / (hi - lo), 0.0), 1.0)
    else:
        alpha = 1.0 if r >= hi else 0.0
    scale = params.s_min + alpha * (params.s_max - params.s_min)
    const = params.c_min + alpha * (params.c_max - params.c_min)
    return scale * r + const


def detect_roots(mask: Volume, field: Volume, dbf: Volume | None = None,
                 params: RootDetectionParams = RootDetectionParams()) -> np.ndarray:
    """Sinks of the direction field, clustered. Returns an (k, 3) array of centroids."""
    fg = np.asarray(mask.data, bool)
    if dbf is None:
        dbf = euclidean_distance_transform(mask) if fg.any() else Volume(np.zeros(fg.shape, np.float32))
    seeds = np.argwhere(fg & (dbf.data >= params.min_radius)).astype(np.float64)
    if len(seeds) == 0:
        return np.zeros((0, 3))
    x = seeds.copy()
    active = np.ones(len(x), bool)
    sinks = np.full_like(x, np.nan)
    for i in range(params.n_steps + 1):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        v = sample_field(field, x[idx])
        done = params.step * np.linalg.norm(v, axis=1) < params.tolerance
        sinks[idx[done]] = x[idx[done]]
        active[idx[done]] = False
        if i < params.n_steps:
            move = idx[~done]
            x[move] += params.step * v[~done]
    found = sinks[~np.isnan(sinks[:, 0])]
    if len(found) == 0:
        return np.zeros((0, 3))
    return _cluster(found, params.cluster_radius)


def _cluster(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage clusters (points on a 0.5-voxel lattice), count-weighted centroids."""
    keys, inverse = np.unique(np.round(points * 2.0) / 2.0, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    pairs = cKDTree(keys).query_pairs(radius, output_type="ndarray")
    n = len(keys)
    adj = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = csgraph.connected_components(adj, directed=False)
    point_label = label[inverse]
    k = point_label.max() + 1
    counts = np.bincount(point_label, minlength=k)[:, None]
    sums = np.zeros((k, 3))
    np.add.at(sums, point_label, points)
    centroids = sums / counts
    first = np.full(k, len(points))
    np.minimum.at(first, point_label, np.arange(len(points)))
    return centroids[np.argsort(first, kind="stable")]


def snap_roots(fg: np.ndarray, roots, radius: float = SNAP_RADIUS) -> list[tuple[int, int, int]]:
    """Nearest foreground voxel for each root (within ``radius``), duplicates dropped."""
    coords = np.argwhere(fg)
    tree = cKDTree(coords)
    out: list[tuple[int, int, int]] = []
    for r in np.asarray(roots, dtype=np.float64).reshape(-1, 3):
        d, k = tree.query(r)
        if not np.isfinite(d) or d > radius:
            raise ValueError(f"root {tuple(r)} has no foreground voxel within {radius} voxels")
        # ties resolve to the lexicographically smallest voxel
        cand = tree.query_ball_point(r, d + 1e-9)
        v = min(tuple(int(c) for c in coords[j]) for j in cand)
        if v not in out:
            out.append(v)
    return out


class _Builder:
    def __init__(self):
        self.pos: list[tuple[float, float, float]] = []
        self.radius: list[float] = []
        self.parent: list[int] = []

    def add(self, pos, radius, parent):
        self.pos.append(tuple(float(c) for c in pos))
        self.radius.append(max(float(radius), 1e-3))
        self.parent.append(parent)
        return len(self.pos) - 1

    def graph(self) -> SkeletonGraph:
        n = len(self.pos)
        return SkeletonGraph(np.arange(n), np.array(self.pos).reshape(-1, 3), np.array(self.radius),
                             np.array(self.parent, np.int64))


def _provisional_root(sub_fg: np.ndarray, sub_dbf: np.ndarray) -> int:
    flat = np.where(sub_fg.ravel(), sub_dbf.ravel(), -np.inf)
    start = int(np.argmax(flat))
    hops = kernels.geodesic_bfs(sub_fg.astype(np.uint8), np.array([start], np.intp))
    return int(np.argmax(hops))


def _trace_component(sub_fg, sub_dbf, sub_vec, sub_cost, root_flat, offset, builder: _Builder,
                     penalty_params: PenaltyParams, masking: AdaptiveMaskParams):
    """Trace one connected component; returns builder node ids of its roots."""
    shape = sub_fg.shape
    fg_u8 = np.ascontiguousarray(sub_fg, dtype=np.uint8)
    flat_fg = sub_fg.ravel()
    dbf_f = sub_dbf.ravel()
    vec_f = sub_vec.reshape(-1, 3)
    angle_scale = penalty_params.scale if penalty_params.use_angle else 0.0
    roots = np.array(root_flat, np.intp)
    geo = kernels.geodesic_bfs(fg_u8, roots)
    searches = [
        kernels.penalty_dijkstra(fg_u8, sub_cost, sub_vec, int(r), angle_scale,
                                 float(penalty_params.exponent), TIEBREAK)
        for r in roots
    ]
    dist = np.stack([s[0] for s in searches])
    nxt = [s[1] for s in searches]
    members = np.flatnonzero(flat_fg)
    order = members[np.lexsort((members, -geo[members]))]
    comp_dbf = dbf_f[members].astype(np.float64)
    r_lo = masking.r_min if masking.r_min is not None else float(np.percentile(comp_dbf, 5))
    r_hi = masking.r_max if masking.r_max is not None else float(np.percentile(comp_dbf, 95))
    gated = masking.flow_gated and len(roots) > 1

    coords = np.stack(np.unravel_index(np.arange(flat_fg.size), shape), axis=1)
    node_of = np.full(flat_fg.size, -1, np.int64)
    processed = ~flat_fg.copy()
    root_nodes = []
    skeleton_vox: list[int] = []
    for r in roots:
        node_of[r] = builder.add(coords[r] + offset, dbf_f[r], -1)
        root_nodes.append(int(node_of[r]))
        processed[r] = True
        skeleton_vox.append(int(r))

    ptr = 0
    n_order = len(order)
    while True:
        while ptr < n_order and processed[order[ptr]]:
            ptr += 1
        if ptr >= n_order:
            break
        e = int(order[ptr])
        costs = dist[:, e]
        j = int(np.argmin(costs))
        if not np.isfinite(costs[j]):
            processed[e] = True
            continue
        step_to = nxt[j]
        new = []
        v = e
        while node_of[v] < 0:
            new.append(v)
            v = int(step_to[v])
        attach = v
        prev = int(node_of[attach])
        for vox in reversed(new):
            prev = builder.add(coords[vox] + offset, dbf_f[vox], prev)
            node_of[vox] = prev
        full = new + [attach]
        radii = dbf_f[full].astype(np.float64)
        window = ndimage.maximum_filter1d(radii, size=5, mode="nearest")
        processed[full] = True
        skeleton_vox.extend(new)
        if not new:
            continue
        dmask = np.array([mask_radius(r, masking, r_lo, r_hi) for r in window])
        _mark_processed(np.array(full), dmask, window + 1.0, coords, processed, vec_f,
                        np.array(skeleton_vox) if gated else None, shape)
    return root_nodes


def _mark_processed(path, dmask, gate, coords, processed, vec_f, skeleton, shape):
    """Mark unprocessed voxels within dmask of their nearest path voxel.

    With ``skeleton`` given, a voxel with a nonzero direction vector is only
    marked when its vector target lies within ``gate`` (of the same nearest
    path voxel) of the skeleton traced so far.
    """
    pts = coords[path]
    reach = int(np.ceil(dmask.max()))
    lo = np.maximum(pts.min(axis=0) - reach, 0)
    hi = np.minimum(pts.max(axis=0) + reach, np.asarray(shape) - 1)
    box = np.zeros(shape, bool)
    box[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
    cand = np.flatnonzero(box.ravel() & ~processed)
    if len(cand) == 0:
        return
    tree = cKDTree(pts)
    d, k = tree.query(coords[cand], distance_upper_bound=dmask.max() + 1e-9)
    ok = np.isfinite(d)
    ok[ok] = d[ok] <= dmask[k[ok]]
    cand, k = cand[ok], k[ok]
    if skeleton is not None and len(cand):
        v = vec_f[cand].astype(np.float64)
        moving = np.linalg.norm(v, axis=1) > 0
        target = coords[cand] + v
        dt, _ = cKDTree(coords[skeleton]).query(target)
        ok = ~moving | (dt <= gate[k])
        cand = cand[ok]
    processed[cand] = True


def skeletonize(mask: Volume, field: Volume, roots,
                penalty_params: PenaltyParams = PenaltyParams(),
                masking: AdaptiveMaskParams = AdaptiveMaskParams(),
                post: PostprocessParams = PostprocessParams(),
                dbf: Volume | None = None) -> SkeletonGraph:
    fg = np.asarray(mask.data, bool)
    if not fg.any():
        return SkeletonGraph.empty()
    roots = np.asarray(roots, dtype=np.float64).reshape(-1, 3)
    if len(roots) == 0:
        raise ValueError("skeletonize needs at least one root")
    if dbf is None:
        dbf = euclidean_distance_transform(mask)
    vmf_vol = vmf(field)
    ctx = PenaltyContext.from_fields(mask, dbf, vmf_vol)
    dbf_d = dbf.data.astype(np.float64)
    e = penalty_params.exponent
    node_cost = np.zeros(fg.shape)
    if penalty_params.use_dbf:
        node_cost += (1.0 - dbf_d / ctx.m1) ** e
    if penalty_params.use_vmf and ctx.m2 > 0:
        node_cost += (vmf_vol.data.astype(np.float64) / ctx.m2) ** e
    node_cost *= penalty_params.scale
    vec = field.data.astype(np.float64)

    labels = connected_components(mask)
    snapped = snap_roots(fg, roots)
    boxes = ndimage.find_objects(labels.labels)
    builder = _Builder()
    anchored: list[int] = []
    for k, sl in enumerate(boxes, start=1):
        sub_fg = labels.labels[sl] == k
        offset = np.array([s.start for s in sl])
        mine = [r for r in snapped if labels.labels[r] == k]
        sub_dbf = np.ascontiguousarray(dbf_d[sl])
        shape = sub_fg.shape
        if mine:
            root_flat = [int(np.ravel_multi_index(tuple(np.subtract(r, offset)), shape)) for r in mine]
        else:
            root_flat = [_provisional_root(sub_fg, sub_dbf)]
        nodes = _trace_component(
            sub_fg, sub_dbf, np.ascontiguousarray(vec[sl]), np.ascontiguousarray(node_cost[sl]),
            root_flat, offset, builder, penalty_params, masking,
        )
        if mine:
            anchored.extend(nodes)
    graph = classify_nodes(builder.graph())
    return postprocess_splits(graph, field, post, rooted=anchored)


def postprocess_splits(graph: SkeletonGraph, field: Volume, params: PostprocessParams = PostprocessParams(),
                       rooted=None) -> SkeletonGraph:
    """Attach rootless trees to nearby trees.

    ``rooted`` lists the node ids of anchored roots; every other tree counts
    as rootless. With ``rooted=None`` all trees are anchored and the graph is
    returned unchanged (re-classified).
    """
    g = classify_nodes(graph)
    if rooted is None or len(g) == 0:
        return g
    anchored_idx = {g.index_of(int(r)) for r in rooted}
    tree = g.tree_ids()
    uf = {int(t): int(t) for t in np.unique(tree)}

    def find(a):
        while uf[a] != a:
            uf[a] = uf[uf[a]]
            a = uf[a]
        return a

    anchored = {find(t) for t in anchored_idx}
    vecs = sample_field(field, g.pos)
    kd = cKDTree(g.pos)
    parent = g.parent.copy()
    merged = True
    while merged:
        merged = False
        for t in sorted(uf):
            if find(t) != t or t in anchored:
                continue
            comp = [v for v in range(len(g)) if find(int(tree[v])) == t]
            best = None
            for a in comp:
                for b in kd.query_ball_point(g.pos[a], params.max_distance):
                    if find(int(tree[b])) == t:
                        continue
                    if abs(g.radius[a] - g.radius[b]) >= params.max_radius_diff:
                        continue
                    if angle_between(vecs[a], vecs[b]) >= params.max_angle:
                        continue
                    d = float(np.linalg.norm(g.pos[a] - g.pos[b]))
                    key = (d, int(g.ids[a]), int(g.ids[b]))
                    if best is None or key < best[0]:
                        best = (key, a, b)
            if best is None:
                continue
            _, a, b = best
            parent = reroot(g.replace(parent=parent), a).parent.copy()
            parent[a] = b
            other = find(int(tree[b]))
            uf[t] = other
            if other in anchored:
                anchored.add(other)
            merged = True
    out = classify_nodes(g.replace(parent=parent))
    check_forest(out)
    return out
