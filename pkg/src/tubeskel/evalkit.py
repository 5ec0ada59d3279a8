"""Graph-vs-graph evaluation: node matching, edge/topology/point/branch metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from tubeskel.skelgraph import (
    BRANCHING,
    INTERMEDIATE,
    LEAF,
    ROOT,
    UNCLASSIFIED,
    SkeletonGraph,
    betti_numbers,
    branches,
    classify_nodes,
    resample,
)

STRATEGIES = ("hierarchical", "greedy", "hungarian")
BRANCH_THRESHOLD = 0.8


@dataclass(frozen=True)
class MatchParams:
    step: float = 1.0
    d_max: float = 3.0
    strategy: str = "hierarchical"

    def __post_init__(self):
        if not self.step > 0 or not self.d_max > 0:
            raise ValueError("step and d_max must be > 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")


@dataclass(frozen=True)
class MatchResult:
    """Node correspondence from gt ids to pred ids."""

    pairs: dict
    unmatched_gt: frozenset
    unmatched_pred: frozenset

    @classmethod
    def from_index_pairs(cls, gt: SkeletonGraph, pred: SkeletonGraph, idx_pairs) -> "MatchResult":
        pairs = {int(gt.ids[g]): int(pred.ids[p]) for g, p in idx_pairs}
        return cls(
            pairs,
            frozenset(int(i) for i in gt.ids) - frozenset(pairs),
            frozenset(int(i) for i in pred.ids) - frozenset(pairs.values()),
        )

    def index_map(self, gt: SkeletonGraph, pred: SkeletonGraph) -> np.ndarray:
        """phi[g] = matched pred index or -1."""
        phi = np.full(len(gt), -1, np.int64)
        for g, p in self.pairs.items():
            phi[gt.index_of(g)] = pred.index_of(p)
        return phi


@dataclass
class MetricsReport:
    edge_tp: int = 0
    edge_fp: int = 0
    edge_fn: int = 0
    edge_f1: float = 0.0
    edge_precision: float = 0.0
    edge_recall: float = 0.0
    fm_abs: int = 0
    fs_abs: int = 0
    fm_rel: float = 0.0
    fs_rel: float = 0.0
    betti0_error: int = 0
    betti1_error: int = 0
    point_f1: float = 0.0
    point_precision: float = 0.0
    point_recall: float = 0.0
    radius_mae: float = 0.0
    branch_f1: float = 0.0
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        extras = d.pop("extras")
        d.update(extras)
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"


def _require_classified(*graphs):
    for g in graphs:
        if len(g) and (g.classes is None or np.any(g.classes == UNCLASSIFIED)):
            raise ValueError("matching needs classified graphs (run classify_nodes first)")


def _candidates(gt: SkeletonGraph, pred: SkeletonGraph, d_max: float):
    """(gt_idx, pred_idx, dist) arrays for all pairs within d_max."""
    if len(gt) == 0 or len(pred) == 0:
        empty = np.zeros(0, np.int64)
        return empty, empty, np.zeros(0)
    dm = cKDTree(gt.pos).sparse_distance_matrix(cKDTree(pred.pos), d_max, output_type="ndarray")
    g, p = dm["i"].astype(np.int64), dm["j"].astype(np.int64)
    d = np.linalg.norm(gt.pos[g] - pred.pos[p], axis=1)
    keep = d <= d_max
    return g[keep], p[keep], d[keep]


def _greedy(gt, pred, d_max):
    g, p, d = _candidates(gt, pred, d_max)
    order = np.lexsort((p, g, d))
    used_g, used_p, out = set(), set(), []
    for k in order:
        gi, pi = int(g[k]), int(p[k])
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append((gi, pi))
    return out


def _hungarian(gt, pred, d_max):
    g, p, d = _candidates(gt, pred, d_max)
    if len(g) == 0:
        return []
    ng, npred = len(gt), len(pred)
    adj = sparse.coo_matrix((np.ones(len(g)), (g, ng + p)), shape=(ng + npred, ng + npred))
    _, label = csgraph.connected_components(adj, directed=False)
    out = []
    block_of = label[g]
    for b in np.unique(block_of):
        sel = block_of == b
        gs, ps, ds = g[sel], p[sel], d[sel]
        ug, gi = np.unique(gs, return_inverse=True)
        up, pi = np.unique(ps, return_inverse=True)
        # big offset makes cardinality dominate, distance breaks ties
        offset = d_max * (min(len(ug), len(up)) + 1) + 1.0
        cost = np.zeros((len(ug), len(up)))
        allowed = np.zeros_like(cost, bool)
        cost[gi, pi] = ds - offset
        allowed[gi, pi] = True
        rows, cols = linear_sum_assignment(cost)
        out.extend((int(ug[r]), int(up[c])) for r, c in zip(rows, cols) if allowed[r, c])
    return sorted(out)


def _dfs_order(g: SkeletonGraph, root: int, children) -> list[int]:
    order, stack = [], [root]
    while stack:
        v = stack.pop()
        order.append(v)
        stack.extend(reversed(children[v]))
    return order


def _hierarchical(gt: SkeletonGraph, pred: SkeletonGraph, d_max: float):
    g, p, d = _candidates(gt, pred, d_max)
    cand: list[list[int]] = [[] for _ in range(len(gt))]
    same = gt.classes[g] == pred.classes[p]
    for k in np.lexsort((p, d, ~same)):
        cand[int(g[k])].append(int(p[k]))
    gt_tree = gt.tree_ids()
    roots = [int(r) for r in gt.roots]

    def root_key(r):
        ws = cand[r]
        has_same = any(pred.classes[w] == gt.classes[r] for w in ws)
        closest = min((float(np.linalg.norm(gt.pos[r] - pred.pos[w])) for w in ws), default=np.inf)
        return (not has_same, closest, r)

    roots.sort(key=root_key)
    children = gt.children()
    taken = np.zeros(len(pred), bool)
    # GT tree (root index) that each pred node has been matched into
    matched_tree = np.full(len(pred), -1, np.int64)
    out = []
    passes = [(ROOT,), (BRANCHING, LEAF), (INTERMEDIATE,)]
    for r in roots:
        order = _dfs_order(gt, r, children)
        for classes in passes:
            for v in order:
                if gt.classes[v] not in classes:
                    continue
                ws = [w for w in cand[v] if not taken[w]]
                if gt.classes[v] == ROOT:
                    ws = [w for w in ws if not (pred.parent[w] >= 0
                                               and matched_tree[pred.parent[w]] not in (-1, r))]
                if not ws:
                    continue
                if gt.classes[v] != ROOT:
                    pref = [w for w in ws if pred.parent[w] >= 0 and matched_tree[pred.parent[w]] == r]
                    if pref:
                        ws = pref
                w = ws[0]
                out.append((int(v), int(w)))
                taken[w] = True
                matched_tree[w] = int(gt_tree[v])
    return sorted(out)


def match(gt: SkeletonGraph, pred: SkeletonGraph, params: MatchParams = MatchParams()) -> MatchResult:
    _require_classified(gt, pred)
    fn = {"hierarchical": _hierarchical, "greedy": _greedy, "hungarian": _hungarian}[params.strategy]
    if len(gt) == 0 or len(pred) == 0:
        return MatchResult.from_index_pairs(gt, pred, [])
    return MatchResult.from_index_pairs(gt, pred, fn(gt, pred, params.d_max))


def _edge_set(g: SkeletonGraph) -> set:
    return {(min(a, b), max(a, b)) for a, b in g.edges.tolist()}


def _links(pred: SkeletonGraph, inv: np.ndarray, count_unmatched: bool):
    """Pred connections judged by the FP/FM rules, as (a, b) index pairs.

    Direct edges between matched nodes are kept as they are. Runs of
    unmatched nodes are contracted: a matched node whose parent is unmatched
    links to the first matched node rootward of it, and matched nodes hanging
    below an unmatched root region are chained together in index order. With
    ``count_unmatched`` every real edge is returned instead, unmatched
    endpoints included.
    """
    if count_unmatched:
        return [tuple(e) for e in pred.edges.tolist()]
    links = [(a, b) for a, b in pred.edges.tolist() if inv[a] >= 0 and inv[b] >= 0]
    hanging: dict[int, list[int]] = {}
    for c in np.nonzero(inv >= 0)[0].tolist():
        p = int(pred.parent[c])
        if p < 0 or inv[p] >= 0:
            continue
        while pred.parent[p] >= 0 and inv[p] < 0:
            p = int(pred.parent[p])
        if inv[p] >= 0:
            links.append((c, p))
        else:
            hanging.setdefault(p, []).append(c)
    for members in hanging.values():
        links.extend(zip(members[:-1], members[1:]))
    return links


def _classify_edges(gt, pred, m: MatchResult, count_unmatched: bool = False):
    """Return (tp, fn_edges, fp_links, links) in index space.

    fp_links are (a, b, va, vb) with va/vb the gt preimages (-1 if unmatched).
    """
    phi = m.index_map(gt, pred)
    inv = np.full(len(pred), -1, np.int64)
    inv[phi[phi >= 0]] = np.nonzero(phi >= 0)[0]
    pred_edges = _edge_set(pred)
    gt_edges = _edge_set(gt)
    tp, fn = 0, []
    for a, b in gt.edges.tolist():
        pa, pb = phi[a], phi[b]
        if pa < 0 or pb < 0:
            continue
        if (min(pa, pb), max(pa, pb)) in pred_edges:
            tp += 1
        else:
            fn.append((a, b))
    links = _links(pred, inv, count_unmatched)
    fp = []
    for a, b in links:
        va, vb = int(inv[a]), int(inv[b])
        if va < 0 or vb < 0 or (min(va, vb), max(va, vb)) not in gt_edges:
            fp.append((a, b, va, vb))
    return tp, fn, fp, links


def _f1(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return f1, precision, recall


def edge_metrics(gt, pred, m: MatchResult, count_unmatched: bool = False):
    """(tp, fp, fn, f1, precision, recall) on orientation-insensitive edges."""
    tp, fn, fp, _ = _classify_edges(gt, pred, m, count_unmatched)
    if len(gt.edges) == 0 and len(pred.edges) == 0:
        return 0, 0, 0, 1.0, 1.0, 1.0
    f1, precision, recall = _f1(tp, len(fp), len(fn))
    return tp, len(fp), len(fn), f1, precision, recall


def _euler_tour(g: SkeletonGraph):
    tin = np.zeros(len(g), np.int64)
    tout = np.zeros(len(g), np.int64)
    children = g.children()
    clock = 0
    for r in g.roots:
        stack = [(int(r), False)]
        while stack:
            v, done = stack.pop()
            if done:
                tout[v] = clock
                clock += 1
                continue
            tin[v] = clock
            clock += 1
            stack.append((v, True))
            stack.extend((c, False) for c in reversed(children[v]))
    return tin, tout


def false_merges(gt, pred, m: MatchResult, count_unmatched: bool = False):
    """(count, list of FM pred edges as id pairs)."""
    _, _, fp, _ = _classify_edges(gt, pred, m, count_unmatched)
    tin, tout = _euler_tour(gt)

    def is_anc(u, v):
        return tin[u] <= tin[v] and tout[v] <= tout[u]

    fm = []
    for a, b, va, vb in fp:
        if va < 0 or vb < 0 or not (is_anc(va, vb) or is_anc(vb, va)):
            fm.append((int(pred.ids[a]), int(pred.ids[b])))
    return len(fm), fm


class _UnionFind:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, a):
        while self.p[a] != a:
            self.p[a] = self.p[self.p[a]]
            a = self.p[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.p[max(ra, rb)] = min(ra, rb)
        return True


def false_splits(gt, pred, m: MatchResult, count_unmatched: bool = False, with_check: bool = False):
    """FN edges whose restoration joins two components of pred minus its false merges.

    FN edges are restored one by one in gt edge order, so each component join
    is counted once. ``with_check`` also returns the component-count
    difference between pred-minus-FM and gt over the matched regions.
    """
    _, fn, _, links = _classify_edges(gt, pred, m, count_unmatched)
    _, fm = false_merges(gt, pred, m, count_unmatched)
    fm_set = {(min(a, b), max(a, b)) for a, b in fm}
    uf = _UnionFind(len(pred))
    for a, b in links:
        ia, ib = int(pred.ids[a]), int(pred.ids[b])
        if (min(ia, ib), max(ia, ib)) not in fm_set:
            uf.union(a, b)
    phi = m.index_map(gt, pred)
    if with_check:
        matched_pred = phi[phi >= 0]
        p_components = len({uf.find(int(p)) for p in matched_pred})
        ug = _UnionFind(len(gt))
        for a, b in gt.edges.tolist():
            ug.union(a, b)
        g_components = len({ug.find(int(v)) for v in np.nonzero(phi >= 0)[0]})
    count = 0
    for a, b in fn:
        if uf.union(int(phi[a]), int(phi[b])):
            count += 1
    if with_check:
        return count, max(p_components - g_components, 0)
    return count


def point_metrics(gt, pred, d_max: float = 3.0):
    """(precision, recall, f1, radius_mae) under greedy nearest-neighbour matching."""
    if len(gt) == 0 or len(pred) == 0:
        return 0.0, 0.0, 0.0, 0.0
    pairs = _greedy(gt, pred, d_max)
    n = len(pairs)
    precision = n / len(pred)
    recall = n / len(gt)
    f1 = 2 * precision * recall / (precision + recall) if n else 0.0
    mae = float(np.mean([abs(gt.radius[g] - pred.radius[p]) for g, p in pairs])) if n else 0.0
    return precision, recall, f1, mae


def branch_metrics(gt, pred, m: MatchResult) -> float:
    gb = branches(gt)
    pb = branches(pred)
    if not gb and not pb:
        return 1.0
    if not gb or not pb:
        return 0.0
    phi = m.index_map(gt, pred)
    membership: dict[int, list[int]] = {}
    for k, path in enumerate(pb):
        for v in path:
            membership.setdefault(v, []).append(k)
    tp = 0
    claimed = set()
    for path in gb:
        counts = np.zeros(len(pb), np.int64)
        for v in path:
            if phi[v] >= 0:
                for k in membership.get(int(phi[v]), ()):
                    counts[k] += 1
        best = int(np.argmax(counts))
        if counts[best] >= BRANCH_THRESHOLD * len(path):
            tp += 1
            claimed.add(best)
    precision = len(claimed) / len(pb)
    recall = tp / len(gb)
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def betti_errors(gt, pred) -> tuple[int, int]:
    g0, g1 = betti_numbers(gt)
    p0, p1 = betti_numbers(pred)
    return abs(g0 - p0), abs(g1 - p1)


def evaluate(gt: SkeletonGraph, pred: SkeletonGraph, params: MatchParams = MatchParams(),
             count_unmatched: bool = False) -> MetricsReport:
    """Resample both graphs at ``params.step`` and compute every metric.

    Edge and topology metrics use ``params.strategy``; point and branch
    metrics use greedy nearest-neighbour matching.
    """
    g = classify_nodes(resample(classify_nodes(gt), params.step)) if len(gt) else gt
    p = classify_nodes(resample(classify_nodes(pred), params.step)) if len(pred) else pred
    m = match(g, p, params)
    tp, fp, fn, f1, precision, recall = edge_metrics(g, p, m, count_unmatched)
    fm, _ = false_merges(g, p, m, count_unmatched)
    fs, fs_check = false_splits(g, p, m, count_unmatched, with_check=True)
    b0, b1 = betti_errors(gt, pred)
    pp, pr, pf, mae = point_metrics(g, p, params.d_max)
    greedy = m if params.strategy == "greedy" else match(g, p, MatchParams(params.step, params.d_max, "greedy"))
    n_pred_edges = len(p.edges)
    return MetricsReport(
        edge_tp=tp, edge_fp=fp, edge_fn=fn, edge_f1=f1, edge_precision=precision, edge_recall=recall,
        fm_abs=fm, fs_abs=fs,
        fm_rel=fm / n_pred_edges if n_pred_edges else 0.0,
        fs_rel=fs / n_pred_edges if n_pred_edges else 0.0,
        betti0_error=b0, betti1_error=b1,
        point_f1=pf, point_precision=pp, point_recall=pr, radius_mae=mae,
        branch_f1=branch_metrics(g, p, greedy),
        extras={"fs_component_check": fs_check, "matched_nodes": len(m.pairs),
                "gt_nodes": len(g), "pred_nodes": len(p)},
    )
