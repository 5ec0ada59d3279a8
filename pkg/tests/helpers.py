"""Graph and volume builders shared by the tests."""
import numpy as np

from tubeskel.skelgraph import SkeletonGraph, classify_nodes, rasterize


def chain(points, radius=1.0, ids=None):
    """Classified single chain; the first point is the root."""
    pts = np.asarray(points, float)
    n = len(pts)
    rad = np.broadcast_to(np.asarray(radius, float), (n,))
    return classify_nodes(SkeletonGraph(np.arange(n) if ids is None else ids, pts, rad, np.arange(-1, n - 1)))


def straight_tube(length=30, radius=3.0, dims=(40, 21, 21), root_high=True):
    """Tube along z through the volume centre; root at max z when ``root_high``."""
    cy, cx = dims[1] // 2, dims[2] // 2
    z0, z1 = (dims[0] - length) // 2, (dims[0] - length) // 2 + length
    zs = np.arange(z1, z0 - 1, -1) if root_high else np.arange(z0, z1 + 1)
    g = chain([[z, cy, cx] for z in zs], radius)
    return g, rasterize(g, dims)


def random_forest(rng, n_max=12, n_trees=None):
    """Random classified forest with integer-ish positions spread over a box."""
    n = int(rng.integers(1, n_max + 1))
    parent = np.full(n, -1)
    k = n_trees or int(rng.integers(1, 3))
    for v in range(k, n):
        parent[v] = int(rng.integers(0, v))
    pos = rng.uniform(0, 20, (n, 3))
    return classify_nodes(SkeletonGraph(np.arange(n), pos, rng.uniform(0.5, 3, n), parent))


GOLDEN_POS = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 1, 0], [4, 1, 0], [3, -1, 0], [4, -1, 0]], float)
GOLDEN_GT = [-1, 0, 1, 2, 3, 2, 5]


def g_of(pos, parent, radius=1.0):
    n = len(parent)
    return classify_nodes(SkeletonGraph(np.arange(n), np.asarray(pos, float), np.full(n, radius), parent))


def golden_case(case):
    """Seven-node fork with a reattached branch ("b"), a shortcut to the fork ("c") or an extra node ("d")."""
    gt = g_of(GOLDEN_POS, GOLDEN_GT)
    if case == "b":
        return gt, g_of(GOLDEN_POS, [-1, 0, 1, 2, 6, 2, 5])
    if case == "c":
        return gt, g_of(GOLDEN_POS, [-1, 0, 1, 2, 2, 2, 5])
    pos8 = np.vstack([GOLDEN_POS, [[2.5, 0.5, 1.0]]])
    return gt, g_of(pos8, [-1, 0, 1, 7, 3, 2, 5, 2])


def crossing_case():
    gpos = [[z, 0, 0] for z in range(6)] + [[z, 0, 2] for z in range(6)]
    par = [-1, 0, 1, 2, 3, 4, -1, 6, 7, 8, 9, 10]
    ppos = ([[0, 0, 0]] + [[z, 0.5, 1.9] for z in range(1, 5)] + [[5, 0, 0]]
            + [[0, 0, 2]] + [[z, -0.5, 0.1] for z in range(1, 5)] + [[5, 0, 2]])
    return g_of(gpos, par), g_of(ppos, par)


def vandalize(g, k, rng):
    """Delete k edges whose child ends are pairwise non-adjacent."""
    cands = [v for v in range(len(g)) if g.parent[v] >= 0]
    rng.shuffle(cands)
    chosen = []
    for v in cands:
        if all(abs(v - u) > 2 and g.parent[v] != u and g.parent[u] != v for u in chosen):
            chosen.append(v)
        if len(chosen) == k:
            break
    parent = g.parent.copy()
    parent[chosen] = -1
    return classify_nodes(g.replace(parent=parent, classes=None))


# criterion id -> (passed, detail); printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(cid: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (bool(passed), detail)
    print(f"criterion {cid}: {'PASS' if passed else 'FAIL'}  {detail}")
