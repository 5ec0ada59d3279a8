"""Seeded synthetic vessel forests: graph, mask and grayscale image."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from tubeskel.skelgraph import SkeletonGraph, classify_nodes, rasterize
from tubeskel.volgrid import Volume

MAX_JITTER_DEG = 30.0
ROOT_RETRIES = 200
SEGMENT_RETRIES = 12
VESSEL_RETRIES = 4


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (128, 128, 128)
    n_trees: int = 3
    max_depth: int = 3
    root_radius: float = 4.0
    taper: float = 0.7
    branch_prob: float = 0.7
    segment_length: tuple[float, float] = (8.0, 14.0)
    min_clearance: float = 2.0
    parallel_pair: bool = False
    segments_per_vessel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "segment_length", tuple(float(s) for s in self.segment_length))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("dims must be three positive integers")
        if self.n_trees < 1 or self.max_depth < 1 or self.segments_per_vessel < 1:
            raise ValueError("n_trees, max_depth and segments_per_vessel must be positive")
        if not self.root_radius > 0:
            raise ValueError("root_radius must be positive")
        if not 0 < self.taper <= 1:
            raise ValueError("taper must lie in (0, 1]")
        if not 0 <= self.branch_prob <= 1:
            raise ValueError("branch_prob must lie in [0, 1]")
        lo, hi = self.segment_length
        if not 0 < lo <= hi:
            raise ValueError("segment_length must be (min, max) with 0 < min <= max")
        if self.min_clearance < 0:
            raise ValueError("min_clearance must be non-negative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _unit(v):
    return v / np.linalg.norm(v)


def _jitter(direction, rng, max_deg):
    """Rotate ``direction`` by a random angle <= max_deg about a random perpendicular axis."""
    d = _unit(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(np.cross(d, helper))
    e2 = np.cross(d, e1)
    phi = rng.uniform(0, 2 * np.pi)
    axis = np.cos(phi) * e1 + np.sin(phi) * e2
    ang = np.radians(rng.uniform(0, max_deg))
    return _unit(np.cos(ang) * d + np.sin(ang) * axis)


def _seg_dist(p, a, b):
    """Distance from points p (n, 3) to segments a-b (m, 3) -> (n, m)."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0, denom, 1.0)
    rel = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("nmk,mk->nm", rel, ab) / denom, 0, 1)
    return np.linalg.norm(rel - t[..., None] * ab[None], axis=-1)


class _Forest:
    def __init__(self, cfg: PhantomConfig):
        self.cfg = cfg
        self.pos: list[np.ndarray] = []
        self.radius: list[float] = []
        self.parent: list[int] = []
        self.tree: list[int] = []
        # segments as (node_a, node_b)
        self.segs: list[tuple[int, int]] = []

    def add_node(self, pos, radius, parent, tree):
        self.pos.append(np.asarray(pos, float))
        self.radius.append(float(radius))
        self.parent.append(parent)
        self.tree.append(tree)
        if parent >= 0:
            self.segs.append((len(self.pos) - 1, parent))
        return len(self.pos) - 1

    def truncate(self, n_nodes):
        """Drop every node added after the first ``n_nodes``."""
        del self.pos[n_nodes:], self.radius[n_nodes:], self.parent[n_nodes:], self.tree[n_nodes:]
        self.segs = [s for s in self.segs if s[0] < n_nodes]

    def inside(self, pts, r):
        margin = r + 1.0
        hi = np.asarray(self.cfg.dims) - 1 - margin
        return bool(np.all(pts >= margin) and np.all(pts <= hi))

    def clear(self, a, b, r, tree, skip_node):
        """Whether segment a-b with radius r keeps clearance from existing vessels."""
        if not self.segs:
            return True
        n = max(int(np.ceil(np.linalg.norm(b - a) / 0.5)), 1)
        pts = a + np.linspace(0, 1, n + 1)[:, None] * (b - a)
        S = np.array(self.segs)
        P = np.array(self.pos)
        R = np.array(self.radius)
        T = np.array(self.tree)
        d = _seg_dist(pts, P[S[:, 0]], P[S[:, 1]])
        seg_r = np.maximum(R[S[:, 0]], R[S[:, 1]])
        need = r + seg_r + max(self.cfg.min_clearance, 1.0)
        if skip_node is not None:
            # vessels meeting at the start node may touch near it
            gap = max(self.cfg.min_clearance, 1.0)
            near_start = np.linalg.norm(pts - a, axis=1) <= self.radius[skip_node] + r + gap
            same = T[S[:, 0]] == tree
            incident = (S[:, 0] == skip_node) | (S[:, 1] == skip_node)
            own = (same[None, :] & near_start[:, None]) | incident[None, :]
            return bool(np.all((d >= need[None, :]) | own))
        return bool(np.all(d >= need[None, :]))


def _grow_tree(forest: _Forest, rng, tree: int, root_node: int, direction):
    cfg = forest.cfg
    queue = [(root_node, direction, 0)]
    while queue:
        start, d, gen = queue.pop(0)
        r = cfg.root_radius * cfg.taper**gen
        # a vessel is placed whole or not at all; partial stubs are rolled back
        mark = len(forest.pos)
        node = start
        for _vessel in range(VESSEL_RETRIES):
            node, d_end = _place_vessel(forest, rng, tree, start, d, r)
            if node != start:
                d = d_end
                break
            forest.truncate(mark)
        if node == start or gen + 1 >= cfg.max_depth:
            continue
        if rng.uniform() < cfg.branch_prob:
            spread = np.radians(rng.uniform(25.0, 45.0))
            helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            e1 = _unit(np.cross(d, helper))
            e2 = np.cross(d, e1)
            phi = rng.uniform(0, 2 * np.pi)
            axis = np.cos(phi) * e1 + np.sin(phi) * e2
            for sign in (1.0, -1.0):
                queue.append((node, _unit(np.cos(spread) * d + sign * np.sin(spread) * axis), gen + 1))
        else:
            queue.append((node, d, gen + 1))


def _place_vessel(forest: _Forest, rng, tree, start, d, r):
    cfg = forest.cfg
    node = start
    for _ in range(cfg.segments_per_vessel):
        for _attempt in range(SEGMENT_RETRIES):
            nd = _jitter(d, rng, MAX_JITTER_DEG)
            length = rng.uniform(*cfg.segment_length)
            a = forest.pos[node]
            b = a + length * nd
            if forest.inside(b, r) and forest.clear(a, b, r, tree, node):
                node = forest.add_node(b, r, node, tree)
                d = nd
                break
        else:
            return start, d
    return node, d


def _place_root(forest: _Forest, rng, tree: int):
    cfg = forest.cfg
    dims = np.asarray(cfg.dims, float)
    r = cfg.root_radius
    margin = r + 2.0
    for _ in range(ROOT_RETRIES):
        axis = int(rng.integers(0, 3))
        side = int(rng.integers(0, 2))
        p = np.array([rng.uniform(margin, dims[k] - 1 - margin) for k in range(3)])
        # keep roots away from the other faces so the trunk has room
        for k in range(3):
            if k != axis:
                p[k] = rng.uniform(dims[k] * 0.2, dims[k] * 0.8)
        p[axis] = margin if side == 0 else dims[axis] - 1 - margin
        inward = np.zeros(3)
        inward[axis] = 1.0 if side == 0 else -1.0
        if np.any(p < margin) or np.any(p > dims - 1 - margin):
            continue
        if forest.pos:
            d_nodes = np.linalg.norm(np.array(forest.pos) - p, axis=1)
            if np.any(d_nodes < r + np.array(forest.radius) + cfg.min_clearance):
                continue
            if not forest.clear(p, p, r, tree, None):
                continue
        return p, _jitter(inward, rng, 15.0)
    raise PhantomError(
        f"could not place {cfg.n_trees} roots at clearance {cfg.min_clearance} in dims {cfg.dims}"
    )


def _parallel_pair(cfg: PhantomConfig, forest: _Forest, rng):
    """Two straight vessels along z, thick and thin, surfaces ``min_clearance`` apart.

    Roots sit at the low-z end, vessels run to the last slice. The seed picks
    the side the thin vessel lies on, an integer shift of the pair and the
    start slice; centre lines stay on voxel centres so the rasterized gap is
    exactly the clearance.
    """
    nz, ny, nx = cfg.dims
    ra = cfg.root_radius
    rb = cfg.root_radius * cfg.taper
    sep = ra + rb + cfg.min_clearance
    side = [(0, 1), (0, -1), (1, 0), (-1, 0)][int(rng.integers(0, 4))]
    shift = rng.integers(-3, 4, size=2)
    z0 = float(np.ceil(ra) + 2 + rng.integers(0, 4))
    z1 = nz - 1.0
    ca = np.array([(ny - 1) // 2, (nx - 1) // 2], float) + shift - np.multiply(side, np.floor(sep / 2))
    cb = ca + np.multiply(side, sep)
    lo = np.minimum(ca - ra, cb - rb)
    hi = np.maximum(ca + ra, cb + rb)
    if z1 - z0 < 2 or np.any(lo < 1) or hi[0] > ny - 2 or hi[1] > nx - 2:
        raise PhantomError(f"dims {cfg.dims} too small for a parallel pair")
    for tree, (c, r) in enumerate([(ca, ra), (cb, rb)]):
        n = forest.add_node((z0, c[0], c[1]), r, -1, tree)
        length = z1 - z0
        steps = max(int(np.ceil(length / cfg.segment_length[1])), 1)
        for k in range(1, steps + 1):
            n = forest.add_node((z0 + length * k / steps, c[0], c[1]), r, n, tree)


def generate(cfg: PhantomConfig):
    """Return (graph, mask, image) for ``cfg``; identical configs give identical outputs."""
    if min(cfg.dims) < 2 * (cfg.root_radius + 2) + 1:
        raise PhantomError(f"dims {cfg.dims} too small for root radius {cfg.root_radius}")
    rng = np.random.Generator(np.random.Philox(int(cfg.seed)))
    forest = _Forest(cfg)
    if cfg.parallel_pair:
        _parallel_pair(cfg, forest, rng)
    else:
        for tree in range(cfg.n_trees):
            p, d = _place_root(forest, rng, tree)
            root = forest.add_node(p, cfg.root_radius, -1, tree)
            _grow_tree(forest, rng, tree, root, d)
    graph = classify_nodes(
        SkeletonGraph(
            np.arange(len(forest.pos)),
            np.array(forest.pos),
            np.array(forest.radius),
            np.array(forest.parent),
        )
    )
    mask = rasterize(graph, cfg.dims)
    image = Volume(ndimage.gaussian_filter(mask.data.astype(np.float32), sigma=1.0), mask.spacing)
    return graph, mask, image
