"""Direction-vector fields: ground-truth generation, magnitude/angle queries, perturbations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from tubeskel.skelgraph import SkeletonGraph, classify_nodes
from tubeskel.volgrid import Volume


@dataclass(frozen=True)
class VectorFieldParams:
    step_size: float = 3.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("vector_noise", "image_noise"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not self.level >= 0:
            raise ValueError("perturbation level must be >= 0")


def _rng(seed: int) -> np.random.Generator:
    # Philox is counter-based: stream position depends only on (seed, draw index)
    return np.random.Generator(np.random.Philox(int(seed)))


def distance_to_root(graph: SkeletonGraph) -> np.ndarray:
    """Arc length from every node to the root of its tree."""
    out = np.full(len(graph), np.nan)
    out[graph.roots] = 0.0
    for start in range(len(graph)):
        chain = []
        v = start
        while np.isnan(out[v]):
            chain.append(v)
            v = int(graph.parent[v])
        for u in reversed(chain):
            p = int(graph.parent[u])
            out[u] = out[p] + float(np.linalg.norm(graph.pos[u] - graph.pos[p]))
    return out


def nearest_edges(fg_coords: np.ndarray, graph: SkeletonGraph, dims):
    """For each voxel, the nearest edge whose (interpolated) radius covers it.

    Returns ``(edge, t, d)``: edge row into ``segments`` (-1 if none covers the
    voxel), the closest-point parameter along child -> parent, and the distance.
    Each edge only inspects voxels in its bounding box; ties go to the lower
    edge index.
    """
    edges = [tuple(e) for e in graph.edges.tolist()]
    used = {v for e in edges for v in e}
    edges += [(v, v) for v in range(len(graph)) if v not in used]
    segments = np.array(edges, dtype=np.int64).reshape(-1, 2)
    n = len(fg_coords)
    best_d = np.full(n, np.inf)
    best_e = np.full(n, -1, np.int64)
    best_t = np.zeros(n)
    lookup = np.full(dims, -1, np.int64)
    lookup[tuple(fg_coords.T)] = np.arange(n)
    dims_a = np.asarray(dims)
    for k, (c, p) in enumerate(segments.tolist()):
        a, b = graph.pos[c], graph.pos[p]
        ra, rb = graph.radius[c], graph.radius[p]
        reach = max(ra, rb) + 1
        lo = np.maximum(np.floor(np.minimum(a, b) - reach), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(a, b) + reach), dims_a - 1).astype(int)
        sel = lookup[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1].ravel()
        sel = sel[sel >= 0]
        if len(sel) == 0:
            continue
        pts = fg_coords[sel].astype(np.float64)
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip((pts - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(sel))
        d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        r = ra + t * (rb - ra)
        win = (d <= r) & (d < best_d[sel])
        idx = sel[win]
        best_d[idx] = d[win]
        best_e[idx] = k
        best_t[idx] = t[win]
    return segments, best_e, best_t, best_d


def generate_vectors(mask: Volume, graph: SkeletonGraph, params: VectorFieldParams = VectorFieldParams()) -> Volume:
    """Per foreground voxel: vector to the point ``step_size`` rootward (along the
    graph) of its closest centre-line point; zero if no edge covers the voxel.
    The rootward walk clamps at the root."""
    if len(graph) == 0:
        raise ValueError("cannot generate vectors from an empty graph")
    g = classify_nodes(graph)
    fg = np.asarray(mask.data, bool)
    coords = np.argwhere(fg)
    out = np.zeros(fg.shape + (3,), np.float32)
    if len(coords) == 0:
        return Volume(out, mask.spacing)
    segments, edge, t, _ = nearest_edges(coords, g, fg.shape)
    hit = edge >= 0
    coords, edge, t = coords[hit], edge[hit], t[hit]
    c = segments[edge, 0]
    p = segments[edge, 1]
    dtr = distance_to_root(g)
    roots = g.tree_ids()
    seg_len = np.linalg.norm(g.pos[p] - g.pos[c], axis=1)
    target_d = dtr[p] + (1.0 - t) * seg_len - params.step_size
    target = g.pos[roots[c]].copy()
    live = target_d > 0
    cur = c[live]
    td = target_d[live]
    # climb until target_d falls on edge (cur -> parent(cur))
    while True:
        up = dtr[g.parent[cur]] > td
        if not up.any():
            break
        cur = np.where(up, g.parent[cur], cur)
    par = g.parent[cur]
    span = dtr[cur] - dtr[par]
    frac = np.divide(td - dtr[par], span, out=np.zeros_like(td), where=span > 0)
    target[live] = g.pos[par] + frac[:, None] * (g.pos[cur] - g.pos[par])
    out[tuple(coords.T)] = (target - coords).astype(np.float32)
    return Volume(out, mask.spacing)


def vmf(field: Volume) -> Volume:
    return Volume(np.linalg.norm(field.data.astype(np.float64), axis=-1).astype(np.float32), field.spacing)


def angle_between(v_p, r) -> float:
    """Angle in degrees in [0, 180]; 0 when either vector is zero."""
    a = np.asarray(v_p, dtype=np.float64)
    b = np.asarray(r, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return float(np.degrees(np.arccos(cos)))


def sample_field(field: Volume, points) -> np.ndarray:
    """Trilinear interpolation of a vec3 field at (z, y, x) points; zero outside the grid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).T
    data = field.data
    return np.stack(
        [ndimage.map_coordinates(data[..., k], pts, order=1, mode="constant", cval=0.0)
         for k in range(3)],
        axis=1,
    )


def random_unit_vectors(n: int, seed: int) -> np.ndarray:
    g = _rng(seed).standard_normal((n, 3))
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return g / norm


def perturb_vectors(field: Volume, spec: PerturbationSpec) -> Volume:
    """v -> v + level * |v| * u, u uniform on the sphere, one draw per voxel in C order."""
    if spec.kind != "vector_noise":
        raise ValueError("perturb_vectors needs a vector_noise spec")
    v = field.data.astype(np.float64).reshape(-1, 3)
    if spec.level == 0:
        return field
    u = random_unit_vectors(len(v), spec.seed)
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    out = v + spec.level * norm * u
    return Volume(out.reshape(field.data.shape).astype(np.float32), field.spacing)


def normalize_image(image: Volume) -> np.ndarray:
    data = image.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        raise ValueError("constant image: min-max normalization undefined")
    return (data - lo) / (hi - lo)


def perturb_image(image: Volume, spec: PerturbationSpec) -> Volume:
    """Min-max normalize, add N(0, level^2) per voxel, clip to [0, 1]."""
    if spec.kind != "image_noise":
        raise ValueError("perturb_image needs an image_noise spec")
    norm = normalize_image(image)
    noise = _rng(spec.seed).normal(0.0, 1.0, norm.shape) * spec.level
    return Volume(np.clip(norm + noise, 0.0, 1.0).astype(np.float32), image.spacing)


def threshold_segment(image: Volume, threshold: float) -> Volume:
    return Volume(np.asarray(image.data) >= threshold, image.spacing)
