"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built, or when ``TUBESKEL_PURE_PYTHON=1``.
Same signatures, same results (including tie-breaking).
"""
from __future__ import annotations

import heapq
import math
from collections import deque

import numpy as np

_OFFSETS = [
    (a, b, c)
    for a in (-1, 0, 1)
    for b in (-1, 0, 1)
    for c in (-1, 0, 1)
    if (a, b, c) != (0, 0, 0)
]
_NORMS = [math.sqrt(a * a + b * b + c * c) for a, b, c in _OFFSETS]


def edt_pass(f: np.ndarray, w: float) -> None:
    n = f.shape[1]
    w2 = w * w
    inf = math.inf
    for i in range(f.shape[0]):
        row = f[i].tolist()
        v: list[int] = []
        z: list[float] = []
        for q, fq in enumerate(row):
            if fq == inf:
                continue
            if not v:
                v.append(q)
                z[:] = [-inf, inf]
                continue
            while True:
                vk = v[-1]
                s = ((fq + w2 * q * q) - (row[vk] + w2 * vk * vk)) / (2.0 * w2 * (q - vk))
                if s <= z[len(v) - 1]:
                    v.pop()
                    z.pop()
                else:
                    break
            z[len(v)] = s
            v.append(q)
            z.append(inf)
        if not v:
            continue
        j = 0
        out = [0.0] * n
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = q - v[j]
            out[q] = w2 * d * d + row[v[j]]
        f[i, :] = out


def penalty_dijkstra(fg, node_cost, vec, root, angle_scale, exponent, tiebreak):
    nz, ny, nx = fg.shape
    total = nz * ny * nx
    fgf = np.asarray(fg, dtype=bool).ravel()
    cost_f = np.asarray(node_cost, dtype=np.float64).ravel()
    vec_f = np.asarray(vec, dtype=np.float64).reshape(total, 3)
    if root < 0 or root >= total:
        raise ValueError("root index out of range")
    if not fgf[root]:
        raise ValueError("root is not a foreground voxel")
    dist = np.full(total, np.inf)
    nxt = np.full(total, -1, dtype=np.intp)
    settled = np.zeros(total, dtype=bool)
    vnorm = np.sqrt((vec_f**2).sum(axis=1))
    dist[root] = 0.0
    heap = [(0.0, root)]
    while heap:
        du, u = heapq.heappop(heap)
        if settled[u] or du > dist[u]:
            continue
        settled[u] = True
        uz, rem = divmod(u, ny * nx)
        uy, ux = divmod(rem, nx)
        base = cost_f[u]
        for (a, b, c), on in zip(_OFFSETS, _NORMS):
            pz, py, px = uz + a, uy + b, ux + c
            if not (0 <= pz < nz and 0 <= py < ny and 0 <= px < nx):
                continue
            p = (pz * ny + py) * nx + px
            if not fgf[p] or settled[p]:
                continue
            cost = base + tiebreak * on
            if angle_scale != 0.0 and vnorm[p] > 0.0:
                vz, vy, vx = vec_f[p]
                cosv = -(vz * a + vy * b + vx * c) / (vnorm[p] * on)
                cosv = min(1.0, max(-1.0, cosv))
                theta = math.acos(cosv) * 180.0 / math.pi
                cost += angle_scale * (theta / 180.0) ** exponent
            nd = du + cost
            if nd < dist[p]:
                dist[p] = nd
                nxt[p] = u
                heapq.heappush(heap, (nd, p))
    return dist, nxt


def geodesic_bfs(fg, sources):
    nz, ny, nx = fg.shape
    fgf = np.asarray(fg, dtype=bool).ravel()
    hops = np.full(nz * ny * nx, -1, dtype=np.int32)
    queue: deque[int] = deque()
    for s in np.asarray(sources).tolist():
        if hops[s] == -1:
            hops[s] = 0
            queue.append(s)
    while queue:
        u = queue.popleft()
        uz, rem = divmod(u, ny * nx)
        uy, ux = divmod(rem, nx)
        h = hops[u] + 1
        for a, b, c in _OFFSETS:
            pz, py, px = uz + a, uy + b, ux + c
            if not (0 <= pz < nz and 0 <= py < ny and 0 <= px < nx):
                continue
            p = (pz * ny + py) * nx + px
            if fgf[p] and hops[p] == -1:
                hops[p] = h
                queue.append(p)
    return hops
