# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: EDT line passes, penalty shortest paths, geodesic BFS.

Signatures mirror :mod:`tubeskel._fallback` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, acos, pow, INFINITY, M_PI

cnp.import_array()


def edt_pass(double[:, ::1] f, double w):
    """In-place 1D squared-distance transform along the last axis of ``f``.

    ``f`` holds squared distances (``inf`` where unknown); ``w`` is the sample
    spacing along the axis.
    """
    cdef Py_ssize_t nlines = f.shape[0]
    cdef Py_ssize_t n = f.shape[1]
    cdef Py_ssize_t i, q, k, j
    cdef double w2 = w * w
    cdef double s, fq, fv, d
    cdef double[::1] out = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] v = np.empty(n, dtype=np.intp)
    cdef double[::1] z = np.empty(n + 1, dtype=np.float64)

    for i in range(nlines):
        k = -1
        for q in range(n):
            fq = f[i, q]
            if fq == INFINITY:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -INFINITY
                z[1] = INFINITY
                continue
            while True:
                fv = f[i, v[k]]
                s = ((fq + w2 * q * q) - (fv + w2 * v[k] * v[k])) / (2.0 * w2 * (q - v[k]))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = INFINITY
        if k < 0:
            continue
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = <double>(q - v[j])
            out[q] = w2 * d * d + f[i, v[j]]
        for q in range(n):
            f[i, q] = out[q]


cdef inline bint _less(double ka, Py_ssize_t ia, double kb, Py_ssize_t ib) nogil:
    return ka < kb or (ka == kb and ia < ib)


cdef void _sift_up(double* key, Py_ssize_t* item, Py_ssize_t* where, Py_ssize_t pos) nogil:
    cdef double k = key[pos]
    cdef Py_ssize_t it = item[pos]
    cdef Py_ssize_t parent
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(k, it, key[parent], item[parent]):
            key[pos] = key[parent]
            item[pos] = item[parent]
            where[item[pos]] = pos
            pos = parent
        else:
            break
    key[pos] = k
    item[pos] = it
    where[it] = pos


cdef void _sift_down(double* key, Py_ssize_t* item, Py_ssize_t* where, Py_ssize_t pos,
                     Py_ssize_t size) nogil:
    cdef double k = key[pos]
    cdef Py_ssize_t it = item[pos]
    cdef Py_ssize_t child
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _less(key[child + 1], item[child + 1], key[child], item[child]):
            child += 1
        if _less(key[child], item[child], k, it):
            key[pos] = key[child]
            item[pos] = item[child]
            where[item[pos]] = pos
            pos = child
        else:
            break
    key[pos] = k
    item[pos] = it
    where[it] = pos


def penalty_dijkstra(const unsigned char[:, :, ::1] fg, const double[:, :, ::1] node_cost,
                     const double[:, :, :, ::1] vec, Py_ssize_t root,
                     double angle_scale, double exponent, double tiebreak):
    """Lowest-cost paths from every foreground voxel to ``root``.

    A move p -> n costs ``node_cost[n] + angle_scale * (theta(v_p, n - p) / 180) ** exponent
    + tiebreak * |n - p|``. Returns ``(dist, nxt)`` over flat indices; ``nxt[p]`` is the
    next voxel on the optimal path from ``p`` toward the root (-1 at the root and for
    unreachable voxels).
    """
    cdef Py_ssize_t nz = fg.shape[0], ny = fg.shape[1], nx = fg.shape[2]
    cdef Py_ssize_t total = nz * ny * nx
    dist_arr = np.full(total, np.inf, dtype=np.float64)
    nxt_arr = np.full(total, -1, dtype=np.intp)
    key_arr = np.empty(total, dtype=np.float64)
    item_arr = np.empty(total, dtype=np.intp)
    where_arr = np.full(total, -1, dtype=np.intp)
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t[::1] nxt = nxt_arr
    cdef double[::1] key = key_arr
    cdef Py_ssize_t[::1] item = item_arr
    cdef Py_ssize_t[::1] where = where_arr

    cdef int[26] oz, oy, ox
    cdef double[26] onorm
    cdef int m = 0, a, b, c
    for a in range(-1, 2):
        for b in range(-1, 2):
            for c in range(-1, 2):
                if a == 0 and b == 0 and c == 0:
                    continue
                oz[m] = a
                oy[m] = b
                ox[m] = c
                onorm[m] = sqrt(<double>(a * a + b * b + c * c))
                m += 1

    cdef Py_ssize_t size = 0
    cdef Py_ssize_t u, p, uz, uy, ux, pz, py, px, rem
    cdef double du, cost, nd, vz, vy, vx, vn, cosv, theta
    cdef int o
    if root < 0 or root >= total:
        raise ValueError("root index out of range")
    if not fg[root // (ny * nx), (root // nx) % ny, root % nx]:
        raise ValueError("root is not a foreground voxel")

    dist[root] = 0.0
    key[0] = 0.0
    item[0] = root
    where[root] = 0
    size = 1
    while size > 0:
        u = item[0]
        du = key[0]
        where[u] = -2
        size -= 1
        if size > 0:
            key[0] = key[size]
            item[0] = item[size]
            where[item[0]] = 0
            _sift_down(&key[0], &item[0], &where[0], 0, size)
        uz = u // (ny * nx)
        rem = u - uz * ny * nx
        uy = rem // nx
        ux = rem - uy * nx
        for o in range(26):
            pz = uz + oz[o]
            py = uy + oy[o]
            px = ux + ox[o]
            if pz < 0 or pz >= nz or py < 0 or py >= ny or px < 0 or px >= nx:
                continue
            if not fg[pz, py, px]:
                continue
            p = (pz * ny + py) * nx + px
            if where[p] == -2:
                continue
            cost = node_cost[uz, uy, ux] + tiebreak * onorm[o]
            if angle_scale != 0.0:
                vz = vec[pz, py, px, 0]
                vy = vec[pz, py, px, 1]
                vx = vec[pz, py, px, 2]
                vn = sqrt(vz * vz + vy * vy + vx * vx)
                if vn > 0.0:
                    # walk direction p -> u is the negated offset
                    cosv = -(vz * oz[o] + vy * oy[o] + vx * ox[o]) / (vn * onorm[o])
                    if cosv > 1.0:
                        cosv = 1.0
                    elif cosv < -1.0:
                        cosv = -1.0
                    theta = acos(cosv) * 180.0 / M_PI
                    cost += angle_scale * pow(theta / 180.0, exponent)
            nd = du + cost
            if nd < dist[p]:
                dist[p] = nd
                nxt[p] = u
                if where[p] == -1:
                    key[size] = nd
                    item[size] = p
                    where[p] = size
                    size += 1
                    _sift_up(&key[0], &item[0], &where[0], size - 1)
                else:
                    key[where[p]] = nd
                    _sift_up(&key[0], &item[0], &where[0], where[p])
    return dist_arr, nxt_arr


def geodesic_bfs(const unsigned char[:, :, ::1] fg, cnp.intp_t[::1] sources):
    """Unit-weight 26-neighbour hop distance from a set of source voxels (-1 = unreached)."""
    cdef Py_ssize_t nz = fg.shape[0], ny = fg.shape[1], nx = fg.shape[2]
    cdef Py_ssize_t total = nz * ny * nx
    hops_arr = np.full(total, -1, dtype=np.int32)
    queue_arr = np.empty(total, dtype=np.intp)
    cdef int[::1] hops = hops_arr
    cdef Py_ssize_t[::1] queue = queue_arr
    cdef Py_ssize_t head = 0, tail = 0, i, u, uz, uy, ux, rem, pz, py, px, p
    cdef int a, b, c
    for i in range(sources.shape[0]):
        u = sources[i]
        if hops[u] == -1:
            hops[u] = 0
            queue[tail] = u
            tail += 1
    while head < tail:
        u = queue[head]
        head += 1
        uz = u // (ny * nx)
        rem = u - uz * ny * nx
        uy = rem // nx
        ux = rem - uy * nx
        for a in range(-1, 2):
            pz = uz + a
            if pz < 0 or pz >= nz:
                continue
            for b in range(-1, 2):
                py = uy + b
                if py < 0 or py >= ny:
                    continue
                for c in range(-1, 2):
                    px = ux + c
                    if px < 0 or px >= nx:
                        continue
                    if not fg[pz, py, px]:
                        continue
                    p = (pz * ny + py) * nx + px
                    if hops[p] == -1:
                        hops[p] = hops[u] + 1
                        queue[tail] = p
                        tail += 1
    return hops_arr
