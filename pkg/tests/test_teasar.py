import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain, straight_tube
from tubeskel.evalkit import false_merges, match, MatchParams
from tubeskel.flowfield import generate_vectors, vmf
from tubeskel.phantom import PhantomConfig, generate
from tubeskel.skelgraph import SkeletonGraph, betti_numbers, classify_nodes, check_forest, resample
from tubeskel.teasar import (
    AdaptiveMaskParams,
    PenaltyContext,
    PenaltyParams,
    RootDetectionParams,
    detect_roots,
    mask_radius,
    penalty,
    penalty_value,
    postprocess_splits,
    skeletonize,
    snap_roots,
)
from tubeskel.volgrid import Volume, euclidean_distance_transform


def eq_penalty(dbf, vmf_n, theta, m1, m2, scale=1e6, e=16):
    """Reference move penalty written out term by term."""
    t1 = math.pow(1.0 - dbf / m1, e)
    t2 = math.pow(vmf_n / m2, e) if m2 > 0 else 0.0
    t3 = math.pow(theta / 180.0, e)
    return scale * (t1 + t2 + t3)


def test_penalty_examples():
    ctx = PenaltyContext(5.0, 4.0)
    assert penalty_value(0.0, 0.0, 0.0, ctx) == 1_000_000.0
    only_angle = PenaltyParams(use_dbf=False, use_vmf=False)
    assert penalty_value(3.0, 2.0, 180.0, ctx, only_angle) == pytest.approx(1_000_000.0, rel=1e-15)


def test_penalty_matches_reference_on_random_triples():
    rng = np.random.default_rng(0)
    m1, m2 = 7.3**1.01, 4.1**1.01
    dbf = rng.uniform(0, 7.3, 10_000)
    v = rng.uniform(0, 4.1, 10_000)
    th = rng.uniform(0, 180, 10_000)
    got = penalty_value(dbf, v, th, PenaltyContext(m1, m2))
    want = np.array([eq_penalty(a, b, c, m1, m2) for a, b, c in zip(dbf, v, th)])
    np.testing.assert_allclose(got, want, rtol=1e-10)


def _toy_volumes(rng):
    mask = np.zeros((5, 5, 5), bool)
    mask[1:4, 1:4, 1:4] = True
    vec = rng.normal(size=(5, 5, 5, 3)).astype(np.float32)
    vec[~mask] = 0
    m = Volume(mask)
    field = Volume(vec)
    dbf = euclidean_distance_transform(m)
    return m, field, dbf


def test_penalty_on_volumes():
    rng = np.random.default_rng(1)
    m, field, dbf = _toy_volumes(rng)
    ctx = PenaltyContext.from_fields(m, dbf, vmf(field))
    p, n = (2, 2, 2), (3, 1, 2)
    vp = field.data[p].astype(float)
    r = np.subtract(n, p)
    theta = math.degrees(math.acos(float(np.clip(vp @ r / (np.linalg.norm(vp) * np.linalg.norm(r)), -1, 1))))
    want = eq_penalty(float(dbf.data[n]), float(np.linalg.norm(field.data[n].astype(float))), theta, ctx.m1, ctx.m2)
    assert penalty(p, n, dbf, field, ctx) == pytest.approx(want, rel=1e-10)
    with pytest.raises(ValueError):
        penalty(p, (0, 0, 0), dbf, field, ctx)
    with pytest.raises(ValueError):
        penalty(p, p, dbf, field, ctx)


def test_context_exponents():
    rng = np.random.default_rng(2)
    m, field, dbf = _toy_volumes(rng)
    ctx = PenaltyContext.from_fields(m, dbf, vmf(field))
    max_dbf = float(dbf.data[m.data].max())
    max_vmf = float(np.linalg.norm(field.data[m.data].astype(np.float64), axis=1).max())
    assert ctx.m1 == max_dbf**1.01
    assert ctx.m2 == pytest.approx(max_vmf**1.01, rel=1e-6)
    assert ctx.m3 == 180.0
    assert ctx.m1 > max_dbf and ctx.m2 > max_vmf


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.0, 4.5), st.floats(0.0, 179.0), st.floats(0.01, 0.5))
def test_penalty_monotone(m1_base, dbf, theta, delta):
    ctx = PenaltyContext((m1_base + 5) ** 1.01, 3.0)
    only_dbf = PenaltyParams(use_vmf=False, use_angle=False, exponent=4)
    assert penalty_value(dbf + delta, 1.0, theta, ctx, only_dbf) < penalty_value(dbf, 1.0, theta, ctx, only_dbf)
    only_angle = PenaltyParams(use_dbf=False, use_vmf=False, exponent=4)
    assert penalty_value(dbf, 1.0, theta + delta, ctx, only_angle) > penalty_value(dbf, 1.0, theta, ctx, only_angle)


def test_penalty_params_validation():
    for bad in (dict(scale=0), dict(exponent=3), dict(exponent=0)):
        with pytest.raises(ValueError):
            PenaltyParams(**bad)


def test_mask_radius():
    p = AdaptiveMaskParams(r_min=1.0, r_max=5.0)
    assert mask_radius(1.0, p) == pytest.approx(1.1 * 1.0 + 2.0)
    assert mask_radius(5.0, p) == pytest.approx(1.5 * 5.0 + 10.0)
    alpha = (3.0 - 1.0) / 4.0
    assert mask_radius(3.0, p) == pytest.approx((1.1 + alpha * 0.4) * 3.0 + 2.0 + alpha * 8.0)
    assert mask_radius(0.2, p) == pytest.approx(1.1 * 0.2 + 2.0)
    with pytest.raises(ValueError):
        AdaptiveMaskParams(r_min=3, r_max=2)


def test_detect_roots_straight_tube():
    g, mask = straight_tube(radius=4.0, dims=(40, 21, 21))
    field = generate_vectors(mask, g)
    found = detect_roots(mask, field)
    assert len(found) == 1
    assert np.linalg.norm(found[0] - g.pos[g.roots[0]]) <= 2.0


def test_detect_roots_zero_field():
    mask = np.zeros((20, 20, 20), bool)
    mask[2:9, 2:9, 2:9] = True
    mask[12:19, 12:19, 12:19] = True
    m = Volume(mask)
    found = detect_roots(m, Volume(np.zeros((20, 20, 20, 3), np.float32)), params=RootDetectionParams(min_radius=1.0))
    assert len(found) == 2
    np.testing.assert_allclose(sorted(found.tolist()), [[5, 5, 5], [15, 15, 15]])


def test_detect_roots_multi_tree():
    g, mask, _ = generate(PhantomConfig(seed=3))
    found = detect_roots(mask, generate_vectors(mask, g))
    assert len(found) >= 3
    for r in g.pos[g.roots]:
        assert np.linalg.norm(found - r, axis=1).min() <= 2.0


def test_snap_roots():
    fg = np.zeros((10, 10, 10), bool)
    fg[5, 5, 5:8] = True
    assert snap_roots(fg, [[5.2, 5.0, 4.1]]) == [(5, 5, 5)]
    # ties go to the lexicographically smallest voxel
    assert snap_roots(fg, [[5.0, 5.0, 6.5]]) == [(5, 5, 6)]
    with pytest.raises(ValueError):
        snap_roots(fg, [[0.0, 0.0, 0.0]])


def test_skeletonize_straight_tube():
    g, mask = straight_tube()
    field = generate_vectors(mask, g)
    s = skeletonize(mask, field, g.pos[g.roots])
    assert betti_numbers(s) == (1, 0)
    assert (s.classes == 3).sum() == 0
    centre = g.pos[0, 1:]
    assert np.linalg.norm(s.pos[:, 1:] - centre, axis=1).max() <= 1.5
    assert mask.data[tuple(np.rint(s.pos).astype(int).T)].all()


def test_skeletonize_empty_and_errors():
    empty = Volume(np.zeros((5, 5, 5), bool))
    field = Volume(np.zeros((5, 5, 5, 3), np.float32))
    assert len(skeletonize(empty, field, [[1, 1, 1]])) == 0
    g, mask = straight_tube()
    f = generate_vectors(mask, g)
    with pytest.raises(ValueError):
        skeletonize(mask, f, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        skeletonize(mask, f, [[0, 0, 0]])


def test_skeletonize_deterministic():
    g, mask, _ = generate(PhantomConfig(seed=4, dims=(64, 64, 64), n_trees=2, root_radius=3.0))
    f = generate_vectors(mask, g)
    a = skeletonize(mask, f, g.pos[g.roots])
    b = skeletonize(mask, f, g.pos[g.roots])
    for name in ("pos", "radius", "parent", "classes"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def _random_case(seed):
    rng = np.random.default_rng(seed)
    shape = (18, 18, 18)
    zz, yy, xx = np.mgrid[:18, :18, :18]
    mask = np.zeros(shape, bool)
    for _ in range(int(rng.integers(1, 5))):
        c = rng.uniform(3, 15, 3)
        r = rng.uniform(1.5, 4.0)
        mask |= (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r
    mask[0] = False
    vec = rng.normal(size=shape + (3,)).astype(np.float32) * rng.uniform(0, 3)
    vec[~mask] = 0
    fg = np.argwhere(mask)
    roots = fg[rng.choice(len(fg), size=min(len(fg), int(rng.integers(1, 4))), replace=False)]
    pen = PenaltyParams(use_angle=bool(rng.integers(0, 2)), use_vmf=bool(rng.integers(0, 2)))
    return Volume(mask), Volume(vec), roots, pen


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_output_is_forest_on_foreground(seed):
    mask, field, roots, pen = _random_case(seed)
    s = skeletonize(mask, field, roots, pen)
    check_forest(s)
    assert betti_numbers(s)[1] == 0
    assert mask.data[tuple(np.rint(s.pos).astype(int).T)].all()
    np.testing.assert_array_equal(classify_nodes(s).classes, s.classes)


def test_every_foreground_voxel_is_covered():
    g, mask, _ = generate(PhantomConfig(seed=6, dims=(64, 64, 64), n_trees=2, root_radius=3.0))
    s = skeletonize(mask, generate_vectors(mask, g), g.pos[g.roots])
    # masking reach bounds the distance from any traced voxel to the skeleton
    reach = 1.5 * s.radius.max() + 10.0
    from scipy.spatial import cKDTree

    d, _ = cKDTree(s.pos).query(np.argwhere(mask.data))
    assert d.max() <= reach


def _split_chain():
    g = chain([[z, 10, 10] for z in range(2, 20)], radius=2.0)
    parent = g.parent.copy()
    parent[9] = -1
    cut = classify_nodes(g.replace(parent=parent, classes=None))
    field = Volume(np.zeros((22, 21, 21, 3), np.float32))
    return g, cut, field


def test_postprocess_restores_split():
    g, cut, field = _split_chain()
    out = postprocess_splits(cut, field, rooted=[0])
    assert betti_numbers(out) == (1, 0)
    edges = {tuple(sorted(e)) for e in out.edges.tolist()}
    assert (8, 9) in edges


def test_postprocess_gates():
    g, cut, field = _split_chain()
    # anchored fragments are left alone
    assert betti_numbers(postprocess_splits(cut, field, rooted=[0, 9])) == (2, 0)
    assert betti_numbers(postprocess_splits(cut, field)) == (2, 0)
    # too far away
    pos = cut.pos.copy()
    pos[9:, 0] += 10
    far = cut.replace(pos=pos)
    assert betti_numbers(postprocess_splits(far, Volume(np.zeros((32, 21, 21, 3), np.float32)), rooted=[0])) == (2, 0)
    # radius difference too large
    rad = cut.radius.copy()
    rad[9:] = 12.0
    fat = cut.replace(radius=rad)
    assert betti_numbers(postprocess_splits(fat, field, rooted=[0])) == (2, 0)
    # opposite directions
    vec = np.zeros((22, 21, 21, 3), np.float32)
    vec[:11, ..., 0] = 1.0
    vec[11:, ..., 0] = -1.0
    assert betti_numbers(postprocess_splits(cut, Volume(vec), rooted=[0])) == (2, 0)


def test_postprocess_random_forest_stays_forest():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        parent = np.array([-1 if rng.uniform() < 0.3 or v == 0 else int(rng.integers(0, v)) for v in range(n)])
        g = classify_nodes(SkeletonGraph(np.arange(n), rng.uniform(0, 8, (n, 3)), rng.uniform(0.5, 3, n), parent))
        roots = g.roots
        anchored = roots[: max(1, len(roots) // 2)]
        field = Volume(rng.normal(size=(9, 9, 9, 3)).astype(np.float32))
        out = postprocess_splits(g, field, rooted=anchored.tolist())
        check_forest(out)
        assert betti_numbers(out)[0] <= betti_numbers(g)[0]


def test_angle_term_reduces_merges_on_pair():
    gt, mask, _ = generate(PhantomConfig(parallel_pair=True, root_radius=4.0, taper=0.25, min_clearance=1.0,
                                         dims=(64, 64, 64)))
    f = generate_vectors(mask, gt)
    roots = gt.pos[gt.roots]
    g = resample(gt, 1.0)
    fm = []
    for use_angle in (True, False):
        s = resample(skeletonize(mask, f, roots, PenaltyParams(use_angle=use_angle)), 1.0)
        fm.append(false_merges(g, s, match(g, s, MatchParams()))[0])
    assert fm[0] <= fm[1]
