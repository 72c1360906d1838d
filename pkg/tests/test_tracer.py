"""Tests for strand tracing: growth steps, seed scheduling, whole-field
tracing, scalp bridging, and parting-line refinement.

The helix test is the main end-to-end oracle: a field baked analytically
from a known curve must be traced back to within two voxel edges of it.
"""

import numpy as np
import pytest
from scipy.spatial import cKDTree

from haircap.errors import ContractViolation, EmptyVolumeError
from haircap.field import HairField, direction_to_angles
from haircap.geometry import HairBBox, look_at_camera, project_point
from haircap.mesh import distance_to_mesh, icosphere
from haircap.strands import N_K, Strand
from haircap.tracer import (
    SeedQueue,
    TraceConfig,
    apply_parting_line,
    connect_to_scalp,
    grow_step,
    lift_parting_line,
    sample_seeds,
    scalp_vertex_set,
    trace_all,
    trace_report,
    trace_strand,
    _FieldProbe,
)


# ---------------------------------------------------------------------------
# field constructions


def constant_field(direction, half=0.1, res=8, sigma=1.0, rho=1.0):
    """Field with one orientation everywhere and uniform density."""
    box = HairBBox([-half] * 3, [half] * 3)
    f = HairField.create(box, res)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    th, ph = direction_to_angles(d[None])
    f.theta[:] = th[0]
    f.phi[:] = ph[0]
    f.sigma[:] = sigma
    f.rho_h[:] = rho
    return f


HELIX_R = 0.085
HELIX_Z = (-0.075, 0.075)
HELIX_TURNS = 0.45


def helix_point(s):
    ang = 2.0 * np.pi * HELIX_TURNS * np.asarray(s, dtype=np.float64)
    z = HELIX_Z[0] + (HELIX_Z[1] - HELIX_Z[0]) * np.asarray(s)
    return np.stack([HELIX_R * np.cos(ang), HELIX_R * np.sin(ang), z], axis=-1)


def helix_tangent(s):
    ang = 2.0 * np.pi * HELIX_TURNS * np.asarray(s, dtype=np.float64)
    w = 2.0 * np.pi * HELIX_TURNS
    t = np.stack([-HELIX_R * w * np.sin(ang), HELIX_R * w * np.cos(ang),
                  np.full_like(np.asarray(ang, dtype=np.float64),
                               HELIX_Z[1] - HELIX_Z[0])], axis=-1)
    return t / np.linalg.norm(t, axis=-1, keepdims=True)


def helix_field(res=48, tube_vox=1.5):
    """Bake the helix tangents into a field: density fills a tube of
    `tube_vox` voxel edges around the curve; orientations everywhere are
    the tangent at the nearest curve point."""
    box = HairBBox([-0.12] * 3, [0.12] * 3)
    f = HairField.create(box, res)
    s = np.linspace(0.0, 1.0, 4000)
    pts = helix_point(s)
    tans = helix_tangent(s)
    nodes = f.node_positions().reshape(-1, 3)
    d, j = cKDTree(pts).query(nodes)
    th, ph = direction_to_angles(tans[j])
    f.theta[:] = th.reshape(f.shape)
    f.phi[:] = ph.reshape(f.shape)
    inside = (d <= tube_vox * f.voxel_edge).reshape(f.shape)
    f.sigma[:] = np.where(inside, 1.0, 0.01)
    f.rho_h[:] = np.where(inside, 1.0, 0.0)
    return f


def shell_field(res=32, r_in=0.05, r_out=0.1, pad=0.005):
    """Radial orientations with density confined to a spherical shell."""
    box = HairBBox([-0.12] * 3, [0.12] * 3)
    f = HairField.create(box, res)
    nodes = f.node_positions().reshape(-1, 3)
    r = np.linalg.norm(nodes, axis=1)
    d = np.where(r[:, None] > 1e-9, nodes / np.maximum(r[:, None], 1e-9),
                 np.array([0.0, 0.0, 1.0]))
    th, ph = direction_to_angles(d)
    f.theta[:] = th.reshape(f.shape)
    f.phi[:] = ph.reshape(f.shape)
    inside = ((r >= r_in - pad) & (r <= r_out + pad)).reshape(f.shape)
    f.sigma[:] = np.where(inside, 1.0, 0.01)
    f.rho_h[:] = np.where(inside, 1.0, 0.0)
    return f


# ---------------------------------------------------------------------------
# configuration invariants


def test_config_rejects_bad_inertia():
    for gamma in (0.0, 1.0, 1.5, -0.2):
        with pytest.raises(ContractViolation):
            TraceConfig(inertia=gamma)


def test_config_rejects_nonpositive_step():
    with pytest.raises(ContractViolation):
        TraceConfig(step=0.0)
    with pytest.raises(ContractViolation):
        TraceConfig(penetration=-0.001)


# ---------------------------------------------------------------------------
# seed queue


def test_seed_queue_pop_order_nonincreasing():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    prio = np.arange(10.0, 0.0, -1.0)  # 10, 9, ..., 1
    q = SeedQueue(pts, prio)
    seq = []
    while True:
        item = q.pop()
        if item is None:
            break
        seq.append(item[1])
    assert seq == sorted(seq, reverse=True)
    assert seq == list(prio)
    assert q.pop() is None


def test_seed_queue_deprioritize_reorders():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    prio = np.arange(10.0, 0.0, -1.0)
    q = SeedQueue(pts, prio)
    a = q.pop()
    b = q.pop()
    assert a[1] == 10.0 and b[1] == 9.0
    # point x=2 currently holds priority 8; scale it to 0.8
    q.deprioritize(np.array([[2.0, 0.0, 0.0]]), radius=0.5, factor=0.1)
    rest = []
    while True:
        item = q.pop()
        if item is None:
            break
        rest.append(item[1])
    assert rest == [7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, pytest.approx(0.8)]


def test_seed_queue_len_and_mismatch():
    pts = np.zeros((3, 3))
    q = SeedQueue(pts, np.ones(3))
    assert len(q) == 3
    q.pop()
    assert len(q) == 2
    with pytest.raises(ContractViolation):
        SeedQueue(np.zeros((3, 3)), np.ones(2))


def test_sample_seeds_priorities_match_field():
    rng = np.random.default_rng(11)
    box = HairBBox([-0.05] * 3, [0.05] * 3)
    f = HairField.create(box, 5)
    f.sigma[:] = rng.uniform(0.1, 1.0, f.shape)
    f.rho_h[:] = rng.uniform(0.1, 1.0, f.shape)
    q = sample_seeds(f, None, None, box, 40, np.random.default_rng(3))
    probe = _FieldProbe(f)
    n_checked = 0
    prev = np.inf
    while True:
        item = q.pop()
        if item is None:
            break
        pt, prio = item
        sig, rho, _ = probe.query(pt)
        assert abs(prio - sig * rho) < 1e-9
        assert prio <= prev + 1e-12
        prev = prio
        n_checked += 1
    assert n_checked == 40


def test_sample_seeds_empty_volume():
    box = HairBBox([-0.05] * 3, [0.05] * 3)
    f = HairField.create(box, 4)
    inner = icosphere(2, radius=0.5)  # swallows the whole box
    with pytest.raises(EmptyVolumeError):
        sample_seeds(f, inner, None, box, 10, np.random.default_rng(0),
                     max_batches=3)


# ---------------------------------------------------------------------------
# growth step


def test_grow_step_fixed_point_along_field():
    f = constant_field([0.3, -0.5, 0.8])
    probe = _FieldProbe(f)
    _, _, g = probe.query(np.zeros(3))
    cfg = TraceConfig()
    v, m = grow_step(np.zeros(3), g.copy(), f, None, cfg)
    assert np.allclose(m, g, atol=1e-12)
    assert np.allclose(v, cfg.step * g, atol=1e-12)


def test_grow_step_sign_disambiguation():
    # marching against the stored orientation follows its negation, so a
    # single strand can be grown in both directions from one seed
    f = constant_field([0.3, -0.5, 0.8])
    probe = _FieldProbe(f)
    _, _, g = probe.query(np.zeros(3))
    cfg = TraceConfig()
    v, m = grow_step(np.zeros(3), -g, f, None, cfg)
    assert np.allclose(m, -g, atol=1e-12)
    assert np.allclose(v, -cfg.step * g, atol=1e-12)


def test_grow_step_blend_arithmetic():
    # field orthogonal to the incoming direction: the update must be the
    # normalized inertia blend gamma*m + (1-gamma)*g
    f = constant_field([0.0, 1.0, 0.0])
    probe = _FieldProbe(f)
    _, _, g = probe.query(np.zeros(3))
    m_prev = np.array([1.0, 0.0, 0.0])
    cfg = TraceConfig(inertia=0.6)
    v, m = grow_step(np.zeros(3), m_prev, f, None, cfg)
    expect = 0.6 * m_prev + 0.4 * g
    expect = expect / np.linalg.norm(expect)
    assert np.allclose(m, expect, atol=1e-12)
    assert np.allclose(v, cfg.step * expect, atol=1e-12)
    assert abs(np.linalg.norm(m) - 1.0) < 1e-12


def test_grow_step_repulsion_turns_motion_outward():
    inner = icosphere(3, radius=0.05)
    d0 = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    f = constant_field(d0, half=0.2)
    cfg = TraceConfig()
    n = np.array([0.0, 0.0, 1.0])  # outward normal near the north pole

    def turn(depth):
        v = np.array([0.0, 0.0, 0.05 - depth])
        _, m = grow_step(v, d0.copy(), f, inner, cfg)
        return float(m @ n)

    base = float(d0 @ n)
    shallow = turn(0.001)
    deep = turn(0.004)
    assert shallow > base  # pushed outward at all
    assert deep > shallow  # deeper penetration pushes harder

    # outside the surface the repulsion term is inactive
    v_out = np.array([0.0, 0.0, 0.08])
    _, m_out = grow_step(v_out, d0.copy(), f, inner, cfg)
    assert np.allclose(m_out, d0, atol=1e-12)


# ---------------------------------------------------------------------------
# single-strand tracing


def test_trace_strand_straight_line():
    d = np.array([1.0, 2.0, 0.5])
    d = d / np.linalg.norm(d)
    f = constant_field(d, half=0.1, res=8)
    cfg = TraceConfig(step=0.003, max_vertices=200)
    s = trace_strand(np.zeros(3), d, f, None, None, cfg)
    assert s is not None
    segs = np.diff(s.vertices, axis=0)
    lens = np.linalg.norm(segs, axis=1)
    assert np.allclose(lens, cfg.step, atol=1e-12)
    # all segments parallel to the field orientation
    cross = np.linalg.norm(np.cross(segs / lens[:, None], d), axis=1)
    assert cross.max() < 1e-9
    # grew both ways to the box walls
    t = s.vertices @ d
    assert t.min() < -0.08 and t.max() > 0.08


def test_trace_strand_respects_max_vertices():
    f = constant_field([1.0, 0.0, 0.0], half=1.0, res=4)
    cfg = TraceConfig(step=0.003, max_vertices=25)
    s = trace_strand(np.zeros(3), np.array([1.0, 0.0, 0.0]), f, None, None, cfg)
    assert s.n_vertices <= 2 * cfg.max_vertices - 1


def test_trace_strand_dies_in_empty_field():
    f = constant_field([1.0, 0.0, 0.0], sigma=0.01, rho=0.0)
    cfg = TraceConfig()
    s = trace_strand(np.zeros(3), np.array([1.0, 0.0, 0.0]), f, None, None, cfg)
    # every step is unhealthy, the tail is trimmed back to the seed
    assert s is None


def test_trace_strand_recovers_helix():
    f = helix_field()
    vox = f.voxel_edge
    cfg = TraceConfig(step=0.002, max_vertices=400)
    seed = helix_point(np.array([0.5]))[0]
    init = helix_tangent(np.array([0.5]))[0]
    s = trace_strand(seed, init, f, None, None, cfg)
    assert s is not None and s.n_vertices > 100
    ref = helix_point(np.linspace(0.0, 1.0, 3000))
    d_strand_to_curve = cKDTree(ref).query(s.vertices)[0].max()
    d_curve_to_strand = cKDTree(s.vertices).query(ref)[0].max()
    bound = 2.0 * vox
    assert d_strand_to_curve < bound
    assert d_curve_to_strand < bound


# ---------------------------------------------------------------------------
# whole-field tracing


def test_trace_all_shell():
    f = shell_field()
    inner = icosphere(3, radius=0.05)
    outer = icosphere(3, radius=0.1)
    cfg = TraceConfig(n_volume=25, n_scalp=15, max_vertices=80)
    rng = np.random.default_rng(7)
    volume, scalp = trace_all(f, inner, outer, cfg, rng)

    assert 0 < len(volume) <= cfg.n_volume
    for s in volume:
        assert s.n_vertices >= 4
        assert not s.root_on_scalp
        r = np.linalg.norm(s.vertices, axis=1)
        assert r.min() > 0.015 and r.max() < 0.115
        # radial field: the strand spans a real radial interval
        assert r.max() - r.min() > 0.015

    assert len(scalp) == cfg.n_scalp
    for s in scalp:
        assert s.root_on_scalp
        root = s.vertices[0]
        assert root[2] > 0.0  # on the scalp half
        assert abs(np.linalg.norm(root) - 0.05) < 0.003  # on the inner surface
        # grows outward
        assert np.linalg.norm(s.vertices[-1]) > np.linalg.norm(root)


def test_trace_all_starves_when_deprioritized_to_zero():
    f = shell_field()
    inner = icosphere(3, radius=0.05)
    outer = icosphere(3, radius=0.1)
    cfg = TraceConfig(n_volume=30, n_scalp=0, max_vertices=80,
                      deprioritize_radius=1.0, deprioritize_factor=0.0)
    volume, scalp = trace_all(f, inner, outer, cfg, np.random.default_rng(7))
    assert len(volume) == 1
    assert scalp == []


# ---------------------------------------------------------------------------
# scalp bridging


def _bridge_scene():
    inner = icosphere(3, radius=0.05)
    iv = int(np.argmax(inner.vertices[:, 2]))
    root = inner.vertices[iv]
    n = root / np.linalg.norm(root)
    scalp_hair = Strand(root[None] + 0.003 * np.arange(21)[:, None] * n,
                        root_on_scalp=True)
    t = np.cross(n, [1.0, 0.0, 0.0])
    t = t / np.linalg.norm(t)
    base = scalp_hair.vertices[5] + 0.006 * t
    floating = Strand(base[None] + 0.003 * np.arange(16)[:, None] * n,
                      root_on_scalp=False)
    return inner, root, scalp_hair, floating


def test_connect_bridges_floating_strand():
    inner, root, scalp_hair, floating = _bridge_scene()
    cfg = TraceConfig()
    out, stats = connect_to_scalp([floating], [scalp_hair], inner, cfg,
                                  np.random.default_rng(0))
    assert stats == {"connected": 1, "discarded": 0, "rate": 1.0}
    s = out[0]
    assert s.n_vertices == N_K
    assert s.root_on_scalp
    assert np.allclose(s.vertices[0], root, atol=1e-9)
    d, _, _ = distance_to_mesh(s.vertices[0], inner)
    assert abs(d) < 1e-3


def test_connect_orients_tip_first_input():
    inner, root, scalp_hair, floating = _bridge_scene()
    flipped = Strand(floating.vertices[::-1].copy(), root_on_scalp=False)
    out, stats = connect_to_scalp([flipped], [scalp_hair], inner,
                                  TraceConfig(), np.random.default_rng(0))
    assert stats["connected"] == 1
    assert np.allclose(out[0].vertices[0], root, atol=1e-9)


def test_connect_touching_root_is_resampled_only():
    inner, root, scalp_hair, _ = _bridge_scene()
    n = root / np.linalg.norm(root)
    touching = Strand(root[None] + 0.004 * np.arange(12)[:, None] * n,
                      root_on_scalp=False)
    out, stats = connect_to_scalp([touching], [scalp_hair], inner,
                                  TraceConfig(), np.random.default_rng(0))
    assert stats["connected"] == 1
    s = out[0]
    assert s.n_vertices == N_K
    assert np.allclose(s.vertices[0], root, atol=1e-9)
    assert np.allclose(s.vertices[-1], touching.vertices[-1], atol=1e-9)


def test_connect_discards_out_of_reach():
    inner, root, scalp_hair, floating = _bridge_scene()
    far = Strand(np.array([[0.12, 0.0, 0.0], [0.125, 0.0, 0.0],
                           [0.13, 0.0, 0.0]]), root_on_scalp=False)
    out, stats = connect_to_scalp([floating, far], [scalp_hair], inner,
                                  TraceConfig(), np.random.default_rng(0))
    assert stats["connected"] == 1
    assert stats["discarded"] == 1
    assert stats["rate"] == 0.5


def test_connect_edge_inputs():
    inner, _, scalp_hair, floating = _bridge_scene()
    out, stats = connect_to_scalp([], [scalp_hair], inner)
    assert out == [] and stats["rate"] == 1.0
    with pytest.raises(ContractViolation):
        connect_to_scalp([floating], [], inner)


# ---------------------------------------------------------------------------
# parting line


def _parting_scene():
    inner = icosphere(3, radius=0.05)
    cam = look_at_camera([0.0, 0.0, 0.3], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                         focal=300.0, width=256, height=256)
    x = np.linspace(-0.03, 0.03, 9)
    curve3 = np.column_stack([x, np.zeros_like(x),
                              np.sqrt(0.05 ** 2 - x ** 2)])
    poly2 = np.array([project_point(cam, p) for p in curve3])
    return inner, cam, poly2


def _surface_strand(x, ys, r=0.05):
    pts = np.column_stack([np.full_like(ys, x), ys,
                           np.sqrt(r ** 2 - x ** 2 - ys ** 2)])
    return Strand(pts, root_on_scalp=True)


def test_lift_parting_line_lands_on_mesh():
    inner, cam, poly2 = _parting_scene()
    lifted = lift_parting_line(poly2, cam, inner)
    assert len(lifted) == (len(poly2) - 1) * 8 + 1
    r = np.linalg.norm(lifted, axis=1)
    assert np.abs(r - 0.05).max() < 1e-3


def test_parting_line_removes_crossers_keeps_parallel():
    inner, cam, poly2 = _parting_scene()
    ys = np.linspace(-0.004, 0.004, 8)  # even count: no vertex sits at y=0
    crosser = _surface_strand(0.01, ys)
    parallel = _surface_strand(0.0, np.full(8, 0.008) + 0.0005 * np.arange(8))
    # crosses the symmetry plane but far above the scalp band
    high = Strand(np.column_stack([np.full(8, 0.01), ys, np.full(8, 0.09)]),
                  root_on_scalp=False)
    kept, removed = apply_parting_line([crosser, parallel, high], poly2,
                                       cam, inner)
    assert removed == 1
    ids = [id(s) for s in kept]
    assert id(parallel) in ids and id(high) in ids and id(crosser) not in ids


def test_parting_line_empty_polyline_is_identity():
    inner, cam, _ = _parting_scene()
    s = _surface_strand(0.01, np.linspace(-0.004, 0.004, 8))
    kept, removed = apply_parting_line([s], np.zeros((0, 2)), cam, inner)
    assert len(kept) == 1 and kept[0] is s and removed == 0


def test_parting_line_missing_mesh_warns_and_keeps():
    inner, cam, _ = _parting_scene()
    s = _surface_strand(0.01, np.linspace(-0.004, 0.004, 8))
    off_mesh = np.array([[0.0, 0.0], [5.0, 5.0]])  # corner rays miss the head
    with pytest.warns(UserWarning):
        kept, removed = apply_parting_line([s], off_mesh, cam, inner)
    assert len(kept) == 1 and kept[0] is s and removed == 0


# ---------------------------------------------------------------------------
# report


def test_trace_report_shape():
    inner, root, scalp_hair, floating = _bridge_scene()
    out, stats = connect_to_scalp([floating], [scalp_hair], inner,
                                  TraceConfig(), np.random.default_rng(0))
    rep = trace_report([floating], [scalp_hair], out, stats)
    assert rep["volume_hairs"] == 1
    assert rep["scalp_hairs"] == 1
    assert rep["connected"] == 1
    assert rep["connection_rate"] == 1.0
    assert rep["vertices_per_strand"] == N_K
    assert rep["mean_length_m"] > 0.0
