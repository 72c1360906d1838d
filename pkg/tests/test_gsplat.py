"""Tests for chained-Gaussian expansion and the differentiable splatter."""

import numpy as np
import pytest

from haircap.errors import ContractViolation
from haircap.gaussians import (
    BODY_THICKNESS,
    N_SEGMENTS,
    N_TIP,
    PARAM_COUNT,
    ChainedGaussianStrand,
    anchor_matrix,
    backprop_batch,
    build_body,
    expand_batch,
    expand_strand,
    init_strand,
    logit,
    opacity_matrix,
    orthonormal_completion,
    segment_covariances,
    sigmoid,
    softplus,
    softplus_inv,
)
from haircap.geometry import look_at_camera, project_point
from haircap.mesh import icosphere
from haircap.splat import Splats, l2_image_loss, render, render_backward
from haircap.strands import N_K, Strand
from haircap.strandlatent import fit


# ---------------------------------------------------------------------------
# corpus helpers


def fourier_strand(coeffs, n=N_K, origin=(0.0, 0.0, 0.05)):
    """Smooth strand from decaying random Fourier coefficients."""
    t = np.linspace(0.0, 1.0, n)
    v = np.zeros((n, 3))
    v[:, 1] = 0.06 * t
    for k, c in enumerate(coeffs, start=1):
        v += np.outer(np.sin(np.pi * k * t), c) * (0.004 / k ** 2)
    v += np.asarray(origin)
    return Strand(v, root_on_scalp=True)


def make_corpus(n_strands=300, seed=5, noise=2e-4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_strands):
        s = fourier_strand(rng.normal(0, 1, (6, 3)))
        v = s.vertices + rng.normal(0, noise, s.vertices.shape)
        v[0] = s.vertices[0]
        out.append(Strand(v, True))
    return out


@pytest.fixture(scope="module")
def latent_model():
    return fit(make_corpus(), latent_dim=128)


# ---------------------------------------------------------------------------
# parameterization


def test_parameter_count_is_162(latent_model):
    cs = init_strand(latent_model, make_corpus(2, seed=9)[0])
    assert PARAM_COUNT == 162
    assert cs.n_params == 162
    assert cs.params.shape == (162,)


def test_opacity_partition_is_91_8():
    m = opacity_matrix()
    assert m.shape == (N_SEGMENTS, 2)
    assert int(m[:, 0].sum()) == N_SEGMENTS - N_TIP == 91
    assert int(m[:, 1].sum()) == N_TIP == 8
    assert np.all(m.sum(axis=1) == 1.0)


def test_params_roundtrip(latent_model):
    cs = init_strand(latent_model, make_corpus(2, seed=9)[0])
    rng = np.random.default_rng(0)
    p = rng.normal(0, 1, 162)
    cs.set_params(p)
    assert np.array_equal(cs.params, p)
    with pytest.raises(ContractViolation):
        cs.set_params(np.zeros(161))


def test_anchor_interpolation_matrix():
    m = anchor_matrix()
    assert m.shape == (N_SEGMENTS, 8)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert m[0, 0] == 1.0
    assert m[-1, -1] == 1.0
    # constant anchors give constant segments
    assert np.allclose(m @ np.full(8, 3.7), 3.7, atol=1e-12)


def test_reparameterizations():
    x = np.linspace(-4, 4, 11)
    assert np.allclose(softplus_inv(softplus(x)), x, atol=1e-9)
    p = sigmoid(x)
    assert np.allclose(logit(p), x, atol=1e-9)
    with pytest.raises(ContractViolation):
        softplus_inv(np.array([-0.1]))
    with pytest.raises(ContractViolation):
        logit(np.array([1.5]))


# ---------------------------------------------------------------------------
# expansion


def test_axis_aligned_segment_covariance():
    cov = segment_covariances(np.array([0.0, 0.0, 1.0]),
                              np.array(1e-3), np.array(5e-5))
    assert np.allclose(np.diag(cov), [(5e-5) ** 2, (5e-5) ** 2, (1e-3) ** 2])
    assert np.allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-20)
    vals = np.linalg.eigvalsh(cov)
    assert np.allclose(sorted(vals), [(5e-5) ** 2, (5e-5) ** 2, (1e-3) ** 2])


def test_expansion_geometry(latent_model):
    rng = np.random.default_rng(1)
    strands = []
    for s in make_corpus(4, seed=11):
        cs = init_strand(latent_model, s, diameter=2e-4)
        cs.latent += rng.normal(0, 0.2, cs.latent.size)
        strands.append(cs)
    batch = expand_batch(strands, latent_model)

    # trace invariant and principal axis
    tau_l = batch.length / 2.0
    tau_d = batch.seg_diam / 2.0
    tr = np.trace(batch.covs, axis1=-2, axis2=-1)
    assert np.allclose(tr, tau_l ** 2 + 2 * tau_d ** 2, rtol=1e-12)

    covs = batch.covs.reshape(-1, 3, 3)
    e = batch.e.reshape(-1, 3)
    vals, vecs = np.linalg.eigh(covs)
    principal = vecs[:, :, 2]
    cross = np.linalg.norm(np.cross(principal, e), axis=1)
    # only stick-like segments (length > diameter) have the axis as the
    # principal direction; near-isotropic ones have ambiguous eigenvectors
    stick = (tau_l > 2 * tau_d).ravel()
    assert stick.sum() > 100
    assert cross[stick].max() < 1e-9

    # SPD: Cholesky succeeds everywhere
    for c in covs:
        np.linalg.cholesky(c)

    # centers are segment midpoints
    mids = 0.5 * (batch.vertices[:, :-1] + batch.vertices[:, 1:])
    assert np.allclose(batch.centers, mids, atol=1e-15)


def test_zero_length_segment_skipped():
    base = fourier_strand(np.zeros((1, 3)))
    v = base.vertices.copy()
    v[50] = v[49]  # collapse one segment
    strands = [Strand(v + np.array([i * 1e-4, 0, 0]), True) for i in range(40)]
    with pytest.warns(UserWarning):
        model = fit(strands, latent_dim=8)
    cs = init_strand(model, strands[0])
    prims = expand_strand(cs, model)
    assert len(prims) == N_SEGMENTS - 1
    batch = expand_batch([cs], model)
    assert int(batch.alive.sum()) == N_SEGMENTS - 1
    assert not batch.alive[0, 49]


def test_orthonormal_completion():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(50, 3))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    ep, epp = orthonormal_completion(e)
    for a, b in [(e, ep), (e, epp), (ep, epp)]:
        assert np.abs(np.einsum("nj,nj->n", a, b)).max() < 1e-12
    assert np.abs(np.linalg.norm(ep, axis=1) - 1).max() < 1e-12
    assert np.allclose(np.cross(e, ep), epp, atol=1e-12)  # right-handed


# ---------------------------------------------------------------------------
# renderer forward


def _toy_camera(width=48, height=48, focal=120.0):
    return look_at_camera([0.0, 0.0, 0.4], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                          focal=focal, width=width, height=height)


def test_empty_scene_is_background():
    cam = _toy_camera()
    sp = Splats(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
                np.zeros(0))
    img, _ = render(sp, cam, background=(0.2, 0.4, 0.6))
    assert np.allclose(img, np.array([0.2, 0.4, 0.6]), atol=1e-15)


def test_single_gaussian_peak_and_falloff():
    cam = _toy_camera()
    center = np.array([[0.01, -0.005, 0.0]])
    cov = (2e-3) ** 2 * np.eye(3)[None]
    sp = Splats(center, cov, np.array([[1.0, 1.0, 1.0]]), np.array([0.95]))
    img, _ = render(sp, cam)
    lum = img.sum(axis=2)
    iy, ix = np.unravel_index(np.argmax(lum), lum.shape)
    u, v = project_point(cam, center[0])
    assert abs(ix + 0.5 - u) <= 1.0 and abs(iy + 0.5 - v) <= 1.0
    row = lum[iy]
    col = lum[:, ix]
    assert np.all(np.diff(row[ix:]) <= 1e-12)
    assert np.all(np.diff(row[:ix + 1]) >= -1e-12)
    assert np.all(np.diff(col[iy:]) <= 1e-12)
    assert np.all(np.diff(col[:iy + 1]) >= -1e-12)


def test_depth_ordering_controls_occlusion():
    cam = _toy_camera()
    cov = (4e-3) ** 2 * np.eye(3)[None].repeat(2, axis=0)
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    op = np.array([0.9, 0.9])
    near_red = Splats(np.array([[0.0, 0.0, 0.05], [0.0, 0.0, -0.05]]),
                      cov, colors, op)
    img, _ = render(near_red, cam)
    cx = img[24, 24]
    assert cx[0] > cx[1]  # red sits in front (closer to the camera)
    near_green = Splats(np.array([[0.0, 0.0, -0.05], [0.0, 0.0, 0.05]]),
                        cov, colors, op)
    img2, _ = render(near_green, cam)
    assert img2[24, 24][1] > img2[24, 24][0]


def _brute_force_render(sp, cam, bg):
    """Per-pixel reference compositor mirroring the renderer contract."""
    from haircap.splat import ALPHA_CAP, PIXEL_DILATION

    h, w = cam.height, cam.width
    r = cam.rotation
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    data = []
    for i in range(len(sp.centers)):
        xc = r @ sp.centers[i] + cam.translation
        if xc[2] <= 1e-9:
            continue
        u = fx * xc[0] / xc[2] + cx
        v = fy * xc[1] / xc[2] + cy
        jac = np.array([[fx / xc[2], 0.0, -fx * xc[0] / xc[2] ** 2],
                        [0.0, fy / xc[2], -fy * xc[1] / xc[2] ** 2]])
        m = r @ sp.covs[i] @ r.T
        sig = jac @ m @ jac.T + PIXEL_DILATION * np.eye(2)
        data.append((xc[2], i, u, v, np.linalg.inv(sig)))
    data.sort(key=lambda t: (t[0], t[1]))
    img = np.zeros((h, w, 3))
    for py in range(h):
        for px in range(w):
            t = 1.0
            c = np.zeros(3)
            for _, i, u, v, a in data:
                d = np.array([px + 0.5 - u, py + 0.5 - v])
                q = d @ a @ d
                if q > 9.0:
                    continue
                alpha = min(sp.opacities[i] * np.exp(-0.5 * q), ALPHA_CAP)
                c += t * alpha * sp.colors[i]
                t *= 1.0 - alpha
            img[py, px] = c + t * bg
    return img


def test_renderer_matches_bruteforce_oracle():
    rng = np.random.default_rng(4)
    cam = look_at_camera([0.05, -0.1, 0.35], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                         focal=60.0, width=24, height=24)
    n = 8
    centers = rng.uniform(-0.04, 0.04, (n, 3))
    covs = []
    for _ in range(n):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        covs.append(q @ np.diag(rng.uniform(1e-3, 6e-3, 3) ** 2) @ q.T)
    sp = Splats(centers, np.array(covs), rng.uniform(0, 1, (n, 3)),
                rng.uniform(0.2, 0.95, n))
    bg = np.array([0.3, 0.1, 0.0])
    img, _ = render(sp, cam, background=bg)
    ref = _brute_force_render(sp, cam, bg)
    assert np.abs(img - ref).max() < 1e-9


# ---------------------------------------------------------------------------
# renderer gradients


def test_splat_gradients_match_fd():
    rng = np.random.default_rng(8)
    cam = _toy_camera()
    bg = (0.1, 0.0, 0.2)
    n = 6
    centers = rng.uniform(-0.05, 0.05, (n, 3))
    covs = []
    for _ in range(n):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        covs.append(q @ np.diag(rng.uniform(1e-3, 8e-3, 3) ** 2) @ q.T)
    sp = Splats(centers, np.array(covs), rng.uniform(0.1, 0.9, (n, 3)),
                rng.uniform(0.3, 0.9, n))
    ref = rng.uniform(0, 1, (48, 48, 3))

    def loss_now():
        return l2_image_loss(render(sp, cam, background=bg)[0], ref)[0]

    img, cache = render(sp, cam, background=bg)
    loss, gimg = l2_image_loss(img, ref)
    grads = render_backward(sp, cam, cache, gimg)

    def check(an, fd):
        scale = max(abs(an), abs(fd))
        if scale < 1e-8:
            return
        assert abs(an - fd) / scale < 1e-3

    for arr, gkey, h in [(sp.centers, "g_centers", 1e-7),
                         (sp.colors, "g_colors", 1e-6),
                         (sp.opacities, "g_opacities", 1e-6)]:
        flat = arr.reshape(-1)
        g = grads[gkey].ravel()
        for idx in rng.choice(flat.size, size=min(12, flat.size),
                              replace=False):
            old = flat[idx]
            flat[idx] = old + h
            lp = loss_now()
            flat[idx] = old - h
            lm = loss_now()
            flat[idx] = old
            check(g[idx], (lp - lm) / (2 * h))

    gc = grads["g_covs"]
    for gi in range(n):
        for i, j in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]:
            h = max(1e-11, 1e-5 * abs(sp.covs[gi, i, j]))
            old = sp.covs[gi, i, j]
            for sgn, store in [(1, "lp"), (-1, "lm")]:
                sp.covs[gi, i, j] = old + sgn * h
                if i != j:
                    sp.covs[gi, j, i] = old + sgn * h
                if sgn == 1:
                    lp = loss_now()
                else:
                    lm = loss_now()
            sp.covs[gi, i, j] = old
            if i != j:
                sp.covs[gi, j, i] = old
            an = gc[gi, i, j] + (gc[gi, j, i] if i != j else 0.0)
            check(an, (lp - lm) / (2 * h))


def test_strand_parameter_gradients_match_fd(latent_model):
    """L2 image gradient for all 162 strand parameters vs central
    differences at step 1e-5 on a 64x64 three-strand render."""
    rng = np.random.default_rng(5)
    strands = []
    for s in make_corpus(3, seed=21):
        cs = init_strand(latent_model, s, diameter=8e-4,
                         color=rng.uniform(0.2, 0.8, 3), opacities=(0.8, 0.5))
        cs.latent = cs.latent + rng.normal(0, 0.1, cs.latent.size)
        strands.append(cs)
    cam = look_at_camera([0.0, 0.05, 0.4], [0.0, 0.04, 0.04], [0.0, 1.0, 0.0],
                         focal=90.0, width=64, height=64)

    def assemble():
        batch = expand_batch(strands, latent_model)
        c, cov, col, op, si, sj = batch.flat()
        return batch, Splats(c, cov, col, op), si, sj

    batch0, sp0, _, _ = assemble()
    ref = np.clip(render(sp0, cam)[0] + rng.normal(0, 0.05, (64, 64, 3)),
                  0, 1)

    def forward_loss():
        _, sp, _, _ = assemble()
        return l2_image_loss(render(sp, cam)[0], ref)[0]

    batch, sp, si, sj = assemble()
    img, cache = render(sp, cam)
    _, gimg = l2_image_loss(img, ref)
    grads = render_backward(sp, cam, cache, gimg)
    n, s = batch.length.shape
    gc = np.zeros((n, s, 3))
    gcv = np.zeros((n, s, 3, 3))
    gcl = np.zeros((n, s, 3))
    gop = np.zeros((n, s))
    gc[si, sj] = grads["g_centers"]
    gcv[si, sj] = grads["g_covs"]
    gcl[si, sj] = grads["g_colors"]
    gop[si, sj] = grads["g_opacities"]
    gparams = backprop_batch(strands, latent_model, batch, gc, gcv, gcl, gop)
    assert gparams.shape == (3, 162)

    target = strands[0]
    p0 = target.params
    h = 1e-5
    checked = 0
    for idx in range(162):
        p = p0.copy()
        p[idx] += h
        target.set_params(p)
        lp = forward_loss()
        p[idx] -= 2 * h
        target.set_params(p)
        lm = forward_loss()
        target.set_params(p0)
        fd = (lp - lm) / (2 * h)
        an = gparams[0, idx]
        scale = max(abs(fd), abs(an))
        if scale < 1e-8:
            continue
        checked += 1
        assert abs(fd - an) / scale < 1e-3, f"param {idx}"
    assert checked > 100  # most parameters carry real gradient


# ---------------------------------------------------------------------------
# body gaussians


def test_body_base_radius_is_mean_edge_length():
    mesh = icosphere(0, radius=0.05)  # icosahedron: 5 edges per vertex
    body = build_body(mesh)
    v0 = mesh.vertices[0]
    nbr = set()
    for f in mesh.faces:
        if 0 in f:
            nbr.update(int(k) for k in f if k != 0)
    expect = np.mean([np.linalg.norm(mesh.vertices[k] - v0) for k in sorted(nbr)])
    assert abs(body.base_radii[0] - expect) < 1e-12
    assert np.allclose(body.radii, body.base_radii, rtol=1e-12)


def test_body_covariance_structure():
    mesh = icosphere(1, radius=0.05)
    body = build_body(mesh)
    covs = body.covariances()
    for i in (0, 5, 17):
        nrm = body.normals[i]
        vals, vecs = np.linalg.eigh(covs[i])
        assert abs(vals[0] - BODY_THICKNESS ** 2) < 1e-18
        assert np.allclose(vals[1:], body.radii[i] ** 2, rtol=1e-12)
        assert abs(abs(vecs[:, 0] @ nrm) - 1.0) < 1e-9


def test_body_radius_gradient_matches_fd():
    rng = np.random.default_rng(3)
    mesh = icosphere(1, radius=0.05)
    body = build_body(mesh)
    cam = look_at_camera([0, 0, 0.35], [0, 0, 0], [0, 1, 0], focal=80.0,
                         width=48, height=48)
    ref = rng.uniform(0, 1, (48, 48, 3))

    def assemble():
        return Splats(body.centers, body.covariances(),
                      np.tile(body.color, (body.n_body, 1)),
                      np.full(body.n_body, body.opacity))

    img, cache = render(assemble(), cam)
    _, gimg = l2_image_loss(img, ref)
    grads = render_backward(assemble(), cam, cache, gimg)
    g_raw = body.backprop(grads["g_covs"])
    h = 1e-6
    for idx in rng.choice(body.n_body, 8, replace=False):
        old = body.radii_raw[idx]
        body.radii_raw[idx] = old + h
        lp = l2_image_loss(render(assemble(), cam)[0], ref)[0]
        body.radii_raw[idx] = old - h
        lm = l2_image_loss(render(assemble(), cam)[0], ref)[0]
        body.radii_raw[idx] = old
        fd = (lp - lm) / (2 * h)
        scale = max(abs(fd), abs(g_raw[idx]))
        if scale < 1e-9:
            continue
        assert abs(fd - g_raw[idx]) / scale < 1e-3


def test_render_does_not_mutate_colors():
    cam = _toy_camera()
    rng = np.random.default_rng(9)
    colors = rng.uniform(0, 1, (3, 3))
    sp = Splats(rng.uniform(-0.02, 0.02, (3, 3)),
                np.tile((3e-3) ** 2 * np.eye(3), (3, 1, 1)),
                colors, np.full(3, 0.8))
    before = colors.copy()
    render(sp, cam)
    assert np.array_equal(sp.colors, before)
