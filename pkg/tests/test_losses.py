import numpy as np
import pytest

from ooalign import fixtures
from ooalign.losses import (
    DENSE_MAX_TARGETS,
    IcpConfig,
    LossWeights,
    PenetrationConfig,
    fractional_soft_icp,
    max_signed_depth,
    penetration_loss,
    total_objective,
)


def reference_soft_icp(src, tgt, sigma):
    """All-vertices soft-ICP: dense softmax over targets, no fractional selection."""
    diff = src[:, None, :] - tgt[None, :, :]
    energy = np.einsum("bjk,bjk->bj", diff, diff)
    inv = 1.0 / (2.0 * sigma * sigma)
    shift = energy.min(axis=1, keepdims=True)
    weights = np.exp((shift - energy) * inv)
    alpha = weights / weights.sum(axis=1, keepdims=True)
    loss_rows = np.einsum("bj,bj->b", alpha, energy)
    k = src.shape[0]
    term1 = 2.0 * np.einsum("bj,bjk->bk", alpha, diff)
    centered = energy - loss_rows[:, None]
    term2 = -(1.0 / (sigma * sigma)) * np.einsum("bj,bjk->bk", alpha * centered, diff)
    return float(np.sum(loss_rows) / k), (term1 + term2) / k


def brute_force_soft_icp(src, tgt, r, sigma):
    """Independent double-loop oracle for the fractional variant."""
    n_src = len(src)
    k_sel = int(np.floor(r * n_src))
    d_min = [min(np.linalg.norm(s - t) for t in tgt) for s in src]
    order = sorted(range(n_src), key=lambda i: (d_min[i], i))[:k_sel]
    total = 0.0
    for i in order:
        energies = [float(np.dot(src[i] - t, src[i] - t)) for t in tgt]
        m = min(energies)
        ws = [np.exp((m - e) / (2 * sigma**2)) for e in energies]
        z = sum(ws)
        total += sum(w / z * e for w, e in zip(ws, energies))
    return total / k_sel


def fd_gradient(fn, x, h):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn(x)
        flat[k] = orig - h
        fm = fn(x)
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# fractional soft-ICP
# ---------------------------------------------------------------------------


def test_coincident_point_zero_loss():
    pts = np.array([[1.0, 2.0, 3.0]])
    loss, grad = fractional_soft_icp(pts, pts.copy(), IcpConfig(ratio_r=1.0, sigma=0.1))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros((1, 3)))


def test_equidistant_symmetry():
    src = np.array([[0.0, 0.0, 0.0]])
    d = 0.7
    tgt = np.array([[d, 0, 0], [-d, 0, 0]])
    loss, _ = fractional_soft_icp(src, tgt, IcpConfig(ratio_r=1.0, sigma=0.25))
    assert abs(loss - d * d) < 1e-12


def test_selection_rule_smallest_distances():
    src = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0], [0.4, 0, 0]])
    tgt = np.array([[0.0, 0.0, 0.0]])
    cfg = IcpConfig(ratio_r=0.5, sigma=0.1)
    loss, grad = fractional_soft_icp(src, tgt, cfg)
    # only the two nearest source points (0.1, 0.2) contribute
    expected = (0.1**2 + 0.2**2) / 2
    assert abs(loss - expected) < 1e-12
    assert np.all(grad[2:] == 0)
    assert np.all(np.abs(grad[:2]).sum(axis=1) > 0)


def test_matches_brute_force_and_fd(rng):
    src = rng.uniform(-1, 1, (30, 3))
    tgt = rng.uniform(-1, 1, (40, 3))
    cfg = IcpConfig(ratio_r=0.7, sigma=0.1)
    loss, grad = fractional_soft_icp(src, tgt, cfg)
    assert abs(loss - brute_force_soft_icp(src, tgt, 0.7, 0.1)) < 1e-10

    fd = fd_gradient(lambda x: fractional_soft_icp(x, tgt, cfg)[0], src.copy(), 1e-6)
    scale = max(np.abs(fd).max(), 1e-12)
    np.testing.assert_allclose(grad, fd, rtol=0, atol=1e-4 * scale)


def test_r1_bitwise_equals_reference(rng):
    for _ in range(20):
        src = rng.uniform(-1, 1, (25, 3))
        tgt = rng.uniform(-1, 1, (31, 3))
        sigma = rng.uniform(0.05, 0.5)
        loss, grad = fractional_soft_icp(src, tgt, IcpConfig(ratio_r=1.0, sigma=sigma))
        ref_loss, ref_grad = reference_soft_icp(src, tgt, sigma)
        assert loss == ref_loss
        np.testing.assert_array_equal(grad, ref_grad)


def test_monotone_selection(rng):
    src = rng.uniform(-1, 1, (40, 3))
    tgt = rng.uniform(-1, 1, (25, 3))

    def selected(r):
        from scipy.spatial import cKDTree

        d, _ = cKDTree(tgt).query(src, k=1)
        k = int(np.floor(r * len(src)))
        return set(np.argsort(d, kind="stable")[:k])

    for r1, r2 in [(0.2, 0.5), (0.5, 0.8), (0.8, 1.0), (0.1, 1.0)]:
        assert selected(r1) <= selected(r2)


def test_sigma_to_zero_limit(rng):
    src = rng.uniform(-1, 1, (20, 3))
    tgt = rng.uniform(-1, 1, (15, 3))
    bbox_diag = np.linalg.norm(tgt.max(0) - tgt.min(0))
    from scipy.spatial import cKDTree

    d, _ = cKDTree(tgt).query(src, k=1)
    expected = float((d**2).mean())
    loss, _ = fractional_soft_icp(src, tgt, IcpConfig(1.0, sigma=1e-4 * bbox_diag))
    assert abs(loss - expected) < 1e-6


def test_translation_equivariance(rng):
    src = rng.uniform(-1, 1, (15, 3))
    tgt = rng.uniform(-1, 1, (12, 3))
    shift = np.array([3.3, -1.2, 0.5])
    cfg = IcpConfig(0.6, 0.2)
    l0, g0 = fractional_soft_icp(src, tgt, cfg)
    l1, g1 = fractional_soft_icp(src + shift, tgt + shift, cfg)
    assert abs(l0 - l1) < 1e-9
    np.testing.assert_allclose(g0, g1, atol=1e-9)


def test_truncated_path_matches_dense(rng):
    # concentrated sigma: 64 nearest targets carry >=99.9% of softmax mass
    src = rng.uniform(-1, 1, (50, 3))
    tgt_small = rng.uniform(-1, 1, (DENSE_MAX_TARGETS, 3))
    extra = rng.uniform(-1, 1, (200, 3)) + np.array([50.0, 0, 0])  # far-away padding
    tgt_big = np.vstack([tgt_small, extra])
    cfg = IcpConfig(ratio_r=0.5, sigma=0.02)
    dense_loss, dense_grad = fractional_soft_icp(src, tgt_small, cfg)
    big_loss, big_grad = fractional_soft_icp(src, tgt_big, cfg)  # triggers truncation
    assert abs(dense_loss - big_loss) < 1e-6
    np.testing.assert_allclose(dense_grad, big_grad, atol=1e-6)


def test_k_zero_error():
    src = np.zeros((3, 3))
    with pytest.raises(ValueError):
        fractional_soft_icp(src, np.ones((2, 3)), IcpConfig(ratio_r=0.1, sigma=0.1))


# ---------------------------------------------------------------------------
# penetration loss
# ---------------------------------------------------------------------------


def test_source_outside_zero_loss():
    src = np.array([[0.0, 0.0, 1.0]])
    tgt = np.array([[0.0, 0.0, 0.0]])
    nrm = np.array([[0.0, 0.0, 1.0]])
    loss, grad = penetration_loss(src, tgt, nrm, PenetrationConfig(0.0))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0)


def test_source_inside_by_depth():
    src = np.array([[0.0, 0.0, -0.3]])
    tgt = np.array([[0.0, 0.0, 0.0]])
    nrm = np.array([[0.0, 0.0, 1.0]])
    loss, grad = penetration_loss(src, tgt, nrm, PenetrationConfig(0.0))
    assert abs(loss - 0.3) < 1e-12
    np.testing.assert_allclose(grad[0], [0, 0, -1.0], atol=1e-15)


def test_margin_reduces_loss():
    src = np.array([[0.0, 0.0, -0.3]])
    tgt = np.array([[0.0, 0.0, 0.0]])
    nrm = np.array([[0.0, 0.0, 1.0]])
    loss, _ = penetration_loss(src, tgt, nrm, PenetrationConfig(0.002))
    assert abs(loss - 0.298) < 1e-12


def test_normal_count_mismatch():
    with pytest.raises(ValueError):
        penetration_loss(np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((1, 3)), PenetrationConfig())


def test_penetration_fd_gradient(rng):
    for _ in range(20):
        src = rng.uniform(-1, 1, (12, 3))
        tgt = rng.uniform(-1, 1, (10, 3))
        nrm = rng.normal(size=(10, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        cfg = PenetrationConfig(0.05)
        loss, grad = penetration_loss(src, tgt, nrm, cfg)
        # skip configs near hinge breakpoints or nearest-neighbor ties
        from scipy.spatial import cKDTree

        d2, idx2 = cKDTree(src).query(tgt, k=2)
        if np.any(np.abs(d2[:, 0] - d2[:, 1]) < 1e-3):
            continue
        depth = np.einsum("jk,jk->j", tgt - src[idx2[:, 0]], nrm)
        if np.any(np.abs(depth - cfg.margin) < 1e-3):
            continue
        fd = fd_gradient(lambda x: penetration_loss(x, tgt, nrm, cfg)[0], src.copy(), 1e-6)
        scale = max(np.abs(fd).max(), 1e-9)
        np.testing.assert_allclose(grad, fd, rtol=0, atol=1e-4 * scale)


def test_source_above_plate_no_penalty(rng):
    plate = fixtures.flat_plate(width=4, depth=4, nx=6, nz=6)
    from ooalign.mesh import compute_vertex_normals

    plate = compute_vertex_normals(plate)
    src = rng.uniform(-1, 1, (40, 3))
    src[:, 1] = rng.uniform(0.5, 2.0, 40)  # strictly above
    loss, grad = penetration_loss(src, plate.vertices, plate.vertex_normals, PenetrationConfig(0.0))
    assert loss == 0.0
    assert max_signed_depth(src, plate.vertices, plate.vertex_normals) < 0


def test_penetration_translation_equivariance(rng):
    src = rng.uniform(-1, 1, (15, 3))
    tgt = rng.uniform(-1, 1, (12, 3))
    nrm = rng.normal(size=(12, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    shift = np.array([0.4, 2.0, -1.1])
    l0, g0 = penetration_loss(src, tgt, nrm, PenetrationConfig(0.01))
    l1, g1 = penetration_loss(src + shift, tgt + shift, nrm, PenetrationConfig(0.01))
    assert abs(l0 - l1) < 1e-9
    np.testing.assert_allclose(g0, g1, atol=1e-9)


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------


def test_total_clip_only():
    b = total_objective(0.5, 0.9, 0.7, LossWeights(1, 0, 0))
    assert b.total == 0.5


def test_total_zero_weights():
    b = total_objective(123.0, 45.0, 6.0, LossWeights(0, 0, 0))
    assert b.total == 0.0


def test_total_weighted_sum():
    b = total_objective(0.5, 0.2, 0.1, LossWeights(1, 2, 10))
    assert abs(b.total - 1.9) < 1e-12


def test_total_combines_gradients(rng):
    g1, g2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    b = total_objective(1.0, 2.0, 0.0, LossWeights(2, 3, 1), d_clip=g1, d_icp=g2)
    np.testing.assert_allclose(b.d_source_vertices, 2 * g1 + 3 * g2, atol=1e-12)
    assert abs(b.total - (2 * 1 + 3 * 2)) < 1e-9


def test_total_rejects_nonfinite():
    with pytest.raises(ValueError):
        total_objective(np.nan, 0, 0, LossWeights())
