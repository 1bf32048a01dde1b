import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointermem.geometry import AlignmentError, CameraPose, Pointmap, quat_from_axis_angle
from pointermem.metrics import cloud_metrics, depth_metrics, grid_normals, median, traj_metrics


def random_pose(rng, trans_scale=1.0):
    q = rng.normal(size=4)
    return CameraPose(q / np.linalg.norm(q), rng.normal(size=3) * trans_scale)


def trajectory(rng, n=10):
    return [random_pose(rng) for _ in range(n)]


def sim3_image(poses, scale, G):
    """Apply a global similarity to a trajectory of camera-to-world poses."""
    out = []
    for p in poses:
        out.append(CameraPose.from_matrix(G.rotation @ p.rotation, scale * G.rotation @ p.trans + G.trans))
    return out


def test_median_even_and_odd():
    assert median([3, 1, 2]) == 2
    assert median([4, 1, 3, 2]) == 2.5
    with pytest.raises(ValueError):
        median([])


class TestCloud:
    def test_self(self):
        rng = np.random.default_rng(0)
        pts, nrm = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        m = cloud_metrics(pts, pts, nrm, nrm)
        assert (m.acc_mean, m.acc_median, m.comp_mean, m.comp_median) == (0, 0, 0, 0)
        assert abs(m.nc_mean - 1) < 1e-12 and abs(m.nc_median - 1) < 1e-12

    def test_forced_distances(self):
        m = cloud_metrics([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]])
        assert m.acc_mean == 1 and m.comp_mean == 2 and math.isnan(m.nc_mean)

    def test_empty(self):
        with pytest.raises(ValueError):
            cloud_metrics(np.zeros((0, 3)), [[0, 0, 0]])

    def test_exhaustive_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            a, b = rng.normal(size=(60, 3)), rng.normal(size=(45, 3))
            na, nb = rng.normal(size=(60, 3)), rng.normal(size=(45, 3))
            na /= np.linalg.norm(na, axis=1, keepdims=True)
            nb /= np.linalg.norm(nb, axis=1, keepdims=True)
            D = np.array([[math.dist(p, q) for q in b] for p in a])
            i_ab, i_ba = D.argmin(axis=1), D.argmin(axis=0)
            acc, comp = D.min(axis=1), D.min(axis=0)
            cos_ab = [abs(float(na[i] @ nb[i_ab[i]])) for i in range(60)]
            cos_ba = [abs(float(nb[j] @ na[i_ba[j]])) for j in range(45)]
            m = cloud_metrics(a, b, na, nb)
            assert abs(m.acc_mean - acc.mean()) < 1e-12 and abs(m.comp_mean - comp.mean()) < 1e-12
            assert abs(m.acc_median - np.median(acc)) < 1e-12
            assert abs(m.comp_median - np.median(comp)) < 1e-12
            assert abs(m.nc_mean - 0.5 * (np.mean(cos_ab) + np.mean(cos_ba))) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(30, 3))
        m1, m2 = cloud_metrics(a, b), cloud_metrics(b, a)
        assert (m1.acc_mean, m1.acc_median) == (m2.comp_mean, m2.comp_median)
        assert (m1.comp_mean, m1.comp_median) == (m2.acc_mean, m2.acc_median)
        assert min(m1.acc_mean, m1.comp_mean) >= 0


class TestNormals:
    def test_plane(self):
        u, v = np.meshgrid(np.linspace(0, 1, 6), np.linspace(0, 2, 5))
        n = grid_normals(Pointmap(np.stack([u, v, np.zeros_like(u)], -1)))
        inner = n[1:-1, 1:-1].reshape(-1, 3)
        np.testing.assert_allclose(np.abs(inner), np.tile([0, 0, 1.0], (len(inner), 1)), atol=1e-15)
        assert np.isnan(n[0]).all()

    def test_invalid_neighbour(self):
        u, v = np.meshgrid(np.arange(5.0), np.arange(5.0))
        pts = np.stack([u, v, u * 0.3], -1)
        valid = np.ones((5, 5), bool)
        valid[2, 3] = False
        n = grid_normals(Pointmap(pts, valid))
        assert np.isnan(n[2, 2]).all() and np.isfinite(n[1, 1]).all()

    def test_sphere(self):
        th, ph = np.meshgrid(np.linspace(0.3, math.pi - 0.3, 40), np.linspace(0, 2 * math.pi, 80), indexing="ij")
        pts = 2.0 * np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)
        n = grid_normals(Pointmap(pts))
        ok = np.isfinite(n).all(axis=-1)
        cos = np.abs((n[ok] * pts[ok] / 2.0).sum(-1))
        assert np.abs(np.linalg.norm(n[ok], axis=-1) - 1).max() < 1e-12
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 2.0


class TestDepth:
    def test_identity(self):
        g = np.random.default_rng(0).uniform(1, 5, (6, 7))
        assert depth_metrics(g, g) == (0.0, 1.0)

    def test_median_scaling_cancels(self):
        g = np.random.default_rng(1).uniform(1, 5, (6, 7))
        assert depth_metrics(2 * g, g) == (0.0, 1.0)
        assert depth_metrics(2 * g, g, per_frame_median_scaling=False)[0] == pytest.approx(1.0)

    def test_loop_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            g = rng.uniform(0.5, 4, (5, 6))
            g[0, 0] = 0.0
            p = g * rng.uniform(0.7, 1.4, g.shape) + 0.1
            vals = [(float(p[i, j]), float(g[i, j])) for i in range(5) for j in range(6) if g[i, j] > 0]
            mp, mg = median([a for a, _ in vals]), median([b for _, b in vals])
            sc = [(a * mg / mp, b) for a, b in vals]
            rel = sum(abs(a - b) / b for a, b in sc) / len(sc)
            inl = sum(max(a / b, b / a) < 1.25 for a, b in sc) / len(sc)
            got = depth_metrics(p, g)
            assert abs(got[0] - rel) < 1e-12 and abs(got[1] - inl) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, lam):
        rng = np.random.default_rng(seed)
        g = rng.uniform(0.5, 4, (5, 6))
        p = g * rng.uniform(0.5, 1.5, g.shape)
        a, b = depth_metrics(p, g), depth_metrics(lam * p, g)
        assert abs(a[0] - b[0]) < 1e-12 and a[1] == b[1]

    def test_no_valid(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones((2, 2)), np.zeros((2, 2)))


class TestTraj:
    def test_identity(self):
        t = trajectory(np.random.default_rng(0))
        m = traj_metrics(t, t)
        assert m.ate < 1e-12 and m.rpe_trans < 1e-12 and m.rpe_rot < 1e-6

    def test_sim3_image_has_zero_ate(self):
        rng = np.random.default_rng(1)
        gt = trajectory(rng)
        G = random_pose(rng)
        pred = sim3_image(gt, 1.0 / 2.5, G)
        assert traj_metrics(pred, gt).ate < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 10))
    def test_sim3_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        gt = trajectory(rng)
        pred = [CameraPose.from_matrix(p.rotation @ random_pose(rng).rotation, p.trans + rng.normal(scale=0.1, size=3))
                for p in gt]
        base = traj_metrics(pred, gt)
        moved = traj_metrics(sim3_image(pred, scale, random_pose(rng)), gt)
        assert abs(base.ate - moved.ate) < 1e-9
        assert abs(base.rpe_trans - moved.rpe_trans) < 1e-9
        assert abs(base.rpe_rot - moved.rpe_rot) < 1e-9

    def test_noise_envelope(self):
        sigma = 0.05
        for seed in range(100):
            rng = np.random.default_rng(seed)
            gt = trajectory(rng, 100)
            pred = [CameraPose(p.quat, p.trans + rng.normal(scale=sigma, size=3)) for p in gt]
            ate = traj_metrics(pred, gt).ate
            assert 0.5 * sigma <= ate <= 2 * sigma

    def test_rotation_error_reported_in_degrees(self):
        gt = [CameraPose(quat_from_axis_angle([0, 0, 1], 0.1 * i), [i, i * i * 0.1, 0]) for i in range(5)]
        pred = [CameraPose(quat_from_axis_angle([0, 0, 1], 0.1 * i + math.radians(2) * (i % 2)), g.trans)
                for i, g in enumerate(gt)]
        assert abs(traj_metrics(pred, gt).rpe_rot - 2.0) < 1e-9

    def test_degenerate(self):
        p = [CameraPose()] * 4
        with pytest.raises(AlignmentError):
            traj_metrics(p, trajectory(np.random.default_rng(0), 4))

    def test_too_short(self):
        with pytest.raises(ValueError):
            traj_metrics([CameraPose()] * 2, [CameraPose()] * 2)
