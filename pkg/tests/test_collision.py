import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pourplan import collision as C


def pose(t, R=None):
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    T[:3, 3] = t
    return T


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_shape(rng):
    kind = rng.integers(3)
    if kind == 0:
        return C.Sphere(float(rng.uniform(0.1, 0.5)))
    if kind == 1:
        return C.Capsule(tuple(rng.uniform(-0.3, 0.3, 3)),
                         tuple(rng.uniform(-0.3, 0.3, 3)),
                         float(rng.uniform(0.05, 0.3)))
    return C.Box(tuple(rng.uniform(0.1, 0.5, 3)))


class TestSphereSphere:
    def test_overlapping(self):
        c = C.check_pair(C.Sphere(0.5), pose([0.6, 0, 0]),
                         C.Sphere(0.5), pose([0, 0, 0]))
        assert c.d == pytest.approx(0.4, rel=1e-12)
        assert c.n == pytest.approx([1.0, 0.0, 0.0])
        assert not c.degenerate

    def test_far_apart_with_margin(self):
        c = C.check_pair(C.Sphere(0.5), pose([2.0, 0, 0]),
                         C.Sphere(0.5), pose([0, 0, 0]), margin=0.1)
        assert c is None

    def test_coincident_degenerate(self):
        c = C.check_pair(C.Sphere(0.5), pose([0, 0, 0]),
                         C.Sphere(0.5), pose([0, 0, 0]))
        assert c.degenerate
        assert c.d == pytest.approx(1.0)
        assert c.n == pytest.approx([0.0, 0.0, 1.0])

    def test_witness_point_identity(self):
        c = C.check_pair(C.Sphere(0.3), pose([1.0, 0, 0]),
                         C.Sphere(0.2), pose([0, 0, 0]), margin=1.0)
        # <n, a-b> = signed distance by convention
        assert float(c.n @ (c.a - c.b)) == pytest.approx(c.signed_distance)


class TestCapsuleBox:
    def test_penetration_depth(self):
        cap = C.Capsule((-0.3, 0, 0), (0.3, 0, 0), 0.1)
        box = C.Box((0.5, 0.5, 0.5))
        c = C.check_pair(cap, pose([0, 0, 0.55]), box, pose([0, 0, 0]))
        assert c.d == pytest.approx(0.05, abs=1e-9)
        assert c.n == pytest.approx([0.0, 0.0, 1.0])

    def test_separation_distance(self):
        cap = C.Capsule((-0.3, 0, 0), (0.3, 0, 0), 0.1)
        box = C.Box((0.5, 0.5, 0.5))
        c = C.check_pair(cap, pose([0, 0, 0.75]), box, pose([0, 0, 0]),
                         margin=0.5)
        assert c.d == pytest.approx(-0.15, abs=1e-9)

    def test_distance_vs_sampled_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            cap = C.Capsule(tuple(rng.uniform(-0.3, 0.3, 3)),
                            tuple(rng.uniform(-0.3, 0.3, 3)),
                            float(rng.uniform(0.05, 0.2)))
            box = C.Box(tuple(rng.uniform(0.1, 0.4, 3)))
            pa = pose(rng.uniform(-1.0, 1.0, 3), random_rotation(rng))
            pb = pose(rng.uniform(-0.3, 0.3, 3), random_rotation(rng))
            c = C.check_pair(cap, pa, box, pb, margin=10.0)
            # dense sampling of the segment as an independent oracle
            Ra, ta = pa[:3, :3], pa[:3, 3]
            Rb, tb = pb[:3, :3], pb[:3, 3]
            s = np.linspace(0.0, 1.0, 4001)[:, None]
            p0 = Ra @ np.array(cap.p0) + ta
            p1 = Ra @ np.array(cap.p1) + ta
            pts = p0 + s * (p1 - p0)
            local = (pts - tb) @ Rb
            half = np.array(box.half_extents)
            outside = np.maximum(np.abs(local) - half, 0.0)
            d_out = np.linalg.norm(outside, axis=1)
            inside_gap = np.min(half - np.abs(local), axis=1)
            signed = np.where(d_out > 0, d_out, -inside_gap)
            oracle_sd = float(signed.min()) - cap.radius
            assert c.signed_distance == pytest.approx(oracle_sd, abs=2e-4)


class TestBoxBox:
    def test_face_overlap(self):
        c = C.check_pair(C.Box((0.5, 0.5, 0.5)), pose([0.8, 0, 0]),
                         C.Box((0.5, 0.5, 0.5)), pose([0, 0, 0]))
        assert c.d == pytest.approx(0.2, rel=1e-9)
        assert abs(c.n[0]) == pytest.approx(1.0)

    def test_separated_distance(self):
        c = C.check_pair(C.Box((0.5, 0.5, 0.5)), pose([1.5, 0, 0]),
                         C.Box((0.5, 0.5, 0.5)), pose([0, 0, 0]), margin=1.0)
        assert c.d == pytest.approx(-0.5, abs=1e-9)

    def test_rotated_corner_overlap(self):
        R = random_rotation(np.random.default_rng(0))
        c = C.check_pair(C.Box((0.3, 0.3, 0.3)), pose([0.0, 0, 0.0], R),
                         C.Box((0.3, 0.3, 0.3)), pose([0.55, 0, 0]))
        assert c is not None and c.d > 0


class TestDeepestContacts:
    def test_no_penetrations_empty(self):
        obstacles = [("box", C.Box((0.1, 0.1, 0.1)), pose([5, 0, 0]))]
        bodies = [("s", C.Sphere(0.1), pose([0, 0, 0]))]
        assert C.deepest_contacts(obstacles, bodies) == []

    def test_deepest_feature_retained(self):
        # capsule crossing a box corner region: single contact, max depth
        obstacles = [("box", C.Box((0.5, 0.5, 0.5)), pose([0, 0, 0]))]
        cap = C.Capsule((-0.6, 0, 0), (0.6, 0, 0), 0.05)
        bodies = [("c", cap, pose([0, 0, 0.4]))]
        out = C.deepest_contacts(obstacles, bodies)
        assert len(out) == 1
        assert out[0].d == pytest.approx(0.15, abs=1e-9)

    def test_two_bodies_two_contacts(self):
        obstacles = [("box", C.Box((0.5, 0.5, 0.5)), pose([0, 0, 0]))]
        bodies = [("a", C.Sphere(0.2), pose([0, 0, 0.6])),
                  ("b", C.Sphere(0.2), pose([0.6, 0, 0]))]
        out = C.deepest_contacts(obstacles, bodies)
        assert len(out) == 2
        assert {c.body_a for c in out} == {"a", "b"}

    def test_adjacency_skips_pairs(self):
        bodies = [("a", C.Sphere(0.3), pose([0, 0, 0])),
                  ("b", C.Sphere(0.3), pose([0.2, 0, 0]))]
        out = C.deepest_contacts([], bodies,
                                 adjacency={frozenset(("a", "b"))})
        assert out == []

    def test_min_separation_nonnegative_when_clear(self):
        obstacles = [("box", C.Box((0.5, 0.5, 0.5)), pose([0, 0, 0]))]
        bodies = [("s", C.Sphere(0.1), pose([0, 0, 1.0]))]
        assert C.min_separation(obstacles, bodies) >= 0.0


class TestProperties:
    @given(seed=st.integers(0, 10 ** 6))
    def test_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        sa, sb = random_shape(rng), random_shape(rng)
        pa = pose(rng.uniform(-0.6, 0.6, 3), random_rotation(rng))
        pb = pose(rng.uniform(-0.6, 0.6, 3), random_rotation(rng))
        c1 = C.check_pair(sa, pa, sb, pb, margin=10.0)
        c2 = C.check_pair(sb, pb, sa, pa, margin=10.0)
        if c1.degenerate or c2.degenerate:
            return
        assert c1.d == pytest.approx(c2.d, abs=1e-9)
        assert np.linalg.norm(c1.n + c2.n) <= 1e-6
        assert np.linalg.norm(c1.a - c2.b) <= 1e-6

    @given(seed=st.integers(0, 10 ** 6))
    def test_depth_is_lipschitz_in_translation(self, seed):
        rng = np.random.default_rng(seed)
        sa, sb = random_shape(rng), random_shape(rng)
        pa = pose(rng.uniform(-0.8, 0.8, 3), random_rotation(rng))
        pb = pose(rng.uniform(-0.4, 0.4, 3), random_rotation(rng))
        delta = rng.normal(size=3)
        delta *= rng.uniform(1e-4, 1e-2) / np.linalg.norm(delta)
        pa2 = pa.copy()
        pa2[:3, 3] += delta
        c1 = C.check_pair(sa, pa, sb, pb, margin=100.0)
        c2 = C.check_pair(sa, pa2, sb, pb, margin=100.0)
        if c1.degenerate or c2.degenerate:
            return
        assert abs(c1.d - c2.d) <= np.linalg.norm(delta) * (1 + 1e-6) + 1e-9

    @given(seed=st.integers(0, 10 ** 6))
    def test_penetration_witness_consistency(self, seed):
        rng = np.random.default_rng(seed)
        sa, sb = random_shape(rng), random_shape(rng)
        pa = pose(rng.uniform(-0.3, 0.3, 3), random_rotation(rng))
        pb = pose(rng.uniform(-0.3, 0.3, 3), random_rotation(rng))
        c = C.check_pair(sa, pa, sb, pb, margin=10.0)
        if c.degenerate:
            return
        assert np.linalg.norm(c.n) == pytest.approx(1.0, rel=1e-9)
        if c.d > 0:
            assert float(c.n @ (c.a - c.b)) <= 1e-9
