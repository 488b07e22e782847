import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from nsf.geometry import PointCloud
from nsf.skeleton import (JointTransforms, Pose, Skeleton, SkinningField, canonicalize, forward_kinematics,
                          lbs_forward, load_pose_sequence, query_weights, save_pose_sequence)


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def hom(R=np.eye(3), t=(0, 0, 0)):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def chain():
    return Skeleton((-1, 0), [[0, 0, 0], [1, 0, 0]])


def test_identity_pose_keeps_rest_joints():
    sk = Skeleton((-1, 0, 1), [[0, 1, 0], [0, 0.5, 0], [0.3, 0, 0]])
    T = forward_kinematics(sk, Pose.zero(3))
    np.testing.assert_allclose(T.matrices, np.tile(np.eye(4), (3, 1, 1)), atol=1e-15)
    np.testing.assert_allclose(T.joint_positions, sk.rest_positions(), atol=1e-15)


def test_child_rotated_at_parent_by_hand():
    sk = Skeleton((-1, 0, 1), [[0, 0, 0], [1, 0, 0], [1, 0, 0]])
    # rotate joint 1 by 90 deg about z: its child (rest (2,0,0)) swings to (1,1,0)
    aa = np.zeros((3, 3))
    aa[1] = (0, 0, np.pi / 2)
    T = forward_kinematics(sk, Pose(aa))
    np.testing.assert_allclose(T.joint_positions[2], [1.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(T.joint_positions[1], [1.0, 0.0, 0.0], atol=1e-12)
    # T_1 maps a rest point bound to joint 1 about the joint centre
    np.testing.assert_allclose(T.matrices[1] @ [2.0, 0, 0, 1], [1.0, 1.0, 0, 1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_pose_rotations_orthonormal(seed):
    rng = np.random.default_rng(seed)
    sk = Skeleton((-1, 0, 1, 1, 0), rng.normal(size=(5, 3)))
    aa = rng.normal(size=(5, 3))
    aa *= np.minimum(1.0, 3.0 / np.linalg.norm(aa, axis=1, keepdims=True))
    R = forward_kinematics(sk, Pose(aa, rng.normal(size=3))).matrices[:, :3, :3]
    np.testing.assert_allclose(np.einsum("kji,kjl->kil", R, R), np.tile(np.eye(3), (5, 1, 1)), atol=1e-6)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-6)


def test_skeleton_rejects_bad_parent_order():
    with pytest.raises(ValueError):
        Skeleton((-1, 2, 0), np.zeros((3, 3)))


def test_pose_rejects_large_angles():
    with pytest.raises(ValueError):
        Pose([[0, 0, 3.2]])


# -- LBS ------------------------------------------------------------------------------------

def transforms(*mats):
    m = np.stack(mats)
    return JointTransforms(m, m[:, :3, 3].copy())


def test_lbs_identity_transforms_unchanged():
    p = np.random.default_rng(0).normal(size=(10, 3))
    w = np.full((10, 2), 0.5)
    np.testing.assert_allclose(lbs_forward(p, w, transforms(hom(), hom())), p, atol=1e-15)


def test_lbs_pure_rotation():
    out = lbs_forward([[1.0, 0, 0]], [[1.0]], transforms(hom(rz(90))))
    np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-12)


def test_lbs_blend_half_half():
    out = lbs_forward([[1.0, 0, 0]], [[0.5, 0.5]], transforms(hom(), hom(rz(90))))
    blended = 0.5 * hom() + 0.5 * hom(rz(90))
    np.testing.assert_allclose(out[0], (blended @ [1, 0, 0, 1])[:3], atol=1e-12)
    np.testing.assert_allclose(out, [[0.5, 0.5, 0]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lbs_equivariant_under_global_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    k = 4
    mats = [hom(Rotation.random(random_state=rng.integers(1 << 30)).as_matrix(), rng.normal(size=3)) for _ in range(k)]
    G = hom(Rotation.random(random_state=rng.integers(1 << 30)).as_matrix(), rng.normal(size=3))
    p = rng.normal(size=(20, 3))
    w = rng.dirichlet(np.ones(k), size=20)
    a = lbs_forward(p, w, transforms(*mats))
    b = lbs_forward(p, w, transforms(*[G @ m for m in mats]))
    np.testing.assert_allclose(b, a @ G[:3, :3].T + G[:3, 3], atol=1e-10)


# -- skinning field -------------------------------------------------------------------------

def random_field(seed=0, n=200, k=4):
    rng = np.random.default_rng(seed)
    return SkinningField(rng.random((n, 3)), rng.dirichlet(np.ones(k), size=n))


def test_query_at_basis_point_returns_its_weights():
    f = random_field()
    np.testing.assert_array_equal(query_weights(f, f.basis_points[[5, 17]]), f.basis_weights[[5, 17]])


def test_query_midpoint_of_two_one_hot_points():
    f = SkinningField([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [0, 1, 0]], k=2)
    np.testing.assert_allclose(query_weights(f, [[0.5, 0, 0]]), [[0.5, 0.5, 0.0]], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_query_is_convex(seed):
    f = random_field(seed % 5)
    x = np.random.default_rng(seed).uniform(-0.5, 1.5, size=(50, 3))
    w = f.query(x)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


def test_query_lipschitz_away_from_basis():
    f = random_field(1)
    rng = np.random.default_rng(2)
    x = rng.random((300, 3))
    u = rng.normal(size=(300, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    far = f.index.query(x, 1)[0][:, 0] > 0.02
    ratios = []
    for delta in (1e-4, 1e-5, 1e-6):
        change = np.abs(f.query(x + delta * u) - f.query(x)).sum(1)[far]
        ratios.append(change.max() / delta)
    # O(delta): the difference quotient stays bounded as delta shrinks
    assert ratios[-1] < 2 * ratios[0] + 1e-9
    assert np.isfinite(ratios).all()


def test_field_rejects_nonconvex_weights():
    with pytest.raises(ValueError):
        SkinningField([[0, 0, 0]], [[0.7, 0.7]])


# -- canonicalization ---------------------------------------------------------------------------

def two_bone_setup():
    sk = Skeleton((-1, 0), [[0, 0, 0], [0.5, 0, 0]])
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-0.5, 1.0, 400), rng.uniform(-0.1, 0.1, (400, 2))]
    t = np.clip((pts[:, 0] - 0.3) / 0.4, 0, 1)
    field = SkinningField(pts, np.c_[1 - t, t])
    return sk, field, pts


def test_canonicalize_identity_pose_is_identity():
    sk, field, pts = two_bone_setup()
    n = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    res = canonicalize(PointCloud(pts, n), Pose.zero(2), sk, field)
    assert res.converged.all()
    np.testing.assert_allclose(res.cloud.points, pts, atol=1e-12)
    np.testing.assert_allclose(res.cloud.normals, n, atol=1e-12)


def test_canonicalize_rigid_one_hot():
    sk = Skeleton((-1,), [[0, 0, 0]])
    rng = np.random.default_rng(1)
    basis = rng.normal(size=(100, 3))
    field = SkinningField(basis, np.ones((100, 1)))
    pose = Pose([[0.3, -0.4, 0.5]], translation=[0.1, 0.2, -0.3])
    T = forward_kinematics(sk, pose).matrices[0]
    xc = rng.normal(size=(50, 3))
    nc = rng.normal(size=(50, 3))
    nc /= np.linalg.norm(nc, axis=1, keepdims=True)
    x = xc @ T[:3, :3].T + T[:3, 3]
    res = canonicalize(PointCloud(x, nc @ T[:3, :3].T), pose, sk, field)
    np.testing.assert_allclose(res.cloud.points, xc, atol=1e-10)
    np.testing.assert_allclose(res.cloud.normals, nc, atol=1e-10)


def test_canonicalize_round_trip_and_monotone_residual():
    sk, field, pts = two_bone_setup()
    aa = np.zeros((2, 3))
    aa[1] = (0, 0, 0.8)
    pose = Pose(aa)
    T = forward_kinematics(sk, pose)
    x = lbs_forward(pts, field.query(pts), T)
    cloud = PointCloud(x)
    prev = None
    for it in range(1, 8):
        r = canonicalize(cloud, pose, sk, field, max_iter=it, restarts=0, method="fixed_point")
        if prev is not None:
            assert np.all(r.residual <= prev + 1e-15)
        prev = r.residual
    full = canonicalize(cloud, pose, sk, field)
    ok = full.converged
    assert ok.mean() >= 0.99
    back = lbs_forward(full.cloud.points[ok], field.query(full.cloud.points[ok]), T)
    assert np.max(np.linalg.norm(back - x[ok], axis=1)) < 1e-4


def test_canonicalize_unknown_method():
    sk, field, pts = two_bone_setup()
    with pytest.raises(ValueError):
        canonicalize(PointCloud(pts), Pose.zero(2), sk, field, method="bisection")


def test_pose_sequence_json_round_trip(tmp_path):
    sk = Skeleton((-1, 0), [[0, 1, 0], [0.2, 0, 0]], ("root", "arm"))
    poses = [Pose(np.random.default_rng(i).uniform(-1, 1, (2, 3)), [0, 0, i]) for i in range(3)]
    path = str(tmp_path / "p.json")
    save_pose_sequence(path, sk, poses)
    sk2, poses2, _ = load_pose_sequence(path)
    assert sk2.parents == sk.parents and sk2.names == sk.names
    for a, b in zip(poses, poses2):
        np.testing.assert_array_equal(a.axis_angle, b.axis_angle)
        np.testing.assert_array_equal(a.translation, b.translation)


def test_pose_sequence_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"parents": [-1], "frames": [{}]}')
    with pytest.raises(ValueError):
        load_pose_sequence(str(path))
