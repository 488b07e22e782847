import numpy as np
import pytest

from nsf.autodiff import grad_check
from nsf.fusion import (FusionShape, fusion_from_state, fusion_loss, fusion_state, project_to_surface, sdf_eval,
                        sdf_grad, train_fusion)
from nsf.geometry import PointCloud


def sphere_cloud(n, r, seed=0, center=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return PointCloud(r * u + np.asarray(center), u)


def small(**kw):
    base = dict(hidden=(64, 64), code_dim=16, beta=100.0, sphere_steps=300, n_steps=0, seed=0, log_every=0)
    base.update(kw)
    return FusionShape(**base)


@pytest.fixture(scope="module")
def init_only():
    return small(init_radius=0.5).initialize(["a"])


@pytest.fixture(scope="module")
def trained_sphere():
    m = small(n_steps=600, lambda_eik=0.1)
    return m.fit({"a": sphere_cloud(4000, 0.5)})


def test_initialized_decoder_is_sphere(init_only):
    # the code weight starts at zero, so every subject starts on the same sphere
    v = sdf_eval(init_only, "a", [[0, 0, 0], [1.0, 0, 0], [0, -0.5, 0]])
    np.testing.assert_allclose(v[:2], [-0.5, 0.5], atol=0.05)
    assert abs(v[2]) < 0.02


def test_gradient_of_perfect_slab_sdf_matches_closed_form():
    # one-layer identity network: f(x) = z exactly
    m = small(hidden=(4,), sphere_steps=0).initialize(["a"])
    dec = m.decoder_
    dec.weights[0].data[:] = 0.0
    dec.weights[0].data[2, 0] = 1.0
    dec.biases[0].data[:] = 5.0  # softplus ~ identity well above zero
    dec.weights[1].data[:] = 0.0
    dec.weights[1].data[0, 0] = 1.0
    dec.biases[1].data[:] = -5.0
    x = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
    np.testing.assert_allclose(sdf_eval(m, "a", x), x[:, 2], atol=1e-12)
    np.testing.assert_allclose(sdf_grad(m, "a", x), np.tile([0, 0, 1.0], (20, 1)), atol=1e-12)


def test_loss_terms_on_slab():
    m = small(hidden=(4,), sphere_steps=0, lambda_eik=0.1).initialize(["a"])
    dec = m.decoder_
    dec.weights[0].data[:] = 0.0
    dec.weights[1].data[:] = 0.0
    # f(x) = 2 z: wrong slope on purpose
    dec.weights[0].data[2, 0] = 2.0
    dec.biases[0].data[:] = 5.0
    dec.weights[1].data[0, 0] = 1.0
    dec.biases[1].data[:] = -5.0
    rng = np.random.default_rng(1)
    pts = np.c_[rng.uniform(-1, 1, (30, 2)), np.zeros(30)]
    nrm = np.tile([0, 0, 1.0], (30, 1))
    eik = rng.uniform(-1, 1, (40, 3))
    _, terms = fusion_loss(m, pts, nrm, np.zeros(30, int), eik, np.zeros(40, int))
    assert terms["sdf"] == pytest.approx(0.0, abs=1e-12)
    assert terms["normal"] == pytest.approx(1.0, abs=1e-9)  # |2e_z - e_z|
    assert terms["eikonal"] == pytest.approx(1.0, abs=1e-9)  # (|grad| - 1)^2 = 1
    assert terms["total"] == pytest.approx(1.0 + 0.1, abs=1e-9)


def test_fusion_loss_grad_check():
    m = small(hidden=(8, 8), code_dim=4, sphere_steps=0, beta=5.0).initialize(["a", "b"])
    m.code_weight_.data[:] = np.random.default_rng(0).normal(0, 0.1, m.code_weight_.data.shape)
    c = sphere_cloud(6, 0.5, seed=2)
    rows = np.array([0, 1, 0, 1, 0, 1])
    eik = np.random.default_rng(3).uniform(-1, 1, (5, 3))
    err = grad_check(lambda: fusion_loss(m, c.points, c.normals, rows, eik, np.array([0, 1, 1, 0, 1]))[0],
                     m.parameters() + [m.codes_], max_entries=None)
    assert err < 1e-3


def test_zero_steps_leaves_model_unchanged(init_only):
    before = init_only.checksum()
    train_fusion(init_only, {"a": sphere_cloud(100, 0.5)}, n_steps=0)
    assert init_only.checksum() == before


def test_trained_sphere_surface_accuracy(trained_sphere):
    test = sphere_cloud(2000, 0.5, seed=9)
    f, g = trained_sphere.sdf_and_grad("a", test.points)
    assert np.mean(np.abs(f)) < 1e-2
    cosang = np.sum(g * test.normals, 1) / np.linalg.norm(g, axis=1)
    assert np.degrees(np.arccos(np.clip(cosang, -1, 1))).mean() < 5.0


def test_projection_lands_on_sphere(trained_sphere):
    rng = np.random.default_rng(4)
    u = rng.normal(size=(300, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    p = project_to_surface(trained_sphere, "a", 0.7 * u)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 0.5, atol=5e-3)
    # displaced radially
    np.testing.assert_allclose(np.sum(p * u, 1) / np.linalg.norm(p, axis=1), 1.0, atol=1e-3)


def test_projection_never_increases_residual(trained_sphere):
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.8, 0.8, size=(500, 3))
    x = x[np.linalg.norm(x, axis=1) > 0.2]
    _, info = trained_sphere.project("a", x, return_info=True)
    h = info["history"]
    assert np.all(np.diff(h, axis=0) <= 1e-15)
    band = np.abs(h[0]) < 0.05
    assert np.all(h[-1][band] < 1e-3)


def test_two_subjects_get_distinct_zero_sets():
    m = small(n_steps=500)
    m.fit({"small": sphere_cloud(3000, 0.3, seed=1), "big": sphere_cloud(3000, 0.6, seed=2)})
    probe = np.array([[0.45, 0.0, 0.0], [0.0, 0.45, 0.0], [0.0, 0.0, -0.45]])
    assert np.all(sdf_eval(m, "small", probe) > 0.05)
    assert np.all(sdf_eval(m, "big", probe) < -0.05)


def test_unknown_subject_raises(init_only):
    with pytest.raises(KeyError):
        sdf_eval(init_only, "nobody", [[0, 0, 0]])


def test_state_round_trip(trained_sphere):
    m2 = fusion_from_state(fusion_state(trained_sphere), beta=trained_sphere.beta)
    x = np.random.default_rng(0).uniform(-0.6, 0.6, (100, 3))
    # float32 storage
    np.testing.assert_allclose(sdf_eval(m2, "a", x), sdf_eval(trained_sphere, "a", x), atol=1e-4)
