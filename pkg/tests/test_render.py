import numpy as np
import pytest
from conftest import make_camera
from oracles import brute_force, random_scene

from odesplat.autodiff import ContractError, Graph, check_gradient
from odesplat.gaussians import GaussianKernel, ParticleSet
from odesplat.render import (
    ALPHA_MAX,
    DILATION,
    Camera,
    KernelVars,
    Splat2D,
    composite_pixel,
    evaluate_alpha,
    project_gaussian,
    render_image,
    render_particles,
    transmittance,
)


def splat(center, cov, opacity, color, depth=1.0):
    return Splat2D(np.asarray(center, float), np.asarray(cov, float), depth, opacity, np.asarray(color, float))


def test_camera_rejects_bad_rotation():
    view = np.eye(4)
    view[0, 0] = 2.0
    with pytest.raises(ContractError):
        Camera(view, 10, 10, 8, 8, 16, 16)


def test_on_axis_projects_to_principal_point():
    cam = Camera(np.eye(4), 50, 50, 8, 8, 16, 16)
    k = GaussianKernel(np.array([0, 0, 3.0]), np.array([1.0, 0, 0, 0]), np.array([0.3, 0.1, 0.2]), 0.5, np.ones(3))
    np.testing.assert_allclose(project_gaussian(k, cam).center, [8, 8])


def test_tiny_covariance_floors_at_dilation():
    cam = Camera(np.eye(4), 50, 50, 8, 8, 16, 16)
    k = GaussianKernel(np.array([0.1, 0, 3.0]), np.array([1.0, 0, 0, 0]), np.full(3, 1e-9), 0.5, np.ones(3))
    np.testing.assert_allclose(project_gaussian(k, cam).cov2d, DILATION * np.eye(2), atol=1e-12)


def test_cov2d_matches_numeric_jacobian():
    cam = Camera(np.eye(4), 100, 100, 0, 0, 16, 16)
    mu = np.array([0.1, -0.2, 2.0])
    k = GaussianKernel(mu, np.array([1.0, 0, 0, 0]), np.ones(3), 1.0, np.ones(3))

    def proj(p):
        return np.array([100 * p[0] / p[2], 100 * p[1] / p[2]])

    jac = np.zeros((2, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        jac[:, i] = (proj(mu + e) - proj(mu - e)) / 2e-6
    expected = jac @ np.eye(3) @ jac.T + DILATION * np.eye(2)
    np.testing.assert_allclose(project_gaussian(k, cam).cov2d, expected, atol=1e-6)


def test_alpha_examples():
    s = splat([0, 0], np.eye(2), 0.6, np.ones(3))
    assert evaluate_alpha(s, [0, 0]) == pytest.approx(0.6)
    s1 = splat([0, 0], np.eye(2), 1.0, np.ones(3))
    assert evaluate_alpha(s1, [np.sqrt(2), 0]) == pytest.approx(np.exp(-1), abs=1e-12)
    assert evaluate_alpha(splat([0, 0], np.eye(2), 0.0, np.ones(3)), [0.3, 0.1]) == 0.0


def test_composite_examples():
    np.testing.assert_array_equal(composite_pixel([], [0, 0]), np.zeros(3))
    c = np.array([0.2, 0.4, 0.8])
    np.testing.assert_allclose(composite_pixel([splat([0, 0], np.eye(2), 1.0, c)], [0, 0]), c * ALPHA_MAX)
    c1, c2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    two = [splat([0, 0], np.eye(2), 0.5, c1, 1.0), splat([0, 0], np.eye(2), 0.5, c2, 2.0)]
    np.testing.assert_allclose(composite_pixel(two, [0, 0]), 0.5 * c1 + 0.25 * c2)


def test_composite_requires_depth_order():
    two = [splat([0, 0], np.eye(2), 0.5, np.ones(3), 2.0), splat([0, 0], np.eye(2), 0.5, np.ones(3), 1.0)]
    with pytest.raises(ContractError):
        composite_pixel(two, [0, 0])


def test_transmittance_partition_of_unity(rng):
    for _ in range(50):
        a = rng.uniform(0, ALPHA_MAX, size=rng.integers(1, 40))
        t, final = transmittance(a)
        assert np.all(np.diff(t) <= 0) and np.all((t >= 0) & (t <= 1))
        assert abs(np.sum(t * a) + final - 1.0) <= 1e-12


def test_empty_scene_is_black(camera):
    np.testing.assert_array_equal(render_particles(ParticleSet.empty(), camera), np.zeros((16, 16, 3)))


def test_centered_gaussian_peaks_at_principal_point():
    cam = make_camera(17, 17, eye=(0, -3, 0))
    cam = Camera(cam.view, 20, 20, 8, 8, 17, 17)
    ps = ParticleSet.from_kernels(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), 0.1), np.array([0.8]), np.ones((1, 3)))
    img = render_particles(ps, cam)
    y, x = np.unravel_index(np.argmax(img[..., 0]), img.shape[:2])
    assert (x, y) == (8, 8)


def test_three_splats_match_brute_force(rng):
    cam = make_camera(8, 8, f=10.0)
    ps = random_scene(rng, 3)
    np.testing.assert_allclose(render_particles(ps, cam), brute_force(ps, cam), atol=1e-6)


@pytest.mark.parametrize("mode", ["dense", "tiled"])
def test_paths_match_brute_force(rng, mode):
    cam = make_camera(24, 20, f=25.0)
    ps = random_scene(rng, 30)
    np.testing.assert_allclose(render_particles(ps, cam, mode=mode), brute_force(ps, cam), atol=1e-6)


def test_renderer_gradients_all_kernel_params(rng):
    cam = make_camera(16, 16, f=22.0)
    ps = random_scene(rng, 5, spread=0.4)
    keys = ("mu", "rot", "log_scale", "opacity", "color")
    target = rng.uniform(size=(16, 16, 3))
    for key in keys:
        def f(x, key=key):
            g = x.graph
            vals = {k: (x if k == key else g.constant(getattr(ps, k))) for k in keys}
            img = render_image(KernelVars(**vals), cam)
            return ((img - target) ** 2).sum()

        assert check_gradient(f, getattr(ps, key)) <= 1e-4, key


def test_render_graph_is_connected(rng, camera):
    g = Graph()
    ps = random_scene(rng, 4, spread=0.3)
    kv = KernelVars.from_particles(g, ps, requires_grad=True)
    grads = g.backward(render_image(kv, camera).sum())
    assert np.abs(grads[kv.color]).sum() > 0
