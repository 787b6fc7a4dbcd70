from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wildsplat import diffcore as dc
from wildsplat.diffcore import Tensor, grad_check
from wildsplat.raster import (COVER_EPS, T_MIN, coverage_matrix, positional_gradient_norms, rasterize,
                              rasterize_reference)
from wildsplat.splat import Projection


def random_projection(rng, n, h, w, requires_grad=False, channels=3):
    mean = rng.uniform(-2, [w + 1, h + 1], (n, 2))
    a = rng.normal(size=(n, 2, 2)) * rng.uniform(0.5, 3.0, (n, 1, 1))
    cov = a @ np.swapaxes(a, 1, 2) + 0.3 * np.eye(2)
    return Projection(Tensor(mean, requires_grad), Tensor(cov, requires_grad), rng.uniform(0.5, 5, n),
                      Tensor(rng.uniform(0, 1, (n, channels)), requires_grad),
                      Tensor(rng.uniform(0.05, 0.99, n), requires_grad), np.arange(n))


def _ref(p, h, w, bg):
    return rasterize_reference(p.mean2d.data, p.cov2d.data, p.alpha.data, p.color.data, p.depth, h, w, bg)


def _single(mean, cov, color, alpha, depth=1.0):
    return Projection(Tensor(np.array([mean], float)), Tensor(np.array([cov], float)), np.array([depth]),
                      Tensor(np.array([color], float)), Tensor(np.array([alpha], float)), np.arange(1))


def test_empty_projection_renders_background():
    p = Projection(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2, 2))), np.zeros(0),
                   Tensor(np.zeros((0, 3))), Tensor(np.zeros(0)))
    out = rasterize(p, 4, 5, [0.2, 0.3, 0.4])
    assert out.image.shape == (4, 5, 3)
    np.testing.assert_allclose(out.image.data, np.broadcast_to([0.2, 0.3, 0.4], (4, 5, 3)))


def test_single_opaque_splat_gives_its_colour():
    out = rasterize(_single([4, 4], np.eye(2), [0.2, 0.7, 0.1], 1.0), 9, 9, [0, 0, 0])
    np.testing.assert_allclose(out.image.data[4, 4], [0.2, 0.7, 0.1], atol=1e-12)
    assert out.alpha_map[4, 4] >= 1 - 1e-4


def test_two_coincident_half_opaque_splats():
    c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
    p = Projection(Tensor(np.array([[3.0, 3.0], [3.0, 3.0]])), Tensor(np.stack([np.eye(2)] * 2)),
                   np.array([1.0, 2.0]), Tensor(np.stack([c1, c2])), Tensor(np.array([0.5, 0.5])), np.arange(2))
    out = rasterize(p, 7, 7, bg)
    np.testing.assert_allclose(out.image.data[3, 3], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force_compositor(seed):
    rng = np.random.default_rng(seed)
    p = random_projection(rng, 10, 16, 16)
    bg = rng.uniform(0, 1, 3)
    img, alpha = _ref(p, 16, 16, bg)
    out = rasterize(p, 16, 16, bg)
    assert np.abs(out.raw.data - img).max() < 1e-4
    assert np.abs(out.alpha_map - alpha).max() < 1e-4


@given(st.integers(0, 100_000), st.integers(1, 30))
def test_permuting_input_leaves_image_unchanged(seed, n):
    rng = np.random.default_rng(seed)
    p = random_projection(rng, n, 20, 18)
    perm = rng.permutation(n)
    q = Projection(Tensor(p.mean2d.data[perm]), Tensor(p.cov2d.data[perm]), p.depth[perm],
                   Tensor(p.color.data[perm]), Tensor(p.alpha.data[perm]), p.source_ids[perm])
    a = rasterize(p, 20, 18, [0.1, 0.2, 0.3]).raw.data
    b = rasterize(q, 20, 18, [0.1, 0.2, 0.3]).raw.data
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 100_000))
def test_blend_weights_are_bounded(seed):
    rng = np.random.default_rng(seed)
    p = random_projection(rng, 12, 16, 16)
    out = rasterize(p, 16, 16, [0, 0, 0])
    assert np.all((out.alpha_map >= 0) & (out.alpha_map <= 1))
    assert np.all(out.contrib >= 0)
    assert out.contrib.sum() <= 16 * 16 + 1e-9
    assert np.all(out.pixel_count <= 16 * 16)


def test_early_termination_error_is_bounded():
    rng = np.random.default_rng(7)
    p = random_projection(rng, 40, 16, 16)
    p.alpha.data[:] = rng.uniform(0.9, 0.999, 40)
    img, _ = _ref(p, 16, 16, [1, 1, 1])
    assert np.abs(rasterize(p, 16, 16, [1, 1, 1]).raw.data - img).max() < T_MIN


def test_rendering_is_deterministic():
    p = random_projection(np.random.default_rng(3), 25, 32, 32)
    a = rasterize(p, 32, 32, [0, 0, 0])
    b = rasterize(p, 32, 32, [0, 0, 0])
    np.testing.assert_array_equal(a.raw.data, b.raw.data)
    np.testing.assert_array_equal(a.pixel_count, b.pixel_count)


def test_mean_image_gradient_matches_finite_differences():
    p = random_projection(np.random.default_rng(11), 3, 8, 8, requires_grad=True)
    params = [p.mean2d, p.cov2d, p.color, p.alpha]
    res = grad_check(lambda: rasterize(p, 8, 8, [0.3, 0.2, 0.1]).raw.mean(), params)
    assert res.passed(1e-4), res


def test_weighted_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    p = random_projection(rng, 5, 12, 10, requires_grad=True)
    w = Tensor(rng.normal(size=(12, 10, 3)))
    res = grad_check(lambda: (rasterize(p, 12, 10, [0, 0, 0]).raw * w).sum(),
                     [p.mean2d, p.cov2d, p.color, p.alpha])
    assert res.passed(1e-4), res


def _grads(p, h, w):
    with dc.Tape() as tape:
        out = rasterize(p, h, w, [0.5, 0.5, 0.5])
        loss = out.raw.mean()
    g = tape.backward(loss, [p.mean2d, p.cov2d, p.color, p.alpha])
    return out, g


def test_invisible_gaussian_has_zero_gradient():
    rng = np.random.default_rng(2)
    p = random_projection(rng, 3, 8, 8, requires_grad=True)
    p.alpha.data[2] = 1e-9
    _, g = _grads(p, 8, 8)
    for t in (p.mean2d, p.cov2d, p.color, p.alpha):
        assert np.all(g[t.id][2] == 0)


def test_gaussian_behind_opaque_splat_gets_zero_gradient():
    mean = np.array([[4.0, 4.0], [4.0, 4.0]])
    cov = np.stack([np.eye(2) * 1e6, np.eye(2)])
    p = Projection(Tensor(mean, True), Tensor(cov, True), np.array([1.0, 2.0]),
                   Tensor(np.array([[1.0, 0, 0], [0, 1, 0]]), True), Tensor(np.array([1.0, 0.5]), True),
                   np.arange(2))
    _, g = _grads(p, 8, 8)
    for t in (p.mean2d, p.cov2d, p.color, p.alpha):
        assert np.all(g[t.id][1] == 0)


def test_positional_gradient_points_along_descent():
    # a red splat right of a red target region; loss is lower when it moves left
    p = _single([6.0, 4.0], np.eye(2) * 2.0, [1.0, 0, 0], 0.9)
    p.mean2d.requires_grad = True
    target = np.zeros((8, 12, 3))
    target[:, :5, 0] = 1.0
    with dc.Tape() as tape:
        out = rasterize(p, 8, 12, [0, 0, 0])
        loss = dc.absolute(out.raw - Tensor(target)).mean()
    tape.backward(loss, [p.mean2d])
    g, cov = positional_gradient_norms([out], 1)
    h = 1e-4

    def at(x):
        q = _single([x, 4.0], np.eye(2) * 2.0, [1.0, 0, 0], 0.9)
        return float(np.abs(rasterize(q, 8, 12, [0, 0, 0]).raw.data - target).mean())

    fd = (at(6.0 + h) - at(6.0 - h)) / (2 * h)
    assert g[0, 0] > 0 and np.sign(g[0, 0]) == np.sign(fd)
    assert g[0, 0] == pytest.approx(fd, rel=1e-4)
    assert 0 < cov[0] <= 1


def test_full_frame_coverage_fraction():
    p = _single([3.5, 3.5], np.eye(2) * 1e4, [1, 1, 1], 0.99)
    out = rasterize(p, 8, 8, [0, 0, 0])
    assert out.pixel_count[0] / 64 == pytest.approx(1.0, abs=0.05)


@given(st.integers(0, 100_000))
def test_pixel_count_matches_coverage_rule_for_lone_splats(seed):
    rng = np.random.default_rng(seed)
    p = random_projection(rng, 1, 12, 12)
    out = rasterize(p, 12, 12, [0, 0, 0])
    assert out.pixel_count[0] == coverage_matrix(p, 12, 12).sum()


def test_never_rendered_gaussian_has_zero_statistics():
    p = random_projection(np.random.default_rng(0), 2, 8, 8, requires_grad=True)
    _grads(p, 8, 8)
    out, _ = _grads(p, 8, 8)
    g, cov = positional_gradient_norms([out], 5)
    assert np.all(g[2:] == 0) and np.all(cov[2:] == 0)


def test_statistics_need_backward():
    p = random_projection(np.random.default_rng(0), 2, 8, 8)
    with pytest.raises(ValueError):
        positional_gradient_norms([rasterize(p, 8, 8, [0, 0, 0])], 2)


def test_cover_threshold_is_8bit_quantum():
    assert COVER_EPS == pytest.approx(1 / 255)
