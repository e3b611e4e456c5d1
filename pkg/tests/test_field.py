import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmstyle.field import (FieldConfig, FieldParams, RadianceField, TrainConfig, TrainingError, composite,
                           encode_position, field_eval, init_field, load_field, pretrain_nerf, render_image,
                           render_ray, render_rays, save_field)
from mmstyle.scene_io import SceneBundle, arc_cameras, generate_synthetic_scene

F64 = torch.float64


def constant_field(sigma_bias=0.0, color=(0.5, 0.5, 0.5), config=None, seed=0):
    """Heads with zero weights: every point has the same opacity and colour."""
    cfg = config or FieldConfig()
    p = init_field(cfg, seed=seed, dtype=F64, zero_heads=True)
    p.opacity_head[-1][1][:] = sigma_bias
    c = torch.tensor(color, dtype=F64)
    p.color_head[-1][1][:] = torch.log(c / (1 - c))
    return p


def softplus_inv(y):
    return math.log(math.expm1(y))


# encoding

def test_encode_zero_input():
    e = encode_position(np.zeros(3), n_freqs=2)
    assert e.shape[-1] == 15
    sins = torch.cat([e[3:6], e[9:12]])
    coss = torch.cat([e[6:9], e[12:15]])
    assert torch.all(sins == 0) and torch.all(coss == 1)


def test_encode_length():
    assert encode_position(np.zeros(3), n_freqs=4).shape[-1] == 27


def test_encode_quarter():
    e = encode_position(np.array([0.25, 0.0, 0.0]), n_freqs=1)
    assert e[3].item() == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


def test_encode_clamps_outside_bound():
    a = encode_position(np.array([9.0, 0.0, 0.0]), n_freqs=2, bound=1.5)
    b = encode_position(np.array([1.5, 0.0, 0.0]), n_freqs=2, bound=1.5)
    assert torch.equal(a, b)


# field evaluation

def test_zero_heads_give_softplus_zero_and_gray():
    p = init_field(FieldConfig(), dtype=F64, zero_heads=True)
    sigma, color = field_eval(p, np.random.default_rng(0).normal(size=(5, 3)), np.tile([0, 0, 1.0], (5, 1)))
    assert torch.allclose(sigma, torch.full((5,), math.log(2.0), dtype=F64))
    assert torch.allclose(color, torch.full((5, 3), 0.5, dtype=F64))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_outputs_in_range(seed):
    p = init_field(FieldConfig(trunk_width=16, head_width=16), seed=seed, dtype=F64)
    g = np.random.default_rng(seed)
    d = g.normal(size=(8, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sigma, color = field_eval(p, g.uniform(-2, 2, (8, 3)), d)
    assert torch.all(sigma >= 0)
    assert torch.all((color >= 0) & (color <= 1))


def test_direction_sign_flip_only_invariant_without_direction_frequencies():
    x = np.random.default_rng(0).normal(size=(6, 3)) * 0.5
    d = np.random.default_rng(1).normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    flat = init_field(FieldConfig(dir_freqs=0), seed=3, dtype=F64)
    assert torch.equal(field_eval(flat, x, d)[1], field_eval(flat, x, -d)[1])
    dep = init_field(FieldConfig(dir_freqs=2), seed=3, dtype=F64)
    assert not torch.allclose(field_eval(dep, x, d)[1], field_eval(dep, x, -d)[1])


def test_sigma_gradient_matches_finite_difference():
    p = init_field(FieldConfig(trunk_width=16, head_width=16), seed=5, dtype=F64)
    x = np.array([[0.1, -0.2, 0.3]])
    d = np.array([[0.0, 0.0, 1.0]])
    w = p.opacity_head[0][0]
    w.requires_grad_(True)
    sigma, _ = field_eval(p, x, d)
    (g,) = torch.autograd.grad(sigma.sum(), w)
    w.requires_grad_(False)
    i, j = 3, 7
    h = 1e-6
    with torch.no_grad():
        w[i, j] += h
        up = field_eval(p, x, d)[0].item()
        w[i, j] -= 2 * h
        down = field_eval(p, x, d)[0].item()
        w[i, j] += h
    fd = (up - down) / (2 * h)
    assert abs(fd - g[i, j].item()) <= 1e-4 * max(abs(fd), 1e-8)


# rendering

def test_transparent_medium_renders_black():
    p = constant_field(sigma_bias=-1e4)
    rgb = render_ray(p, [0, 0, 0], [0, 0, 1.0], 0.0, 1.0)
    assert torch.all(rgb.abs() < 1e-12)


def test_homogeneous_medium_closed_form():
    c = (0.2, 0.6, 0.9)
    p = constant_field(sigma_bias=softplus_inv(math.log(2.0)), color=c, config=FieldConfig(samples_per_ray=64))
    rgb = render_ray(p, [0, 0, 0], [0, 0, 1.0], 0.0, 1.0, generator=torch.Generator().manual_seed(0))
    assert np.allclose(rgb.numpy(), 0.5 * np.array(c), atol=1e-3)


def test_homogeneous_medium_converges_with_samples():
    c = (0.3, 0.3, 0.3)
    errs = []
    for s in (8, 16, 32, 64):
        p = constant_field(softplus_inv(math.log(2.0)), c, FieldConfig(samples_per_ray=s, stratified=False))
        errs.append(abs(render_ray(p, [0, 0, 0], [0, 0, 1.0], 0.0, 1.0)[0].item() - 0.15))
    assert all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))


def test_opaque_first_sample():
    cfg = FieldConfig(samples_per_ray=16, stratified=False)
    p = constant_field(1e3, (0.1, 0.7, 0.4), cfg)
    rgb = render_ray(p, [0, 0, 0], [0, 0, 1.0], 0.0, 1.0)
    assert np.allclose(rgb.numpy(), [0.1, 0.7, 0.4], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=2, max_size=20))
def test_weights_nonnegative_and_at_most_one(sigmas):
    s = torch.tensor([sigmas], dtype=F64)
    t = torch.linspace(0, 1, len(sigmas) + 1, dtype=F64)[None]
    _, w = composite(s, torch.ones(1, len(sigmas), 3, dtype=F64), t)
    assert torch.all(w >= 0)
    assert w.sum().item() <= 1 + 1e-12


def test_colour_head_swap_keeps_opacity(scene4):
    p = init_field(FieldConfig(samples_per_ray=16), seed=1, dtype=F64)
    q = init_field(FieldConfig(samples_per_ray=16), seed=2, dtype=F64)
    o, d = scene4.cameras[0].pixel_rays()
    o, d = o[:50], d[:50]
    rgb1, w1 = render_rays(p, o, d, 1.0, 3.0, stratified=False, return_weights=True)
    rgb2, w2 = render_rays(p, o, d, 1.0, 3.0, stratified=False, heads=(p.opacity_head, q.color_head),
                           return_weights=True)
    assert torch.equal(w1.sum(1), w2.sum(1))
    assert not torch.allclose(rgb1, rgb2)


def test_render_image_shapes_and_determinism():
    cam = arc_cameras(2, 16)[0]
    p = init_field(FieldConfig(samples_per_ray=8), seed=0)
    a = render_image(p, cam, seed=3)
    b = render_image(p, cam, seed=3)
    assert a.shape == (16, 16, 3)
    assert np.array_equal(a, b)


def test_render_image_transparent_is_black():
    cam = arc_cameras(2, 8)[0]
    p = constant_field(-1e4, config=FieldConfig(samples_per_ray=8))
    assert np.all(render_image(p, cam) < 1e-12)


# checkpoint

def test_checkpoint_round_trip(tmp_path):
    p = init_field(FieldConfig(), seed=7)
    save_field(p, tmp_path / "f.bin")
    q = load_field(tmp_path / "f.bin")
    assert q.config == p.config
    for a, b in zip(p.tensors(), q.tensors()):
        assert torch.equal(a, b)


# pretraining

def gray_scene(res=16):
    cams = arc_cameras(2, res)
    img = np.full((res, res, 3), 0.4)
    return SceneBundle(((cams[0], img), (cams[1], img)), "gray")


def test_pretrain_fits_gray_scene():
    scene = gray_scene()
    cfg = FieldConfig(trunk_width=32, head_width=32, samples_per_ray=16)
    _, losses = pretrain_nerf(scene, TrainConfig(iters=400, batch=128, log_every=0), cfg, views=[0])
    assert np.mean(losses[-20:]) < 1e-3


def test_pretrain_deterministic_and_decreasing():
    scene = generate_synthetic_scene(0, 3, 24)
    cfg = FieldConfig(trunk_width=32, head_width=32, samples_per_ray=16)
    tc = TrainConfig(iters=150, batch=128, log_every=0)
    _, a = pretrain_nerf(scene, tc, cfg)
    _, b = pretrain_nerf(scene, tc, cfg)
    assert a == b
    assert np.mean(a[-20:]) < np.mean(a[:20])


def test_pretrain_reports_divergence_step():
    scene = gray_scene(8)
    with pytest.raises(TrainingError, match="at step 1$"):
        pretrain_nerf(scene, TrainConfig(iters=5, batch=16, lr_init=float("inf"), lr_final=1.0, log_every=0),
                      FieldConfig(trunk_width=8, head_width=8, samples_per_ray=4))


def test_estimator_api():
    scene = generate_synthetic_scene(1, 2, 12)
    est = RadianceField(trunk_width=16, head_width=16, samples_per_ray=8, iters=20, batch=64)
    assert est.get_params()["iters"] == 20
    est.fit(scene)
    assert len(est.predict(scene.cameras)) == 2
    assert np.isfinite(est.score(scene))
