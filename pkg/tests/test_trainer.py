import hashlib
import logging

import numpy as np
import pytest
import torch

from mmstyle.consistency import SupervisionPack
from mmstyle.field import FieldConfig, TrainConfig, TrainingError, pretrain_nerf, render_image
from mmstyle.mls import init_mls, pack_heads, pretrain_mls
from mmstyle.scene_io import generate_synthetic_scene
from mmstyle.style_space import (StyleEntry, StyleFeature, StyleSet, encode_image_style, encode_text_style,
                                 render_style_image, style_catalog)
from mmstyle.stylizer import FeatureExtractor
from mmstyle.trainer import (CacheStats, PreconditionError, RunManifest, StylizationConfig, UnknownStyleError,
                             incremental_train, moving_average, pregenerate_supervision, read_loss_csv,
                             render_stylized, resolve_style, stylization_train, text_to_image)

SMALL_FIELD = FieldConfig(trunk_width=32, head_width=32, samples_per_ray=16)


def catalog_entry(i):
    c = style_catalog()[i]
    return StyleEntry(c.style_id, "image", f"catalog:{c.style_id}", encode_image_style(render_style_image(c)))


def checksum(img):
    return hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()


@pytest.fixture(scope="module")
def world():
    scene = generate_synthetic_scene(3, 4, 32)
    field, _ = pretrain_nerf(scene, TrainConfig(iters=150, batch=512, log_every=0), SMALL_FIELD)
    styles = StyleSet([catalog_entry(0), catalog_entry(7)])
    packs = pregenerate_supervision(scene, styles, FeatureExtractor())
    mls = init_mls(styles.dim, field.config, styles.ids, seed=0)
    mls, _ = pretrain_mls(mls, [e.feature for e in styles], styles.ids, pack_heads(field), 60)
    return scene, field, styles, packs, mls


def cfg(iters=40, **kw):
    return StylizationConfig(iters=iters, batch=64, log_every=0, **kw)


# configuration

@pytest.mark.parametrize("kw", [{"iters": -1}, {"batch": 0}, {"lr_init": 1e-4, "lr_final": 1e-3},
                                {"optimizer": "rmsprop"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        StylizationConfig(**kw)


# preconditions

def test_requires_pretrained_predictor(world):
    scene, field, styles, packs, _ = world
    raw = init_mls(styles.dim, field.config, styles.ids)
    with pytest.raises(PreconditionError, match="not pretrained"):
        stylization_train(field, raw, styles, packs, scene, cfg())


def test_requires_supervision(world):
    scene, field, styles, packs, mls = world
    with pytest.raises(PreconditionError, match="not pregenerated"):
        stylization_train(field, mls, styles, {styles.ids[0]: packs[styles.ids[0]]}, scene, cfg())


def test_requires_frozen_field(world):
    scene, field, styles, packs, mls = world
    live = field.detach()
    live.trunk[0][0].requires_grad_(True)
    with pytest.raises(PreconditionError, match="frozen"):
        stylization_train(live, mls, styles, packs, scene, cfg())


def test_requires_field(world):
    scene, _, styles, packs, mls = world
    with pytest.raises(PreconditionError, match="field missing"):
        stylization_train(None, mls, styles, packs, scene, cfg())


def test_uncorrected_text_feature_rejected(world):
    scene, field, styles, packs, mls = world
    text = StyleSet([StyleEntry(styles.ids[0], "text", "stripes", encode_text_style("stripes"))])
    with pytest.raises(PreconditionError, match="not corrected"):
        stylization_train(field, mls, text, packs, scene, cfg())


# training loop

def test_zero_iterations_is_a_no_op(world):
    scene, field, styles, packs, mls = world
    out, manifest = stylization_train(field, mls, styles, packs, scene, cfg(0))
    assert out is mls and manifest.losses == []


def test_loss_decreases_and_field_is_untouched(world):
    scene, field, styles, packs, mls = world
    before = [t.clone() for t in field.tensors()]
    out, manifest = stylization_train(field, mls, styles, packs, scene, cfg(300, lr_init=2e-2, lr_final=1e-3))
    assert all(torch.equal(a, b) for a, b in zip(before, field.tensors()))
    losses = np.array([v for _, _, v in manifest.losses])
    assert losses[-50:].mean() < losses[:50].mean()
    assert {s for _, s, _ in manifest.losses} == set(styles.ids)
    assert out is not mls and not any(t.requires_grad for t in out.backbone_tensors())


def test_training_is_deterministic(world):
    scene, field, styles, packs, mls = world
    a, ma = stylization_train(field, mls, styles, packs, scene, cfg(25))
    b, mb = stylization_train(field, mls, styles, packs, scene, cfg(25))
    assert ma.losses == mb.losses
    assert all(torch.equal(x, y) for x, y in zip(a.backbone_tensors(), b.backbone_tensors()))


def test_adam_option_trains(world):
    scene, field, styles, packs, mls = world
    _, m = stylization_train(field, mls, styles, packs, scene, cfg(10, optimizer="adam", lr_init=1e-3,
                                                                       lr_final=1e-4))
    assert len(m.losses) == 10


def test_divergence_names_the_step(world):
    scene, field, styles, packs, mls = world
    with pytest.raises(TrainingError, match="step"):
        stylization_train(field, mls, styles, packs, scene, cfg(50, lr_init=1e6, lr_final=1e5))


def test_shared_head_trains_only_that_head(world):
    scene, field, styles, packs, mls = world
    shared = {sid: styles.ids[0] for sid in styles.ids}
    out, _ = stylization_train(field, mls, styles, packs, scene, cfg(10), head_of=shared)
    assert all(torch.equal(a, b) for a, b in zip(out.head_tensors(styles.ids[1]), mls.head_tensors(styles.ids[1])))
    assert not all(torch.equal(a, b) for a, b in zip(out.head_tensors(styles.ids[0]),
                                                     mls.head_tensors(styles.ids[0])))


# manifest

def test_manifest_writes_loss_csv(tmp_path):
    m = RunManifest({"iters": 2})
    m.log(0, "a", 0.5)
    m.log(1, "b", 1 / 3)
    m.write(tmp_path)
    assert read_loss_csv(tmp_path / "loss.csv") == [(0, "a", 0.5), (1, "b", 1 / 3)]
    assert (tmp_path / "manifest.json").is_file()
    assert m.style_curve("b").tolist() == [1 / 3]


def test_moving_average():
    assert moving_average([1, 2, 3, 4], 2).tolist() == [1.5, 2.5, 3.5]
    assert moving_average([1, 3], 10).tolist() == [2.0]


# supervision cache

def test_cache_hit_and_invalidation(world, tmp_path):
    scene, _, styles, _, _ = world
    one = StyleSet([styles.entries[0]])
    stats = CacheStats()
    first = pregenerate_supervision(scene, one, FeatureExtractor(), cache_root=tmp_path, stats=stats)
    again = pregenerate_supervision(scene, one, FeatureExtractor(), cache_root=tmp_path, stats=stats)
    assert (stats.hits, stats.misses) == (1, 1)
    sid = one.ids[0]
    assert all(np.array_equal(a, b) for a, b in zip(first[sid].images, again[sid].images))
    assert first[sid].ref == again[sid].ref
    assert set(first[sid].masks) == set(again[sid].masks)
    pregenerate_supervision(scene, one, FeatureExtractor(seed=1), cache_root=tmp_path, stats=stats)
    assert stats.misses == 2


def test_corrupt_cache_entry_is_rebuilt(world, tmp_path, caplog):
    scene, _, styles, _, _ = world
    one = StyleSet([styles.entries[0]])
    pregenerate_supervision(scene, one, FeatureExtractor(), cache_root=tmp_path)
    (tmp_path / scene.scene_id / one.ids[0] / "flows.bin").write_bytes(b"garbage")
    stats = CacheStats()
    with caplog.at_level(logging.WARNING):
        packs = pregenerate_supervision(scene, one, FeatureExtractor(), cache_root=tmp_path, stats=stats)
    assert stats.misses == 1 and stats.warnings
    assert "unreadable" in caplog.text
    assert len(packs[one.ids[0]].images) == scene.n_views


def test_raw_supervision_is_plain_stylization(world):
    scene, _, styles, packs, _ = world
    raw = pregenerate_supervision(scene, styles, FeatureExtractor(), consistent=False)
    sid = styles.ids[0]
    assert raw[sid].masks == {} and raw[sid].flow_source == "none"
    ref = packs[sid].ref
    assert np.array_equal(raw[sid].images[ref], packs[sid].images[ref])


def test_supervision_is_quantized(world):
    _, _, styles, packs, _ = world
    img = packs[styles.ids[0]].images[0]
    assert np.array_equal(img, np.round(img * 255) / 255)


# incremental learning

def test_incremental_refuses_matched_style(world):
    scene, field, styles, packs, mls = world
    s = StyleSet(list(styles.entries))
    dup = StyleEntry("copy", "image", "", styles.entries[0].feature)
    res = incremental_train(field, mls, s, dup, None, scene, cfg(5))
    assert res.matched and res.head_id == styles.ids[0] and res.mls is mls
    assert s.ids == styles.ids


def test_incremental_keeps_backbone_and_old_renders(world):
    scene, field, styles, packs, mls = world
    s = StyleSet(list(styles.entries))
    cam = scene.cameras[1]
    before = {sid: checksum(render_stylized(field, mls, sid, cam, styles=s)) for sid in s.ids}
    new = catalog_entry(23)
    pack = pregenerate_supervision(scene, StyleSet([new]), FeatureExtractor())[new.style_id]
    res = incremental_train(field, mls, s, new, pack, scene, cfg(30))
    assert not res.matched and res.head_id == new.style_id
    assert all(torch.equal(a, b) for a, b in zip(res.mls.backbone_tensors(), mls.backbone_tensors()))
    after = {sid: checksum(render_stylized(field, res.mls, sid, cam, styles=s)) for sid in styles.ids}
    assert after == before
    assert new.style_id in s.ids and "incremental_s" in res.manifest.timings


def test_incremental_without_supervision(world):
    scene, field, styles, _, mls = world
    with pytest.raises(PreconditionError):
        incremental_train(field, mls, StyleSet(list(styles.entries)), catalog_entry(31), None, scene, cfg(5))


# rendering

def test_pretrained_predictor_reproduces_base_render(world):
    scene, field, styles, _, mls = world
    cam = scene.cameras[0]
    base = render_image(field, cam)
    for sid in styles.ids:
        assert np.abs(render_stylized(field, mls, sid, cam, styles=styles) - base).mean() < 2 / 255


def test_style_resolution_by_feature_and_image(world):
    _, _, styles, _, mls = world
    e = styles.entries[1]
    assert resolve_style(e.style_id, mls, styles)[1] == e.style_id
    assert resolve_style(StyleFeature(e.feature.vector), mls, styles)[1] == e.style_id
    img = render_style_image(next(c for c in style_catalog() if c.style_id == e.style_id))
    assert resolve_style(img, mls, styles)[1] == e.style_id


def test_unknown_style_names_nearest(world):
    _, _, styles, _, mls = world
    far = catalog_entry(44).feature
    with pytest.raises(UnknownStyleError, match="nearest is '"):
        resolve_style(far, mls, styles)
    with pytest.raises(UnknownStyleError):
        resolve_style(42, mls, styles)


def test_text_to_image_stand_in():
    c = style_catalog()[5]
    assert np.array_equal(text_to_image(c.text), render_style_image(c))
    a = text_to_image("a quiet pond in fog")
    assert a.shape == (64, 64, 3)
    assert np.array_equal(a, text_to_image("A quiet pond in fog "))


def test_identity_supervision_approaches_field_residual(world):
    scene, field, styles, _, mls = world
    sid = styles.ids[0]
    photos = [np.round(im * 255) / 255 for im in scene.images]
    pack = SupervisionPack(sid, -1, photos)
    residual = np.mean([((render_image(field, c) - p) ** 2).sum(-1).mean() for c, p in zip(scene.cameras, photos)])
    one = StyleSet([styles.entries[0]])
    _, m = stylization_train(field, mls, one, {sid: pack}, scene, cfg(400, lr_init=1e-2, lr_final=1e-3))
    curve = moving_average(m.style_curve(sid), 100)
    assert curve[-1] < 1.05 * residual


def test_each_style_curve_decreases(world):
    scene, field, styles, packs, mls = world
    _, m = stylization_train(field, mls, styles, packs, scene, cfg(600, lr_init=2e-2, lr_final=1e-3))
    for sid in styles.ids:
        curve = moving_average(m.style_curve(sid), 100)
        assert curve[-1] < curve[0], sid
