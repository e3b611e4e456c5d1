"""Shared setups for the slow end-to-end checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from mmstyle.field import FieldConfig, TrainConfig, pretrain_nerf, render_image
from mmstyle.metrics import sequence_for_views, ssim, twe
from mmstyle.mls import init_mls, pack_heads, pretrain_mls
from mmstyle.scene_io import generate_synthetic_scene, held_out_views
from mmstyle.style_space import StyleEntry, StyleSet, encode_image_style, render_style_image, style_catalog
from mmstyle.stylizer import FeatureExtractor, adain_transfer
from mmstyle.trainer import StylizationConfig, pregenerate_supervision, render_stylized, stylization_train

FIELD_STEPS = 1000
SAMPLES = 32
MLS_EPOCHS = 150
RAYS = 256


def catalog_styles(ids) -> StyleSet:
    cat = {c.style_id: c for c in style_catalog()}
    entries = [StyleEntry(i, "image", f"catalog:{i}", encode_image_style(render_style_image(cat[i], 64)))
               for i in ids]
    return StyleSet(entries)


def seeded_styles(seed: int, n: int) -> StyleSet:
    cat = style_catalog()
    pick = np.random.default_rng(seed).choice(len(cat), n, replace=False)
    return catalog_styles([cat[i].style_id for i in pick])


@dataclass
class Setup:
    scene: object
    field: object
    styles: StyleSet
    packs: dict
    raw: dict
    mls: object
    timings: dict = field(default_factory=dict)


def build_setup(seed: int, n_styles: int = 2, views: int = 6, res: int = 96, field_steps: int = FIELD_STEPS,
                mls_epochs: int = MLS_EPOCHS, head_ids=None, styles: StyleSet = None) -> Setup:
    t0 = time.perf_counter()
    scene = generate_synthetic_scene(seed, views, res)
    fc = FieldConfig(samples_per_ray=SAMPLES)
    params, _ = pretrain_nerf(scene, TrainConfig(iters=field_steps, batch=1024, seed=seed, log_every=0), fc)
    t1 = time.perf_counter()
    styles = styles or seeded_styles(seed, n_styles)
    fx = FeatureExtractor()
    packs = pregenerate_supervision(scene, styles, fx, consistent=True)
    raw = pregenerate_supervision(scene, styles, fx, consistent=False)
    heads = head_ids or styles.ids
    mls = init_mls(styles.dim, params.config, sorted(set(heads)), seed=seed)
    mls, _ = pretrain_mls(mls, [e.feature for e in styles], list(heads), pack_heads(params), mls_epochs)
    t2 = time.perf_counter()
    return Setup(scene, params, styles, packs, raw, mls, {"field_s": t1 - t0, "prep_s": t2 - t1})


def stylize_config(seed: int, iters: int, batch: int = RAYS) -> StylizationConfig:
    return StylizationConfig(iters=iters, batch=batch, seed=seed, log_every=0)


def consistency_run(setup: Setup, seed: int, iters: int) -> dict:
    """Train with consistent, raw and single-head supervision; measure held-out TWE and reference SSIM."""
    s = setup
    test = held_out_views(s.scene)
    cfg = stylize_config(seed, iters)
    shared = {sid: s.styles.ids[0] for sid in s.styles.ids}
    single_mls = init_mls(s.styles.dim, s.field.config, [s.styles.ids[0]], seed=seed)
    single_mls, _ = pretrain_mls(single_mls, [e.feature for e in s.styles], [shared[i] for i in s.styles.ids],
                                 pack_heads(s.field), MLS_EPOCHS)
    runs = {"consistent": (s.mls, s.packs, None), "raw": (s.mls, s.raw, None),
            "single_raw": (single_mls, s.raw, shared)}
    out = {}
    for name, (mls, packs, head_of) in runs.items():
        t = time.perf_counter()
        trained, _ = stylization_train(s.field, mls, s.styles, packs, s.scene, cfg, head_of=head_of)
        tw, ss = [], []
        for sid in s.styles.ids:
            renders = [render_stylized(s.field, trained, sid, c, styles=s.styles, head_of=head_of)
                       for c in test.cameras]
            tw.append(twe(sequence_for_views(renders, test)))
            ref = s.packs[sid].ref
            r = render_stylized(s.field, trained, sid, s.scene.cameras[ref], styles=s.styles, head_of=head_of)
            ss.append(ssim(r, s.packs[sid].images[ref]))
        out[name] = {"twe": float(np.mean(tw)), "ssim": float(np.mean(ss)), "seconds": time.perf_counter() - t}
    # 2D stylization of plain renders, view by view
    fx = FeatureExtractor()
    tw = []
    for e in s.styles:
        style_img = render_style_image(next(c for c in style_catalog() if c.style_id == e.style_id), 64)
        renders = [adain_transfer(render_image(s.field, c), style_img, fx) for c in test.cameras]
        tw.append(twe(sequence_for_views(renders, test)))
    out["render_then_2d"] = {"twe": float(np.mean(tw))}
    return out
