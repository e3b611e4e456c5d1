"""End-to-end estimator: pretrain a field, pregenerate supervision, train the predictor."""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .field import FieldConfig, TrainConfig, pretrain_nerf, render_image
from .metrics import evaluate_sequence, psnr, sequence_for_views, ssim
from .mls import init_mls, pack_heads, pretrain_mls
from .scene_io import CameraModel, SceneBundle
from .style_space import StyleEntry, StyleSet
from .stylizer import FeatureExtractor
from .trainer import (CacheStats, StylizationConfig, incremental_train, pregenerate_supervision,
                      render_stylized, stylization_train)


class MultiStyleNeRF(BaseEstimator):
    """Multi-style stylization of one scene.

    ``fit(scene, styles)`` runs the whole pipeline; ``predict(cameras, style)``
    renders; ``partial_fit(scene, entry)`` adds one style incrementally. With
    ``consistent=False`` the predictor is trained on independently stylized
    views, and ``shared_head=True`` routes every style through one head.
    Pass ``field=`` to reuse an already pretrained field.
    """

    def __init__(self, field_iters=1500, field_batch=1024, samples_per_ray=32, mls_epochs=150,
                 iters=5000, batch=256, lr_init=5e-3, lr_final=1.67e-4, optimizer="sgd",
                 consistent=True, shared_head=False, tau=1.0, flow_source="auto",
                 extractor_seed=0, cache_root=None, jobs=1, seed=0, field=None):
        self.field_iters = field_iters
        self.field_batch = field_batch
        self.samples_per_ray = samples_per_ray
        self.mls_epochs = mls_epochs
        self.iters = iters
        self.batch = batch
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.optimizer = optimizer
        self.consistent = consistent
        self.shared_head = shared_head
        self.tau = tau
        self.flow_source = flow_source
        self.extractor_seed = extractor_seed
        self.cache_root = cache_root
        self.jobs = jobs
        self.seed = seed
        self.field = field

    def _stylization_config(self, iters=None) -> StylizationConfig:
        return StylizationConfig(iters=self.iters if iters is None else iters, batch=self.batch,
                                 lr_init=self.lr_init, lr_final=self.lr_final,
                                 optimizer=self.optimizer, seed=self.seed, log_every=0)

    def fit(self, scene: SceneBundle, styles: StyleSet):
        if len(styles) < 1:
            raise ValueError("need at least one style")
        if self.field is None:
            fc = FieldConfig(samples_per_ray=self.samples_per_ray)
            tc = TrainConfig(iters=self.field_iters, batch=self.field_batch, seed=self.seed, log_every=0)
            field, self.field_losses_ = pretrain_nerf(scene, tc, fc)
        else:
            field, self.field_losses_ = self.field, []
        self.field_ = field.detach()
        self.styles_ = copy.deepcopy(styles)
        self.fx_ = FeatureExtractor(seed=self.extractor_seed)
        self.cache_stats_ = CacheStats()
        self.packs_ = pregenerate_supervision(scene, self.styles_, self.fx_, cache_root=self.cache_root,
                                              consistent=self.consistent, tau=self.tau,
                                              source=self.flow_source, jobs=self.jobs,
                                              stats=self.cache_stats_)
        ids = self.styles_.ids
        self.head_of_ = {sid: (ids[0] if self.shared_head else sid) for sid in ids}
        heads = sorted(set(self.head_of_.values()))
        mls = init_mls(self.styles_.dim, self.field_.config, heads, seed=self.seed)
        feats = [self.styles_.get(s).feature for s in ids]
        mls, self.mls_losses_ = pretrain_mls(mls, feats, [self.head_of_[s] for s in ids],
                                             pack_heads(self.field_), self.mls_epochs)
        self.mls_, self.manifest_ = stylization_train(self.field_, mls, self.styles_, self.packs_, scene,
                                                      self._stylization_config(), head_of=self.head_of_)
        return self

    def partial_fit(self, scene: SceneBundle, entry: StyleEntry, iters: Optional[int] = None):
        """Add ``entry`` by cloning its nearest head and training it with the backbone frozen."""
        check_is_fitted(self, "mls_")
        pack = pregenerate_supervision(scene, StyleSet([entry], self.styles_.dim, self.styles_.threshold),
                                       self.fx_, cache_root=self.cache_root, consistent=self.consistent,
                                       tau=self.tau, source=self.flow_source, jobs=self.jobs)[entry.style_id]
        result = incremental_train(self.field_, self.mls_, self.styles_, entry, pack, scene,
                                   self._stylization_config(iters), head_of=self.head_of_)
        self.last_increment_ = result
        if not result.matched:
            self.mls_ = result.mls
            self.packs_[entry.style_id] = pack
            self.head_of_[entry.style_id] = result.head_id
        return self

    def predict(self, cameras, style) -> list:
        check_is_fitted(self, "mls_")
        if isinstance(cameras, CameraModel):
            cameras = [cameras]
        return [render_stylized(self.field_, self.mls_, style, cam, styles=self.styles_, head_of=self.head_of_)
                for cam in cameras]

    def render_base(self, cameras) -> list:
        check_is_fitted(self, "field_")
        return [render_image(self.field_, cam) for cam in cameras]

    def evaluate(self, test_scene: SceneBundle, train_scene: Optional[SceneBundle] = None) -> dict:
        """Per-style consistency on ``test_scene``; fidelity against supervision on ``train_scene``."""
        check_is_fitted(self, "mls_")
        out = {}
        for sid in self.styles_.ids:
            seq = sequence_for_views(self.predict(test_scene.cameras, sid), test_scene)
            res = evaluate_sequence(seq, fx=self.fx_)
            if train_scene is not None:
                renders = self.predict(train_scene.cameras, sid)
                targets = self.packs_[sid].images
                res["psnr"] = float(np.mean([psnr(r, t) for r, t in zip(renders, targets)]))
                res["ssim"] = float(np.mean([ssim(r, t) for r, t in zip(renders, targets)]))
            out[sid] = res
        return out
