"""Adaptive instance normalisation stylizer with a fixed, seeded codec.

The default extractor is two frozen 3x3 stride-2 convolutions (3 -> 16 -> 32,
ReLU) with weights drawn from a seeded generator. Stylization runs at two
levels: the pixels' per-channel colour statistics are matched to the style
first, then the conv features are re-normalised and the feature change is
mapped back by the encoder's linearised least-squares inverse::

    c1  = adain(content, style)                 # colour level
    out = c1 + decode(adain(f(c1), f(style)) - f(c1))

Stylizing an image with itself therefore returns it unchanged (up to
rounding). With the ``identity`` extractor the output reduces to plain
per-channel statistics transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .scene_io import SceneBundle
from .validation import check_image

EPS = 1e-5


def channel_stats(features: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial mean and std of a ``(C, H, W)`` array; std floored at ``eps``."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] * f.shape[2] < 1:
        raise ValueError(f"features must be (C, H, W) with H*W >= 1, got {f.shape}")
    flat = f.reshape(f.shape[0], -1)
    mu = flat.mean(axis=1)
    sigma = np.maximum(flat.std(axis=1), eps)
    return mu, sigma


def adain(content_feats: np.ndarray, style_feats: np.ndarray, eps: float = EPS) -> np.ndarray:
    mu_c, sd_c = channel_stats(content_feats, eps)
    mu_s, sd_s = channel_stats(style_feats, eps)
    return sd_s[:, None, None] * (content_feats - mu_c[:, None, None]) / sd_c[:, None, None] + mu_s[:, None, None]


@dataclass
class FeatureExtractor:
    """Frozen image codec. ``kind`` is ``seeded_conv``, ``identity`` or ``external``.

    An external codec supplies ``encode`` (HxWx3 image -> CxH'xW' features) and
    ``decode_delta`` (feature delta -> HxWx3 image delta).
    """

    kind: str = "seeded_conv"
    seed: int = 0
    widths: tuple = (16, 32)
    color_level: bool = True
    ridge: float = 1e-2
    cg_steps: int = 50
    encode_fn: Optional[Callable] = None
    decode_fn: Optional[Callable] = None
    _weights: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("seeded_conv", "identity", "external"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "external" and (self.encode_fn is None or self.decode_fn is None):
            raise ValueError("external extractor needs encode_fn and decode_fn")
        if self.kind == "seeded_conv":
            gen = torch.Generator().manual_seed(self.seed)
            chans = (3,) + tuple(self.widths)
            for cin, cout in zip(chans[:-1], chans[1:]):
                w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64) / np.sqrt(cin * 9)
                self._weights.append(w)

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = check_image(image)
        if self.kind == "identity":
            return img.transpose(2, 0, 1).copy()
        if self.kind == "external":
            return np.asarray(self.encode_fn(img), dtype=np.float64)
        x = torch.as_tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None]))
        for w in self._weights:
            x = F.relu(F.conv2d(x, w, stride=2, padding=1))
        return x[0].numpy()

    def _linearized(self, content: np.ndarray):
        """Encoder linearised at ``content`` (ReLU gates frozen) and its adjoint."""
        x = torch.as_tensor(np.ascontiguousarray(content.transpose(2, 0, 1)[None]))
        gates, sizes = [], []
        for w in self._weights:
            sizes.append(x.shape[-2:])
            z = F.conv2d(x, w, stride=2, padding=1)
            gates.append((z > 0).to(z.dtype))
            x = F.relu(z)

        def fwd(v):
            for w, g in zip(self._weights, gates):
                v = g * F.conv2d(v, w, stride=2, padding=1)
            return v

        def adj(y):
            for w, g, (h, wd) in zip(reversed(self._weights), reversed(gates), reversed(sizes)):
                y = F.conv_transpose2d(g * y, w, stride=2, padding=1)
                y = F.pad(y, (0, wd - y.shape[3], 0, h - y.shape[2]))
            return y

        return fwd, adj

    def decode_delta(self, delta: np.ndarray, content: np.ndarray) -> np.ndarray:
        """Image-space change whose linearised encoding best matches ``delta``.

        Ridge-regularised least squares solved with a fixed number of
        conjugate-gradient steps, so the map is linear in ``delta`` and zero
        maps to zero exactly.
        """
        if self.kind == "identity":
            return delta.transpose(1, 2, 0)
        if self.kind == "external":
            return np.asarray(self.decode_fn(delta, content.shape[:2]), dtype=np.float64)
        fwd, adj = self._linearized(content)
        b = adj(torch.as_tensor(delta[None]))
        x = torch.zeros_like(b)
        r = b.clone()
        p = r.clone()
        rs = (r * r).sum()
        for _ in range(self.cg_steps):
            if rs == 0:
                break
            ap = adj(fwd(p)) + self.ridge * p
            a = rs / (p * ap).sum()
            x = x + a * p
            r = r - a * ap
            rs_new = (r * r).sum()
            p = r + (rs_new / rs) * p
            rs = rs_new
        return x[0].numpy().transpose(1, 2, 0)


def adain_transfer(content: np.ndarray, style: np.ndarray, fx: FeatureExtractor,
                   clip: bool = True) -> np.ndarray:
    """Re-normalise content features to the style's channel statistics and decode."""
    c = check_image(content, "content")
    s = check_image(style, "style")
    if fx.kind == "seeded_conv" and fx.color_level:
        c = adain(c.transpose(2, 0, 1), s.transpose(2, 0, 1)).transpose(1, 2, 0)
    f_c = fx.encode(c)
    f_s = fx.encode(s)
    target = adain(f_c, f_s)
    out = c + fx.decode_delta(target - f_c, c)
    return np.clip(out, 0.0, 1.0) if clip else out


@dataclass(frozen=True)
class StylizedView:
    view_id: int
    style_id: str
    image: np.ndarray


def stylize_views(scene: SceneBundle, style_image: np.ndarray, fx: FeatureExtractor,
                  style_id: str = "style", jobs: int = 1) -> list:
    """Stylize every view independently (no cross-view coupling)."""
    def one(i):
        return StylizedView(i, style_id, adain_transfer(scene.images[i], style_image, fx))

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(one, range(scene.n_views)))
    return [one(i) for i in range(scene.n_views)]


class AdaINStylizer(BaseEstimator, TransformerMixin):
    """``fit`` on a style image, ``transform`` a list of content images."""

    def __init__(self, extractor="seeded_conv", seed=0):
        self.extractor = extractor
        self.seed = seed

    def fit(self, style_image, y=None):
        self.style_ = check_image(style_image, "style")
        self.fx_ = FeatureExtractor(kind=self.extractor, seed=self.seed)
        return self

    def transform(self, images):
        check_is_fitted(self, "style_")
        if isinstance(images, np.ndarray) and images.ndim == 3:
            return adain_transfer(images, self.style_, self.fx_)
        return [adain_transfer(im, self.style_, self.fx_) for im in images]
