"""Consistency and fidelity metrics over sequences of stylized views.

Temporal warping error and the warped perceptual distance compare each view
with the mask-blended warp of its successor. The perceptual distance uses the
seeded conv features of :mod:`mmstyle.stylizer` as a stand-in for a learned
perceptual metric; results carry a ``backend`` label naming what produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .consistency import DEFAULT_TAU, OcclusionMask, backward_warp, compute_flow, occlusion_mask
from .scene_io import SceneBundle
from .stylizer import FeatureExtractor
from .validation import ValidationError, check_image, check_same_shape

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


@dataclass(eq=False)
class ViewSequence:
    """Ordered renders with ``flows[i]``/``masks[i]`` taking view ``i`` to view ``i + 1``."""

    images: list
    flows: list
    masks: list = field(default_factory=list)

    def __post_init__(self):
        self.images = [check_image(im, f"images[{i}]") for i, im in enumerate(self.images)]
        n = len(self.images)
        if n < 2:
            raise ValidationError("a view sequence needs at least two views")
        if len(self.flows) != n - 1:
            raise ValidationError(f"need {n - 1} adjacent flows, got {len(self.flows)}")
        if not self.masks:
            self.masks = [np.ones(self.images[0].shape[:2]) for _ in range(n - 1)]
        if len(self.masks) != n - 1:
            raise ValidationError(f"need {n - 1} adjacent masks, got {len(self.masks)}")
        for im in self.images[1:]:
            check_same_shape(self.images[0], im, ("images[0]", "images[i]"))

    def __len__(self):
        return len(self.images)

    def reconstructions(self) -> list:
        """``I'_i = (1 - M_i) I_i + M_i warp(I_{i+1})`` for every adjacent pair."""
        out = []
        for i, (flow, mask) in enumerate(zip(self.flows, self.masks)):
            m = mask.values if isinstance(mask, OcclusionMask) else np.asarray(mask, dtype=np.float64)
            m = m[..., None]
            warped = backward_warp(self.images[i + 1], flow)
            out.append((1.0 - m) * self.images[i] + m * warped)
        return out


def sequence_for_views(images: list, scene: SceneBundle, source: str = "auto",
                       tau: float = DEFAULT_TAU) -> ViewSequence:
    """Pair renders of ``scene``'s views (in order) with flows computed on its photographs."""
    if len(images) != scene.n_views:
        raise ValidationError(f"{len(images)} renders for {scene.n_views} views")
    flows, masks = [], []
    for i in range(scene.n_views - 1):
        fwd = compute_flow(scene, i, i + 1, source)
        bwd = compute_flow(scene, i + 1, i, source)
        flows.append(fwd)
        masks.append(occlusion_mask(fwd, bwd, tau))
    return ViewSequence(list(images), flows, masks)


def twe(seq: ViewSequence) -> float:
    """Mean over adjacent pairs of the per-pixel, per-channel squared error to the warped neighbour."""
    errs = [np.mean((im - rec) ** 2) for im, rec in zip(seq.images, seq.reconstructions())]
    return float(np.mean(errs))


def _unit_features(image: np.ndarray, fx: FeatureExtractor) -> np.ndarray:
    f = fx.encode(image)
    norm = np.sqrt((f * f).sum(axis=0, keepdims=True))
    return f / np.maximum(norm, 1e-10)


def feature_distance(a: np.ndarray, b: np.ndarray, fx: Optional[FeatureExtractor] = None) -> float:
    """Mean squared difference of channel-normalised features; symmetric, zero on identical images."""
    fx = fx or FeatureExtractor()
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b, ("a", "b"))
    fa = _unit_features(a, fx)
    fb = _unit_features(b, fx)
    return float(((fa - fb) ** 2).sum(axis=0).mean())


def warped_perceptual(seq: ViewSequence, fx: Optional[FeatureExtractor] = None) -> float:
    fx = fx or FeatureExtractor()
    return float(np.mean([feature_distance(im, rec, fx) for im, rec in zip(seq.images, seq.reconstructions())]))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` boxes inside the image, averaged over channels."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    win = min(window, a.shape[0], a.shape[1])
    vals = []
    for c in range(3):
        x = sliding_window_view(a[..., c], (win, win))
        y = sliding_window_view(b[..., c], (win, win))
        mx, my = x.mean(axis=(2, 3)), y.mean(axis=(2, 3))
        vx = x.var(axis=(2, 3))
        vy = y.var(axis=(2, 3))
        cxy = ((x - mx[..., None, None]) * (y - my[..., None, None])).mean(axis=(2, 3))
        s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
        vals.append(s.mean())
    return float(np.mean(vals))


def evaluate_sequence(seq: ViewSequence, references: Optional[list] = None,
                      fx: Optional[FeatureExtractor] = None) -> dict:
    """TWE and warped perceptual distance; PSNR/SSIM against ``references`` when given."""
    out = {"twe": twe(seq), "warped_perceptual": warped_perceptual(seq, fx),
           "backend": "seeded_conv" if (fx is None or fx.kind == "seeded_conv") else fx.kind}
    if references is not None:
        out["psnr"] = float(np.mean([psnr(a, b) for a, b in zip(seq.images, references)]))
        out["ssim"] = float(np.mean([ssim(a, b) for a, b in zip(seq.images, references)]))
    return out
