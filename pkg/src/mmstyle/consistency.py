"""Multi-view consistent supervision: flow, backward warping, occlusion masks.

Every non-reference view ``j`` gets a reconstructed target::

    I'_j = (1 - M_j) * I_j + M_j * warp(I_ref, flow_{j -> ref})

where ``M_j`` marks pixels whose forward/backward flow round trip closes
within ``tau`` pixels. Flow is always computed on the photographs, never on
stylized images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .scene_io import FlowField, SceneBundle, ground_truth_flow
from .stylizer import StylizedView
from .validation import ValidationError, check_image, check_same_shape

DEFAULT_TAU = 1.0


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    values: np.ndarray
    src: int = -1
    ref: int = -1

    @property
    def masked_ratio(self) -> float:
        return float(self.values.mean())


@dataclass(eq=False)
class SupervisionPack:
    """Per-view training targets for one style; ``images[ref]`` is the reference stylization."""

    style_id: str
    ref: int
    images: list
    masks: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    flow_source: str = "unknown"
    tau: float = DEFAULT_TAU

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# flow


def _displacements(radius: int) -> list:
    cands = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # smallest displacement first, then row-major
    return sorted(cands, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))


def estimate_flow(img_a: np.ndarray, img_b: np.ndarray, patch: int = 8, radius: int = 8,
                  src: int = -1, dst: int = -1) -> FlowField:
    """Integer block-matching flow from ``img_a`` to ``img_b`` (sum of squared differences).

    Patch pixels that fall outside either image do not contribute; a
    displacement whose target pixel leaves ``img_b`` is never chosen.
    """
    a = check_image(img_a, "img_a")
    b = check_image(img_b, "img_b")
    check_same_shape(a, b, ("img_a", "img_b"))
    h, w = a.shape[:2]
    best = np.full((h, w), np.inf)
    flow = np.zeros((h, w, 2))
    ys, xs = np.mgrid[0:h, 0:w]
    for dx, dy in _displacements(radius):
        shifted = np.zeros_like(b)
        ok = np.zeros((h, w), dtype=bool)
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys1 <= ys0 or xs1 <= xs0:
            continue
        shifted[ys0:ys1, xs0:xs1] = b[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
        ok[ys0:ys1, xs0:xs1] = True
        sq = ((a - shifted) ** 2).sum(axis=2) * ok
        cost = uniform_filter(sq, size=patch, mode="constant") * (patch * patch)
        cost = np.where(ok, cost, np.inf)
        better = cost < best
        best = np.where(better, cost, best)
        flow[better] = (dx, dy)
    return FlowField(flow, src, dst)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``image (H, W, C)`` at float coords; returns values and an in-bounds flag."""
    h, w = image.shape[:2]
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    top = (1 - fx) * image[y0, x0] + fx * image[y0, x1]
    bot = (1 - fx) * image[y1, x0] + fx * image[y1, x1]
    out = (1 - fy) * top + fy * bot
    out = np.where(inb[..., None], out, 0.0)
    return out, inb


def _flow_array(flow) -> np.ndarray:
    return flow.flow if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)


def backward_warp(image: np.ndarray, flow) -> np.ndarray:
    """``out(p) = image(p + flow(p))`` with bilinear sampling; out-of-bounds reads give 0."""
    img = np.asarray(image, dtype=np.float64)
    f = _flow_array(flow)
    if img.shape[:2] != f.shape[:2]:
        raise ValidationError(f"image {img.shape[:2]} and flow {f.shape[:2]} dims differ")
    h, w = f.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out, _ = bilinear_sample(img, xs + f[..., 0], ys + f[..., 1])
    return out


def occlusion_mask(flow_fwd, flow_bwd, tau: float = DEFAULT_TAU) -> OcclusionMask:
    """Forward/backward consistency: 1 where the round trip closes within ``tau`` px."""
    ff = _flow_array(flow_fwd)
    fb = _flow_array(flow_bwd)
    if ff.shape != fb.shape:
        raise ValidationError(f"flow dims differ: {ff.shape} vs {fb.shape}")
    h, w = ff.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    back, inb = bilinear_sample(fb, xs + ff[..., 0], ys + ff[..., 1])
    err = np.linalg.norm(ff + back, axis=2)
    mask = (err < tau) & inb
    if isinstance(flow_fwd, FlowField) and flow_fwd.valid is not None:
        mask &= flow_fwd.valid
    src = flow_fwd.src if isinstance(flow_fwd, FlowField) else -1
    ref = flow_fwd.dst if isinstance(flow_fwd, FlowField) else -1
    return OcclusionMask(mask.astype(np.float64), src, ref)


def compute_flow(scene: SceneBundle, src: int, dst: int, source: str = "auto") -> FlowField:
    """Flow between two photographs; ``auto`` prefers exact flow when the scene has geometry."""
    if source == "auto":
        source = "ground_truth" if scene.gt_flow_available else "block_matching"
    if source == "ground_truth":
        return ground_truth_flow(scene, src, dst)
    if source == "block_matching":
        return estimate_flow(scene.images[src], scene.images[dst], src=src, dst=dst)
    raise ValueError(f"unknown flow source {source!r}")


def star_flows(scene: SceneBundle, ref: int, source: str = "auto") -> dict:
    """Flows ``(j, ref)`` and ``(ref, j)`` for every ``j != ref``."""
    flows = {}
    for j in range(scene.n_views):
        if j != ref:
            flows[(j, ref)] = compute_flow(scene, j, ref, source)
            flows[(ref, j)] = compute_flow(scene, ref, j, source)
    return flows


def all_pair_flows(scene: SceneBundle, source: str = "auto") -> dict:
    n = scene.n_views
    return {(a, b): compute_flow(scene, a, b, source) for a in range(n) for b in range(n) if a != b}


def masks_from_flows(n_views: int, ref: int, flows: Mapping, tau: float = DEFAULT_TAU) -> dict:
    return {j: occlusion_mask(flows[(j, ref)], flows[(ref, j)], tau) for j in range(n_views) if j != ref}


def reference_ratios(n_views: int, flows: Mapping, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Mean masked-pixel ratio of every candidate reference view."""
    ratios = np.zeros(n_views)
    for r in range(n_views):
        masks = masks_from_flows(n_views, r, flows, tau)
        ratios[r] = np.mean([m.masked_ratio for m in masks.values()])
    return ratios


def select_reference_view(scene_or_n, flows: Optional[Mapping] = None, tau: float = DEFAULT_TAU) -> int:
    """View with the largest mean masked ratio against all others; ties go to the smaller id."""
    if isinstance(scene_or_n, SceneBundle):
        n = scene_or_n.n_views
        if flows is None:
            flows = all_pair_flows(scene_or_n)
    else:
        n = int(scene_or_n)
    if n < 2:
        raise ValueError("need at least two views")
    if flows is None:
        raise ValueError("flows are required when no scene is given")
    ratios = reference_ratios(n, flows, tau)
    return int(np.argmax(ratios))  # argmax returns the first maximum


def reconstruct_supervision(stylized: list, ref: int, flows: Mapping, masks: Mapping,
                            style_id: Optional[str] = None) -> SupervisionPack:
    """Blend each stylized view with the warped reference stylization under its mask.

    ``flows[j]`` (or ``flows[(j, ref)]``) maps view ``j`` pixels into the reference
    view; ``masks[j]`` is the matching :class:`OcclusionMask` or array.
    """
    images = [np.asarray(s.image if isinstance(s, StylizedView) else s, dtype=np.float64) for s in stylized]
    i_ref = images[ref]
    out = []
    used_flows, used_masks = {}, {}
    for j, img in enumerate(images):
        if j == ref:
            out.append(i_ref)
            continue
        flow = flows.get(j, flows.get((j, ref))) if hasattr(flows, "get") else None
        mask = masks.get(j, masks.get((j, ref))) if hasattr(masks, "get") else None
        if flow is None:
            raise ConfigurationError(f"missing flow from view {j} to reference view {ref}")
        if mask is None:
            raise ConfigurationError(f"missing mask for view {j}")
        m = mask.values if isinstance(mask, OcclusionMask) else np.asarray(mask, dtype=np.float64)
        m = m[..., None]
        warped = backward_warp(i_ref, flow)
        out.append((1.0 - m) * img + m * warped)
        used_flows[j] = flow
        used_masks[j] = mask if isinstance(mask, OcclusionMask) else OcclusionMask(m[..., 0], j, ref)
    sid = style_id if style_id is not None else (
        stylized[0].style_id if isinstance(stylized[0], StylizedView) else "style")
    return SupervisionPack(sid, ref, out, used_masks, used_flows)


def build_supervision(scene: SceneBundle, stylized: list, ref: Optional[int] = None, source: str = "auto",
                      tau: float = DEFAULT_TAU, flows: Optional[Mapping] = None) -> SupervisionPack:
    """Reference selection, star flows, masks and reconstruction in one call."""
    if flows is None:
        flows = all_pair_flows(scene, source) if ref is None else star_flows(scene, ref, source)
    if ref is None:
        ref = select_reference_view(scene.n_views, flows, tau)
    masks = masks_from_flows(scene.n_views, ref, flows, tau)
    star = {j: flows[(j, ref)] for j in range(scene.n_views) if j != ref}
    pack = reconstruct_supervision(stylized, ref, star, masks)
    pack.flow_source = "ground_truth" if (source == "auto" and scene.gt_flow_available) else (
        source if source != "auto" else "block_matching")
    pack.tau = tau
    return pack


def mscl_loss(predicted, targets):
    """Mean over the ray batch of the squared L2 colour residual."""
    if isinstance(predicted, torch.Tensor):
        t = torch.as_tensor(targets, dtype=predicted.dtype)
        if predicted.shape != t.shape or predicted.shape[0] < 1:
            raise ValueError(f"batch shapes differ or empty: {tuple(predicted.shape)} vs {tuple(t.shape)}")
        return ((predicted - t) ** 2).sum(dim=-1).mean()
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.shape[0] < 1:
        raise ValueError(f"batch shapes differ or empty: {p.shape} vs {t.shape}")
    return float(((p - t) ** 2).sum(axis=-1).mean())
