"""Stylization training: supervision pregeneration, the per-step training loop,
incremental addition of styles and stylized rendering."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .consistency import (DEFAULT_TAU, OcclusionMask, SupervisionPack, build_supervision, mscl_loss)
from .container import load_arrays, save_arrays
from .field import FieldParams, TrainingError, cosine_lr, render_image, render_rays
from .mls import (MlsParams, add_style_incremental, backbone_forward, head_forward, predict_params,
                  split_heads)
from .scene_io import FlowField, SceneBundle, read_png, write_png
from .style_space import (CatalogStyle, StyleEntry, StyleFeature, StyleSet, encode_image_style,
                          encode_text_style, match_style, render_style_image, resolve_style_image,
                          style_catalog)
from .stylizer import FeatureExtractor, stylize_views
from .validation import quantize

logger = logging.getLogger(__name__)


class PreconditionError(RuntimeError):
    pass


class UnknownStyleError(LookupError):
    pass


@dataclass
class StylizationConfig:
    iters: int = 5000
    batch: int = 1024
    lr_init: float = 5e-3
    lr_final: float = 1.67e-4
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    log_every: int = 500
    scene: Optional[str] = None
    styles: Optional[str] = None

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr_init >= self.lr_final > 0:
            raise ValueError("need lr_init >= lr_final > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunManifest:
    config: dict
    input_hashes: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)  # (step, style_id, mscl), append-only
    timings: dict = field(default_factory=dict)

    def log(self, step: int, style_id: str, value: float) -> None:
        self.losses.append((int(step), str(style_id), float(value)))

    def style_curve(self, style_id: str) -> np.ndarray:
        return np.array([v for _, s, v in self.losses if s == style_id])

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "manifest.json").write_text(json.dumps({
            "config": self.config, "input_hashes": self.input_hashes,
            "timings": self.timings, "n_steps": len(self.losses)}, indent=2))
        with open(run_dir / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "style_id", "mscl"])
            for row in self.losses:
                w.writerow([row[0], row[1], repr(row[2])])


def read_loss_csv(path) -> list:
    with open(path) as fh:
        return [(int(r["step"]), r["style_id"], float(r["mscl"])) for r in csv.DictReader(fh)]


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        window = max(v.size, 1)
    return np.convolve(v, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# supervision


def text_to_image(text: str, size: int = 64) -> np.ndarray:
    """Stand-in for text-to-image generation: catalogue painting or a seeded procedural one."""
    for c in style_catalog():
        if text.strip().lower() in (c.text, c.style_id, c.title):
            return render_style_image(c, size)
    h = hashlib.blake2b(text.strip().lower().encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(h, "little"))
    pattern = ["stripes", "checks", "waves", "dots", "noise"][int(rng.integers(5))]
    palette = tuple(tuple(float(x) for x in rng.uniform(0, 1, 3)) for _ in range(3))
    return render_style_image(CatalogStyle("text-" + h.hex(), text, "", "", pattern, palette), size)


def style_image_for(entry: StyleEntry, base_dir: Optional[Path] = None, size: int = 64) -> np.ndarray:
    if entry.modality == "image":
        return resolve_style_image(entry.payload, base_dir, size)
    return text_to_image(entry.payload, size)


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def scene_hash(scene: SceneBundle) -> str:
    parts = []
    for cam, img in scene.views:
        parts += [cam.intrinsics, cam.extrinsics, np.array([cam.near, cam.far]), (img * 255).round()]
    return _hash_arrays(*parts)


def supervision_key(scene: SceneBundle, style_image: np.ndarray, fx: FeatureExtractor,
                    consistent: bool, tau: float, source: str) -> str:
    meta = json.dumps({"fx": [fx.kind, fx.seed, list(fx.widths)], "consistent": consistent,
                       "tau": tau, "source": source}, sort_keys=True)
    return hashlib.sha256((scene_hash(scene) + _hash_arrays(style_image) + meta).encode()).hexdigest()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    warnings: list = field(default_factory=list)


def _save_pack(pack: SupervisionPack, stylized: list, root: Path, meta: dict) -> None:
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for i, img in enumerate(pack.images):
        write_png(root / f"v{i:03d}.png", img)
        write_png(root / "stylized" / f"v{i:03d}.png", stylized[i])
    for j, m in pack.masks.items():
        Image_mask = (m.values * 255).astype(np.uint8)
        from PIL import Image
        Image.fromarray(Image_mask, mode="L").save(root / f"mask{j:03d}.png")
    for j, f in pack.flows.items():
        arrays[f"flow/{j}"] = f.flow
        if f.valid is not None:
            arrays[f"valid/{j}"] = f.valid.astype(np.uint8)
    save_arrays(root / "flows.bin", arrays, {"kind": "flows"})
    # manifest last: its presence marks a complete entry
    (root / "manifest.json").write_text(json.dumps(meta, indent=2))


def _load_pack(root: Path, meta: dict, n_views: int) -> SupervisionPack:
    from PIL import Image
    ref = meta["ref"]
    images = [read_png(root / f"v{i:03d}.png") for i in range(n_views)]
    arrays, _ = load_arrays(root / "flows.bin")
    masks, flows = {}, {}
    for j in range(n_views):
        if j == ref:
            continue
        with Image.open(root / f"mask{j:03d}.png") as im:
            masks[j] = OcclusionMask(np.asarray(im, dtype=np.float64) / 255.0, j, ref)
        valid = arrays.get(f"valid/{j}")
        flows[j] = FlowField(arrays[f"flow/{j}"], j, ref, None if valid is None else valid.astype(bool))
    return SupervisionPack(meta["style_id"], ref, images, masks, flows, meta["flow_source"], meta["tau"])


def _make_pack(scene, style_image, fx, style_id, consistent, tau, source, ref, jobs):
    stylized = [quantize(v.image) for v in stylize_views(scene, style_image, fx, style_id, jobs)]
    if consistent:
        pack = build_supervision(scene, stylized, ref=ref, source=source, tau=tau)
        pack.style_id = style_id
    else:
        pack = SupervisionPack(style_id, -1 if ref is None else ref, list(stylized), {}, {}, "none", tau)
    pack.images = [quantize(im) for im in pack.images]
    return pack, stylized


def pregenerate_supervision(scene: SceneBundle, styles: StyleSet, fx: FeatureExtractor, *,
                            cache_root=None, consistent: bool = True, tau: float = DEFAULT_TAU,
                            source: str = "auto", ref: Optional[int] = None, base_dir=None,
                            jobs: int = 1, stats: Optional[CacheStats] = None) -> dict:
    """One :class:`SupervisionPack` per style, reusing the on-disk cache when inputs are unchanged.

    With ``consistent=False`` the packs hold the independently stylized views
    (no warping), which is the baseline supervision.
    """
    stats = stats if stats is not None else CacheStats()
    packs = {}
    for entry in styles:
        style_image = style_image_for(entry, Path(base_dir) if base_dir else None)
        key = supervision_key(scene, style_image, fx, consistent, tau, source)
        root = None
        if cache_root is not None:
            root = Path(cache_root) / scene.scene_id / (entry.style_id if consistent else entry.style_id + ".raw")
            mpath = root / "manifest.json"
            if mpath.is_file():
                try:
                    meta = json.loads(mpath.read_text())
                    if meta.get("key") == key:
                        packs[entry.style_id] = _load_pack(root, meta, scene.n_views)
                        stats.hits += 1
                        continue
                except Exception as exc:  # corrupt entry: rebuild it
                    msg = f"cache entry {root} unreadable ({exc}); regenerating"
                    logger.warning(msg)
                    stats.warnings.append(msg)
        stats.misses += 1
        pack, stylized = _make_pack(scene, style_image, fx, entry.style_id, consistent, tau, source, ref, jobs)
        if root is not None:
            meta = {"key": key, "style_id": entry.style_id, "ref": pack.ref, "tau": tau,
                    "flow_source": pack.flow_source, "consistent": consistent,
                    "extractor": {"kind": fx.kind, "seed": fx.seed}, "n_views": scene.n_views}
            _save_pack(pack, stylized, root, meta)
        packs[entry.style_id] = pack
    return packs


# ---------------------------------------------------------------------------
# training loop


def _check_preconditions(field_params, mls: MlsParams, styles: StyleSet, packs: dict, ids: list):
    if field_params is None:
        raise PreconditionError("pretrained field missing")
    if any(t.requires_grad for t in field_params.tensors()):
        raise PreconditionError("field parameters must be frozen during stylization")
    if not mls.pretrained:
        raise PreconditionError("predictor not pretrained (run pretrain_mls first)")
    for sid in ids:
        e = styles.get(sid)
        if e.feature is None:
            raise PreconditionError(f"style {sid!r} has no feature")
        if e.feature.modality == "text" and not e.feature.corrected:
            raise PreconditionError(f"style {sid!r}: text feature not corrected (correction module not pretrained)")
        if sid not in packs:
            raise PreconditionError(f"supervision for style {sid!r} not pregenerated")


def _make_optimizer(tensors, config: StylizationConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(tensors, lr=config.lr_init)
    return torch.optim.SGD(tensors, lr=config.lr_init, momentum=config.momentum)


def stylization_train(field_params: FieldParams, mls: MlsParams, styles: StyleSet, packs: dict,
                      scene: SceneBundle, config: StylizationConfig, *, head_of: Optional[dict] = None,
                      style_ids: Optional[list] = None, freeze_backbone: bool = False,
                      manifest: Optional[RunManifest] = None) -> tuple:
    """Optimise the predictor so rendered colours match the supervision (one view, one style per step).

    Returns ``(mls, manifest)``. The field is never modified.
    """
    ids = list(style_ids) if style_ids is not None else styles.ids
    head_of = head_of or {sid: sid for sid in ids}
    _check_preconditions(field_params, mls, styles, packs, ids)
    manifest = manifest or RunManifest(asdict(config))
    if config.iters == 0:
        return mls, manifest
    frozen = freeze_backbone or mls.backbone_frozen
    out = mls.clone()
    out.backbone_frozen = frozen
    heads_used = sorted({head_of[s] for s in ids})
    tensors = [t for h in heads_used for t in out.head_tensors(h)]
    if not frozen:
        tensors = out.backbone_tensors() + tensors
    for t in tensors:
        t.requires_grad_(True)
    opt = _make_optimizer(tensors, config)

    dtype = field_params.dtype
    rays = []
    for cam in scene.cameras:
        o, d = cam.pixel_rays()
        rays.append((torch.as_tensor(o, dtype=dtype), torch.as_tensor(d, dtype=dtype), cam.near, cam.far))
    targets = {sid: [torch.as_tensor(im.reshape(-1, 3), dtype=dtype) for im in packs[sid].images] for sid in ids}
    feats = {sid: torch.as_tensor(np.array(styles.get(sid).feature.vector)).to(out.backbone[0][0].dtype)
             for sid in ids}
    latents = {}
    if frozen:
        with torch.no_grad():
            latents = {sid: backbone_forward(out, feats[sid]) for sid in ids}

    gen = torch.Generator().manual_seed(config.seed)
    n_pix = rays[0][0].shape[0]
    t0 = time.perf_counter()
    for step in range(config.iters):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, config.iters, config.lr_init, config.lr_final)
        j = int(torch.randint(0, scene.n_views, (1,), generator=gen))
        sid = ids[int(torch.randint(0, len(ids), (1,), generator=gen))]
        idx = torch.randint(0, n_pix, (config.batch,), generator=gen)
        hid = head_of[sid]
        if frozen:
            p = head_forward(out.heads[hid], latents[sid])
        else:
            p = predict_params(out, feats[sid], hid)
        heads = split_heads(p.to(dtype), field_params.config)
        o, d, near, far = rays[j]
        rgb = render_rays(field_params, o[idx], d[idx], near, far, stratified=False, heads=heads,
                          trunk_grad=False)
        loss = mscl_loss(rgb, targets[sid][j][idx])
        if not torch.isfinite(loss):
            raise TrainingError(f"stylization diverged at step {step} (style {sid!r}, view {j})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        manifest.log(step, sid, loss.item())
        if config.log_every and step % config.log_every == 0:
            logger.info("stylize step %d style %s loss %.5f", step, sid, loss.item())
    manifest.timings["stylization_s"] = manifest.timings.get("stylization_s", 0.0) + time.perf_counter() - t0
    for t in tensors:
        t.requires_grad_(False)
    return out, manifest


@dataclass
class IncrementalResult:
    mls: MlsParams
    head_id: str
    matched: bool
    distance: float
    manifest: Optional[RunManifest] = None
    source_head: Optional[str] = None  # head the new one was cloned from


def incremental_train(field_params: FieldParams, mls: MlsParams, styles: StyleSet, new_entry: StyleEntry,
                      pack: Optional[SupervisionPack], scene: SceneBundle, config: StylizationConfig,
                      head_of: Optional[dict] = None) -> IncrementalResult:
    """Add ``new_entry`` to the predictor by cloning its nearest style's head.

    A style already within the matching threshold is refused: the result then
    names the matched head and nothing is trained. ``styles`` gains the new
    entry on success.
    """
    if new_entry.feature is None:
        raise PreconditionError(f"style {new_entry.style_id!r} has no feature")
    head_of = dict(head_of or {sid: sid for sid in styles.ids})
    match = match_style(new_entry.feature, styles)
    if match.matched:
        return IncrementalResult(mls, head_of.get(match.style_id, match.style_id), True, match.distance)
    if pack is None:
        raise PreconditionError(f"supervision for style {new_entry.style_id!r} not pregenerated")
    source = head_of.get(match.style_id, match.style_id)
    grown = add_style_incremental(mls, new_entry.style_id, source)
    styles.add(new_entry)
    head_of[new_entry.style_id] = new_entry.style_id
    t0 = time.perf_counter()
    trained, manifest = stylization_train(field_params, grown, styles, {new_entry.style_id: pack}, scene, config,
                                          head_of=head_of, style_ids=[new_entry.style_id], freeze_backbone=True)
    manifest.timings["incremental_s"] = time.perf_counter() - t0
    # heads of existing styles are shared by reference, never copied or touched
    return IncrementalResult(trained, new_entry.style_id, False, match.distance, manifest, source)


# ---------------------------------------------------------------------------
# rendering


def resolve_style(style, mls: MlsParams, styles: Optional[StyleSet] = None, head_of: Optional[dict] = None,
                  base_dir=None) -> tuple:
    """Map a style id, :class:`StyleFeature`, image or text payload to ``(feature, head_id)``."""
    head_of = head_of or {}
    if isinstance(style, str) and styles is not None and style in styles.ids:
        e = styles.get(style)
        return e.feature, head_of.get(style, style)
    if styles is None:
        raise UnknownStyleError(f"unknown style {style!r} and no style set to match against")
    if isinstance(style, StyleFeature):
        feat = style
    elif isinstance(style, np.ndarray) and style.ndim == 3:
        feat = encode_image_style(style, dim=styles.dim)
    elif isinstance(style, str):
        feat = encode_text_style(style, dim=styles.dim)
    else:
        raise UnknownStyleError(f"cannot interpret style {style!r}")
    m = match_style(feat, styles)
    if not m.matched:
        raise UnknownStyleError(
            f"unknown style: nearest is {m.style_id!r} at cosine distance {m.distance:.4f} "
            f"(threshold {styles.threshold}); add it with incremental learning")
    return styles.get(m.style_id).feature, head_of.get(m.style_id, m.style_id)


def render_stylized(field_params: FieldParams, mls: MlsParams, style, camera, *, styles: Optional[StyleSet] = None,
                    head_of: Optional[dict] = None) -> np.ndarray:
    feat, hid = resolve_style(style, mls, styles, head_of)
    with torch.no_grad():
        p = predict_params(mls, feat, hid)
    heads = split_heads(p.to(field_params.dtype), field_params.config)
    return render_image(field_params, camera, heads=heads)
