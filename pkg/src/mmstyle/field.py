"""Compact radiance field with separable opacity/colour heads and a volume renderer.

The field is a plain functional MLP over tensors held in :class:`FieldParams`:

* trunk: frequency-encoded position -> ``trunk_depth`` ReLU layers of ``trunk_width``
* opacity head: trunk features -> hidden -> 1, softplus output
* colour head: trunk features ++ encoded direction -> hidden -> hidden -> 3, sigmoid output

Each linear layer stores ``weight`` with shape ``(out, in)`` and ``bias``.
Only the two heads are ever replaced by predicted parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .container import load_arrays, save_arrays
from .scene_io import CameraModel, SceneBundle

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    pos_freqs: int = 6
    dir_freqs: int = 2
    trunk_width: int = 64
    trunk_depth: int = 2
    head_width: int = 64
    opacity_depth: int = 2
    color_depth: int = 3
    samples_per_ray: int = 64
    stratified: bool = True
    bound: float = 1.5

    def __post_init__(self):
        for name in ("trunk_width", "trunk_depth", "head_width", "opacity_depth", "color_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pos_freqs < 1:
            raise ValueError("pos_freqs must be >= 1")
        if self.dir_freqs < 0:
            raise ValueError("dir_freqs must be >= 0")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        # zero frequencies means a view-independent colour head
        return 0 if self.dir_freqs == 0 else 3 + 6 * self.dir_freqs

    def layer_shapes(self, block: str) -> list:
        if block == "trunk":
            dims = [self.pos_dim] + [self.trunk_width] * self.trunk_depth
        elif block == "opacity_head":
            dims = [self.trunk_width] + [self.head_width] * (self.opacity_depth - 1) + [1]
        elif block == "color_head":
            dims = [self.trunk_width + self.dir_dim] + [self.head_width] * (self.color_depth - 1) + [3]
        else:
            raise KeyError(block)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 1024
    lr_init: float = 5e-3
    lr_final: float = 1.67e-4
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iters < 0 or self.batch < 1:
            raise ValueError("iters must be >= 0 and batch >= 1")
        if not self.lr_init >= self.lr_final > 0:
            raise ValueError("need lr_init >= lr_final > 0")


HEAD_BLOCKS = ("opacity_head", "color_head")
BLOCKS = ("trunk",) + HEAD_BLOCKS


@dataclass
class FieldParams:
    """Parameter blocks of the field, each a list of ``(weight, bias)`` tensors."""

    config: FieldConfig
    trunk: list
    opacity_head: list
    color_head: list

    def __post_init__(self):
        for block in BLOCKS:
            layers = getattr(self, block)
            shapes = self.config.layer_shapes(block)
            if len(layers) != len(shapes):
                raise ValueError(f"{block}: expected {len(shapes)} layers, got {len(layers)}")
            for (w, b), shp in zip(layers, shapes):
                if tuple(w.shape) != shp or tuple(b.shape) != (shp[0],):
                    raise ValueError(f"{block}: layer shape {tuple(w.shape)} != {shp}")

    def block(self, name: str) -> list:
        return getattr(self, name)

    def tensors(self, blocks=BLOCKS) -> list:
        return [t for name in blocks for layer in getattr(self, name) for t in layer]

    @property
    def dtype(self) -> torch.dtype:
        return self.trunk[0][0].dtype

    def detach(self) -> "FieldParams":
        def cp(layers):
            return [(w.detach().clone(), b.detach().clone()) for w, b in layers]
        return FieldParams(self.config, cp(self.trunk), cp(self.opacity_head), cp(self.color_head))

    def to(self, dtype) -> "FieldParams":
        def cv(layers):
            return [(w.detach().to(dtype), b.detach().to(dtype)) for w, b in layers]
        return FieldParams(self.config, cv(self.trunk), cv(self.opacity_head), cv(self.color_head))

    def with_heads(self, opacity_head: list, color_head: list) -> "FieldParams":
        return FieldParams(self.config, self.trunk, opacity_head, color_head)

    def named_arrays(self) -> dict:
        out = {}
        for block in BLOCKS:
            for i, (w, b) in enumerate(getattr(self, block)):
                out[f"{block}/{i}/weight"] = w.detach().cpu().numpy()
                out[f"{block}/{i}/bias"] = b.detach().cpu().numpy()
        return out

    def num_params(self, blocks=BLOCKS) -> int:
        return sum(t.numel() for t in self.tensors(blocks))


def init_field(config: FieldConfig, seed: int = 0, dtype=torch.float32, zero_heads: bool = False) -> FieldParams:
    """Uniform fan-in initialisation (as ``nn.Linear``) from a seeded generator."""
    gen = torch.Generator().manual_seed(seed)

    def make(block, zero=False):
        layers = []
        for out_dim, in_dim in config.layer_shapes(block):
            bound = 1.0 / math.sqrt(in_dim)
            if zero:
                w = torch.zeros(out_dim, in_dim, dtype=dtype)
                b = torch.zeros(out_dim, dtype=dtype)
            else:
                w = (torch.rand(out_dim, in_dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                b = (torch.rand(out_dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                w, b = w.to(dtype), b.to(dtype)
            layers.append((w, b))
        return layers

    return FieldParams(config, make("trunk"), make("opacity_head", zero_heads), make("color_head", zero_heads))


# ---------------------------------------------------------------------------
# evaluation


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def frequency_encode(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{K-1} pi x), cos(2^{K-1} pi x)]``."""
    parts = [x]
    for k in range(n_freqs):
        fx = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(fx))
        parts.append(torch.cos(fx))
    return torch.cat(parts, dim=-1)


def encode_position(x, n_freqs: int = 6, bound: float = 1.5):
    """Frequency encoding of positions clamped to ``[-bound, bound]``; length ``3 + 6K``."""
    t = _as_tensor(x)
    return frequency_encode(t.clamp(-bound, bound), n_freqs)


def encode_direction(d, n_freqs: int):
    t = _as_tensor(d)
    if n_freqs == 0:
        return t[..., :0]
    return frequency_encode(t, n_freqs)


def _linear(h, layer):
    w, b = layer
    return F.linear(h, w, b)


def trunk_features(params: FieldParams, x: torch.Tensor) -> torch.Tensor:
    cfg = params.config
    h = encode_position(x, cfg.pos_freqs, cfg.bound)
    for layer in params.trunk:
        h = F.relu(_linear(h, layer))
    return h


def heads_eval(opacity_head: list, color_head: list, feats: torch.Tensor, d_enc: torch.Tensor):
    """Apply both heads to trunk features ``(..., S, W)``.

    ``d_enc`` is the encoded direction per ray ``(..., E)``; it enters the
    first colour layer through its own weight columns and is broadcast over
    samples instead of being concatenated per sample.
    """
    h = feats
    for layer in opacity_head[:-1]:
        h = F.relu(_linear(h, layer))
    sigma = F.softplus(_linear(h, opacity_head[-1]))[..., 0]
    w0, b0 = color_head[0]
    width = feats.shape[-1]
    h = F.linear(feats, w0[:, :width])
    if d_enc.shape[-1]:
        h = h + F.linear(d_enc, w0[:, width:], b0).unsqueeze(-2)
    else:
        h = h + b0
    h = F.relu(h)
    for layer in color_head[1:-1]:
        h = F.relu(_linear(h, layer))
    color = torch.sigmoid(_linear(h, color_head[-1]))
    return sigma, color


def field_eval(params: FieldParams, x, d):
    """Opacity (softplus, >= 0) and colour (sigmoid, in [0, 1]) at points ``x`` seen along ``d``.

    ``x`` and ``d`` are ``(N, 3)`` (or a single 3-vector); outputs are ``(N,)`` and ``(N, 3)``.
    """
    dtype = params.dtype
    x = _as_tensor(x).to(dtype).reshape(-1, 1, 3)
    d = _as_tensor(d).to(dtype).reshape(-1, 3)
    feats = trunk_features(params, x)
    d_enc = encode_direction(d, params.config.dir_freqs)
    sigma, color = heads_eval(params.opacity_head, params.color_head, feats, d_enc)
    return sigma[:, 0], color[:, 0]


def sample_depths(n_rays: int, near, far, n_samples: int, stratified: bool,
                  generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Bin-start depths ``(n_rays, n_samples + 1)``; the last column is ``far``.

    Samples sit at the start of each of ``n_samples`` equal bins over
    ``[near, far]``. When stratified, every sample but the first is jittered
    uniformly inside its bin; the first stays at ``near`` so the deltas always
    sum to ``far - near``.
    """
    near = torch.as_tensor(near, dtype=dtype).reshape(-1, 1).expand(n_rays, 1)
    far = torch.as_tensor(far, dtype=dtype).reshape(-1, 1).expand(n_rays, 1)
    u = torch.arange(n_samples, dtype=dtype).expand(n_rays, n_samples)
    if stratified:
        jitter = torch.rand(n_rays, n_samples, generator=generator, dtype=torch.float64).to(dtype)
        jitter[:, 0] = 0
        u = u + jitter
    t = near + (far - near) * u / n_samples
    return torch.cat([t, far], dim=1)


def composite(sigmas: torch.Tensor, colors: torch.Tensor, t: torch.Tensor):
    """Alpha compositing over samples; background is black.

    ``sigmas (R, S)``, ``colors (R, S, 3)``, ``t (R, S + 1)``.
    Returns rendered colour ``(R, 3)`` and per-sample weights ``(R, S)``.
    """
    delta = t[:, 1:] - t[:, :-1]
    tau = sigmas * delta
    alpha = 1.0 - torch.exp(-tau)
    # exclusive cumulative transmittance
    acc = torch.cumsum(tau, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=1))
    weights = trans * alpha
    rgb = (weights[..., None] * colors).sum(dim=1)
    return rgb, weights


def render_rays(params: FieldParams, origins, dirs, near, far, *, stratified: Optional[bool] = None,
                generator: Optional[torch.Generator] = None, heads: Optional[tuple] = None,
                trunk_grad: bool = True, return_weights: bool = False):
    """Render a batch of rays; ``heads`` optionally overrides ``(opacity_head, color_head)``."""
    cfg = params.config
    dtype = params.dtype
    o = _as_tensor(origins).to(dtype)
    d = _as_tensor(dirs).to(dtype)
    n = o.shape[0]
    strat = cfg.stratified if stratified is None else stratified
    t = sample_depths(n, near, far, cfg.samples_per_ray, strat, generator, dtype)
    pts = o[:, None, :] + d[:, None, :] * t[:, :-1, None]
    if trunk_grad:
        feats = trunk_features(params, pts)
    else:
        with torch.no_grad():
            feats = trunk_features(params, pts)
    d_enc = encode_direction(d, cfg.dir_freqs)
    op, col = heads if heads is not None else (params.opacity_head, params.color_head)
    sigma, color = heads_eval(op, col, feats, d_enc)
    rgb, weights = composite(sigma, color, t)
    if return_weights:
        return rgb, weights
    return rgb


def render_ray(params: FieldParams, origin, direction, near: float, far: float,
               config: Optional[FieldConfig] = None, generator=None):
    """Colour of a single ray; ``config`` overrides the field's sampling settings."""
    p = params if config is None else replace_config(params, config)
    rgb = render_rays(p, _as_tensor(origin).reshape(1, 3), _as_tensor(direction).reshape(1, 3),
                      near, far, generator=generator)
    return rgb[0]


def replace_config(params: FieldParams, config: FieldConfig) -> FieldParams:
    return FieldParams(config, params.trunk, params.opacity_head, params.color_head)


def render_image(params: FieldParams, camera: CameraModel, *, seed: Optional[int] = None,
                 heads: Optional[tuple] = None, chunk: int = 2048) -> np.ndarray:
    """Render every pixel. Without ``seed`` the sample depths are deterministic bin starts."""
    o, d = camera.pixel_rays()
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    out = []
    with torch.no_grad():
        for s in range(0, o.shape[0], chunk):
            rgb = render_rays(params, o[s:s + chunk], d[s:s + chunk], camera.near, camera.far,
                              stratified=seed is not None, generator=gen, heads=heads)
            out.append(rgb.double().numpy())
    img = np.concatenate(out, axis=0).reshape(camera.height, camera.width, 3)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# photometric pretraining


def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    if total <= 1:
        return lr_init
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * step / (total - 1)))


def scene_rays(scene: SceneBundle):
    """All rays of a scene as float arrays: origins, dirs, targets, near, far, view ids."""
    os_, ds, cs, ns, fs, vs = [], [], [], [], [], []
    for v, (cam, img) in enumerate(scene.views):
        o, d = cam.pixel_rays()
        os_.append(o)
        ds.append(d)
        cs.append(img.reshape(-1, 3))
        ns.append(np.full(o.shape[0], cam.near))
        fs.append(np.full(o.shape[0], cam.far))
        vs.append(np.full(o.shape[0], v))
    return tuple(np.concatenate(a) for a in (os_, ds, cs, ns, fs, vs))


def pretrain_nerf(scene: SceneBundle, config: TrainConfig, field_config: Optional[FieldConfig] = None,
                  views: Optional[list] = None, dtype=torch.float32):
    """Fit a field to the scene photographs by minimising mean squared colour error.

    Returns ``(params, losses)``; ``losses`` holds one entry per step.
    """
    fc = field_config or FieldConfig()
    torch.manual_seed(config.seed)
    params = init_field(fc, seed=config.seed, dtype=dtype)
    tensors = params.tensors()
    for t in tensors:
        t.requires_grad_(True)
    opt = torch.optim.Adam(tensors, lr=config.lr_init)
    o, d, c, near, far, vid = scene_rays(scene)
    if views is not None:
        keep = np.isin(vid, views)
        o, d, c, near, far = o[keep], d[keep], c[keep], near[keep], far[keep]
    o_t, d_t, c_t = (torch.as_tensor(a, dtype=dtype) for a in (o, d, c))
    near_t, far_t = torch.as_tensor(near, dtype=dtype), torch.as_tensor(far, dtype=dtype)
    gen = torch.Generator().manual_seed(config.seed)
    losses = []
    for step in range(config.iters):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, config.iters, config.lr_init, config.lr_final)
        idx = torch.randint(0, o_t.shape[0], (config.batch,), generator=gen)
        rgb = render_rays(params, o_t[idx], d_t[idx], near_t[idx], far_t[idx], generator=gen)
        loss = ((rgb - c_t[idx]) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"field pretraining diverged (loss {loss.item()}) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if config.log_every and step % config.log_every == 0:
            logger.info("pretrain step %d loss %.6f", step, losses[-1])
    return params.detach(), losses


def save_field(params: FieldParams, path) -> None:
    meta = {"kind": "field", "version": CHECKPOINT_VERSION, "config": asdict(params.config)}
    save_arrays(path, params.named_arrays(), meta)


def load_field(path, dtype=torch.float32) -> FieldParams:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "field":
        raise ValueError(f"{path}: not a field checkpoint")
    cfg = FieldConfig(**meta["config"])

    def blk(name):
        n = len(cfg.layer_shapes(name))
        return [(torch.as_tensor(arrays[f"{name}/{i}/weight"]).to(dtype),
                 torch.as_tensor(arrays[f"{name}/{i}/bias"]).to(dtype)) for i in range(n)]

    return FieldParams(cfg, blk("trunk"), blk("opacity_head"), blk("color_head"))


class RadianceField(BaseEstimator):
    """Estimator wrapper: ``fit`` on a scene, ``predict`` renders cameras."""

    def __init__(self, pos_freqs=6, dir_freqs=2, trunk_width=64, head_width=64,
                 samples_per_ray=64, iters=2000, batch=1024, lr_init=5e-3, lr_final=1.67e-4, seed=0):
        self.pos_freqs = pos_freqs
        self.dir_freqs = dir_freqs
        self.trunk_width = trunk_width
        self.head_width = head_width
        self.samples_per_ray = samples_per_ray
        self.iters = iters
        self.batch = batch
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.seed = seed

    def _field_config(self) -> FieldConfig:
        return FieldConfig(pos_freqs=self.pos_freqs, dir_freqs=self.dir_freqs,
                           trunk_width=self.trunk_width, head_width=self.head_width,
                           samples_per_ray=self.samples_per_ray)

    def fit(self, scene: SceneBundle, y=None):
        tc = TrainConfig(iters=self.iters, batch=self.batch, lr_init=self.lr_init,
                         lr_final=self.lr_final, seed=self.seed)
        self.params_, self.loss_curve_ = pretrain_nerf(scene, tc, self._field_config())
        return self

    def predict(self, cameras) -> list:
        check_is_fitted(self, "params_")
        if isinstance(cameras, CameraModel):
            cameras = [cameras]
        return [render_image(self.params_, cam) for cam in cameras]

    def score(self, scene: SceneBundle, y=None) -> float:
        from .metrics import psnr
        preds = self.predict(scene.cameras)
        return float(np.mean([psnr(p, im) for p, im in zip(preds, scene.images)]))
