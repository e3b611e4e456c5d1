"""Multi-head parameter predictor for the field's opacity and colour heads.

A shared backbone maps a style feature to a latent code; one head per style
maps the latent code to the flat head-parameter vector of the field. The
backbone is four SiLU layers with the input feature concatenated onto the
input of the third layer; each head is ``latent -> hidden -> P``.

Flat vector layout: opacity head then colour head, layer by layer, and for
each layer the weight (row-major ``(out, in)``) followed by the bias.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .container import load_arrays, save_arrays
from .field import HEAD_BLOCKS, FieldConfig, FieldParams, TrainingError, cosine_lr

logger = logging.getLogger(__name__)

LAYOUT_VERSION = 1


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def head_layout(config: FieldConfig) -> list:
    entries = []
    offset = 0
    for block in HEAD_BLOCKS:
        for i, (out_dim, in_dim) in enumerate(config.layer_shapes(block)):
            for kind, shape in (("weight", (out_dim, in_dim)), ("bias", (out_dim,))):
                e = LayoutEntry(f"{block}/{i}/{kind}", shape, offset)
                entries.append(e)
                offset += e.size
    return entries


def layout_size(layout: list) -> int:
    last = layout[-1]
    return last.offset + last.size


@dataclass(eq=False)
class HeadParamVector:
    vector: object  # numpy array or torch tensor of length P
    layout: list

    def __post_init__(self):
        if len(self.vector) != layout_size(self.layout):
            raise ContractError(f"vector length {len(self.vector)} != layout size {layout_size(self.layout)}")

    def __len__(self):
        return len(self.vector)


def pack_heads(params: FieldParams) -> HeadParamVector:
    layout = head_layout(params.config)
    parts = []
    for block in HEAD_BLOCKS:
        for w, b in getattr(params, block):
            parts.append(w.detach().reshape(-1))
            parts.append(b.detach().reshape(-1))
    return HeadParamVector(torch.cat(parts), layout)


def split_heads(vector, config: FieldConfig) -> tuple:
    """Views of a flat vector as ``(opacity_head, color_head)`` layer lists."""
    layout = head_layout(config)
    if len(vector) != layout_size(layout):
        raise ContractError(f"head vector has length {len(vector)}, field expects {layout_size(layout)}")
    v = vector if isinstance(vector, torch.Tensor) else torch.as_tensor(np.asarray(vector))
    tensors = {e.name: v[e.offset:e.offset + e.size].reshape(e.shape) for e in layout}
    heads = []
    for block in HEAD_BLOCKS:
        n = len(config.layer_shapes(block))
        heads.append([(tensors[f"{block}/{i}/weight"], tensors[f"{block}/{i}/bias"]) for i in range(n)])
    return tuple(heads)


def unpack_heads(v, params: FieldParams) -> FieldParams:
    """Field with the trunk untouched and both heads read from ``v``."""
    vec = v.vector if isinstance(v, HeadParamVector) else v
    if isinstance(vec, torch.Tensor):
        vec = vec.to(params.dtype)
    else:
        vec = torch.as_tensor(np.asarray(vec)).to(params.dtype)
    op, col = split_heads(vec, params.config)
    return params.with_heads(op, col)


# ---------------------------------------------------------------------------
# predictor


@dataclass
class MlsConfig:
    width: int = 128
    backbone_depth: int = 4
    skip_layer: int = 2  # zero-based index of the layer that also receives the input
    head_width: int = 128


@dataclass(eq=False)
class MlsParams:
    backbone: list
    heads: dict
    dim: int
    n_params: int
    config: MlsConfig = field(default_factory=MlsConfig)
    layout: list = field(default_factory=list)
    backbone_frozen: bool = False
    pretrained: bool = False

    def head_tensors(self, head_id: str) -> list:
        return [t for layer in self.heads[head_id] for t in layer]

    def backbone_tensors(self) -> list:
        return [t for layer in self.backbone for t in layer]

    def clone(self) -> "MlsParams":
        def cp(layers):
            return [(w.detach().clone(), b.detach().clone()) for w, b in layers]
        return MlsParams(cp(self.backbone), {k: cp(v) for k, v in self.heads.items()}, self.dim,
                         self.n_params, copy.deepcopy(self.config), list(self.layout), self.backbone_frozen,
                         self.pretrained)

    def named_arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.backbone):
            out[f"backbone/{i}/weight"] = w.detach().numpy()
            out[f"backbone/{i}/bias"] = b.detach().numpy()
        for hid, layers in self.heads.items():
            for i, (w, b) in enumerate(layers):
                out[f"heads/{hid}/{i}/weight"] = w.detach().numpy()
                out[f"heads/{hid}/{i}/bias"] = b.detach().numpy()
        return out


def _uniform(gen, out_dim, in_dim, dtype):
    bound = 1.0 / math.sqrt(in_dim)
    w = (torch.rand(out_dim, in_dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    b = (torch.rand(out_dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    return w.to(dtype), b.to(dtype)


def init_head(config: MlsConfig, n_params: int, gen, dtype) -> list:
    return [_uniform(gen, config.head_width, config.width, dtype),
            _uniform(gen, n_params, config.head_width, dtype)]


def init_mls(dim: int, field_config: FieldConfig, head_ids, config: Optional[MlsConfig] = None,
             seed: int = 0, dtype=torch.float32) -> MlsParams:
    cfg = config or MlsConfig()
    gen = torch.Generator().manual_seed(seed)
    layout = head_layout(field_config)
    P = layout_size(layout)
    backbone = []
    in_dim = dim
    for i in range(cfg.backbone_depth):
        extra = dim if i == cfg.skip_layer else 0
        backbone.append(_uniform(gen, cfg.width, in_dim + extra, dtype))
        in_dim = cfg.width
    heads = {hid: init_head(cfg, P, gen, dtype) for hid in head_ids}
    return MlsParams(backbone, heads, dim, P, cfg, layout)


def backbone_forward(mls: MlsParams, f: torch.Tensor) -> torch.Tensor:
    h = f
    for i, (w, b) in enumerate(mls.backbone):
        if i == mls.config.skip_layer:
            h = torch.cat([h, f], dim=-1)
        h = F.silu(F.linear(h, w, b))
    return h


def head_forward(layers: list, z: torch.Tensor) -> torch.Tensor:
    (w1, b1), (w2, b2) = layers
    return F.linear(F.silu(F.linear(z, w1, b1)), w2, b2)


def _feature_tensor(style_feature, dtype) -> torch.Tensor:
    v = getattr(style_feature, "vector", style_feature)
    return v.to(dtype) if isinstance(v, torch.Tensor) else torch.as_tensor(np.array(v)).to(dtype)


def predict_params(mls: MlsParams, style_feature, head_id: str) -> torch.Tensor:
    """Flat head-parameter vector for ``style_feature`` through head ``head_id``."""
    if head_id not in mls.heads:
        raise KeyError(f"unknown head id {head_id!r}; known: {sorted(mls.heads)}")
    dtype = mls.backbone[0][0].dtype
    f = _feature_tensor(style_feature, dtype)
    return head_forward(mls.heads[head_id], backbone_forward(mls, f))


def pretrain_loss(mls: MlsParams, features: list, head_ids: list, base) -> torch.Tensor:
    """Mean over styles of the squared distance between predicted and base head vectors."""
    p = torch.as_tensor(base.vector if isinstance(base, HeadParamVector) else base)
    p = p.to(mls.backbone[0][0].dtype)
    terms = [((predict_params(mls, f, h) - p) ** 2).sum() for f, h in zip(features, head_ids)]
    return torch.stack(terms).mean()


def _requires_grad(tensors, flag=True):
    for t in tensors:
        t.requires_grad_(flag)


def pretrain_mls(mls: MlsParams, features: list, head_ids: list, base, epochs: int,
                 lr_init: float = 3e-3, lr_final: float = 1e-4, log_every: int = 0) -> tuple:
    """Regress every head's prediction onto ``base``, visiting styles in order.

    One optimisation step per style per epoch. Returns ``(mls, losses)``; with
    ``epochs == 0`` the input object is returned untouched.
    """
    if len(features) == 0:
        raise ValueError("need at least one style")
    if epochs == 0:
        return mls, []
    out = mls.clone()
    p = torch.as_tensor(base.vector if isinstance(base, HeadParamVector) else base)
    p = p.to(out.backbone[0][0].dtype)
    used_heads = sorted(set(head_ids))
    tensors = out.backbone_tensors() + [t for h in used_heads for t in out.head_tensors(h)]
    _requires_grad(tensors)
    opt = torch.optim.Adam(tensors, lr=lr_init)
    total = epochs * len(features)
    losses = []
    step = 0
    for epoch in range(epochs):
        for f, hid in zip(features, head_ids):
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, lr_init, lr_final)
            loss = ((predict_params(out, f, hid) - p) ** 2).sum()
            if not torch.isfinite(loss):
                raise TrainingError(f"predictor pretraining diverged at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
            step += 1
        if log_every and epoch % log_every == 0:
            logger.info("mls pretrain epoch %d loss %.3e", epoch, losses[-1])
    _requires_grad(tensors, False)
    out.pretrained = True
    return out, losses


def add_style_incremental(mls: MlsParams, new_id: str, nearest_id: str) -> MlsParams:
    """Clone the nearest style's head under ``new_id`` and freeze the backbone."""
    if new_id in mls.heads:
        raise ContractError(f"head {new_id!r} already exists")
    if nearest_id not in mls.heads:
        raise KeyError(f"unknown nearest head {nearest_id!r}")
    out = MlsParams(mls.backbone, dict(mls.heads), mls.dim, mls.n_params, mls.config, mls.layout, True,
                    mls.pretrained)
    out.heads[new_id] = [(w.detach().clone(), b.detach().clone()) for w, b in mls.heads[nearest_id]]
    return out


def save_mls(mls: MlsParams, path, extra_meta: Optional[dict] = None) -> None:
    meta = {
        "kind": "mls",
        "version": LAYOUT_VERSION,
        "D": mls.dim,
        "P": mls.n_params,
        "config": mls.config.__dict__,
        "heads": sorted(mls.heads),
        "backbone_frozen": mls.backbone_frozen,
        "pretrained": mls.pretrained,
        "layout": [{"name": e.name, "shape": list(e.shape), "offset": e.offset} for e in mls.layout],
    }
    meta.update(extra_meta or {})
    save_arrays(path, mls.named_arrays(), meta)


def load_mls(path, dtype=torch.float32) -> tuple:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "mls":
        raise ValueError(f"{path}: not a predictor checkpoint")
    cfg = MlsConfig(**meta["config"])

    def t(name):
        return torch.as_tensor(arrays[name]).to(dtype)

    backbone = [(t(f"backbone/{i}/weight"), t(f"backbone/{i}/bias")) for i in range(cfg.backbone_depth)]
    heads = {h: [(t(f"heads/{h}/{i}/weight"), t(f"heads/{h}/{i}/bias")) for i in range(2)] for h in meta["heads"]}
    layout = [LayoutEntry(e["name"], tuple(e["shape"]), e["offset"]) for e in meta["layout"]]
    mls = MlsParams(backbone, heads, int(meta["D"]), int(meta["P"]), cfg, layout, bool(meta["backbone_frozen"]),
                    bool(meta.get("pretrained", False)))
    return mls, meta
