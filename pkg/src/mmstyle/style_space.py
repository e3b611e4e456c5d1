"""Unified style features for image and text styles.

Default encoders are small deterministic stand-ins for a joint text/image
embedding model; both produce L2-normalised vectors of the same dimension
``D`` (32 by default). Any callable ``payload -> vector`` can replace them
through the ``encoder`` argument.

Text features can be pulled towards their paired image features by a learned
correction network (:func:`train_cfcm` / :func:`correct_text_feature`), and
new styles are matched against a :class:`StyleSet` by cosine distance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .container import load_arrays, save_arrays
from .field import TrainingError, cosine_lr
from .validation import check_image

logger = logging.getLogger(__name__)

DEFAULT_DIM = 32
DEFAULT_THRESHOLD = 0.1


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


@dataclass(frozen=True, eq=False)
class StyleFeature:
    vector: np.ndarray
    modality: str = "image"
    corrected: bool = False

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("style feature must be finite")
        if self.modality not in ("image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class StyleEntry:
    style_id: str
    modality: str
    payload: str
    feature: Optional[StyleFeature] = None
    head_id: Optional[str] = None


@dataclass
class StyleSet:
    entries: list = field(default_factory=list)
    dim: int = DEFAULT_DIM
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        ids = [e.style_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate style ids in {ids}")
        for e in self.entries:
            if e.feature is not None and e.feature.dim != self.dim:
                raise ValueError(f"style {e.style_id!r} feature dim {e.feature.dim} != {self.dim}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list:
        return [e.style_id for e in self.entries]

    def get(self, style_id: str) -> StyleEntry:
        for e in self.entries:
            if e.style_id == style_id:
                return e
        raise KeyError(style_id)

    def add(self, entry: StyleEntry) -> None:
        if entry.style_id in self.ids:
            raise ContractError(f"style id {entry.style_id!r} already in the set")
        if entry.feature is not None and entry.feature.dim != self.dim:
            raise ValueError(f"feature dim {entry.feature.dim} != {self.dim}")
        self.entries.append(entry)


# ---------------------------------------------------------------------------
# encoders


def _seed_rng(seed: int, salt: str) -> np.random.Generator:
    digest = hashlib.blake2b(salt.encode(), key=str(seed).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _gradient_stats(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img, axis=(0, 1))
    mag = np.sqrt(gx ** 2 + gy ** 2)
    lum = img.mean(axis=2)
    ly, lx = np.gradient(lum)
    lmag = np.sqrt(lx ** 2 + ly ** 2)
    stats = []
    for c in range(3):
        m = mag[..., c]
        stats += [m.mean(), m.std(), np.percentile(m, 90)]
    stats += [lmag.mean(), lmag.std(), np.percentile(lmag, 90)]
    return np.asarray(stats)


def toy_image_encoder(image: np.ndarray, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Colour histograms (8 bins per channel) plus seeded projections of gradient statistics."""
    img = np.clip(check_image(image), 0.0, 1.0)
    hists = []
    for c in range(3):
        h, _ = np.histogram(img[..., c], bins=8, range=(0.0, 1.0))
        hists.append(h / max(h.sum(), 1))
    hist = np.concatenate(hists)
    n_proj = dim - hist.shape[0]
    if n_proj < 0:
        raise ValueError(f"dim must be >= 24 for the toy image encoder, got {dim}")
    stats = _gradient_stats(img) * 4.0
    proj = _seed_rng(seed, "gradient-projection").standard_normal((n_proj, stats.shape[0])) / math.sqrt(stats.shape[0])
    v = np.concatenate([hist, proj @ stats])
    return v / np.linalg.norm(v)


_TOKEN = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list:
    return _TOKEN.findall(text.lower())


def toy_text_encoder(text: str, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Hashed bag of tokens: each token owns a seeded Gaussian direction."""
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("text style must contain at least one token")
    v = np.zeros(dim)
    for tok in tokens:
        v += _seed_rng(seed, "token:" + tok).standard_normal(dim)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def encode_image_style(image: np.ndarray, encoder: Optional[Callable] = None,
                       dim: int = DEFAULT_DIM) -> StyleFeature:
    vec = encoder(image) if encoder is not None else toy_image_encoder(image, dim)
    return StyleFeature(vec, "image", False)


def encode_text_style(text: str, encoder: Optional[Callable] = None,
                      dim: int = DEFAULT_DIM) -> StyleFeature:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text style must be a non-empty string")
    vec = encoder(text) if encoder is not None else toy_text_encoder(text, dim)
    return StyleFeature(vec, "text", False)


# ---------------------------------------------------------------------------
# cross-modal feature correction


@dataclass
class CfcmParams:
    """Correction network ``D -> 4D -> 4D -> D`` (tanh); output is the additive correction."""

    layers: list  # of (weight, bias) tensors
    dim: int

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for w, b in self.layers[:-1]:
            h = torch.tanh(F.linear(h, w, b))
        w, b = self.layers[-1]
        return F.linear(h, w, b)

    def tensors(self) -> list:
        return [t for layer in self.layers for t in layer]


def init_cfcm(dim: int, seed: int = 0, width_factor: int = 4, dtype=torch.float64) -> CfcmParams:
    gen = torch.Generator().manual_seed(seed)
    dims = [dim, width_factor * dim, width_factor * dim, dim]
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if i == len(dims) - 2:
            # zero last layer: an untrained module applies no correction
            layers.append((torch.zeros(b, a, dtype=dtype), torch.zeros(b, dtype=dtype)))
        else:
            bound = 1.0 / math.sqrt(a)
            layers.append(((torch.rand(b, a, generator=gen, dtype=dtype) * 2 - 1) * bound,
                           (torch.rand(b, generator=gen, dtype=dtype) * 2 - 1) * bound))
    return CfcmParams(layers, dim)


def cfcm_loss(image_feats: torch.Tensor, corrected: torch.Tensor, lam: float):
    """Returns ``(total, cosine_term, mse_term)`` of the correction objective."""
    cos = F.cosine_similarity(image_feats, corrected, dim=-1, eps=1e-12)
    l_c = (1.0 - cos).mean()
    l_m = ((image_feats - corrected) ** 2).sum(dim=-1).mean()
    return l_c + lam * l_m, l_c, l_m


@dataclass
class CfcmReport:
    train_loss: list
    val_loss: float
    test_loss: float
    split: dict
    val_cos_before: np.ndarray = None
    val_cos_after: np.ndarray = None

    def summary(self) -> dict:
        return {"val_loss": self.val_loss, "test_loss": self.test_loss,
                "val_cos_before": float(np.mean(self.val_cos_before)),
                "val_cos_after": float(np.mean(self.val_cos_after))}


def split_indices(n: int, seed: int, fractions=(0.6, 0.2, 0.2)) -> dict:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": perm[:n_train], "val": perm[n_train:n_train + n_val], "test": perm[n_train + n_val:]}


def train_cfcm(pairs, lam: float = 0.5, *, steps: int = 1500, batch: int = 256, lr_init: float = 4e-3,
               lr_final: float = 1.33e-4, seed: int = 0, split: bool = True):
    """Fit the correction network on ``(text_vector, image_vector)`` pairs.

    With ``split`` the pairs are divided 0.6/0.2/0.2 into train/val/test and
    only the training part is optimised. Returns ``(params, report)``.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one text-image pair")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    text = torch.as_tensor(np.stack([np.asarray(getattr(t, "vector", t)) for t, _ in pairs]), dtype=torch.float64)
    image = torch.as_tensor(np.stack([np.asarray(getattr(i, "vector", i)) for _, i in pairs]), dtype=torch.float64)
    dim = text.shape[1]
    parts = split_indices(len(pairs), seed) if split and len(pairs) >= 5 else {
        "train": np.arange(len(pairs)), "val": np.arange(len(pairs)), "test": np.arange(len(pairs))}
    tr = torch.as_tensor(parts["train"])
    params = init_cfcm(dim, seed)
    tensors = params.tensors()
    for t in tensors:
        t.requires_grad_(True)
    opt = torch.optim.Adam(tensors, lr=lr_init)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, steps, lr_init, lr_final)
        idx = tr[torch.randint(0, len(tr), (min(batch, len(tr)),), generator=gen)]
        corrected = text[idx] + params(text[idx])
        loss, _, _ = cfcm_loss(image[idx], corrected, lam)
        if not torch.isfinite(loss):
            raise TrainingError(f"correction training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    for t in tensors:
        t.requires_grad_(False)

    def eval_on(ix):
        ix = torch.as_tensor(ix)
        with torch.no_grad():
            return float(cfcm_loss(image[ix], text[ix] + params(text[ix]), lam)[0])

    def cosines(ix, correct):
        ix = torch.as_tensor(ix)
        t = text[ix]
        if correct:
            with torch.no_grad():
                t = t + params(t)
        return F.cosine_similarity(t, image[ix], dim=-1).numpy()

    report = CfcmReport(losses, eval_on(parts["val"]), eval_on(parts["test"]),
                        {k: v.tolist() for k, v in parts.items()},
                        cosines(parts["val"], False), cosines(parts["val"], True))
    return params, report


def correct_text_feature(f_t: StyleFeature, cfcm: CfcmParams) -> StyleFeature:
    if f_t.modality != "text":
        raise ContractError("only text features are corrected")
    if f_t.corrected:
        raise ContractError("text feature is already corrected")
    x = torch.tensor(f_t.vector, dtype=cfcm.layers[0][0].dtype)
    with torch.no_grad():
        v = x + cfcm(x)
    return StyleFeature(v.double().numpy(), "text", True)


def save_cfcm(params: CfcmParams, path) -> None:
    arrays = {}
    for i, (w, b) in enumerate(params.layers):
        arrays[f"layers/{i}/weight"] = w.detach().numpy()
        arrays[f"layers/{i}/bias"] = b.detach().numpy()
    save_arrays(path, arrays, {"kind": "cfcm", "version": 1, "dim": params.dim, "n_layers": len(params.layers)})


def load_cfcm(path) -> CfcmParams:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "cfcm":
        raise ValueError(f"{path}: not a correction-module checkpoint")
    layers = [(torch.as_tensor(arrays[f"layers/{i}/weight"]), torch.as_tensor(arrays[f"layers/{i}/bias"]))
              for i in range(meta["n_layers"])]
    return CfcmParams(layers, int(meta["dim"]))


class CrossModalCorrector(BaseEstimator, TransformerMixin):
    """``fit(text_vectors, image_vectors)``; ``transform`` adds the learned correction."""

    def __init__(self, lam=0.5, steps=1500, batch=256, lr_init=4e-3, lr_final=1.33e-4, seed=0):
        self.lam = lam
        self.steps = steps
        self.batch = batch
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.shape != y.shape or X.ndim != 2:
            raise ValueError(f"X and y must be matching (n, D) arrays, got {X.shape} and {y.shape}")
        self.params_, self.report_ = train_cfcm(list(zip(X, y)), self.lam, steps=self.steps, batch=self.batch,
                                                lr_init=self.lr_init, lr_final=self.lr_final, seed=self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        x = torch.as_tensor(np.asarray(X, dtype=np.float64))
        with torch.no_grad():
            return (x + self.params_(x)).numpy()


# ---------------------------------------------------------------------------
# similarity and matching


def cosine_distance(f1, f2) -> float:
    a = np.asarray(getattr(f1, "vector", f1), dtype=np.float64)
    b = np.asarray(getattr(f2, "vector", f2), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for zero vectors")
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


@dataclass(frozen=True)
class MatchResult:
    matched: bool
    style_id: str
    distance: float


def match_style(f_new, styles: StyleSet, threshold: Optional[float] = None) -> MatchResult:
    """Nearest style by cosine distance; ``matched`` when it is closer than the threshold.

    Ties go to the smallest style id.
    """
    if len(styles) == 0:
        raise ValueError("style set is empty")
    theta = styles.threshold if threshold is None else threshold
    best = None
    for e in sorted(styles.entries, key=lambda e: e.style_id):
        if e.feature is None:
            raise ValueError(f"style {e.style_id!r} has no feature")
        d = cosine_distance(f_new, e.feature)
        if best is None or d < best[1]:
            best = (e.style_id, d)
    return MatchResult(best[1] < theta, best[0], best[1])


class StyleMatcher(BaseEstimator):
    def __init__(self, threshold=DEFAULT_THRESHOLD):
        self.threshold = threshold

    def fit(self, styles: StyleSet, y=None):
        self.styles_ = styles
        return self

    def predict(self, features) -> list:
        check_is_fitted(self, "styles_")
        return [match_style(f, self.styles_, self.threshold) for f in features]


# ---------------------------------------------------------------------------
# bundled catalogue and synthetic pair corpus

_MOVEMENTS = ["impressionism", "cubism", "expressionism", "pointillism", "art nouveau",
              "ukiyo-e", "fauvism", "baroque", "pop art", "minimalism"]
_SUBJECTS = ["harbor", "night", "garden", "mountain", "storm"]
_PATTERNS = ["stripes", "checks", "waves", "dots", "noise"]
_ARTISTS = ["anna vale", "bruno kade", "clara moss", "dario fenn", "elsa quint",
            "felix orr", "greta lund", "hugo brandt", "ines tal", "jonas pike"]


@dataclass(frozen=True)
class CatalogStyle:
    style_id: str
    title: str
    artist: str
    movement: str
    pattern: str
    palette: tuple

    @property
    def text(self) -> str:
        return f"a picture of {self.title} by {self.artist} in the style of {self.movement}"


def style_catalog() -> list:
    """Fifty procedurally defined styles (title, artist, movement, palette, pattern)."""
    out = []
    rng = np.random.default_rng(2024)
    for i in range(50):
        movement = _MOVEMENTS[i % 10]
        subject = _SUBJECTS[i // 10]
        pattern = _PATTERNS[(i + i // 10) % 5]
        palette = tuple(tuple(float(x) for x in rng.uniform(0.0, 1.0, 3)) for _ in range(3))
        sid = f"{movement.replace(' ', '')}_{subject}"
        out.append(CatalogStyle(sid, f"{subject} {i}", _ARTISTS[i % 10], movement, pattern, palette))
    return out


def catalog_style(style_id: str) -> CatalogStyle:
    for c in style_catalog():
        if c.style_id == style_id:
            return c
    raise KeyError(f"unknown catalogue style {style_id!r}")


def render_style_image(style: CatalogStyle, size: int = 64) -> np.ndarray:
    """Deterministic procedural painting for a catalogue style."""
    seed = int(hashlib.blake2b(style.style_id.encode(), digest_size=4).hexdigest(), 16)
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(4, 10)
    ang = rng.uniform(0, np.pi)
    u = xs * np.cos(ang) + ys * np.sin(ang)
    v = -xs * np.sin(ang) + ys * np.cos(ang)
    if style.pattern == "stripes":
        a = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u)
    elif style.pattern == "checks":
        a = ((np.floor(freq * u) + np.floor(freq * v)) % 2).astype(np.float64)
    elif style.pattern == "waves":
        a = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + 2.0 * np.sin(2 * np.pi * freq * 0.5 * v))
    elif style.pattern == "dots":
        a = (np.hypot((freq * u) % 1 - 0.5, (freq * v) % 1 - 0.5) < 0.3).astype(np.float64)
    else:
        a = rng.random((size, size))
    b = rng.random((size, size)) * 0.3
    p0, p1, p2 = (np.asarray(c) for c in style.palette)
    img = (1 - a)[..., None] * p0 + a[..., None] * p1
    img = (1 - b)[..., None] * img + b[..., None] * p2
    return np.clip(img, 0.0, 1.0)


def synthetic_pair_corpus(n_pairs: int = 2000, dim: int = DEFAULT_DIM, seed: int = 0,
                          bias_norm: float = 0.8, noise: float = 0.05, include_catalog: bool = True) -> list:
    """Text/image feature pairs standing in for a generated text-to-image corpus.

    Most pairs are ``(t, t + b + noise)`` for random token strings ``t`` and one
    seeded bias ``b``; the catalogue contributes ``(paraphrase, painting)`` pairs.
    """
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(400)]
    b = rng.standard_normal(dim)
    b *= bias_norm / np.linalg.norm(b)
    pairs = []
    for _ in range(n_pairs):
        toks = rng.choice(vocab, size=rng.integers(3, 7), replace=False)
        t = toy_text_encoder(" ".join(toks), dim)
        pairs.append((t, t + b + noise * rng.standard_normal(dim) / math.sqrt(dim)))
    if include_catalog and dim >= 24:
        for c in style_catalog():
            pairs.append((toy_text_encoder(c.text, dim), toy_image_encoder(render_style_image(c), dim)))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


# ---------------------------------------------------------------------------
# style manifests


def resolve_style_image(payload: str, base_dir: Optional[Path] = None, size: int = 64) -> np.ndarray:
    """``catalog:<id>`` yields a procedural painting; anything else is an image path."""
    if payload.startswith("catalog:"):
        return render_style_image(catalog_style(payload.split(":", 1)[1]), size)
    from .scene_io import read_png
    p = Path(payload)
    if base_dir is not None and not p.is_absolute():
        p = base_dir / p
    if not p.is_file():
        raise FileNotFoundError(f"style image {p} not found")
    return read_png(p)


def load_style_set(path, threshold: float = DEFAULT_THRESHOLD, dim: int = DEFAULT_DIM) -> StyleSet:
    """Read ``styles.json``: ``[{id, modality, payload, feature?}]``."""
    path = Path(path)
    raw = json.loads(path.read_text())
    entries = []
    for i, rec in enumerate(raw):
        for key in ("id", "modality", "payload"):
            if key not in rec:
                raise ValueError(f"{path}: entry {i} missing field '{key}'")
        feat = None
        if rec.get("feature") is not None:
            feat = StyleFeature(np.asarray(rec["feature"], dtype=np.float64), rec["modality"], False)
        entries.append(StyleEntry(str(rec["id"]), rec["modality"], rec["payload"], feat))
    if any(e.feature is not None for e in entries):
        dim = next(e.feature.dim for e in entries if e.feature is not None)
    return StyleSet(entries, dim, threshold)


def save_style_set(styles: StyleSet, path, with_features: bool = True) -> None:
    out = []
    for e in styles.entries:
        rec = {"id": e.style_id, "modality": e.modality, "payload": e.payload}
        if with_features and e.feature is not None:
            rec["feature"] = e.feature.vector.tolist()
        out.append(rec)
    Path(path).write_text(json.dumps(out, indent=2))


def featurize(styles: StyleSet, cfcm: Optional[CfcmParams] = None, base_dir: Optional[Path] = None,
              image_encoder: Optional[Callable] = None, text_encoder: Optional[Callable] = None) -> StyleSet:
    """Fill in missing features; text features are corrected when ``cfcm`` is given."""
    entries = []
    for e in styles.entries:
        feat = e.feature
        if feat is None:
            if e.modality == "image":
                feat = encode_image_style(resolve_style_image(e.payload, base_dir), image_encoder, styles.dim)
            else:
                feat = encode_text_style(e.payload, text_encoder, styles.dim)
        if feat.modality == "text" and not feat.corrected and cfcm is not None:
            feat = correct_text_feature(feat, cfcm)
        entries.append(replace(e, feature=feat))
    return StyleSet(entries, styles.dim, styles.threshold)
