"""Command-line entry point: ``mmstyle <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or missing prerequisite, 2 runtime or
training failure. Config precedence is flags, then ``--config`` JSON, then
defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import DEFAULT_TAU
from .field import FieldConfig, TrainConfig, TrainingError, load_field, pretrain_nerf, render_image, save_field
from .metrics import evaluate_sequence, psnr, sequence_for_views, ssim
from .mls import init_mls, load_mls, pack_heads, pretrain_mls, save_mls
from .scene_io import (SceneLoadError, UnsupportedError, generate_synthetic_scene, held_out_views, load_scene,
                       save_scene, write_png)
from .style_space import (DEFAULT_THRESHOLD, ContractError, StyleEntry, StyleSet, encode_image_style,
                          encode_text_style, correct_text_feature, featurize, load_cfcm, load_style_set,
                          resolve_style_image, save_cfcm, save_style_set, synthetic_pair_corpus, train_cfcm)
from .stylizer import FeatureExtractor
from .trainer import (CacheStats, PreconditionError, RunManifest, StylizationConfig, UnknownStyleError,
                      incremental_train, moving_average, pregenerate_supervision, read_loss_csv,
                      render_stylized, scene_hash, stylization_train)
from .validation import ValidationError

logger = logging.getLogger("mmstyle")

DEFAULTS = {
    "seed": 0,
    "views": 6,
    "res": 96,
    "field_iters": 1500,
    "field_batch": 1024,
    "samples": 32,
    "cfcm_steps": 1500,
    "mls_epochs": 150,
    "iters": 5000,
    "batch": 1024,
    "lr_init": 5e-3,
    "lr_final": 1.67e-4,
    "optimizer": "sgd",
    "threshold": DEFAULT_THRESHOLD,
    "tau": DEFAULT_TAU,
    "jobs": 1,
    "extractor_seed": 0,
}

USER_ERRORS = (ValidationError, SceneLoadError, UnsupportedError, PreconditionError, UnknownStyleError,
               ContractError, FileNotFoundError, KeyError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def cache_root(args) -> Path:
    return Path(os.environ.get("MMSTYLE_CACHE") or Path(args.run or ".") / "cache")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2)
    os.replace(tmp, path)


def _read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text()) if Path(path).is_file() else {}


def _resolve(args, key, run_cfg=None):
    """Flag if given, else ``--config`` file, else the run's stored config, else default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    file_cfg = getattr(args, "_file_cfg", {})
    if key in file_cfg:
        return file_cfg[key]
    if run_cfg and run_cfg.get(key) is not None:
        return run_cfg[key]
    return DEFAULTS.get(key)


def _run_dir(args) -> Path:
    if not args.run:
        raise ValidationError("--run is required")
    return Path(args.run)


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise PreconditionError(f"{what} missing ({path}); run the earlier pipeline stage first")
    return path


def _scene_path(args, cfg) -> str:
    scene = args.scene or cfg.get("scene")
    if not scene:
        raise ValidationError("--scene is required")
    return scene


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    if not args.out:
        raise ValidationError("--out is required")
    scene = generate_synthetic_scene(_resolve(args, "seed"), _resolve(args, "views"), _resolve(args, "res"))
    save_scene(scene, args.out)
    print(f"wrote {scene.n_views} views of {scene.scene_id} to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    run = _run_dir(args)
    cfg = _read_json(run / "config.json")
    scene_path = _scene_path(args, cfg)
    scene = load_scene(scene_path)
    seed = _resolve(args, "seed", cfg)
    iters = _resolve(args, "field_iters", cfg) if args.iters is None else args.iters
    tc = TrainConfig(iters=iters, batch=_resolve(args, "field_batch", cfg), seed=seed, log_every=0)
    fc = FieldConfig(samples_per_ray=_resolve(args, "samples", cfg))
    field, losses = pretrain_nerf(scene, tc, fc)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_field(field, run / "checkpoints" / "field.bin")

    pairs = synthetic_pair_corpus(seed=seed)
    cfcm, report = train_cfcm(pairs, steps=_resolve(args, "cfcm_steps", cfg), seed=seed)
    save_cfcm(cfcm, run / "checkpoints" / "cfcm.bin")
    np.savez(run / "cfcm_similarity.npz", before=report.val_cos_before, after=report.val_cos_after)

    cfg.update({"scene": str(Path(scene_path).resolve()), "seed": seed, "field_iters": iters,
                "samples": fc.samples_per_ray})
    _write_json(run / "config.json", cfg)
    train_psnr = float(np.mean([psnr(render_image(field, c), im) for c, im in scene.views]))
    _write_json(run / "pretrain.json", {"final_loss": float(np.mean(losses[-100:])), "train_psnr": train_psnr,
                                        "cfcm": report.summary()})
    print(f"field: train PSNR {train_psnr:.2f} dB; CFCM val cosine "
          f"{report.val_cos_before.mean():.3f} -> {report.val_cos_after.mean():.3f}")
    return 0


def _load_styles(args, cfg, run: Path) -> StyleSet:
    path = args.styles or cfg.get("styles")
    if not path:
        raise ValidationError("--styles is required")
    styles = load_style_set(path, threshold=_resolve(args, "threshold", cfg))
    cfcm_path = run / "checkpoints" / "cfcm.bin"
    cfcm = load_cfcm(cfcm_path) if cfcm_path.is_file() else None
    if cfcm is None and any(e.modality == "text" for e in styles):
        raise PreconditionError("CFCM checkpoint missing; text styles need the correction module (run pretrain)")
    return featurize(styles, cfcm, base_dir=Path(path).parent)


def _pregen(args, cfg, run, scene, styles, stats):
    fx = FeatureExtractor(seed=_resolve(args, "extractor_seed", cfg))
    return pregenerate_supervision(scene, styles, fx, cache_root=cache_root(args),
                                   tau=_resolve(args, "tau", cfg), jobs=_resolve(args, "jobs", cfg),
                                   base_dir=Path(args.styles or cfg["styles"]).parent, stats=stats)


def cmd_pregen(args) -> int:
    run = _run_dir(args)
    cfg = _read_json(run / "config.json")
    scene = load_scene(_scene_path(args, cfg))
    styles = _load_styles(args, cfg, run)
    stats = CacheStats()
    packs = _pregen(args, cfg, run, scene, styles, stats)
    for msg in stats.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"supervision for {len(packs)} styles: {stats.hits} cached, {stats.misses} generated "
          f"(cache {cache_root(args)})")
    return 0


def _stylization_config(args, cfg) -> StylizationConfig:
    return StylizationConfig(iters=_resolve(args, "iters", cfg), batch=_resolve(args, "batch", cfg),
                             lr_init=_resolve(args, "lr_init", cfg), lr_final=_resolve(args, "lr_final", cfg),
                             optimizer=_resolve(args, "optimizer", cfg), seed=_resolve(args, "seed", cfg),
                             log_every=0, scene=cfg.get("scene"), styles=cfg.get("styles"))


def cmd_train(args) -> int:
    run = _run_dir(args)
    cfg = _read_json(run / "config.json")
    field = load_field(_need(run / "checkpoints" / "field.bin", "field checkpoint"))
    scene = load_scene(_scene_path(args, cfg))
    styles = _load_styles(args, cfg, run)
    cfg["styles"] = str(Path(args.styles or cfg["styles"]).resolve())
    packs = _pregen(args, cfg, run, scene, styles, CacheStats())
    seed = _resolve(args, "seed", cfg)
    mls = init_mls(styles.dim, field.config, styles.ids, seed=seed)
    mls, _ = pretrain_mls(mls, [e.feature for e in styles], styles.ids, pack_heads(field),
                          _resolve(args, "mls_epochs", cfg))
    config = _stylization_config(args, cfg)
    manifest = RunManifest(config.__dict__.copy(), {"scene": scene_hash(scene)})
    mls, manifest = stylization_train(field, mls, styles, packs, scene, config, manifest=manifest)
    save_mls(mls, run / "checkpoints" / "mls.bin")
    save_style_set(styles, run / "styles.json")
    _write_json(run / "heads.json", {sid: sid for sid in styles.ids})
    manifest.write(run)
    cfg.update({k: getattr(config, k) for k in ("iters", "batch", "lr_init", "lr_final", "optimizer", "seed")})
    _write_json(run / "config.json", cfg)
    for sid in styles.ids:
        print(f"{sid}: {_curve_summary(manifest.style_curve(sid))}")
    return 0


def _load_trained(run: Path):
    mls_path = run / "checkpoints" / "mls.bin"
    if not mls_path.is_file():
        raise PreconditionError(f"MLS checkpoint missing ({mls_path}); run train first")
    field = load_field(_need(run / "checkpoints" / "field.bin", "field checkpoint"))
    mls, _ = load_mls(mls_path)
    styles = load_style_set(run / "styles.json")
    # features in styles.json are stored already corrected
    styles = StyleSet([StyleEntry(e.style_id, e.modality, e.payload,
                                  type(e.feature)(e.feature.vector, e.modality, e.modality == "text"))
                       for e in styles], styles.dim, styles.threshold)
    head_of = _read_json(run / "heads.json") or {sid: sid for sid in styles.ids}
    return field, mls, styles, head_of


def _payload_feature(args, run: Path, dim: int, base_dir):
    if args.modality == "image":
        return encode_image_style(resolve_style_image(args.payload, base_dir), dim=dim)
    cfcm_path = _need(run / "checkpoints" / "cfcm.bin", "CFCM checkpoint")
    return correct_text_feature(encode_text_style(args.payload, dim=dim), load_cfcm(cfcm_path))


def _curve_summary(curve) -> str:
    n = max(1, min(100, len(curve) // 2))
    return f"MSCL {np.mean(curve[:n]):.5f} -> {np.mean(curve[-n:]):.5f}"


def cmd_add_style(args) -> int:
    run = _run_dir(args)
    cfg = _read_json(run / "config.json")
    field, mls, styles, head_of = _load_trained(run)
    if not args.style_id or not args.payload:
        raise ValidationError("add-style needs --style-id and --payload")
    styles.threshold = _resolve(args, "threshold", cfg)
    scene = load_scene(_scene_path(args, cfg))
    base_dir = Path(cfg["styles"]).parent if cfg.get("styles") else None
    feat = _payload_feature(args, run, styles.dim, base_dir)
    entry = StyleEntry(args.style_id, args.modality, args.payload, feat)
    fx = FeatureExtractor(seed=_resolve(args, "extractor_seed", cfg))
    pack = pregenerate_supervision(scene, StyleSet([entry], styles.dim), fx, cache_root=cache_root(args),
                                   tau=_resolve(args, "tau", cfg), base_dir=base_dir)[entry.style_id]
    config = _stylization_config(args, cfg)
    res = incremental_train(field, mls, styles, entry, pack, scene, config, head_of=head_of)
    if res.matched:
        print(f"style matches existing head {res.head_id!r} (cosine distance {res.distance:.4f}); nothing trained")
        return 0
    head_of[entry.style_id] = res.head_id
    save_mls(res.mls, run / "checkpoints" / "mls.bin")
    save_style_set(styles, run / "styles.json")
    _write_json(run / "heads.json", head_of)
    res.manifest.write(run / "increments" / entry.style_id)
    print(f"added {entry.style_id!r} from head {res.source_head!r} (distance {res.distance:.4f}); "
          f"{_curve_summary(res.manifest.style_curve(entry.style_id))}")
    return 0


def cmd_render(args) -> int:
    run = _run_dir(args)
    cfg = _read_json(run / "config.json")
    field, mls, styles, head_of = _load_trained(run)
    if args.style_id:
        if args.style_id not in styles.ids:
            raise UnknownStyleError(f"unknown style id {args.style_id!r}; trained styles: {styles.ids}")
        style = args.style_id
    elif args.payload:
        style = _payload_feature(args, run, styles.dim, Path(cfg["styles"]).parent if cfg.get("styles") else None)
    else:
        raise ValidationError("render needs --style-id or --payload")
    scene = load_scene(_scene_path(args, cfg))
    views = [args.view] if args.view is not None else list(range(scene.n_views))
    for v in views:
        if not 0 <= v < scene.n_views:
            raise ValidationError(f"--view {v} out of range for {scene.n_views} views")
    name = args.style_id or "payload"
    for v in views:
        img = render_stylized(field, mls, style, scene.cameras[v], styles=styles, head_of=head_of)
        out = Path(args.out) if args.out and len(views) == 1 else run / "renders" / f"{name}_v{v:03d}.png"
        write_png(out, img)
        print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    run = _run_dir(args)
    cfg = _read_json(run / "config.json")
    field, mls, styles, head_of = _load_trained(run)
    scene = load_scene(_scene_path(args, cfg))
    test = held_out_views(scene) if scene.geometry is not None else scene
    fx = FeatureExtractor(seed=_resolve(args, "extractor_seed", cfg))
    packs = pregenerate_supervision(scene, styles, fx, cache_root=cache_root(args), tau=_resolve(args, "tau", cfg),
                                    base_dir=Path(cfg["styles"]).parent if cfg.get("styles") else None)
    rows = []
    for sid in styles.ids:
        renders = [render_stylized(field, mls, sid, c, styles=styles, head_of=head_of) for c in test.cameras]
        seq = sequence_for_views(renders, test)
        res = evaluate_sequence(seq, fx=fx)
        train = [render_stylized(field, mls, sid, c, styles=styles, head_of=head_of) for c in scene.cameras]
        res["psnr"] = float(np.mean([psnr(r, t) for r, t in zip(train, packs[sid].images)]))
        res["ssim"] = float(np.mean([ssim(r, t) for r, t in zip(train, packs[sid].images)]))
        res["style_id"] = sid
        rows.append(res)
    metrics = {k: float(np.mean([r[k] for r in rows])) for k in ("twe", "warped_perceptual", "psnr", "ssim")}
    metrics.update({"backend": f"{fx.kind}(seed={fx.seed})", "seed": _resolve(args, "seed", cfg),
                    "flow": "ground_truth" if test.gt_flow_available else "block_matching",
                    "per_style": rows})
    out = Path(args.out) if args.out else run / "metrics.json"
    _write_json(out, metrics)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["style_id", "twe", "warped_perceptual", "psnr", "ssim", "backend"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})
    print(json.dumps({k: metrics[k] for k in ("twe", "warped_perceptual", "psnr", "ssim", "backend")}))
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = _run_dir(args)
    out_dir = Path(args.out) if args.out else run / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    loss_csv = run / "loss.csv"
    if loss_csv.is_file():
        rows = read_loss_csv(loss_csv)
        fig, ax = plt.subplots(figsize=(6, 4))
        for sid in sorted({r[1] for r in rows}):
            steps = np.array([r[0] for r in rows if r[1] == sid])
            vals = np.array([r[2] for r in rows if r[1] == sid])
            smooth = moving_average(vals, 100)
            ax.plot(steps[len(steps) - len(smooth):], smooth, label=sid)
        ax.set_xlabel("step")
        ax.set_ylabel("MSCL (moving average)")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "loss.png", dpi=120)
        plt.close(fig)
        made.append(out_dir / "loss.png")
    sim = run / "cfcm_similarity.npz"
    if sim.is_file():
        data = np.load(sim)
        fig, ax = plt.subplots(figsize=(6, 4))
        bins = np.linspace(min(data["before"].min(), data["after"].min()), 1.0, 40)
        ax.hist(data["before"], bins=bins, alpha=0.6, label="text feature")
        ax.hist(data["after"], bins=bins, alpha=0.6, label="corrected")
        ax.set_xlabel("cosine similarity to paired image feature")
        ax.set_ylabel("pairs")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "cfcm_hist.png", dpi=120)
        plt.close(fig)
        made.append(out_dir / "cfcm_hist.png")
    if not made:
        raise PreconditionError(f"nothing to plot in {run}: loss.csv and cfcm_similarity.npz both missing")
    for p in made:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "gen-scene": (cmd_gen_scene, "write a procedural scene with known geometry"),
    "pretrain": (cmd_pretrain, "fit the radiance field and the text-feature corrector"),
    "pregen": (cmd_pregen, "stylize views and build consistent supervision (cached)"),
    "train": (cmd_train, "pretrain the predictor and run stylization training"),
    "add-style": (cmd_add_style, "add one style by cloning its nearest head"),
    "render": (cmd_render, "render a stylized view"),
    "evaluate": (cmd_evaluate, "write metrics.json for a trained run"),
    "plot": (cmd_plot, "plot training curves and the corrector histogram"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file with defaults for any flag")
    g.add_argument("--run", help="run directory (runs/<id>)")
    g.add_argument("--scene", help="scene directory")
    g.add_argument("--styles", help="styles.json manifest")
    g.add_argument("--seed", type=int, help=f"random seed (default {DEFAULTS['seed']})")
    g.add_argument("--iters", type=int, help=f"training iterations (default {DEFAULTS['iters']}; "
                                             f"pretrain: {DEFAULTS['field_iters']})")
    g.add_argument("--batch", type=int, help=f"rays per step (default {DEFAULTS['batch']})")
    g.add_argument("--threshold", type=float, help=f"style match threshold (default {DEFAULTS['threshold']})")
    g.add_argument("--jobs", type=int, help=f"parallel workers (default {DEFAULTS['jobs']})")
    g.add_argument("--out", help="output path")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mmstyle", description="Multi-style radiance field stylization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "gen-scene":
            p.add_argument("--views", type=int, help=f"number of views (default {DEFAULTS['views']})")
            p.add_argument("--res", type=int, help=f"image side in pixels (default {DEFAULTS['res']})")
        if name in ("train", "add-style"):
            p.add_argument("--optimizer", choices=["sgd", "adam"],
                           help=f"optimizer (default {DEFAULTS['optimizer']})")
        if name in ("add-style", "render"):
            p.add_argument("--style-id", help="style identifier")
            p.add_argument("--payload", help="style image path, catalog:<id>, or text")
            p.add_argument("--modality", choices=["image", "text"], default="image",
                           help="payload modality (default image)")
        if name == "render":
            p.add_argument("--view", type=int, help="view index (default: all views)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mmstyle: error: {exc}", file=sys.stderr)
        return 1
    if not args.command:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for key in ("lr_init", "lr_final", "mls_epochs", "field_iters", "field_batch", "samples", "cfcm_steps",
                "tau", "extractor_seed", "optimizer", "views", "res"):
        if not hasattr(args, key):
            setattr(args, key, None)
    try:
        args._file_cfg = json.loads(Path(args.config).read_text()) if args.config else {}
        return COMMANDS[args.command][0](args)
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mmstyle {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"mmstyle {args.command}: failed: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
