"""Command-line front end.

Grammar: ldfuse <verb> --config <path> [--set key=value]... [--out <dir>]
[--seed N].  Exit codes: 0 success, 2 usage error, 3 config error,
4 runtime failure.  Errors are printed as single-line JSON on stderr;
stdout carries human-readable progress.

Stage verbs read predecessor checkpoints from config.paths.models_dir,
which defaults to the --out directory, so successive stages can share one
run directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, LdfuseError, StateError
from .guidance import GuidanceMLP, SemanticParams, encode_text, modulate, Caption
from .imageio import (DepthMap, RasterImage, concat_modalities, load_depth,
                      load_image, load_split, luminance, save_depth, save_image,
                      synth_scene)
from .losses import silog
from .metrics import mi, qabf, reports_to_csv, sd, sf, vif
from .models import FusionHead, TinyDepthNet, TinyUNet
from .pipeline import (RunConfig, ablate, evaluate, generate_dataset,
                       make_scenes, prepare_scenes, train_depth_branches,
                       train_diffusion, train_fusion, DiffusionFeatureExtractor,
                       FusionStack)
from .plots import emit_plots
from .schedule import ScheduleTable, forward_marginal, make_linear_schedule, predict_x0

VERBS = ("gen-data", "train-depth", "train-diffusion", "train-fusion",
         "fuse", "eval", "ablate", "selftest")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ldfuse",
        description="Depth-driven, language-guided infrared/visible fusion pipeline.")
    parser.add_argument("--version", action="version", version=f"ldfuse {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="|".join(VERBS))
    for verb in VERBS:
        p = sub.add_parser(verb)
        if verb != "selftest":
            p.add_argument("--config", required=True, help="JSON run configuration")
            p.add_argument("--set", dest="overrides", action="append", default=[],
                           metavar="KEY=VALUE", help="dotted-path config override")
            p.add_argument("--out", default="ldfuse_out", help="output directory")
            p.add_argument("--seed", type=int, default=None, help="override config seed")
        if verb == "fuse":
            p.add_argument("--vis", required=True, help="visible PNG")
            p.add_argument("--ir", required=True, help="infrared PNG")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json_file(args.config)
    cfg = cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": int(args.seed)})
    return cfg


def _write_run_metadata(cfg: RunConfig, out: Path, verb: str):
    out.mkdir(parents=True, exist_ok=True)
    resolved = json.dumps(cfg.to_dict(), indent=1, sort_keys=True)
    (out / "config.resolved.json").write_text(resolved + "\n")
    manifest = {
        "version": __version__,
        "verb": verb,
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(resolved.encode()).hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _models_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.paths.models_dir) if cfg.paths.models_dir else out


def _data_root(cfg: RunConfig, out: Path) -> Path:
    if not cfg.paths.data_dir:
        raise ConfigError("config.paths.data_dir must point at a gen-data directory")
    return Path(cfg.paths.data_dir)


def _load_train_arrays(cfg, out):
    scenes = load_split(_data_root(cfg, out), "train")
    if not scenes:
        raise StateError("no training scenes found; run gen-data first")
    return prepare_scenes(scenes)


def _load_depth_nets(mdir: Path):
    return (TinyDepthNet.from_checkpoint(mdir / "depth_vis"),
            TinyDepthNet.from_checkpoint(mdir / "depth_ir"))


def _load_denoiser(cfg: RunConfig, mdir: Path) -> TinyUNet:
    net = TinyUNet.from_checkpoint(mdir / "denoiser")
    sched_path = mdir / "schedule.json"
    if sched_path.exists():
        net.table = ScheduleTable.from_json(sched_path.read_text())
    else:
        net.table = make_linear_schedule(cfg.schedule.timesteps,
                                         cfg.schedule.beta_start, cfg.schedule.beta_end)
    return net


def _load_stack(cfg: RunConfig, mdir: Path) -> FusionStack:
    from .pipeline import child_seed, _S_FEAT
    depth_nets = _load_depth_nets(mdir)
    denoiser = _load_denoiser(cfg, mdir)
    extractor = DiffusionFeatureExtractor(
        denoiser, cfg.features.timesteps, cfg.features.layer_ids,
        noise_seed=child_seed(cfg.seed, _S_FEAT))
    head = FusionHead.from_checkpoint(mdir / "fusion_head")
    mlp = None
    if (mdir / "guidance_mlp.json").exists():
        mlp = GuidanceMLP.from_checkpoint(mdir / "guidance_mlp")
    return FusionStack(extractor=extractor, head=head, mlp=mlp,
                       depth_nets=depth_nets, embed_dim=cfg.model.embed_dim,
                       use_language=cfg.ablation.use_language and mlp is not None)


# -- verbs ---------------------------------------------------------------------

def _cmd_gen_data(cfg, out):
    counts = generate_dataset(cfg, out)
    print(f"wrote {counts} scenes under {out}")
    return 0


def _cmd_train_depth(cfg, out):
    arrays = _load_train_arrays(cfg, out)
    net_vis, net_ir, log = train_depth_branches(cfg, arrays)
    net_vis.save_checkpoint(out / "depth_vis")
    net_ir.save_checkpoint(out / "depth_ir")
    (out / "trainlog_depth.jsonl").write_text(log.to_jsonl())
    emit_plots(log, out / "plots_depth")
    print(f"depth branches trained ({len(log.records)} steps) -> {out}")
    return 0


def _cmd_train_diffusion(cfg, out):
    arrays = _load_train_arrays(cfg, out)
    net, log = train_diffusion(cfg, arrays)
    net.save_checkpoint(out / "denoiser")
    (out / "schedule.json").write_text(net.table.to_json() + "\n")
    (out / "trainlog_diffusion.jsonl").write_text(log.to_jsonl())
    emit_plots(log, out / "plots_diffusion")
    print(f"denoiser trained ({len(log.records)} steps) -> {out}")
    return 0


def _cmd_train_fusion(cfg, out):
    arrays = _load_train_arrays(cfg, out)
    mdir = _models_dir(cfg, out)
    depth_nets = _load_depth_nets(mdir)
    denoiser = _load_denoiser(cfg, mdir)
    head, mlp, log = train_fusion(cfg, arrays, denoiser, depth_nets)
    head.save_checkpoint(out / "fusion_head")
    if mlp is not None:
        mlp.save_checkpoint(out / "guidance_mlp")
    (out / "trainlog_fusion.jsonl").write_text(log.to_jsonl())
    emit_plots(log, out / "plots_fusion")
    print(f"fusion head trained ({len(log.records)} steps) -> {out}")
    return 0


def _cmd_eval(cfg, out):
    scenes = load_split(_data_root(cfg, out), "eval")
    if not scenes:
        raise StateError("no eval scenes found; run gen-data first")
    stack = _load_stack(cfg, _models_dir(cfg, out))
    reports, agg = evaluate(prepare_scenes(scenes), stack)
    lines = "".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in reports)
    (out / "reports.jsonl").write_text(lines)
    (out / "aggregate.csv").write_text(reports_to_csv([("mean", agg)]))
    print(f"evaluated {len(reports)} pairs -> {out}")
    print(json.dumps(agg, sort_keys=True))
    return 0


def _cmd_ablate(cfg, out):
    train_scenes = prepare_scenes(load_split(_data_root(cfg, out), "train"))
    eval_scenes = prepare_scenes(load_split(_data_root(cfg, out), "eval"))
    rows = ablate(cfg, train_scenes, eval_scenes)
    (out / "ablation.csv").write_text(reports_to_csv(rows))
    for label, agg in rows:
        print(label, json.dumps({k: agg[k] for k in ("sf", "qabf", "mi", "sd", "vif")},
                                sort_keys=True))
    return 0


def _cmd_fuse(cfg, out, vis_path, ir_path):
    vis = load_image(vis_path)
    ir = load_image(ir_path)
    if vis.channels != 3:
        raise LdfuseError(f"--vis image must be RGB, got {vis.channels} channel(s)")
    if ir.channels != 1:
        raise LdfuseError(f"--ir image must be grayscale, got {ir.channels} channel(s)")
    vis01, ir01 = vis.to_unit(), ir.to_unit()
    concat_modalities(vis01, ir01)  # validates registration before loading models
    stack = _load_stack(cfg, _models_dir(cfg, out))
    fused = stack.fuse(vis01, ir01)
    save_image(RasterImage.from_unit(fused), out / "fused.png")
    if stack.depth_nets is not None:
        depth = stack.depth_nets[0].predict(fused)
        save_depth(depth, out / "fused_depth.pfm")
    print(f"fused image written to {out / 'fused.png'}")
    return 0


def _selftest():
    """Fast invariant suite over the core numerics."""
    rng = np.random.default_rng(7)

    table = make_linear_schedule(50, 1e-4, 0.02)
    x0 = rng.random((8, 8, 4))
    for t in (1, 25, 50):
        noise = rng.standard_normal(x0.shape)
        x_t = forward_marginal(table, x0, t, noise)
        err = np.abs(predict_x0(table, x_t, t, noise) - x0).max()
        assert err < 1e-5, f"inversion error {err} at t={t}"
    print("ok schedule exact inversion")

    gt = DepthMap(rng.uniform(1.0, 50.0, (10, 10)).astype(np.float32))
    pred = rng.uniform(1.0, 50.0, (10, 10))
    base = silog(gt, pred).value
    for c in (0.25, 3.0):
        assert abs(silog(gt, c * pred).value - base) < 1e-9
    y = DepthMap(np.array([[1.0, 1.0]], dtype=np.float32))
    val = silog(y, np.array([[1.0, 0.5]])).value
    assert abs(val - 0.120113) < 1e-6, val
    print("ok silog scale invariance and hand value")

    feats = rng.normal(size=(6, 6, 5))
    out = modulate(feats, SemanticParams(np.zeros(5), np.zeros(5)))
    assert out.tobytes() == feats.tobytes()
    print("ok identity modulation is bitwise")

    const = np.full((20, 20), 37.0)
    assert sf(const) == 0.0 and sd(const) == 0.0
    binary = np.zeros((20, 20))
    binary[:, ::2] = 255.0
    assert abs(mi(binary, binary, binary) - 2.0) < 1e-12
    tex = np.round(rng.random((20, 20)) * 255)
    assert qabf(const, tex, tex) <= 0.05
    tex33 = np.round(rng.random((33, 33)) * 255)
    assert abs(vif(tex33, tex33, tex33) - 1.0) <= 1e-6
    print("ok metric unit cases")

    emb = encode_text(Caption(("dim", "scene", "4", "meters")))
    emb2 = encode_text(Caption(("dim", "scene", "4", "meters")))
    assert np.array_equal(emb.vector, emb2.vector)
    assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-6
    print("ok text encoding determinism and norm")

    with tempfile.TemporaryDirectory() as tmp:
        scene = synth_scene(3, 16, 16, 2, 0.5, 0.25)
        save_image(scene.vis, Path(tmp) / "v.png")
        assert np.array_equal(load_image(Path(tmp) / "v.png").pixels, scene.vis.pixels)
        save_depth(scene.gt_depth, Path(tmp) / "d.pfm")
        back = load_depth(Path(tmp) / "d.pfm")
        assert np.array_equal(back.valid, scene.gt_depth.valid)
        assert np.array_equal(back.depth[back.valid],
                              scene.gt_depth.depth[scene.gt_depth.valid])
    print("ok png/pfm round-trips")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        if args.verb == "selftest":
            return _selftest()
        cfg = _load_config(args)
        out = Path(args.out)
        _write_run_metadata(cfg, out, args.verb)
        if args.verb == "gen-data":
            return _cmd_gen_data(cfg, out)
        if args.verb == "train-depth":
            return _cmd_train_depth(cfg, out)
        if args.verb == "train-diffusion":
            return _cmd_train_diffusion(cfg, out)
        if args.verb == "train-fusion":
            return _cmd_train_fusion(cfg, out)
        if args.verb == "eval":
            return _cmd_eval(cfg, out)
        if args.verb == "ablate":
            return _cmd_ablate(cfg, out)
        if args.verb == "fuse":
            return _cmd_fuse(cfg, out, args.vis, args.ir)
        raise ConfigError(f"unhandled verb {args.verb}")  # pragma: no cover
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 3
    except (LdfuseError, OSError, IndexError, AssertionError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
