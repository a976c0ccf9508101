"""Training stages, evaluation runner, and the ablation harness.

Three stages run in order, each freezing its predecessors: the two depth
branches (supervised, scale-invariant log loss), the multi-channel denoiser
(self-supervised noise prediction), and the guided fusion head (+ semantic
MLP).  Everything is deterministic given the run seed: every random draw
comes from a named child stream of the seed.
"""
from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ParameterError, StateError
from .guidance import (GuidanceMLP, SemanticParams, ZeroGuidance, caption_scene,
                       encode_text)
from .imageio import DepthMap, ScenePair, concat_modalities, save_scene, synth_scene
from .losses import LossValue, l_diff, silog, total_fusion_loss
from .metrics import aggregate_reports, depth_rmse, fusion_metrics
from .models import FusionHead, TinyDepthNet, TinyUNet
from .schedule import forward_marginal, make_linear_schedule

__all__ = [
    "RunConfig", "TrainLog", "SceneArrays", "prepare_scenes", "generate_dataset",
    "DiffusionFeatureExtractor", "AutoencoderFeatureExtractor", "FusionStack",
    "train_depth_branches", "train_diffusion", "train_autoencoder",
    "train_fusion", "evaluate", "ablate", "run_pipeline", "ABLATION_ROWS",
]

# child-stream codes for seed derivation
_S_DATA, _S_T, _S_NOISE, _S_FEAT = 1, 2, 3, 4
_S_DEPTH_VIS, _S_DEPTH_IR, _S_UNET, _S_HEAD, _S_MLP, _S_AE = 5, 6, 7, 8, 9, 10
_S_SCENE = 11


def child_seed(seed, *key):
    """Deterministic derived integer seed."""
    return int(np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(1)[0])


def _rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [int(seed), *map(int, key)])))


# -- configuration -------------------------------------------------------------

@dataclass
class DataConfig:
    image_size: int = 32
    n_train: int = 48
    n_eval: int = 32
    n_objects: int = 10
    p_ir_only: float = 0.3
    p_vis_only: float = 0.3


@dataclass
class ScheduleConfig:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelConfig:
    unet_base_channels: int = 16
    unet_depth_levels: int = 2
    time_embed_dim: int = 32
    depth_base_channels: int = 12
    head_width: int = 32
    embed_dim: int = 64


@dataclass
class OptimConfig:
    lr: float = 1e-3
    depth_lr: float = 2e-3  # the SiLog stage converges measurably better here
    lr_final_mult: float = 0.02  # cosine decay to lr * this by the last step
    adam_beta2: float = 0.99
    depth_steps: int = 1500
    diffusion_steps: int = 1000
    fusion_steps: int = 800
    batch_size: int = 8
    lambda_depth: float = 1.0


def _cosine_lr(base_lr, final_mult, step, total):
    """Cosine decay from base_lr to base_lr * final_mult over `total` steps."""
    lo = base_lr * final_mult
    return lo + (base_lr - lo) * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / max(total - 1, 1)))


@dataclass
class FeatureConfig:
    timesteps: tuple = (5, 50)
    layer_ids: tuple = (0, 1)


@dataclass
class AblationConfig:
    use_diffusion: bool = True
    use_depth_loss: bool = True
    use_language: bool = True


@dataclass
class PathsConfig:
    data_dir: str = ""
    models_dir: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, value in d.items():
            if name not in fields:
                raise ConfigError(f"unknown config section {name!r}")
            if name == "seed":
                kwargs["seed"] = int(value)
                continue
            section_cls = fields[name].default_factory
            known = {f.name: f for f in dataclasses.fields(section_cls)}
            extra = set(value) - set(known)
            if extra:
                raise ConfigError(f"unknown key(s) in config.{name}: {sorted(extra)}")
            coerced = {
                k: tuple(v) if isinstance(known[k].default, tuple) else v
                for k, v in value.items()
            }
            kwargs[name] = section_cls(**coerced)
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def apply_overrides(self, overrides):
        """Dotted-path key=value overrides, e.g. optim.lr=0.0005."""
        d = self.to_dict()
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            path, _, raw = item.partition("=")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = path.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config path {path!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config path {path!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


@dataclass
class TrainLog:
    """Per-step loss records; steps strictly increase."""

    records: list = field(default_factory=list)

    def append(self, step, loss: LossValue, **extra):
        if self.records and step <= self.records[-1]["step"]:
            raise ParameterError("train log steps must strictly increase")
        rec = loss.to_record(step)
        rec.update(extra)
        self.records.append(rec)

    def component_names(self):
        names = []
        for rec in self.records:
            for key in rec["components"]:
                if key not in names:
                    names.append(key)
        return names

    def to_jsonl(self):
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records)

    def totals(self):
        return [rec["total"] for rec in self.records]


# -- scene plumbing --------------------------------------------------------------

@dataclass
class SceneArrays:
    """Float views of one scene, precomputed once per run."""

    vis01: np.ndarray  # H,W,3
    ir01: np.ndarray   # H,W,1
    gt: DepthMap
    x0: np.ndarray     # H,W,4


def prepare_scenes(scenes) -> list:
    out = []
    for s in scenes:
        vis01 = s.vis.to_unit()
        ir01 = s.ir.to_unit()
        out.append(SceneArrays(vis01, ir01, s.gt_depth, concat_modalities(vis01, ir01)))
    return out


def make_scenes(config: RunConfig, split_code, count) -> list:
    d = config.data
    return [
        synth_scene(child_seed(config.seed, _S_SCENE, split_code, i),
                    d.image_size, d.image_size, d.n_objects, d.p_ir_only, d.p_vis_only)
        for i in range(count)
    ]


def generate_dataset(config: RunConfig, root) -> dict:
    """Write train/eval splits under `root`; returns counts per split."""
    counts = {"train": config.data.n_train, "eval": config.data.n_eval}
    for code, (split, n) in enumerate(counts.items()):
        for i, scene in enumerate(make_scenes(config, code, n)):
            save_scene(scene, root, split, f"{i:04d}")
    return counts


# -- feature extractors -----------------------------------------------------------

class DiffusionFeatureExtractor:
    """Fusion features from decoder activations of the trained denoiser."""

    def __init__(self, denoiser: TinyUNet, timesteps, layer_ids, noise_seed):
        if denoiser.table is None:
            raise StateError("denoiser must carry its schedule table")
        self.denoiser = denoiser
        self.timesteps = list(timesteps)
        self.layer_ids = list(layer_ids)
        self.noise_seed = int(noise_seed)
        self.width = len(self.timesteps) * denoiser.feature_width(self.layer_ids)

    def __call__(self, x0):
        from .models import extract_fusion_features
        return extract_fusion_features(self.denoiser, x0, self.timesteps,
                                       self.layer_ids, self.noise_seed)


class AutoencoderFeatureExtractor:
    """Fusion features from a plain reconstruction autoencoder (no noising)."""

    def __init__(self, net: TinyUNet, layer_ids):
        self.net = net
        self.layer_ids = list(layer_ids)
        self.width = net.feature_width(self.layer_ids)

    def __call__(self, x0):
        maps = self.net.features(np.asarray(x0, dtype=np.float64), 0, self.layer_ids)
        return np.concatenate(maps, axis=2)


# -- stage 1: depth branches -------------------------------------------------------

def _batched_silog(pred_batch, gts):
    """Mean SiLog of a batched prediction tensor against per-sample gt maps."""
    total = None
    for i, gt in enumerate(gts):
        hw = gt.shape
        term = silog(gt, ad.reshape(pred_batch[i], hw)).tensor
        total = term if total is None else total + term
    return total * (1.0 / len(gts))


def _dataset_silog(net, arrays, pick):
    vals = []
    for a in arrays:
        pred = net.predict(pick(a))
        vals.append(silog(a.gt, pred).value)
    return float(np.mean(vals))


def _calibrate(net, arrays, pick):
    """Fix the scale gauge SiLog leaves free: one scalar log offset."""
    num, den = 0.0, 0
    for a in arrays:
        pred = net.predict(pick(a))
        m = a.gt.valid
        num += float(np.sum(np.log(a.gt.depth[m].astype(np.float64))
                            - np.log(pred.depth[m].astype(np.float64))))
        den += int(m.sum())
    net.set_log_scale(num / den)


def train_depth_branches(config: RunConfig, dataset):
    """Supervised depth training for both modalities; returns frozen estimators."""
    if not dataset:
        raise ParameterError("dataset must be non-empty")
    arrays = dataset if isinstance(dataset[0], SceneArrays) else prepare_scenes(dataset)
    m, o = config.model, config.optim
    net_vis = TinyDepthNet(3, m.depth_base_channels, seed=child_seed(config.seed, _S_DEPTH_VIS))
    net_ir = TinyDepthNet(1, m.depth_base_channels, seed=child_seed(config.seed, _S_DEPTH_IR))
    opt_vis = ad.Adam(net_vis.params(), lr=o.depth_lr, beta2=o.adam_beta2)
    opt_ir = ad.Adam(net_ir.params(), lr=o.depth_lr, beta2=o.adam_beta2)
    data_rng = _rng(config.seed, _S_DATA, 1)
    log = TrainLog()
    n = len(arrays)
    bs = min(o.batch_size, n)
    for step in range(1, o.depth_steps + 1):
        opt_vis.lr = opt_ir.lr = _cosine_lr(o.depth_lr, o.lr_final_mult, step, o.depth_steps)
        idx = data_rng.integers(0, n, size=bs)
        batch = [arrays[i] for i in idx]
        gts = [a.gt for a in batch]
        vis_in = ad.Tensor(np.stack([a.vis01 for a in batch]))
        ir_in = ad.Tensor(np.stack([a.ir01 for a in batch]))
        loss_vis = _batched_silog(net_vis.forward(vis_in), gts)
        loss_ir = _batched_silog(net_ir.forward(ir_in), gts)
        opt_vis.zero_grad()
        opt_ir.zero_grad()
        loss_vis.backward()
        loss_ir.backward()
        opt_vis.step()
        opt_ir.step()
        lv, li = float(loss_vis.data), float(loss_ir.data)
        log.append(step, LossValue(lv + li, {"silog_vis": lv, "silog_ir": li}))
    _calibrate(net_vis, arrays, lambda a: a.vis01)
    _calibrate(net_ir, arrays, lambda a: a.ir01)
    return net_vis, net_ir, log


# -- stage 2: denoiser --------------------------------------------------------------

def _build_unet(config: RunConfig, seed_code):
    m = config.model
    return TinyUNet(
        base_channels=m.unet_base_channels,
        depth_levels=m.unet_depth_levels,
        time_embed_dim=m.time_embed_dim,
        seed=child_seed(config.seed, seed_code),
    )


def train_diffusion(config: RunConfig, dataset):
    """Self-supervised noise-prediction training on the 4-channel images."""
    if not dataset:
        raise ParameterError("dataset must be non-empty")
    arrays = dataset if isinstance(dataset[0], SceneArrays) else prepare_scenes(dataset)
    o = config.optim
    table = make_linear_schedule(config.schedule.timesteps,
                                 config.schedule.beta_start, config.schedule.beta_end)
    net = _build_unet(config, _S_UNET)
    net.table = table
    opt = ad.Adam(net.params(), lr=o.lr, beta2=o.adam_beta2)
    data_rng = _rng(config.seed, _S_DATA, 2)
    t_rng = _rng(config.seed, _S_T)
    noise_rng = _rng(config.seed, _S_NOISE)
    log = TrainLog()
    n = len(arrays)
    bs = o.batch_size  # scenes drawn with replacement; each draw gets fresh (t, noise)
    for step in range(1, o.diffusion_steps + 1):
        opt.lr = _cosine_lr(o.lr, o.lr_final_mult, step, o.diffusion_steps)
        idx = data_rng.integers(0, n, size=bs)
        ts = t_rng.integers(1, table.T + 1, size=bs)
        x0 = np.stack([arrays[i].x0 for i in idx])
        noise = noise_rng.standard_normal(x0.shape)
        x_t = np.stack([forward_marginal(table, x0[i], int(ts[i]), noise[i])
                        for i in range(bs)])
        eps_hat = net.forward(ad.Tensor(x_t), ts)
        loss = l_diff(eps_hat, noise)
        opt.zero_grad()
        loss.tensor.backward()
        opt.step()
        log.append(step, loss, t=[int(t) for t in ts])
    return net, log


def train_autoencoder(config: RunConfig, dataset):
    """Plain reconstruction training of the same architecture (ablation baseline)."""
    if not dataset:
        raise ParameterError("dataset must be non-empty")
    arrays = dataset if isinstance(dataset[0], SceneArrays) else prepare_scenes(dataset)
    o = config.optim
    net = _build_unet(config, _S_AE)
    opt = ad.Adam(net.params(), lr=o.lr, beta2=o.adam_beta2)
    data_rng = _rng(config.seed, _S_DATA, 3)
    log = TrainLog()
    n = len(arrays)
    bs = min(o.batch_size, n)
    for step in range(1, o.diffusion_steps + 1):
        opt.lr = _cosine_lr(o.lr, o.lr_final_mult, step, o.diffusion_steps)
        idx = data_rng.integers(0, n, size=bs)
        x0 = np.stack([arrays[i].x0 for i in idx])
        recon = net.forward(ad.Tensor(x0), np.zeros(bs, dtype=np.int64))
        loss = l_diff(recon, x0)
        loss.components = {"l_recon": loss.value}
        opt.zero_grad()
        loss.tensor.backward()
        opt.step()
        log.append(step, loss)
    return net, log


# -- stage 3: guided fusion -----------------------------------------------------------

def _make_extractor(config: RunConfig, backbone):
    if isinstance(backbone, (DiffusionFeatureExtractor, AutoencoderFeatureExtractor)):
        return backbone
    if not isinstance(backbone, TinyUNet):
        raise StateError("need a trained denoiser or a feature extractor")
    return DiffusionFeatureExtractor(
        backbone, config.features.timesteps, config.features.layer_ids,
        noise_seed=child_seed(config.seed, _S_FEAT))


def _scene_embedding(a: SceneArrays, depth_nets, embed_dim):
    est_vis, est_ir = depth_nets
    cap = caption_scene(a.vis01, a.ir01, est_vis.predict(a.vis01), est_ir.predict(a.ir01))
    return encode_text(cap, dim=embed_dim)


def train_fusion(config: RunConfig, dataset, denoiser, depth_nets, guidance_mlp=None):
    """Train the fusion head (and semantic MLP) against frozen predecessors."""
    if denoiser is None:
        raise StateError("train_fusion requires a trained denoiser (or extractor)")
    if depth_nets is None or any(d is None for d in depth_nets):
        raise StateError("train_fusion requires the two frozen depth branches")
    if not dataset:
        raise ParameterError("dataset must be non-empty")
    arrays = dataset if isinstance(dataset[0], SceneArrays) else prepare_scenes(dataset)
    m, o, ab = config.model, config.optim, config.ablation
    extractor = _make_extractor(config, denoiser)
    head = FusionHead(extractor.width, m.head_width, seed=child_seed(config.seed, _S_HEAD))
    use_language = ab.use_language or guidance_mlp is not None
    if guidance_mlp is not None:
        mlp = guidance_mlp
    elif ab.use_language:
        mlp = GuidanceMLP(m.embed_dim, channels=m.head_width,
                          seed=child_seed(config.seed, _S_MLP))
    else:
        mlp = None
    lam = o.lambda_depth if ab.use_depth_loss else 0.0

    feats_cache, emb_cache = {}, {}
    trainable = head.params() + (mlp.params() if use_language and mlp is not None else [])
    opt = ad.Adam(trainable, lr=o.lr, beta2=o.adam_beta2)
    data_rng = _rng(config.seed, _S_DATA, 4)
    log = TrainLog()
    n = len(arrays)
    for step in range(1, o.fusion_steps + 1):
        opt.lr = _cosine_lr(o.lr, o.lr_final_mult, step, o.fusion_steps)
        i = int(data_rng.integers(0, n))
        a = arrays[i]
        if i not in feats_cache:
            feats_cache[i] = extractor(a.x0)
        feats = ad.Tensor(feats_cache[i][None])
        params = None
        if use_language and mlp is not None:
            if i not in emb_cache:
                emb_cache[i] = _scene_embedding(a, depth_nets, m.embed_dim)
            sig, mu = mlp.forward(ad.Tensor(emb_cache[i].vector[None]))
            params = SemanticParams(sig, mu)
        fused = head.forward(feats, params)
        fused_img = ad.reshape(fused, fused.data.shape[1:])
        loss = total_fusion_loss(fused_img, a.ir01, a.vis01, a.gt, depth_nets, lam)
        opt.zero_grad()
        loss.tensor.backward()
        opt.step()
        log.append(step, loss)
    return head, mlp, log


# -- inference / evaluation --------------------------------------------------------------

@dataclass
class FusionStack:
    """Everything needed to fuse one registered pair."""

    extractor: object
    head: FusionHead
    mlp: object = None
    depth_nets: tuple = None
    embed_dim: int = 64
    use_language: bool = True

    def fuse(self, vis01, ir01) -> np.ndarray:
        x0 = concat_modalities(vis01, ir01)
        feats = self.extractor(x0)
        params = None
        if self.use_language and self.mlp is not None:
            if self.depth_nets is None:
                raise StateError("language guidance needs the depth branches for captions")
            est_vis, est_ir = self.depth_nets
            cap = caption_scene(np.asarray(vis01, dtype=np.float64),
                                np.asarray(ir01, dtype=np.float64),
                                est_vis.predict(vis01), est_ir.predict(ir01))
            params = self.mlp.predict(encode_text(cap, dim=self.embed_dim))
        return self.head.reconstruct(feats, params)


def _eval_workers():
    try:
        return max(1, int(os.environ.get("LDFUSE_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(dataset, stack: FusionStack, depth_nets=None):
    """Fuse and score every pair; returns (reports, aggregate means)."""
    arrays = dataset if (dataset and isinstance(dataset[0], SceneArrays)) \
        else prepare_scenes(dataset)
    depth_nets = depth_nets or stack.depth_nets

    def one(item):
        i, a = item
        fused = stack.fuse(a.vis01, a.ir01)
        rep = fusion_metrics(fused, a.ir01, a.vis01, pair_id=f"{i:04d}")
        if depth_nets is not None:
            est_vis, est_ir = depth_nets
            rep.depth_rmse_fused = depth_rmse(a.gt, est_vis.predict(fused))
            rep.depth_rmse_vis = depth_rmse(a.gt, est_vis.predict(a.vis01))
            rep.depth_rmse_ir = depth_rmse(a.gt, est_ir.predict(a.ir01))
        return rep

    items = list(enumerate(arrays))
    workers = _eval_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, items))
    else:
        reports = [one(it) for it in items]
    return reports, aggregate_reports(reports)


# -- end-to-end + ablation -------------------------------------------------------------------

def run_pipeline(config: RunConfig, train_scenes, denoiser=None, depth_nets=None,
                 guidance_mlp=None):
    """All three stages on `train_scenes`; returns a dict of parts and logs."""
    arrays = prepare_scenes(train_scenes) if train_scenes and \
        isinstance(train_scenes[0], ScenePair) else train_scenes
    logs = {}
    if depth_nets is None:
        net_vis, net_ir, logs["depth"] = train_depth_branches(config, arrays)
        depth_nets = (net_vis, net_ir)
    if denoiser is None:
        if config.ablation.use_diffusion:
            denoiser, logs["diffusion"] = train_diffusion(config, arrays)
        else:
            denoiser, logs["diffusion"] = train_autoencoder(config, arrays)
    if isinstance(denoiser, (DiffusionFeatureExtractor, AutoencoderFeatureExtractor)):
        extractor = denoiser
    elif config.ablation.use_diffusion:
        extractor = _make_extractor(config, denoiser)
    else:
        extractor = AutoencoderFeatureExtractor(denoiser, config.features.layer_ids)
    head, mlp, logs["fusion"] = train_fusion(
        config, arrays, extractor, depth_nets, guidance_mlp=guidance_mlp)
    stack = FusionStack(
        extractor=extractor, head=head, mlp=mlp, depth_nets=depth_nets,
        embed_dim=config.model.embed_dim,
        use_language=config.ablation.use_language or guidance_mlp is not None)
    return {"stack": stack, "depth_nets": depth_nets, "backbone": denoiser,
            "logs": logs}


ABLATION_ROWS = (
    ("base", dict(use_diffusion=False, use_depth_loss=False, use_language=False)),
    ("diff", dict(use_diffusion=True, use_depth_loss=False, use_language=False)),
    ("diff+dep", dict(use_diffusion=True, use_depth_loss=True, use_language=False)),
    ("diff+dep+lan", dict(use_diffusion=True, use_depth_loss=True, use_language=True)),
)


def ablate(config: RunConfig, train_scenes, eval_scenes):
    """Train/evaluate the four ablation rows; shared stages are trained once."""
    train_arrays = prepare_scenes(train_scenes) if train_scenes and \
        isinstance(train_scenes[0], ScenePair) else train_scenes
    eval_arrays = prepare_scenes(eval_scenes) if eval_scenes and \
        isinstance(eval_scenes[0], ScenePair) else eval_scenes
    net_vis, net_ir, _ = train_depth_branches(config, train_arrays)
    depth_nets = (net_vis, net_ir)
    denoiser, _ = train_diffusion(config, train_arrays)
    auto, _ = train_autoencoder(config, train_arrays)
    rows = []
    for label, flags in ABLATION_ROWS:
        cfg = RunConfig.from_dict({**config.to_dict(), "ablation": flags})
        backbone = _make_extractor(cfg, denoiser) if flags["use_diffusion"] \
            else AutoencoderFeatureExtractor(auto, cfg.features.layer_ids)
        head, mlp, _ = train_fusion(cfg, train_arrays, backbone, depth_nets)
        stack = FusionStack(extractor=backbone, head=head, mlp=mlp,
                            depth_nets=depth_nets, embed_dim=cfg.model.embed_dim,
                            use_language=flags["use_language"])
        _, agg = evaluate(eval_arrays, stack, depth_nets)
        rows.append((label, agg))
    return rows
