"""Learnable components: noise-prediction U-Net, depth branches, fusion head.

All networks are channels-last, float64, and sized for desk-scale runs.
The U-Net doubles as the fusion feature extractor through its decoder
activations; the depth branches guarantee strictly positive output via a
softplus head; the fusion head applies channel-wise semantic modulation
between its pre-residual block and the residual connection.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import guidance
from .checkpoint import load_tensors, save_tensors
from .errors import ParameterError, ShapeError, StateError
from .schedule import ScheduleTable, forward_marginal

__all__ = [
    "Conv2d", "Linear", "sinusoidal_embedding", "TinyUNet", "TinyDepthNet",
    "FusionHead", "build_tiny_unet", "build_tiny_depthnet", "build_fusion_head",
    "extract_fusion_features", "DEPTH_FLOOR_M",
]

DEPTH_FLOOR_M = 1e-3  # softplus output floor so log-depth is always defined
DEPTH_INIT_M = 20.0   # output-bias init, mid-range of the synthetic scenes

# Fixed gain on the denoiser output path.  Noise targets at small timesteps
# have amplitude ~1/sqrt(1-abar) in the input; a constant output gain lets
# Adam (scale-invariant per parameter) reach them within a short run.
OUTPUT_GAIN = 16.0


def _rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))


class Conv2d:
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=1,
                 zero_init=False, bias_init=0.0):
        if zero_init:
            w = np.zeros((k, k, cin, cout))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout))
        self.w = ad.Tensor(w, requires_grad=True)
        self.b = ad.Tensor(np.full(cout, float(bias_init)), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def tensors(self):
        return {"w": self.w, "b": self.b}


class Linear:
    def __init__(self, rng, cin, cout, zero_init=False):
        if zero_init:
            w = np.zeros((cin, cout))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, cout))
        self.w = ad.Tensor(w, requires_grad=True)
        self.b = ad.Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def tensors(self):
        return {"w": self.w, "b": self.b}


def sinusoidal_embedding(t, dim):
    """Standard sin/cos position embedding of integer timesteps, (N, dim)."""
    if dim < 4 or dim % 2:
        raise ParameterError("time embedding dimension must be an even number >= 4")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class _ModelBase:
    """Flat named-parameter registry with checkpoint support."""

    def __init__(self):
        self._named = {}

    def _register(self, prefix, layer):
        for key, tensor in layer.tensors().items():
            self._named[f"{prefix}.{key}"] = tensor
        return layer

    def params(self):
        return [t for t in self._named.values() if t.requires_grad]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._named.items()}

    def load_state_dict(self, state):
        missing = set(self._named) - set(state)
        if missing:
            raise ParameterError(f"checkpoint missing tensors: {sorted(missing)}")
        for name, tensor in self._named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ShapeError(
                    f"checkpoint tensor {name} has shape {arr.shape}, "
                    f"expected {tensor.data.shape}")
            tensor.data = arr.copy()

    def checksum(self):
        acc = 0.0
        for name in sorted(self._named):
            acc += float(np.abs(self._named[name].data).sum())
        return acc

    def save_checkpoint(self, stem):
        save_tensors(self.state_dict(), stem, meta=self.config)

    @classmethod
    def from_checkpoint(cls, stem):
        state, meta = load_tensors(stem)
        model = cls(**meta)
        model.load_state_dict(state)
        return model


class TinyUNet(_ModelBase):
    """Noise-prediction U-Net with sinusoidal timestep conditioning.

    `depth_levels` downsamplings require H and W divisible by 2**depth_levels.
    Decoder activations are exposed for fusion feature extraction; decoder
    level 0 is the deepest (coarsest) one.
    """

    def __init__(self, base_channels=16, depth_levels=2, time_embed_dim=32,
                 in_channels=4, seed=0):
        super().__init__()
        if base_channels < 8:
            raise ParameterError("base_channels must be >= 8")
        if depth_levels < 2:
            raise ParameterError("depth_levels must be >= 2")
        self.config = {
            "base_channels": int(base_channels),
            "depth_levels": int(depth_levels),
            "time_embed_dim": int(time_embed_dim),
            "in_channels": int(in_channels),
            "seed": int(seed),
        }
        self.levels = int(depth_levels)
        self.temb_dim = int(time_embed_dim)
        rng = _rng(seed, 11)
        b = int(base_channels)
        chans = [b * 2 ** i for i in range(self.levels + 1)]
        self.channels = chans
        te = self.temb_dim
        self.t1 = self._register("time.fc1", Linear(rng, te, te))
        self.t2 = self._register("time.fc2", Linear(rng, te, te))
        self.stem = self._register("stem", Conv2d(rng, in_channels, chans[0]))
        # blocks are conditioned on time FiLM-style: h*(1+s) + b, zero-init
        self.enc, self.enc_t, self.down = [], [], []
        for i in range(self.levels):
            self.enc.append(self._register(f"enc{i}.conv", Conv2d(rng, chans[i], chans[i])))
            self.enc_t.append(self._register(
                f"enc{i}.temb", Linear(rng, te, 2 * chans[i], zero_init=True)))
            self.down.append(self._register(
                f"down{i}", Conv2d(rng, chans[i], chans[i + 1], stride=2)))
        self.mid = self._register("mid.conv", Conv2d(rng, chans[-1], chans[-1]))
        self.mid_t = self._register("mid.temb", Linear(rng, te, 2 * chans[-1], zero_init=True))
        self.up, self.dec, self.dec_t = [], [], []
        for i in reversed(range(self.levels)):
            self.up.append(self._register(f"up{i}", Conv2d(rng, chans[i + 1], chans[i])))
            self.dec.append(self._register(f"dec{i}.conv", Conv2d(rng, 2 * chans[i], chans[i])))
            self.dec_t.append(self._register(
                f"dec{i}.temb", Linear(rng, te, 2 * chans[i], zero_init=True)))
        self.out = self._register("out", Conv2d(rng, chans[0], in_channels, zero_init=True))
        # time-gated input skip: lets the net express the high-gain linear
        # dependence on x_t that noise prediction needs at small t
        self.skip_gain = self._register("skip.gain", Linear(rng, te, in_channels, zero_init=True))
        self.table: ScheduleTable = None

    def _check_spatial(self, shape):
        n, h, w, c = shape
        div = 2 ** self.levels
        if h % div or w % div:
            raise ShapeError(f"H and W must be divisible by {div}, got {h}x{w}")
        if c != self.config["in_channels"]:
            raise ShapeError(f"expected {self.config['in_channels']} channels, got {c}")

    def feature_width(self, layer_ids):
        """Total channels of the decoder activations at `layer_ids`."""
        return sum(self.channels[self.levels - 1 - int(lid)] for lid in layer_ids)

    def save_checkpoint(self, stem):
        meta = dict(self.config)
        meta["schedule"] = self.table.to_json() if self.table is not None else None
        save_tensors(self.state_dict(), stem, meta=meta)

    @classmethod
    def from_checkpoint(cls, stem):
        state, meta = load_tensors(stem)
        sched = meta.pop("schedule", None)
        model = cls(**meta)
        model.load_state_dict(state)
        if sched:
            model.table = ScheduleTable.from_json(sched)
        return model

    def forward(self, x, t, collect=False):
        """x: Tensor (N,H,W,C); t: int or (N,) ints. Returns eps (and features)."""
        x = ad.as_tensor(x)
        self._check_spatial(x.data.shape)
        n = x.data.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        emb = ad.Tensor(sinusoidal_embedding(t, self.temb_dim))
        temb = self.t2(ad.silu(self.t1(emb)))

        def inject(h, proj):
            p = proj(temb)
            c = p.data.shape[1] // 2
            scale = ad.reshape(p[:, :c], (n, 1, 1, c))
            shift = ad.reshape(p[:, c:], (n, 1, 1, c))
            return h * (1.0 + scale) + shift

        h = ad.silu(self.stem(x))
        skips = []
        for i in range(self.levels):
            h = ad.silu(inject(self.enc[i](h), self.enc_t[i]))
            skips.append(h)
            h = ad.silu(self.down[i](h))
        h = ad.silu(inject(self.mid(h), self.mid_t))
        feats = []
        for pos, i in enumerate(reversed(range(self.levels))):
            h = ad.silu(self.up[pos](ad.upsample2x(h)))
            h = ad.concat([h, skips[i]], axis=3)
            h = ad.silu(inject(self.dec[pos](h), self.dec_t[pos]))
            if collect:
                feats.append(h)
        gain = self.skip_gain(temb)
        raw = self.out(h) + ad.reshape(gain, (n, 1, 1, gain.data.shape[1])) * x
        eps = OUTPUT_GAIN * raw
        return (eps, feats) if collect else eps

    def predict(self, x_t, t):
        """Noise prediction for one HxWxC image (NumPy in, NumPy out)."""
        arr = np.asarray(x_t, dtype=np.float64)
        out = self.forward(ad.Tensor(arr[None]), int(t))
        return out.data[0]

    def features(self, x_t, t, layer_ids):
        """Decoder activations at `layer_ids` (0 = deepest), upsampled to HxW."""
        arr = np.asarray(x_t, dtype=np.float64)
        h, w = arr.shape[:2]
        _, feats = self.forward(ad.Tensor(arr[None]), int(t), collect=True)
        maps = []
        for lid in layer_ids:
            if not 0 <= lid < self.levels:
                raise ParameterError(f"layer id {lid} outside 0..{self.levels - 1}")
            fmap = feats[lid].data[0]
            factor = h // fmap.shape[0]
            if factor > 1:
                fmap = fmap.repeat(factor, axis=0).repeat(factor, axis=1)
            maps.append(fmap)
        return maps


class TinyDepthNet(_ModelBase):
    """Encoder-decoder depth estimator with strictly positive output."""

    def __init__(self, channels_in=3, base_channels=8, seed=0):
        super().__init__()
        if channels_in not in (1, 3):
            raise ParameterError("channels_in must be 1 or 3")
        self.config = {
            "channels_in": int(channels_in),
            "base_channels": int(base_channels),
            "seed": int(seed),
        }
        rng = _rng(seed, 13, channels_in)
        b = int(base_channels)
        self.e1 = self._register("e1", Conv2d(rng, channels_in, b))
        self.d1 = self._register("d1", Conv2d(rng, b, 2 * b, stride=2))
        self.mid = self._register("mid", Conv2d(rng, 2 * b, 2 * b))
        self.u1 = self._register("u1", Conv2d(rng, 2 * b, b))
        self.fuse = self._register("fuse", Conv2d(rng, 2 * b, b))
        self.out = self._register("out", Conv2d(rng, b, 1, bias_init=DEPTH_INIT_M))
        # scale gauge fixed after training (SiLog leaves it free); not trained
        self._named["calibration.log_scale"] = ad.Tensor(np.zeros(1))

    @property
    def channels_in(self):
        return self.config["channels_in"]

    def set_log_scale(self, value):
        self._named["calibration.log_scale"].data = np.array([float(value)])

    def forward(self, x):
        """x: Tensor (N,H,W,C) with H,W even; returns depth Tensor (N,H,W,1)."""
        x = ad.as_tensor(x)
        n, h, w, c = x.data.shape
        if c != self.channels_in:
            raise ShapeError(f"expected {self.channels_in}-channel input, got {c}")
        if h % 2 or w % 2:
            raise ShapeError(f"H and W must be even, got {h}x{w}")
        e1 = ad.silu(self.e1(x))
        h1 = ad.silu(self.d1(e1))
        m = ad.silu(self.mid(h1))
        u = ad.silu(self.u1(ad.upsample2x(m)))
        f = ad.silu(self.fuse(ad.concat([u, e1], axis=3)))
        raw = self.out(f)
        depth = ad.softplus(raw) + DEPTH_FLOOR_M
        scale = float(np.exp(self._named["calibration.log_scale"].data[0]))
        if scale != 1.0:
            depth = depth * scale
        return depth

    def predict(self, image):
        """Depth map for one HxWxC (or HxW) image."""
        from .imageio import DepthMap  # local import to avoid cycles at import time
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        out = self.forward(ad.Tensor(arr[None]))
        depth = out.data[0, :, :, 0].astype(np.float32)
        return DepthMap(depth=depth, valid=np.ones(depth.shape, dtype=bool))


class FusionHead(_ModelBase):
    """Convolutional reconstruction head with a modulated residual block."""

    def __init__(self, in_channels, width=32, seed=0):
        super().__init__()
        if in_channels < 1:
            raise ParameterError("in_channels must be >= 1")
        self.config = {
            "in_channels": int(in_channels),
            "width": int(width),
            "seed": int(seed),
        }
        rng = _rng(seed, 17)
        w = int(width)
        self.stem = self._register("stem", Conv2d(rng, in_channels, w))
        self.b1 = self._register("block.c1", Conv2d(rng, w, w))
        self.b2 = self._register("block.c2", Conv2d(rng, w, w))
        self.out = self._register("out", Conv2d(rng, w, 3))

    @property
    def width(self):
        return self.config["width"]

    def forward(self, features, params=None):
        """features: Tensor (N,H,W,Cin); params modulate the pre-residual block."""
        f = ad.as_tensor(features)
        if f.data.shape[-1] != self.config["in_channels"]:
            raise ShapeError(
                f"head expects {self.config['in_channels']} feature channels, "
                f"got {f.data.shape[-1]}")
        s = ad.silu(self.stem(f))
        h = self.b2(ad.silu(self.b1(s)))
        if params is not None:
            h = guidance.modulate(h, params)
        return ad.sigmoid(self.out(ad.silu(s + h)))

    def reconstruct(self, features, params=None):
        """Fused HxWx3 image in [0,1] from HxWxC features (NumPy in/out)."""
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"features must be HxWxC, got {arr.shape}")
        out = self.forward(ad.Tensor(arr[None]), params)
        return out.data[0]


def build_tiny_unet(config=None, **kwargs) -> TinyUNet:
    """Construct the denoiser from a config mapping or keyword arguments."""
    cfg = dict(config or {})
    cfg.update(kwargs)
    return TinyUNet(**cfg)


def build_tiny_depthnet(channels_in, base_channels=8, seed=0) -> TinyDepthNet:
    return TinyDepthNet(channels_in=channels_in, base_channels=base_channels, seed=seed)


def build_fusion_head(in_channels, width=32, seed=0) -> FusionHead:
    return FusionHead(in_channels=in_channels, width=width, seed=seed)


def extract_fusion_features(denoiser: TinyUNet, x0, timesteps, layer_ids,
                            noise_seed) -> np.ndarray:
    """Concatenated decoder activations over noised versions of x0.

    For each timestep (in list order: channel order is timestep-major) the
    clean image is pushed to that noise level with a seeded Gaussian draw,
    decoder activations at `layer_ids` are collected, upsampled to HxW, and
    concatenated along channels.  Deterministic given `noise_seed`.
    """
    if timesteps is None or len(timesteps) == 0:
        raise ParameterError("timesteps must be a non-empty list")
    if layer_ids is None or len(layer_ids) == 0:
        raise ParameterError("layer_ids must be a non-empty list")
    if denoiser.table is None:
        raise StateError("denoiser has no schedule table attached (untrained?)")
    x0 = np.asarray(x0, dtype=np.float64)
    maps = []
    for t in timesteps:
        rng = _rng(noise_seed, int(t))
        noise = rng.standard_normal(x0.shape)
        x_t = forward_marginal(denoiser.table, x0, int(t), noise)
        maps.extend(denoiser.features(x_t, int(t), layer_ids))
    return np.concatenate(maps, axis=2)
