"""Image and depth serialization, color conversion, and synthetic scenes.

Images travel as 8-bit PNG on disk and as float arrays in [0, 1] in memory;
depth maps travel as single-channel little-endian PFM.  The synthetic scene
generator produces registered visible/infrared pairs with ground-truth depth
in which some objects are visible in only one modality, so the two inputs
carry genuinely complementary depth information.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ParameterError, ShapeError, SizeError

# BT.601 luminance weights for 8-bit material.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Scene-generator constants, recorded in ScenePair.meta.
NEAR_PLANE_M = 1.0
FAR_PLANE_M = 80.0
BG_DEPTH_BOTTOM_M = 15.0
BG_DEPTH_TOP_M = 75.0
SHADE_MIN = 0.08
SHADE_MAX = 0.92
NOISE_SIGMA = 3.0 / 255.0
HIDDEN_CONTRAST = 2.0 / 255.0  # attenuation cap for modality-invisible objects
VIS_CHANNEL_GAINS = (0.99, 1.0, 1.01)
DEPTH_DROPOUT = 0.02  # fraction of gt pixels marked invalid (LiDAR-style holes)


@dataclass
class RasterImage:
    """8-bit image with 1 (infrared/gray) or 3 (visible RGB) channels."""

    pixels: np.ndarray  # uint8, H x W x C

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.dtype != np.uint8:
            raise FormatError(f"RasterImage requires uint8 samples, got {p.dtype}")
        if p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ShapeError(f"RasterImage requires HxWx{{1,3}}, got {p.shape}")
        if p.shape[0] < 2 or p.shape[1] < 2:
            raise SizeError(f"RasterImage requires H,W >= 2, got {p.shape[:2]}")
        self.pixels = p

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def to_unit(self) -> np.ndarray:
        """Float64 copy scaled to [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_unit(cls, values) -> "RasterImage":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        return cls(np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8))


@dataclass
class DepthMap:
    """Per-pixel depth in meters with a validity mask."""

    depth: np.ndarray  # float32, H x W
    valid: np.ndarray = None  # bool, H x W

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        if d.ndim != 2:
            raise ShapeError(f"DepthMap requires an HxW array, got {d.shape}")
        if self.valid is None:
            self.valid = np.isfinite(d) & (d > 0.0)
        v = np.asarray(self.valid, dtype=bool)
        if v.shape != d.shape:
            raise ShapeError("depth and valid_mask shapes differ")
        if not np.all(np.isfinite(d[v])) or np.any(d[v] <= 0.0):
            raise ParameterError("valid depth samples must be finite and > 0")
        self.depth = d
        self.valid = v

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class SceneObject:
    """One rendered ellipse of the synthetic scene."""

    center: tuple  # (row, col), pixels
    radius: tuple  # (ry, rx), pixels
    depth_m: float
    visible_in_vis: bool
    visible_in_ir: bool

    def to_dict(self):
        return {
            "center": [float(self.center[0]), float(self.center[1])],
            "radius": [float(self.radius[0]), float(self.radius[1])],
            "depth_m": float(self.depth_m),
            "visible_in_vis": bool(self.visible_in_vis),
            "visible_in_ir": bool(self.visible_in_ir),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), tuple(d["radius"]), d["depth_m"],
                   d["visible_in_vis"], d["visible_in_ir"])


@dataclass
class ScenePair:
    """Registered visible/infrared pair with ground-truth depth."""

    vis: RasterImage
    ir: RasterImage
    gt_depth: DepthMap
    objects: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vis.channels != 3 or self.ir.channels != 1:
            raise ShapeError("ScenePair requires 3-channel vis and 1-channel ir")
        shapes = {(self.vis.height, self.vis.width),
                  (self.ir.height, self.ir.width), self.gt_depth.shape}
        if len(shapes) != 1:
            raise ShapeError(f"ScenePair spatial dims differ: {shapes}")


# -- PNG ------------------------------------------------------------------

def save_image(img: RasterImage, path) -> None:
    """Write an 8-bit grayscale or RGB PNG."""
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> RasterImage:
    """Read an 8-bit grayscale or RGB PNG; anything else is a format error."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise FormatError(f"{path}: expected PNG, got {im.format}")
            if im.mode not in ("L", "RGB"):
                raise FormatError(
                    f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    return RasterImage(arr)


# -- PFM ------------------------------------------------------------------

def save_depth(depth: DepthMap, path) -> None:
    """Write a single-channel little-endian PFM; invalid pixels become 0."""
    data = np.where(depth.valid, depth.depth, np.float32(0.0)).astype("<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data[::-1].tobytes())  # PFM stores rows bottom-to-top


def load_depth(path) -> DepthMap:
    """Read a PFM depth map; non-positive samples load with valid_mask False."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            raise FormatError(f"{path}: 3-channel PFM not supported (need 'Pf')")
        if magic != b"Pf":
            raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimension line")
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        if w <= 0 or h <= 0 or scale == 0.0:
            raise FormatError(f"{path}: malformed PFM header values")
        count = w * h
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=endian).reshape(h, w)[::-1].astype(np.float32)
    valid = np.isfinite(data) & (data > 0.0)
    return DepthMap(depth=data, valid=valid)


# -- color / modality ------------------------------------------------------

def luminance(rgb) -> np.ndarray:
    """BT.601 luminance of an HxWx3 unit tensor, returned as HxWx1."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"luminance expects HxWx3, got {arr.shape}")
    return arr @ LUMA_WEIGHTS[:, None]


def concat_modalities(vis, ir) -> np.ndarray:
    """Stack visible RGB and infrared into the HxWx4 working image."""
    v = np.asarray(vis, dtype=np.float64)
    i = np.asarray(ir, dtype=np.float64)
    if i.ndim == 2:
        i = i[:, :, None]
    if v.ndim != 3 or v.shape[2] != 3:
        raise ShapeError(f"vis must be HxWx3, got {v.shape}")
    if i.ndim != 3 or i.shape[2] != 1:
        raise ShapeError(f"ir must be HxWx1, got {i.shape}")
    if v.shape[:2] != i.shape[:2]:
        raise ShapeError(f"spatial dims differ: vis {v.shape[:2]} vs ir {i.shape[:2]}")
    return np.concatenate([v, i], axis=2)


# -- synthetic scenes -------------------------------------------------------

def depth_to_shade(depth_m) -> np.ndarray:
    """Monotone shading: near objects render bright, far ones dark."""
    frac = (FAR_PLANE_M - np.asarray(depth_m, dtype=np.float64)) / (FAR_PLANE_M - NEAR_PLANE_M)
    return SHADE_MIN + (SHADE_MAX - SHADE_MIN) * frac


def background_depth(H, W) -> np.ndarray:
    """Smooth vertical depth ramp: far at the top row, near at the bottom."""
    rows = np.linspace(BG_DEPTH_TOP_M, BG_DEPTH_BOTTOM_M, H)
    return np.repeat(rows[:, None], W, axis=1)


def _ellipse_mask(H, W, center, radius):
    yy, xx = np.mgrid[0:H, 0:W]
    return ((yy - center[0]) / radius[0]) ** 2 + ((xx - center[1]) / radius[1]) ** 2 <= 1.0


def render_depth(H, W, objects) -> np.ndarray:
    """Z-buffer depth render of background ramp plus all objects."""
    depth = background_depth(H, W)
    for obj in objects:
        mask = _ellipse_mask(H, W, obj.center, obj.radius)
        depth[mask] = np.minimum(depth[mask], obj.depth_m)
    return depth


def synth_scene(seed, H, W, n_objects, p_ir_only, p_vis_only) -> ScenePair:
    """Generate one registered scene pair, deterministic given the seed.

    Each object is an ellipse placed in front of the background ramp.  With
    probability p_ir_only it is attenuated below the noise floor in the
    visible image (low-light analog), with probability p_vis_only in the
    infrared image; ground-truth depth always reflects every object.
    """
    if H < 16 or W < 16:
        raise SizeError(f"scene size must be at least 16x16, got {H}x{W}")
    if n_objects < 1:
        raise ParameterError("n_objects must be >= 1")
    if not (0.0 <= p_ir_only <= 1.0 and 0.0 <= p_vis_only <= 1.0):
        raise ParameterError("probabilities must lie in [0, 1]")
    if p_ir_only + p_vis_only > 1.0:
        raise ParameterError("p_ir_only + p_vis_only must not exceed 1")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    objects = []
    r_lo, r_hi = 0.08 * min(H, W), 0.20 * min(H, W)
    for _ in range(n_objects):
        cy = rng.uniform(0.12 * H, 0.88 * H)
        cx = rng.uniform(0.12 * W, 0.88 * W)
        ry = rng.uniform(r_lo, r_hi)
        rx = rng.uniform(r_lo, r_hi)
        bg_here = float(np.interp(cy, [0, H - 1], [BG_DEPTH_TOP_M, BG_DEPTH_BOTTOM_M]))
        depth_m = rng.uniform(NEAR_PLANE_M + 1.0, 0.8 * bg_here)
        u = rng.random()
        vis_ok, ir_ok = True, True
        if u < p_ir_only:
            vis_ok = False
        elif u < p_ir_only + p_vis_only:
            ir_ok = False
        objects.append(SceneObject((cy, cx), (ry, rx), depth_m, vis_ok, ir_ok))

    gt = render_depth(H, W, objects)

    # Paint far-to-near so nearer objects overwrite; modality-invisible
    # objects are painted at <= HIDDEN_CONTRAST over the current canvas.
    vis_gray = depth_to_shade(background_depth(H, W))
    ir_gray = vis_gray.copy()
    for obj in sorted(objects, key=lambda o: -o.depth_m):
        mask = _ellipse_mask(H, W, obj.center, obj.radius)
        shade = depth_to_shade(obj.depth_m)
        for canvas, visible in ((vis_gray, obj.visible_in_vis), (ir_gray, obj.visible_in_ir)):
            if visible:
                canvas[mask] = shade
            else:
                contrast = shade - canvas[mask]
                canvas[mask] += np.clip(contrast, -HIDDEN_CONTRAST, HIDDEN_CONTRAST)

    vis_rgb = np.stack([vis_gray * g for g in VIS_CHANNEL_GAINS], axis=2)
    vis_rgb += rng.normal(0.0, NOISE_SIGMA, size=vis_rgb.shape)
    ir_noisy = ir_gray + rng.normal(0.0, NOISE_SIGMA, size=ir_gray.shape)

    dropout = rng.random(size=gt.shape) < DEPTH_DROPOUT
    gt_map = DepthMap(depth=gt.astype(np.float32), valid=~dropout)

    meta = {
        "seed": int(seed),
        "near_m": NEAR_PLANE_M,
        "far_m": FAR_PLANE_M,
        "bg_depth_top_m": BG_DEPTH_TOP_M,
        "bg_depth_bottom_m": BG_DEPTH_BOTTOM_M,
        "shade_min": SHADE_MIN,
        "shade_max": SHADE_MAX,
        "noise_sigma": NOISE_SIGMA,
        "hidden_contrast": HIDDEN_CONTRAST,
        "vis_channel_gains": list(VIS_CHANNEL_GAINS),
    }
    return ScenePair(
        vis=RasterImage.from_unit(vis_rgb),
        ir=RasterImage.from_unit(ir_noisy),
        gt_depth=gt_map,
        objects=objects,
        meta=meta,
    )


# -- dataset directories ----------------------------------------------------

def save_scene(scene: ScenePair, root, split, scene_id) -> None:
    """Write one scene as <root>/<split>/<id>_{vis.png,ir.png,depth.pfm,manifest.json}."""
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    stem = str(d / str(scene_id))
    save_image(scene.vis, stem + "_vis.png")
    save_image(scene.ir, stem + "_ir.png")
    save_depth(scene.gt_depth, stem + "_depth.pfm")
    manifest = {"objects": [o.to_dict() for o in scene.objects], "meta": scene.meta}
    with open(stem + "_manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_scene(root, split, scene_id) -> ScenePair:
    stem = str(Path(root) / split / str(scene_id))
    with open(stem + "_manifest.json") as f:
        manifest = json.load(f)
    return ScenePair(
        vis=load_image(stem + "_vis.png"),
        ir=load_image(stem + "_ir.png"),
        gt_depth=load_depth(stem + "_depth.pfm"),
        objects=[SceneObject.from_dict(o) for o in manifest["objects"]],
        meta=manifest.get("meta", {}),
    )


def list_scene_ids(root, split) -> list:
    d = Path(root) / split
    ids = sorted(p.name[: -len("_manifest.json")] for p in d.glob("*_manifest.json"))
    return ids


def load_split(root, split) -> list:
    return [load_scene(root, split, sid) for sid in list_scene_ids(root, split)]
