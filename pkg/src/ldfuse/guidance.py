"""Language branch: captions, text encoding, semantic parameters, modulation.

The caption generator and text encoder are deterministic stand-ins for the
external captioner and frozen text encoder; both sit behind small contracts
(token list in, unit-norm vector out) so a real encoder can be injected.
The caption template is fixed and versioned so tests stay stable.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .errors import DomainError, ParameterError, ShapeError
from .imageio import DepthMap, RasterImage, luminance
from .checkpoint import load_tensors, save_tensors

__all__ = [
    "CAPTION_TEMPLATE_VERSION", "TEMPLATE_WORDS", "Caption", "TextEmbedding",
    "SemanticParams", "caption_scene", "encode_text", "GuidanceMLP",
    "ZeroGuidance", "predict_params", "modulate",
]

CAPTION_TEMPLATE_VERSION = 1

# Fixed wording of template v1; numeric tokens (counts, meters) are appended
# from the scene content.
TEMPLATE_WORDS = (
    "the", "visible", "scene", "is", "dark", "dim", "bright",
    "infrared", "shows", "warm", "objects", "object",
    "depth", "spans", "to", "meters", "unavailable",
)

MIN_COMPONENT_AREA = 4  # pixels; smaller bright blobs count as noise


@dataclass(frozen=True)
class Caption:
    """Lowercased word tokens."""

    tokens: tuple

    def __post_init__(self):
        if not self.tokens:
            raise ParameterError("caption must be non-empty")

    @property
    def text(self):
        return " ".join(self.tokens)


@dataclass
class TextEmbedding:
    """Unit-norm text feature vector."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError("embedding must be a 1-D vector")
        if not np.all(np.isfinite(v)):
            raise ParameterError("embedding must be finite")
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
            raise ParameterError("embedding must have unit L2 norm")
        self.vector = v


@dataclass
class SemanticParams:
    """Channel-wise scale offsets and biases derived from text."""

    sigma_hat: object  # (C,) array or Tensor
    mu_hat: object     # (C,) array or Tensor

    def __post_init__(self):
        for name in ("sigma_hat", "mu_hat"):
            v = getattr(self, name)
            if isinstance(v, ad.Tensor):
                continue
            arr = np.asarray(v, dtype=np.float64)
            if arr.ndim != 1:
                raise ShapeError(f"{name} must be a 1-D channel vector")
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} must be finite")
            setattr(self, name, arr)

    @classmethod
    def identity(cls, channels):
        return cls(np.zeros(channels), np.zeros(channels))


# -- captioning --------------------------------------------------------------

def _unit_image(img, channels):
    if isinstance(img, RasterImage):
        img = img.to_unit()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ShapeError(f"expected HxWx{channels} image, got {arr.shape}")
    return arr


def _luminance_bucket(mean_luma):
    if mean_luma < 0.25:
        return "dark"
    if mean_luma < 0.5:
        return "dim"
    return "bright"


def _count_bright_components(ir):
    flat = ir[:, :, 0]
    thresh = flat.mean() + 0.5 * flat.std()
    labels, n = ndimage.label(flat > thresh, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0
    areas = ndimage.sum_labels(np.ones_like(flat), labels, index=np.arange(1, n + 1))
    return int((areas >= MIN_COMPONENT_AREA).sum())


def _depth_phrase(depth: DepthMap):
    if not depth.valid.any():
        return ("depth", "unavailable")
    vals = depth.depth[depth.valid].astype(np.float64)
    lo = int(round(float(np.quantile(vals, 0.05))))
    hi = int(round(float(np.quantile(vals, 0.95))))
    return ("depth", "spans", str(lo), "to", str(hi), "meters")


def caption_scene(vis, ir, depth_vis: DepthMap, depth_ir: DepthMap) -> Caption:
    """Template caption: one visible sentence and one infrared sentence.

    Encodes the mean-luminance bucket of the visible image, the count of
    connected bright components in the infrared image, and 5%/95% quantiles
    of each modality's (predicted) depth; the two sentences are concatenated.
    """
    vis = _unit_image(vis, 3)
    ir = _unit_image(ir, 1)
    if vis.shape[:2] != ir.shape[:2]:
        raise ShapeError("caption inputs must be registered (same H, W)")
    bucket = _luminance_bucket(float(luminance(vis).mean()))
    count = _count_bright_components(ir)
    tokens = ("the", "visible", "scene", "is", bucket) + _depth_phrase(depth_vis)
    noun = "object" if count == 1 else "objects"
    tokens += ("the", "infrared", "scene", "shows", str(count), "warm", noun)
    tokens += _depth_phrase(depth_ir)
    return Caption(tokens)


# -- text encoding -------------------------------------------------------------

def _token_signs(token, dim):
    """Deterministic +-1 pattern over `dim` buckets from a fixed hash."""
    need = (dim + 7) // 8
    raw = b""
    counter = 0
    while len(raw) < need:
        raw += hashlib.sha256(token.encode("utf-8") + b"#%d" % counter).digest()
        counter += 1
    bits = np.unpackbits(np.frombuffer(raw[:need], dtype=np.uint8))[:dim]
    return bits.astype(np.float64) * 2.0 - 1.0


def encode_text(caption: Caption, dim=64) -> TextEmbedding:
    """Feature-hash the tokens into `dim` signed buckets and L2-normalize."""
    if isinstance(caption, str):
        caption = Caption(tuple(caption.lower().split()))
    if not caption.tokens:
        raise ParameterError("cannot encode an empty caption")
    vec = np.zeros(dim)
    for token in caption.tokens:
        vec += _token_signs(token, dim)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DomainError("caption tokens cancelled to a zero vector")
    return TextEmbedding(vec / norm)


# -- semantic parameter MLP ----------------------------------------------------

class GuidanceMLP:
    """Two-layer MLP from text embeddings to channel-wise (sigma, mu).

    The output heads are zero-initialized, so an untrained MLP yields the
    identity modulation exactly.
    """

    def __init__(self, embed_dim=64, channels=32, hidden_mult=4, seed=0):
        from .models import Linear, _rng  # deferred: models imports this module
        self.config = {
            "embed_dim": int(embed_dim),
            "channels": int(channels),
            "hidden_mult": int(hidden_mult),
            "seed": int(seed),
        }
        rng = _rng(seed, 19)
        hidden = int(hidden_mult) * int(embed_dim)
        self.fc = Linear(rng, embed_dim, hidden)
        self.head_sigma = Linear(rng, hidden, channels, zero_init=True)
        self.head_mu = Linear(rng, hidden, channels, zero_init=True)
        self._named = {}
        for prefix, layer in (("fc", self.fc), ("head_sigma", self.head_sigma),
                              ("head_mu", self.head_mu)):
            for key, tensor in layer.tensors().items():
                self._named[f"{prefix}.{key}"] = tensor

    @property
    def embed_dim(self):
        return self.config["embed_dim"]

    @property
    def channels(self):
        return self.config["channels"]

    def params(self):
        return list(self._named.values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self._named.items()}

    def load_state_dict(self, state):
        for name, tensor in self._named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ShapeError(f"checkpoint tensor {name} has wrong shape")
            tensor.data = arr.copy()

    def checksum(self):
        return float(sum(np.abs(t.data).sum() for t in self._named.values()))

    def save_checkpoint(self, stem):
        save_tensors(self.state_dict(), stem, meta=self.config)

    @classmethod
    def from_checkpoint(cls, stem):
        state, meta = load_tensors(stem)
        mlp = cls(**meta)
        mlp.load_state_dict(state)
        return mlp

    def forward(self, emb):
        """emb: Tensor (N,E) -> (sigma (N,C), mu (N,C)) Tensors."""
        emb = ad.as_tensor(emb)
        if emb.data.shape[-1] != self.embed_dim:
            raise ShapeError(
                f"embedding dim {emb.data.shape[-1]} != MLP input {self.embed_dim}")
        h = ad.silu(self.fc(emb))
        return self.head_sigma(h), self.head_mu(h)

    def predict(self, embedding) -> SemanticParams:
        vec = embedding.vector if isinstance(embedding, TextEmbedding) else np.asarray(embedding)
        sig, mu = self.forward(ad.Tensor(np.asarray(vec, dtype=np.float64)[None]))
        return SemanticParams(sig.data[0], mu.data[0])


class ZeroGuidance:
    """Stub guidance: always the identity modulation parameters."""

    def __init__(self, channels=32):
        self.channels = int(channels)

    def params(self):
        return []

    def checksum(self):
        return 0.0

    def forward(self, emb):
        emb = ad.as_tensor(emb)
        n = emb.data.shape[0]
        zero = ad.Tensor(np.zeros((n, self.channels)))
        return zero, zero

    def predict(self, embedding) -> SemanticParams:
        return SemanticParams.identity(self.channels)


def predict_params(mlp, embedding) -> SemanticParams:
    """Map a text embedding to channel-wise modulation parameters."""
    return mlp.predict(embedding)


# -- modulation -----------------------------------------------------------------

def modulate(features, params: SemanticParams):
    """(1 + sigma) * features + mu, broadcast channel-wise over pixels.

    Returns a Tensor when given Tensors (training path), else an ndarray.
    """
    tensor_mode = isinstance(features, ad.Tensor) or isinstance(params.sigma_hat, ad.Tensor)
    f = ad.as_tensor(features)
    sig = ad.as_tensor(params.sigma_hat)
    mu = ad.as_tensor(params.mu_hat)
    c = f.data.shape[-1]
    if sig.data.shape[-1] != c or mu.data.shape[-1] != c:
        raise ShapeError(
            f"params length ({sig.data.shape[-1]}, {mu.data.shape[-1]}) != "
            f"feature channels {c}")
    if sig.data.ndim == 2 and f.data.ndim == 4:
        n = sig.data.shape[0]
        sig = ad.reshape(sig, (n, 1, 1, c))
        mu = ad.reshape(mu, (n, 1, 1, c))
    out = (1.0 + sig) * f + mu
    return out if tensor_mode else out.data
