"""The language branch: captions, hashed text embeddings, and modulation.

The caption generator is a deterministic stand-in for an external captioner
and the encoder for a frozen text encoder; both sit behind small contracts
so real models can be injected.
"""

import numpy as np

from ldfuse.guidance import (GuidanceMLP, SemanticParams, caption_scene,
                             encode_text, modulate, predict_params)
from ldfuse.imageio import synth_scene
from ldfuse.models import build_tiny_depthnet

scene = synth_scene(seed=5, H=32, W=32, n_objects=6, p_ir_only=0.4, p_vis_only=0.2)
vis01, ir01 = scene.vis.to_unit(), scene.ir.to_unit()

# captions use predicted depth; untrained branches still demonstrate the flow
net_vis = build_tiny_depthnet(3, seed=0)
net_ir = build_tiny_depthnet(1, seed=1)
caption = caption_scene(vis01, ir01, net_vis.predict(vis01), net_ir.predict(ir01))
print("caption:", caption.text)

embedding = encode_text(caption, dim=64)
print(f"embedding: dim {embedding.vector.shape[0]}, norm "
      f"{np.linalg.norm(embedding.vector):.6f}")

mlp = GuidanceMLP(embed_dim=64, channels=8, seed=0)
params = predict_params(mlp, embedding)
print("fresh MLP params are exact zeros:",
      bool(np.all(params.sigma_hat == 0) and np.all(params.mu_hat == 0)))

features = np.random.default_rng(0).normal(size=(6, 6, 8))
identity = modulate(features, SemanticParams.identity(8))
print("identity modulation bitwise equal:", identity.tobytes() == features.tobytes())

shifted = modulate(features, SemanticParams(0.5 * np.ones(8), 0.1 * np.ones(8)))
print(f"modulated feature mean: {features.mean():+.4f} -> {shifted.mean():+.4f}")
