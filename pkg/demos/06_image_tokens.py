"""From pixels to an encoded token sequence.

A random image is cut into 8x8 patches, each patch and each pack region is
pooled through the seeded toy encoder, and the sequence runs through the
topology-masked encoder.
"""
import numpy as np

from topopack.encoder import EncoderConfig, encode_image, encoder_forward, init_encoder_params

rng = np.random.default_rng(0)
image = rng.random((70, 90, 3))
seq = encode_image(image, patch=8, k=3, dim=16)
lay = seq.layout
print(f"grid {lay.height}x{lay.width} ({int(seq.valid.sum())} real cells), "
      f"{lay.num_packs} packs, {lay.length} tokens")

cfg = EncoderConfig(dim=16, layers=2, heads=2, k=3)
out = encoder_forward(seq, cfg, init_encoder_params(cfg))
print("summaries", out.summaries.shape, "global", out.global_token.shape)
print("global token norm before/after:", np.linalg.norm(seq.embeddings[0]), np.linalg.norm(out.global_token))
