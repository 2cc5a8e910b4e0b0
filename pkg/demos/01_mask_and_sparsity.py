"""Where the attention budget goes.

Lays out a small grid as packs, prints the allowed-pair matrix for two packs,
then shows how the allowed fraction falls toward one percent as the slide
grows while the per-pack cost stays fixed.
"""
import numpy as np

from topopack.grid import build_layout, coord_to_token
from topopack.topomask import allowed_count, build_descriptor, flop_estimate, sparsity_ratio

layout = build_layout(3, 6, 3)
print(f"3x6 grid, k=3: {layout.num_packs} packs, {layout.length} tokens")
print("cell (2, 4) sits at token", coord_to_token(layout, 2, 4))
print("summaries at", layout.summary_indices().tolist())

mask = build_descriptor(layout).expand()
glyph = np.where(mask, "#", ".")
for i, row in enumerate(glyph):
    print(f"{i:3d} " + "".join(row))

print("\n   M      N          allowed        ratio")
for m in (1, 10, 100, 1000, 10_000, 100_000):
    n = 1 + 10 * m
    print(f"{m:6d} {n:7d} {allowed_count(m, 3):16d}   {sparsity_ratio(m, 3):.5f}")

big = build_layout(3, 3000, 3)
f = flop_estimate(big, 64)
print(f"\nscore FLOPs at M=1000, d=64: sparse {f['sparse']:.3e} vs dense {f['dense']:.3e}")
