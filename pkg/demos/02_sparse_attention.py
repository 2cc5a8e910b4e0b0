"""Block-sparse attention against a dense masked reference.

Runs both kernels on the same random inputs, compares outputs and counts how
many query-key scores each one computed.
"""
import time

import numpy as np

from topopack.attention import dense_oracle_attention, sparse_attention
from topopack.grid import build_layout
from topopack.topomask import allowed_count, build_descriptor

rng = np.random.default_rng(0)
for m in (10, 100, 1000):
    layout = build_layout(3, 3 * m, 3)
    desc = build_descriptor(layout)
    q, k, v = rng.standard_normal((3, layout.length, 16))
    sparse_n, dense_n = {}, {}
    t0 = time.perf_counter()
    out = sparse_attention(q, k, v, desc, counter=sparse_n)
    t1 = time.perf_counter()
    ref = dense_oracle_attention(q, k, v, desc, counter=dense_n)
    t2 = time.perf_counter()
    assert sparse_n["scores"] == allowed_count(m, 3)
    print(f"M={m:5d}  scores {sparse_n['scores']:>10d} vs {dense_n['scores']:>11d}  "
          f"time {t1 - t0:.3f}s vs {t2 - t1:.3f}s  max|diff| {np.abs(out - ref).max():.1e}")
