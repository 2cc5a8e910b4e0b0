"""The full pretraining chain on a small synthetic corpus.

Patch-wise masked reconstruction, then pack-wise, then momentum contrast,
then the query resampler on top of the frozen encoder. Each stage starts from
the previous one's tensors.
"""
import numpy as np

from topopack.synth import synthetic_corpus
from topopack.train import STAGES, TrainConfig, run_stage

corpus = synthetic_corpus(20, 6, 6, 16, seed=1)
cfg = TrainConfig(seed=1, steps=200, dim=16)
tensors = None
for stage in STAGES:
    tensors, meta, log = run_stage(stage, corpus, cfg, tensors)
    losses = np.array([e["loss"] for e in log])
    w = len(losses) // 10
    print(f"{stage:9s}  first {losses[:w].mean():8.4f}  last {losses[-w:].mean():8.4f}  "
          f"queue {log[-1]['queue_len']}")
