"""A fixed number of output tokens whatever the input length.

Feeds sequences of very different lengths through the resampler, then checks
that shuffling the inputs changes nothing unless positions are encoded.
"""
import numpy as np

from topopack.connector import ResamplerConfig, init_resampler_params, resample

rng = np.random.default_rng(0)
cfg = ResamplerConfig(in_dim=16, out_dim=8)
params = init_resampler_params(cfg)
for length in (1, 7, 130, 4096):
    print(f"L={length:5d} -> {resample(rng.standard_normal((length, 16)), cfg, params).shape}")

x = rng.standard_normal((12, 16))
shuffled = x[rng.permutation(12)]
print("shuffle, no positions:", np.abs(resample(x, cfg, params) - resample(shuffled, cfg, params)).max())
pos_cfg = ResamplerConfig(in_dim=16, out_dim=8, positional=True)
pos_params = init_resampler_params(pos_cfg)
print("shuffle, positions:   ", np.abs(resample(x, pos_cfg, pos_params)
                                       - resample(shuffled, pos_cfg, pos_params)).max())
