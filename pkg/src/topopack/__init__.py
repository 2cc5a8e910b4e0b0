"""Sparse topo-pack attention over whole-slide patch-feature grids."""
from .grid import FeatureGrid, PackLayout, Role, TokenSequence, build_layout, pad_grid
from .topomask import allowed_count, build_descriptor, mask_entry, sparsity_ratio
from .attention import dense_oracle_attention, sparse_attention

__version__ = "0.1.0"
