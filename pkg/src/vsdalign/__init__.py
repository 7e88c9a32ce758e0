"""Cross-modal alignment on precomputed embeddings.

Gated fusion of backbone embeddings with auxiliary description embeddings,
instance-level hard-negative triplet alignment, prototype-level alignment via
K-means + Sinkhorn, and bidirectional retrieval evaluation.

Submodules are imported lazily by the CLI so that thread caps set via the
``VSDALIGN_THREADS`` environment variable take effect before numpy loads.
"""

__version__ = "0.1.0"
