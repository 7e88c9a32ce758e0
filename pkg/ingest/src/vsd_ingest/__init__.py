"""Offline description-generation pipeline.

Generates a short visual semantic description per image with a multimodal
LLM backend (two-stage prompting when captions are unavailable), encodes the
descriptions and the original captions with a token-sequence encoder, and
exports mean-pooled, L2-normalized vectors in the EMB1 + manifest format the
alignment toolkit consumes.
"""

__version__ = "0.1.0"
