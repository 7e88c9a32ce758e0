"""Token-sequence encoders.

An encoder maps text to an L x d float array, one row per token; the pipeline
mean-pools and normalizes. The mock derives each token vector from a hash of
the token, so identical text always encodes to identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import urllib.request
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BackendUnavailable, EmptyGeneration


class TokenEncoder(Protocol):
    name: str
    dim: int

    def encode(self, text: str) -> np.ndarray:
        """Return the per-token sequence representation, shape (L, dim)."""
        ...


@dataclass
class MockTokenEncoder:
    dim: int = 32
    name: str = "mock-encoder"

    def encode(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise EmptyGeneration("cannot encode empty text")
        rows = np.empty((len(tokens), self.dim))
        for i, tok in enumerate(tokens):
            digest = hashlib.sha256(tok.encode()).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.Generator(np.random.PCG64(seed))
            rows[i] = rng.standard_normal(self.dim)
        return rows


@dataclass
class HttpTokenEncoder:
    """POST {text} -> {tokens: [[...], ...]} against an embedding service."""

    endpoint: str
    dim: int
    api_key: str = ""
    timeout: float = 60.0
    name: str = "http-encoder"

    def encode(self, text: str) -> np.ndarray:
        req = urllib.request.Request(
            self.endpoint,
            data=json.dumps({"text": text}).encode(),
            headers={"Content-Type": "application/json"},
        )
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode())
            return np.asarray(body["tokens"], dtype=np.float64)
        except OSError as exc:
            raise BackendUnavailable(f"{self.endpoint}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"{self.endpoint}: malformed response") from exc
