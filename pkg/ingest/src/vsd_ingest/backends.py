"""Multimodal-LLM backends.

Two implementations of one small interface: an HTTP client for a local or
remote chat endpoint, and a deterministic mock so the pipeline and its tests
never need a GPU or the network.
"""
from __future__ import annotations

import hashlib
import json
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol

from .errors import BackendUnavailable


class MllmBackend(Protocol):
    name: str

    def generate(self, prompt: str, image_ref: str) -> str:
        """Return the model's text for a prompt grounded in one image."""
        ...


_VOCAB = (
    "river bridge market street dog rider crowd lantern harbor cliff child "
    "vendor bicycle umbrella window rooftop garden boat shadow mural fountain "
    "runner kite bench forest signal wagon tower meadow gull"
).split()


def _words_from_digest(seed_text: str, count: int) -> list[str]:
    digest = hashlib.sha256(seed_text.encode()).digest()
    out = []
    for i in range(count):
        out.append(_VOCAB[digest[i % len(digest)] % len(_VOCAB)])
        if i % len(digest) == len(digest) - 1:
            digest = hashlib.sha256(digest).digest()
    return out


@dataclass
class MockMllmBackend:
    """Deterministic stand-in: output depends only on (prompt, image_ref)."""

    name: str = "mock-mllm"
    caption_lines: int = 5
    description_words: int = 20
    calls: list[tuple[str, str]] = field(default_factory=list)

    def generate(self, prompt: str, image_ref: str) -> str:
        self.calls.append((prompt, image_ref))
        key = f"{self.name}|{prompt}|{image_ref}"
        # the caption-listing prompt is the only one starting with "List"
        if prompt.startswith("List"):
            lines = []
            for i in range(self.caption_lines):
                words = _words_from_digest(f"{key}|line{i}", 6)
                lines.append("a " + " ".join(words))
            return "\n".join(lines)
        words = _words_from_digest(key, self.description_words)
        return " ".join(words)


@dataclass
class HttpMllmBackend:
    """Minimal JSON-over-HTTP client: POST {prompt, image} -> {text}."""

    endpoint: str
    model: str = ""
    api_key: str = ""
    timeout: float = 60.0
    name: str = "http-mllm"

    def generate(self, prompt: str, image_ref: str) -> str:
        payload = json.dumps(
            {"model": self.model, "prompt": prompt, "image": image_ref}
        ).encode()
        req = urllib.request.Request(
            self.endpoint, data=payload, headers={"Content-Type": "application/json"}
        )
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode())
        except OSError as exc:
            raise BackendUnavailable(f"{self.endpoint}: {exc}") from exc
        try:
            return str(body["text"])
        except (KeyError, TypeError) as exc:
            raise BackendUnavailable(
                f"{self.endpoint}: malformed response {body!r}"
            ) from exc
