"""Frozen, seeded stand-in for a pretrained text encoder.

Words are hashed into a fixed bucket vocabulary, embedded, and passed through
a few causal self-attention + MLP layers with fixed random weights. Each
layer's output is a "depth"; the last position of the final depth is the
contextualized end-of-text (EoT) summary token.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .layout import ValidationError

_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 4096
    max_tokens: int = 16
    d_text: int = 64
    n_layers: int = 2
    taps: tuple[int, ...] = (1, 2)  # shallow + final depth
    seed: int = 1234


@dataclass
class EncodedText:
    """Per-depth word tokens ``{depth: (T, d_text)}`` plus the EoT vector.

    ``token_count`` is 0 only for the null (empty-caption) encoding.
    """

    tokens: dict[int, np.ndarray]
    eot: np.ndarray
    token_count: int
    ids: tuple[int, ...] = field(default=())


def _bucket(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def _ln(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


class ToyTextEncoder:
    def __init__(self, config: TextEncoderConfig | None = None):
        cfg = config or TextEncoderConfig()
        if not cfg.taps or max(cfg.taps) > cfg.n_layers or min(cfg.taps) < 0:
            raise ValueError(f"taps {cfg.taps} outside depths 0..{cfg.n_layers}")
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_text
        self.embed = rng.standard_normal((cfg.vocab_size, d))
        self.eot_embed = rng.standard_normal(d)
        self.pos = 0.5 * rng.standard_normal((cfg.max_tokens + 1, d))
        self.layers = []
        for _ in range(cfg.n_layers):
            s = 1.0 / np.sqrt(d)
            self.layers.append({
                "q": rng.standard_normal((d, d)) * s,
                "k": rng.standard_normal((d, d)) * s,
                "v": rng.standard_normal((d, d)) * s,
                "o": rng.standard_normal((d, d)) * s,
                "m1": rng.standard_normal((d, 2 * d)) * s,
                "m2": rng.standard_normal((2 * d, d)) / np.sqrt(2 * d),
            })
        self._cache: dict[str, EncodedText] = {}

    @property
    def d_text(self) -> int:
        return self.config.d_text

    @property
    def taps(self) -> tuple[int, ...]:
        return self.config.taps

    def tokenize(self, text: str) -> list[int]:
        if not isinstance(text, str):
            raise ValidationError("text must be a string")
        words = [w for w in _SPLIT.split(text.lower()) if w]
        if not words:
            raise ValidationError(f"no tokens in text {text!r}")
        return [_bucket(w, self.config.vocab_size) for w in words[: self.config.max_tokens]]

    def _run(self, ids: list[int]) -> EncodedText:
        T = len(ids)
        x = np.concatenate([self.embed[ids], self.eot_embed[None]], axis=0) + self.pos[: T + 1]
        causal = np.triu(np.full((T + 1, T + 1), -np.inf), k=1)
        depths = {0: x[:T].copy()}
        d = self.config.d_text
        for li, p in enumerate(self.layers, start=1):
            h = _ln(x)
            att = (h @ p["q"]) @ (h @ p["k"]).T / np.sqrt(d) + causal
            att = np.exp(att - att.max(axis=-1, keepdims=True))
            att /= att.sum(axis=-1, keepdims=True)
            x = x + (att @ (h @ p["v"])) @ p["o"]
            x = x + _gelu(_ln(x) @ p["m1"]) @ p["m2"]
            depths[li] = x[:T].copy()
        eot = _ln(x[T])
        return EncodedText({k: depths[k] for k in self.config.taps}, eot, T, tuple(ids))

    def encode(self, text: str) -> EncodedText:
        """Deterministic encoding; results are cached and must not be mutated."""
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        enc = self._run(self.tokenize(text))
        self._cache[text] = enc
        return enc

    def encode_null(self) -> EncodedText:
        """Empty-caption encoding: no word tokens, EoT from the terminal slot alone."""
        cached = self._cache.get("")
        if cached is None:
            cached = self._cache[""] = self._run([])
        return cached
