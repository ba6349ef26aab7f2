"""Age/gender encoders: log-age, sinusoidal positional, and text-based.

The text route renders a short description ("Male, 75 years old") and
embeds it either through the optional HTTP embedding service or through a
deterministic hash-seeded fallback. Service failures degrade to the
fallback by default; the downgrade is recorded so run manifests can report
which embedder actually produced the vectors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import requests

from .errors import ConfigError, ContractError, TransportError

DEFAULT_TEXT_TEMPLATE = "{gender}, {age} years old"
REMOTE_DIM = 384


@dataclass(frozen=True)
class EncodedVector:
    kind: str                # trad | pe | txt
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


@dataclass
class EncoderConfig:
    kind: str = "trad"
    d_model: int = 32                  # pe width
    text_template: str = DEFAULT_TEXT_TEMPLATE
    embedder: str = "fallback"         # remote | fallback
    fallback_dim: int = 16
    remote_url: str = "http://localhost:8787"
    remote_timeout: float = 5.0
    allow_fallback: bool = True        # degrade remote -> fallback on failure

    def validate(self) -> None:
        if self.kind not in ("trad", "pe", "txt"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.d_model <= 0 or self.d_model % 2 != 0:
            raise ConfigError("d_model must be a positive even integer")
        if self.fallback_dim < 8:
            raise ConfigError("fallback_dim must be >= 8")
        if self.embedder not in ("remote", "fallback"):
            raise ConfigError(f"unknown embedder mode {self.embedder!r}")


def _check_inputs(age: float, gender: int) -> None:
    if age < 0:
        raise ContractError(f"age must be >= 0, got {age}")
    if gender not in (0, 1):
        raise ContractError(f"gender must be 0 or 1, got {gender}")


def encode_trad(age: float, gender: int) -> EncodedVector:
    """[ln(1 + age), gender]."""
    _check_inputs(age, gender)
    return EncodedVector("trad", (math.log1p(age), float(gender)))


def encode_pe(age: float, gender: int, d_model: int) -> EncodedVector:
    """Sinusoidal position code of the (floored) age, shifted by the gender bit.

    values[2i]   = sin(pos / 10000^(2i/d_model)) + g
    values[2i+1] = cos(pos / 10000^(2i/d_model)) + g
    """
    _check_inputs(age, gender)
    if d_model <= 0 or d_model % 2 != 0:
        raise ConfigError("d_model must be a positive even integer")
    pos = float(math.floor(age))
    g = float(gender)
    values = []
    for i in range(d_model // 2):
        angle = pos / (10000.0 ** (2 * i / d_model))
        values.append(math.sin(angle) + g)
        values.append(math.cos(angle) + g)
    return EncodedVector("pe", tuple(values))


def render_text(age: float, gender: int, template: str = DEFAULT_TEXT_TEMPLATE) -> str:
    _check_inputs(age, gender)
    word = "Male" if gender == 1 else "Female"
    return template.format(age=int(math.floor(age)), gender=word)


def _stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def fallback_embed(text: str, dim: int) -> np.ndarray:
    """Unit-norm vector of dim standard normals seeded from a stable text hash."""
    if dim < 8:
        raise ConfigError("fallback embedding dim must be >= 8")
    rng = np.random.default_rng(_stable_hash64(text))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class TextEmbedder:
    """Resolves texts to vectors via the remote service or the fallback.

    Downgrade events (remote requested but fallback used) accumulate in
    .downgrades for the run manifest.
    """

    def __init__(self, config: EncoderConfig):
        config.validate()
        self.config = config
        self.downgrades: list[str] = []
        self._mode_used: str | None = None

    @property
    def dim(self) -> int:
        return REMOTE_DIM if self.mode_used() == "remote" else self.config.fallback_dim

    def mode_used(self) -> str:
        """Resolved embedder mode; probes the service once if still unknown."""
        if self._mode_used is None:
            if self.config.embedder == "fallback":
                self._mode_used = "fallback"
            else:
                try:
                    self._probe_remote()
                    self._mode_used = "remote"
                except TransportError as exc:
                    if not self.config.allow_fallback:
                        raise
                    self.downgrades.append(str(exc))
                    self._mode_used = "fallback"
        return self._mode_used

    def _probe_remote(self) -> None:
        url = self.config.remote_url.rstrip("/") + "/health"
        try:
            resp = requests.get(url, timeout=self.config.remote_timeout)
        except requests.RequestException as exc:
            raise TransportError(f"embedding service unreachable at {url}: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"embedding service not ready ({resp.status_code})")

    def embed(self, texts: list[str]) -> np.ndarray:
        if self.mode_used() == "remote":
            try:
                return self._embed_remote(texts)
            except TransportError as exc:
                if not self.config.allow_fallback:
                    raise
                self.downgrades.append(str(exc))
                self._mode_used = "fallback"
        return np.stack([fallback_embed(t, self.config.fallback_dim) for t in texts])

    def _embed_remote(self, texts: list[str]) -> np.ndarray:
        url = self.config.remote_url.rstrip("/") + "/embed"
        out: list[np.ndarray] = []
        # The service caps batches at 256 texts.
        for start in range(0, len(texts), 256):
            batch = texts[start:start + 256]
            try:
                resp = requests.post(url, json={"texts": batch},
                                     timeout=self.config.remote_timeout)
            except requests.RequestException as exc:
                raise TransportError(f"embedding service unreachable at {url}: {exc}") from exc
            if resp.status_code != 200:
                raise TransportError(f"embedding service returned {resp.status_code}: {resp.text[:200]}")
            payload = resp.json()
            vectors = payload.get("vectors")
            if not isinstance(vectors, list) or len(vectors) != len(batch):
                raise TransportError("embedding service response does not match request order/length")
            arr = np.asarray(vectors, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != REMOTE_DIM:
                raise TransportError(f"embedding service returned dim {arr.shape}, expected {REMOTE_DIM}")
            out.append(arr)
        return np.vstack(out)


def encode_text(age: float, gender: int, embedder: TextEmbedder) -> EncodedVector:
    text = render_text(age, gender, embedder.config.text_template)
    vec = embedder.embed([text])[0]
    return EncodedVector("txt", tuple(float(v) for v in vec))


class Encoder:
    """Uniform (age, gender) -> vector facade over the three strategies."""

    def __init__(self, config: EncoderConfig, embedder: TextEmbedder | None = None):
        config.validate()
        self.config = config
        self.kind = config.kind
        self.embedder = embedder or (TextEmbedder(config) if config.kind == "txt" else None)

    @property
    def dim(self) -> int:
        if self.kind == "trad":
            return 2
        if self.kind == "pe":
            return self.config.d_model
        return self.embedder.dim

    def encode(self, age: float, gender: int) -> np.ndarray:
        if self.kind == "trad":
            return encode_trad(age, gender).array()
        if self.kind == "pe":
            return encode_pe(age, gender, self.config.d_model).array()
        return encode_text(age, gender, self.embedder).array()

    def encode_rows(self, ages: np.ndarray, genders: np.ndarray) -> np.ndarray:
        """Vectorized encoding of parallel age/gender arrays."""
        ages = np.asarray(ages, dtype=float)
        genders = np.asarray(genders)
        if self.kind == "txt":
            texts = [render_text(a, int(g), self.config.text_template)
                     for a, g in zip(ages, genders)]
            return self.embedder.embed(texts)
        return np.stack([self.encode(a, int(g)) for a, g in zip(ages, genders)])
