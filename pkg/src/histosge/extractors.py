"""Histology feature extraction producing per-spot embeddings.

Three interchangeable backends produce the 1024-dim histology embedding:

* ``HistogramFallbackExtractor`` — hermetic, deterministic image statistics
  followed by a fixed random projection. No external dependencies; every
  test runs against it.
* ``RemoteEmbeddingExtractor`` — posts PNG-encoded patches to an embedding
  endpoint (auth token read from ``HISTOSGE_EMBED_TOKEN``).
* ``TorchScriptExtractor`` — runs a local TorchScript image encoder.

``EmbeddingCache`` persists embeddings beside the dataset in an append-only
record log so extraction, which dominates wall-clock, runs once per spot.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import Spot, STDataset
from .errors import ExtractorBackendError
from .preprocess import PatchTensor, PreprocessConfig, extract_patch, rgb_feature

FALLBACK_EMBED_DIM = 1024
# Part of the fallback's definition: changing this seed changes every
# fallback embedding and invalidates caches keyed on the extractor name.
FALLBACK_PROJECTION_SEED = 424242

TOKEN_ENV_VAR = "HISTOSGE_EMBED_TOKEN"


class FeatureExtractor(Protocol):
    """A deterministic patch -> embedding map with a fixed output dimension."""

    name: str
    embed_dim: int

    def extract(self, patch: PatchTensor) -> np.ndarray: ...


@dataclass(frozen=True)
class MultimodalFeatureMap:
    """Per-spot concatenated features: histology ``z``, location ``l``, RGB ``t``.

    ``m = [z, l, t]`` in that order, length ``embed_dim + 5``.
    """

    spot_id: str
    z: np.ndarray
    l: np.ndarray
    t: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        d = self.z.shape[0]
        if self.m.shape[0] != d + 5:
            raise ExtractorBackendError(
                f"feature map for {self.spot_id!r} has length {self.m.shape[0]}, expected {d + 5}"
            )
        if not (
            np.array_equal(self.m[:d], self.z)
            and np.array_equal(self.m[d : d + 2], self.l)
            and np.array_equal(self.m[d + 2 :], self.t)
        ):
            raise ExtractorBackendError(f"feature map for {self.spot_id!r} is not [z, l, t]")

    @classmethod
    def from_parts(cls, spot_id: str, z: np.ndarray, l: np.ndarray, t: np.ndarray):
        z = np.asarray(z, dtype=np.float64)
        l = np.asarray(l, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        return cls(spot_id=spot_id, z=z, l=l, t=t, m=np.concatenate([z, l, t]))


def patch_digest(patch: PatchTensor) -> str:
    """SHA-256 over the patch shape and raw pixel bytes."""
    h = hashlib.sha256()
    h.update(str(patch.pixels.shape).encode())
    h.update(np.ascontiguousarray(patch.pixels).tobytes())
    return h.hexdigest()


def _downsample_8x8(channel: np.ndarray) -> np.ndarray:
    """Block-mean the channel onto an 8x8 grid (blocks from even index splits)."""
    rows = np.array_split(np.arange(channel.shape[0]), 8)
    cols = np.array_split(np.arange(channel.shape[1]), 8)
    out = np.empty((8, 8), dtype=np.float64)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out[i, j] = channel[np.ix_(r, c)].mean()
    return out


class HistogramFallbackExtractor:
    """Deterministic hermetic stand-in for a pretrained pathology encoder.

    Pipeline (fixed): per-channel 16-bin intensity histograms, per-channel
    gradient-orientation histograms (8 bins x 4 spatial quadrants, magnitude
    weighted), and a raw 8x8 per-channel downsample; the concatenation is
    projected to 1024 dims by a seeded random matrix and L2-normalized.
    """

    name = "fallback"
    embed_dim = FALLBACK_EMBED_DIM

    _raw_dim = 3 * 16 + 3 * 4 * 8 + 3 * 64  # 336

    def __init__(self):
        rng = np.random.default_rng(FALLBACK_PROJECTION_SEED)
        self._projection = rng.standard_normal((self._raw_dim, self.embed_dim))
        self._projection /= np.sqrt(self._raw_dim)

    def _raw_features(self, pixels: np.ndarray) -> np.ndarray:
        parts = []
        n_px = pixels.shape[0] * pixels.shape[1]
        for c in range(3):
            hist, _ = np.histogram(pixels[:, :, c], bins=16, range=(0.0, 1.0))
            parts.append(hist / n_px)
        h2, w2 = pixels.shape[0] // 2, pixels.shape[1] // 2
        for c in range(3):
            gy, gx = np.gradient(pixels[:, :, c])
            mag = np.hypot(gx, gy)
            ang = np.arctan2(gy, gx)
            for rows in (slice(0, h2), slice(h2, None)):
                for cols in (slice(0, w2), slice(w2, None)):
                    hist, _ = np.histogram(
                        ang[rows, cols],
                        bins=8,
                        range=(-np.pi, np.pi),
                        weights=mag[rows, cols],
                    )
                    parts.append(hist)
        for c in range(3):
            parts.append(_downsample_8x8(pixels[:, :, c]).ravel())
        return np.concatenate(parts)

    def extract(self, patch: PatchTensor) -> np.ndarray:
        raw = self._raw_features(patch.pixels)
        z = raw @ self._projection
        norm = np.linalg.norm(z)
        if norm > 0:
            z = z / norm
        return z


class RemoteEmbeddingExtractor:
    """Adapter for a remote embedding endpoint.

    Request: POST of PNG-encoded patch bytes. Response: JSON array of
    ``embed_dim`` 32-bit floats (a bare array or ``{"embedding": [...]}``).
    The bearer token is read from ``HISTOSGE_EMBED_TOKEN`` if set.
    """

    def __init__(self, url: str, embed_dim: int = 1024, timeout: float = 30.0,
                 name: str = "remote"):
        self.url = url
        self.embed_dim = embed_dim
        self.timeout = timeout
        self.name = name

    def _encode_png(self, patch: PatchTensor) -> bytes:
        from PIL import Image

        arr = np.clip(np.rint(patch.pixels * 255.0), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def extract(self, patch: PatchTensor) -> np.ndarray:
        import requests

        headers = {"Content-Type": "image/png"}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                self.url, data=self._encode_png(patch), headers=headers, timeout=self.timeout
            )
        except requests.RequestException as err:
            raise ExtractorBackendError(
                f"embedding endpoint {self.url} unreachable ({err}); check the URL and "
                f"{TOKEN_ENV_VAR}, then retry — cached spots are not recomputed"
            ) from err
        if resp.status_code != 200:
            raise ExtractorBackendError(
                f"embedding endpoint returned HTTP {resp.status_code}; check {TOKEN_ENV_VAR} "
                "and retry — cached spots are not recomputed"
            )
        try:
            payload = resp.json()
        except ValueError as err:
            raise ExtractorBackendError("embedding endpoint returned non-JSON body") from err
        if isinstance(payload, dict):
            payload = payload.get("embedding")
        vec = np.asarray(payload, dtype=np.float32).astype(np.float64)
        if vec.ndim != 1 or vec.shape[0] != self.embed_dim:
            raise ExtractorBackendError(
                f"embedding endpoint returned shape {vec.shape}, expected ({self.embed_dim},)"
            )
        if not np.all(np.isfinite(vec)):
            raise ExtractorBackendError("embedding endpoint returned non-finite values")
        return vec


class TorchScriptExtractor:
    """Runs a local TorchScript image encoder on CPU.

    The module must map a (1, 3, H, W) float tensor in [0, 1] to a
    (1, embed_dim) tensor. ``input_size`` triggers bilinear resizing when the
    backend expects a different resolution than the patch.
    """

    def __init__(self, module_path, embed_dim: int = 1024, input_size: int | None = None,
                 name: str = "local"):
        import torch

        self.embed_dim = embed_dim
        self.input_size = input_size
        self.name = name
        try:
            self._module = torch.jit.load(str(module_path), map_location="cpu")
        except (OSError, RuntimeError, ValueError) as err:
            raise ExtractorBackendError(
                f"could not load TorchScript module {module_path}: {err}"
            ) from err
        self._module.eval()

    def extract(self, patch: PatchTensor) -> np.ndarray:
        import torch

        x = torch.from_numpy(np.ascontiguousarray(patch.pixels)).float()
        x = x.permute(2, 0, 1).unsqueeze(0)
        if self.input_size is not None and x.shape[-2:] != (self.input_size, self.input_size):
            x = torch.nn.functional.interpolate(
                x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False
            )
        with torch.no_grad():
            out = self._module(x)
        vec = out.detach().cpu().numpy().reshape(-1).astype(np.float64)
        if vec.shape[0] != self.embed_dim:
            raise ExtractorBackendError(
                f"TorchScript module returned {vec.shape[0]} values, expected {self.embed_dim}"
            )
        return vec


_CACHE_KEY_LEN = 32  # sha256 digest bytes


class EmbeddingCache:
    """Append-only record log of embeddings keyed by content digests.

    Record layout: 32-byte key digest, little-endian u32 dimension, then the
    embedding as 32-bit floats. Values are deterministic for a key, so
    concurrent last-write-wins appends of identical records are safe. A
    truncated final record (interrupted append) is ignored on load.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._entries: dict[bytes, np.ndarray] = {}
        if self.path.exists():
            self._load()

    def _load(self):
        raw = self.path.read_bytes()
        pos = 0
        while pos + _CACHE_KEY_LEN + 4 <= len(raw):
            key = raw[pos : pos + _CACHE_KEY_LEN]
            (dim,) = struct.unpack_from("<I", raw, pos + _CACHE_KEY_LEN)
            end = pos + _CACHE_KEY_LEN + 4 + 4 * dim
            if end > len(raw):
                break
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos + _CACHE_KEY_LEN + 4)
            self._entries[key] = vec.copy()
            pos = end

    @staticmethod
    def key_for(slice_id: str, spot_id: str, extractor_name: str, digest: str) -> bytes:
        h = hashlib.sha256()
        h.update(f"{slice_id}\x00{spot_id}\x00{extractor_name}\x00{digest}".encode())
        return h.digest()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: bytes) -> np.ndarray | None:
        return self._entries.get(key)

    def put(self, key: bytes, vec: np.ndarray) -> None:
        vec32 = np.ascontiguousarray(vec, dtype="<f4")
        self._entries[key] = vec32
        record = key + struct.pack("<I", vec32.shape[0]) + vec32.tobytes()
        with open(self.path, "ab") as f:
            f.write(record)


class CachedExtractor:
    """Wraps an extractor with an on-disk cache for one slice.

    Cached values are float32 (the cache's storage precision); the wrapper
    quantizes on the miss path too, so hit and miss return identical vectors.
    """

    def __init__(self, inner: FeatureExtractor, cache: EmbeddingCache, slice_id: str):
        self.inner = inner
        self.cache = cache
        self.slice_id = slice_id
        self.name = inner.name
        self.embed_dim = inner.embed_dim

    def extract(self, patch: PatchTensor) -> np.ndarray:
        key = EmbeddingCache.key_for(
            self.slice_id, patch.spot_id, self.inner.name, patch_digest(patch)
        )
        hit = self.cache.get(key)
        if hit is None:
            vec = np.asarray(self.inner.extract(patch), dtype=np.float32)
            self.cache.put(key, vec)
            hit = vec
        return hit.astype(np.float64)


def build_feature_map(
    ds: STDataset,
    spots: Sequence[Spot],
    extractor: FeatureExtractor,
    cfg: PreprocessConfig,
) -> list[MultimodalFeatureMap]:
    """One ``[z, l, t]`` feature map per spot, in the given spot order."""
    maps = []
    for spot in spots:
        patch = extract_patch(ds, spot, cfg)
        try:
            z = extractor.extract(patch)
        except ExtractorBackendError as err:
            raise ExtractorBackendError(f"spot {spot.spot_id!r}: {err}") from err
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 1 or z.shape[0] != extractor.embed_dim:
            raise ExtractorBackendError(
                f"spot {spot.spot_id!r}: extractor {extractor.name!r} returned shape "
                f"{z.shape}, expected ({extractor.embed_dim},)"
            )
        if not np.all(np.isfinite(z)):
            raise ExtractorBackendError(
                f"spot {spot.spot_id!r}: extractor {extractor.name!r} returned non-finite values"
            )
        l = np.array([spot.x_px, spot.y_px], dtype=np.float64)
        t = rgb_feature(patch)
        maps.append(MultimodalFeatureMap.from_parts(spot.spot_id, z, l, t))
    return maps
