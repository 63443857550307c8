"""Frozen encoder stand-ins producing unit-norm text and image tokens.

Three providers share one small interface (``embed_text``, ``embed_visual``):

* :class:`SyntheticProvider` -- a seeded toy world in which visual tokens are
  a fixed rotation of the matching text concepts, so pre-adapter grounding is
  near chance.
* :class:`StoreProvider` -- exact lookups in a precomputed :class:`EmbeddingStore`.
* :class:`HttpProvider` -- a remote encoder behind a JSON endpoint.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from langplace.core import CanonicalRelation, Scene, Tuple, crop_raster, encode_ppm

DEFAULT_DIM = 512

STOPWORDS = frozenset({"the", "a", "an", "of", "to", "and", "with", "on", "in", "at"})


class KeyNotFound(KeyError):
    pass


class ProviderUnavailable(RuntimeError):
    pass


class StoreFormatError(ValueError):
    pass


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def _seeded_rng(seed: int, *parts: str) -> np.random.Generator:
    h = hashlib.sha256("\x1f".join((str(seed),) + parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def content_tokens(text: str) -> list[str]:
    return [t for t in text.lower().replace(".", " ").replace(",", " ").split() if t not in STOPWORDS]


def default_object_names() -> list[str]:
    doc = json.loads(resources.files("langplace.data").joinpath("objects.json").read_text())
    return list(doc["seen"]) + list(doc["unseen"])


def load_vocabulary() -> dict[str, list[str]]:
    return json.loads(resources.files("langplace.data").joinpath("objects.json").read_text())


@dataclass
class SyntheticWorld:
    """Concept vectors plus a hidden text->image rotation.

    Every object name (and "table" for the workspace image) is a concept; so
    is every canonical relation name.  ``aliases`` maps extra phrases onto an
    existing concept name, which is how tests pin synonyms.
    """
    object_names: Sequence[str] = field(default_factory=default_object_names)
    dim: int = DEFAULT_DIM
    noise_sigma: float = 0.05
    seed: int = 0
    relation_weight: float = 0.5
    aliases: dict[str, str] = field(default_factory=dict)
    identity_transform: bool = False

    def __post_init__(self):
        self.object_concepts = list(dict.fromkeys(list(self.object_names) + ["table"]))
        self.relation_concepts = [r.value for r in CanonicalRelation]
        self._vectors: dict[str, np.ndarray] = {}
        if self.identity_transform:
            self.visual_transform = np.eye(self.dim)
        else:
            g = _seeded_rng(self.seed, "visual_transform").standard_normal((self.dim, self.dim))
            q, r = np.linalg.qr(g)
            self.visual_transform = q * np.sign(np.diag(r))
        self._object_index = self._token_sets(self.object_concepts)
        self._relation_index = self._token_sets(self.relation_concepts)

    def _token_sets(self, names):
        entries = [(n, frozenset(content_tokens(n))) for n in names]
        entries += [(a, frozenset(content_tokens(a))) for a, target in self.aliases.items()
                    if target in names]
        return entries

    def concept_vector(self, name: str) -> np.ndarray:
        name = self.aliases.get(name, name)
        if name not in self._vectors:
            g = _seeded_rng(self.seed, "concept", name).standard_normal(self.dim)
            self._vectors[name] = normalize(g)
        return self._vectors[name]

    def _best(self, tokens: frozenset, index) -> Optional[str]:
        # most shared tokens, then the larger share of the concept's own tokens
        best, best_key = None, (0, 0.0)
        for name, toks in index:
            if not toks:
                continue
            shared = len(tokens & toks)
            key = (shared, shared / len(toks))
            if shared and key > best_key:
                best, best_key = name, key
        return best

    def match_object(self, text: str) -> Optional[str]:
        return self._best(frozenset(content_tokens(text)), self._object_index)

    def match_relation(self, text: str) -> Optional[str]:
        return self._best(frozenset(content_tokens(text)), self._relation_index)

    def noise(self, *parts: str) -> np.ndarray:
        # expected norm noise_sigma regardless of dim
        g = _seeded_rng(self.seed, *parts).standard_normal(self.dim)
        return g * (self.noise_sigma / np.sqrt(self.dim))

    def text_vector(self, s: str) -> np.ndarray:
        obj = self.match_object(s)
        rel = self.match_relation(s)
        v = np.zeros(self.dim)
        if obj is not None:
            v += self.concept_vector(obj)
        if rel is not None:
            v += (self.relation_weight if obj is not None else 1.0) * self.concept_vector(rel)
        if obj is None and rel is None:
            v = normalize(_seeded_rng(self.seed, "unknown", s).standard_normal(self.dim))
        return normalize(v + self.noise("text", s))

    def visual_vector(self, name: str, crop_key: str) -> np.ndarray:
        obj = self.match_object(name)
        if obj is None:
            raise KeyNotFound(f"no visual concept for {name!r}")
        v = self.visual_transform @ self.concept_vector(obj)
        return normalize(v + self.noise("visual", crop_key))


class SyntheticProvider:
    def __init__(self, world: Optional[SyntheticWorld] = None, **kwargs):
        self.world = world or SyntheticWorld(**kwargs)
        self.dim = self.world.dim

    def embed_text(self, s: str) -> np.ndarray:
        if not s or not s.strip():
            raise ValueError("cannot embed empty text")
        return self.world.text_vector(s)

    def embed_visual(self, scene: Scene, index: int) -> np.ndarray:
        _check_index(scene, index)
        if index == scene.n_objects:
            return self.world.visual_vector("table", scene.workspace_crop_key)
        obj = scene.objects[index]
        return self.world.visual_vector(obj.name, obj.crop_key)


def _check_index(scene: Scene, index: int) -> None:
    if not 0 <= index <= scene.n_objects:
        raise IndexError(f"visual token {index} out of range 0..{scene.n_objects}")


class EmbeddingStore(dict):
    """``key -> unit vector`` map with JSON Lines and binary (EMB1) persistence."""

    MAGIC = b"EMB1"

    @property
    def dim(self) -> Optional[int]:
        for v in self.values():
            return len(v)
        return None

    def __setitem__(self, key, vec):
        vec = np.asarray(vec, dtype=np.float32)
        if self.dim is not None and key not in self and len(vec) != self.dim:
            raise ValueError(f"vector for {key!r} has dim {len(vec)}, store has {self.dim}")
        super().__setitem__(key, vec)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for key in sorted(self):
                fh.write(json.dumps({"key": key, "vec": [float(x) for x in self[key]]}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "EmbeddingStore":
        store = cls()
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key, vec = rec["key"], rec["vec"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise StoreFormatError(f"{path}:{lineno}: bad record") from exc
                if key in store:
                    raise StoreFormatError(f"{path}:{lineno}: duplicate key {key!r}")
                store[key] = vec
        return store

    def save_binary(self, path) -> None:
        dim = self.dim or 0
        with open(path, "wb") as fh:
            fh.write(self.MAGIC + struct.pack("<I", dim))
            for key in sorted(self):
                kb = key.encode()
                fh.write(struct.pack("<H", len(kb)) + kb)
                fh.write(np.asarray(self[key], dtype="<f4").tobytes())

    @classmethod
    def load_binary(cls, path) -> "EmbeddingStore":
        data = Path(path).read_bytes()
        if data[:4] != cls.MAGIC or len(data) < 8:
            raise StoreFormatError(f"{path}: not an EMB1 file")
        (dim,) = struct.unpack_from("<I", data, 4)
        pos, store = 8, cls()
        while pos < len(data):
            if pos + 2 > len(data):
                raise StoreFormatError(f"{path}: truncated record header")
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            end = pos + klen + 4 * dim
            if end > len(data):
                raise StoreFormatError(f"{path}: truncated record")
            key = data[pos:pos + klen].decode()
            store[key] = np.frombuffer(data[pos + klen:end], dtype="<f4")
            pos = end
        return store

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            head = fh.read(4)
        return cls.load_binary(path) if head == cls.MAGIC else cls.load_jsonl(path)


class StoreProvider:
    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.dim = store.dim

    def _get(self, key: str) -> np.ndarray:
        try:
            return np.asarray(self.store[key], dtype=np.float64)
        except KeyError:
            raise KeyNotFound(key) from None

    def embed_text(self, s: str) -> np.ndarray:
        return self._get(s)

    def embed_visual(self, scene: Scene, index: int) -> np.ndarray:
        _check_index(scene, index)
        return self._get(scene.crop_key(index))


class HttpProvider:
    """Remote encoder: ``POST /embed_text`` and ``POST /embed_image`` returning ``{"vec": [...]}``."""

    def __init__(self, url: Optional[str] = None, timeout: float = 30.0):
        self.url = (url or os.environ.get("PLACE_ENCODER_URL") or "").rstrip("/")
        if not self.url:
            raise ProviderUnavailable("no encoder endpoint configured (set PLACE_ENCODER_URL)")
        self.timeout = timeout
        self.dim = None

    def _post(self, route: str, payload: dict) -> np.ndarray:
        req = urllib.request.Request(self.url + route, data=json.dumps(payload).encode(),
                                     method="POST", headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                vec = np.asarray(json.loads(resp.read())["vec"], dtype=np.float64)
        except urllib.error.HTTPError as exc:
            raise ProviderUnavailable(f"{route}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ProviderUnavailable(f"{route}: {exc}") from exc
        try:
            return normalize(vec)
        except ValueError as exc:
            raise ProviderUnavailable(f"{route}: degenerate vector") from exc

    def embed_text(self, s: str) -> np.ndarray:
        return self._post("/embed_text", {"text": s})

    def embed_visual(self, scene: Scene, index: int) -> np.ndarray:
        _check_index(scene, index)
        if scene.raster is None:
            raise ProviderUnavailable("scene has no raster to upload")
        img = scene.raster.pixels
        if index < scene.n_objects:
            obj = scene.objects[index]
            bbox = obj.raster_bbox or scene.raster.bbox_for(obj.aabb)
            img = crop_raster(img, bbox)
        payload = base64.b64encode(encode_ppm(img)).decode("ascii")
        return self._post("/embed_image", {"png_or_ppm_base64": payload})


def tokenize_scene(provider, scene: Scene, tuples: Sequence[Tuple]) -> tuple[np.ndarray, np.ndarray]:
    """Visual tokens ``V`` ((N+1) x D, workspace last) and textual tokens ``T`` (L x D)."""
    if not tuples:
        raise ValueError("need at least one tuple")
    V = np.stack([provider.embed_visual(scene, i) for i in range(scene.n_tokens)])
    T = np.stack([provider.embed_text(t.render()) for t in tuples])
    return V, T


def build_store(provider, scenes: Iterable[Scene], texts: Iterable[str]) -> EmbeddingStore:
    store = EmbeddingStore()
    for scene in scenes:
        for i in range(scene.n_tokens):
            store[scene.crop_key(i)] = provider.embed_visual(scene, i)
    for s in texts:
        store[s] = provider.embed_text(s)
    return store
