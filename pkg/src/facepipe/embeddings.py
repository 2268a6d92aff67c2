"""Identity embeddings: file container plus a synthetic stand-in embedder.

Real 512-d identity embeddings are produced by an external recognition
network and ingested from the container format below. The synthetic
embedder replaces that network at desk scale: it maps shape coefficients
through a fixed orthonormal projection, adds per-image nuisance noise in
a complementary subspace (so the many images of one shape agree on shape
but differ in appearance), and normalizes to the unit sphere.

Container layout: b"EMBS" | uint32 index length | JSON index
{"dim", "offsets": {image_id: byte offset}} | little-endian float32
blocks of ``dim`` values each.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .seeds import substream_rng

EMBEDDING_DIM = 512
_MAGIC = b"EMBS"


class EmbeddingError(ValueError):
    pass


class EmbeddingNotFoundError(KeyError):
    pass


@dataclass
class Embedding:
    image_id: str
    vector: np.ndarray  # [512] float32, unit norm

    def validate(self) -> None:
        if self.vector.shape != (EMBEDDING_DIM,):
            raise EmbeddingError(
                f"{self.image_id}: vector shape {self.vector.shape}, expected ({EMBEDDING_DIM},)"
            )
        if not np.all(np.isfinite(self.vector)):
            raise EmbeddingError(f"{self.image_id}: non-finite embedding")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-5:
            raise EmbeddingError(f"{self.image_id}: embedding norm {norm:.6g}, expected 1")


@dataclass
class SyntheticEmbedder:
    projection: np.ndarray       # [512, n_beta], orthonormal columns
    nuisance_basis: np.ndarray   # [512, q], orthonormal, complementary to projection
    nuisance_scale: float
    seed: int

    @property
    def n_beta(self) -> int:
        return self.projection.shape[1]


def make_synthetic_embedder(
    seed: int,
    n_beta: int,
    nuisance_dims: int = 256,
    nuisance_scale: float = 0.3,
) -> SyntheticEmbedder:
    """Seeded embedder; projection and nuisance span orthogonal subspaces."""
    if n_beta + nuisance_dims > EMBEDDING_DIM:
        raise EmbeddingError("n_beta + nuisance_dims exceeds the embedding dimension")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((EMBEDDING_DIM, n_beta + nuisance_dims))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))[None, :]
    embedder = SyntheticEmbedder(
        projection=q[:, :n_beta].copy(),
        nuisance_basis=q[:, n_beta:].copy(),
        nuisance_scale=float(nuisance_scale),
        seed=seed,
    )
    smallest = np.linalg.svd(embedder.projection, compute_uv=False).min()
    if smallest <= 1e-6:  # pragma: no cover - QR guarantees this
        raise EmbeddingError("projection lost column rank")
    return embedder


def synth_embed(embedder: SyntheticEmbedder, beta: np.ndarray, image_id: str) -> Embedding:
    """Deterministic embedding of one image: shared shape signal plus
    image-specific nuisance, normalized to the unit sphere."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (embedder.n_beta,):
        raise EmbeddingError(
            f"beta length {beta.shape} does not match projection columns ({embedder.n_beta},)"
        )
    vec = embedder.projection @ beta
    if embedder.nuisance_scale != 0.0:
        eta = substream_rng(embedder.seed, "nuisance", image_id).standard_normal(
            embedder.nuisance_basis.shape[1]
        )
        vec = vec + embedder.nuisance_scale * (embedder.nuisance_basis @ eta)
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        raise EmbeddingError(f"{image_id}: embedding collapsed to zero")
    return Embedding(image_id=image_id, vector=(vec / norm).astype(np.float32))


class EmbeddingSet:
    """In-memory collection with id lookup, backed by the container format."""

    def __init__(self, embeddings: list[Embedding]):
        for e in embeddings:
            e.validate()
        self._ids = [e.image_id for e in embeddings]
        self._index = {e.image_id: i for i, e in enumerate(embeddings)}
        if len(self._index) != len(self._ids):
            raise EmbeddingError("duplicate image_id in embedding set")
        self._matrix = (
            np.stack([e.vector for e in embeddings])
            if embeddings else np.zeros((0, EMBEDDING_DIM), dtype=np.float32)
        )

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def ids(self) -> list[str]:
        return list(self._ids)

    def get(self, image_id: str) -> np.ndarray:
        try:
            return self._matrix[self._index[image_id]]
        except KeyError:
            raise EmbeddingNotFoundError(f"no embedding for image_id {image_id!r}") from None

    __getitem__ = get

    def items(self):
        for i, image_id in enumerate(self._ids):
            yield image_id, self._matrix[i]


def write_embeddings(embeddings: list[Embedding], path: str) -> None:
    """Write the container; vectors are validated before anything is written."""
    for e in embeddings:
        e.validate()
    ids = [e.image_id for e in embeddings]
    if len(set(ids)) != len(ids):
        raise EmbeddingError("duplicate image_id in embedding list")
    offsets = {e.image_id: i * EMBEDDING_DIM * 4 for i, e in enumerate(embeddings)}
    index = {"version": 1, "dim": EMBEDDING_DIM, "offsets": offsets}
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for e in embeddings:
        buf.write(e.vector.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_embeddings(path: str) -> EmbeddingSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise EmbeddingError("bad embedding container magic")
    (index_len,) = struct.unpack_from("<I", data, 4)
    try:
        index = json.loads(data[8:8 + index_len].decode("utf-8"))
        dim = int(index["dim"])
        offsets = index["offsets"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise EmbeddingError(f"corrupt embedding index: {e}") from e
    if dim != EMBEDDING_DIM:
        raise EmbeddingError(f"unsupported embedding dimension {dim}")
    base = 8 + index_len
    embeddings = []
    for image_id, offset in sorted(offsets.items(), key=lambda kv: kv[1]):
        start = base + int(offset)
        end = start + dim * 4
        if end > len(data):
            raise EmbeddingError(f"container truncated at {image_id}")
        vec = np.frombuffer(data[start:end], dtype="<f4").copy()
        embeddings.append(Embedding(image_id=image_id, vector=vec))
    return EmbeddingSet(embeddings)
