"""Persistent embedding catalogue: exact k-NN identity matching, k-means
grouping of new encounter images, and consistency checking.

Store file layout (little-endian):
  magic     8 bytes  b"FINSTORE"
  version   u32      (currently 1)
  dim       u32      embedding dimension D
  count     u64      number of entries
  model     64 bytes ascii sha256 hex of the checkpoint that produced the
                     embeddings (zero-padded)
  entries   count records of:
    image_id     64 bytes utf-8, zero padded
    identity_id  64 bytes utf-8, zero padded
    date         10 bytes ascii YYYY-MM-DD
    pad          2 bytes zeros
    embedding    D float64
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StoreError

MAGIC = b"FINSTORE"
STORE_VERSION = 1
_ID_BYTES = 64
_DATE_BYTES = 10
_HEADER = struct.Struct("<8sIIQ64s")


@dataclass
class CatalogueEntry:
    image_id: str
    identity_id: str
    date: str
    embedding: np.ndarray


@dataclass
class CatalogueStore:
    dim: int
    fingerprint: str  # sha256 hex of the producing checkpoint
    entries: list[CatalogueEntry] = field(default_factory=list)
    version: int = STORE_VERSION

    def __post_init__(self):
        if len(self.fingerprint) != 64:
            raise StoreError(
                f"catalogue: fingerprint must be a 64-char sha256 hex, got {len(self.fingerprint)} chars"
            )
        self._ids = {e.image_id for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, records, embeddings: np.ndarray, fingerprint: str) -> None:
        """Append (record, embedding) pairs produced under self.fingerprint."""
        if fingerprint != self.fingerprint:
            raise StoreError(
                "catalogue: embedding fingerprint does not match the store "
                f"({fingerprint[:12]}... vs {self.fingerprint[:12]}...)"
            )
        embeddings = np.asarray(embeddings, dtype=np.float64)
        records = list(records)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(records):
            raise StoreError(
                f"catalogue: {len(records)} records with embedding block {embeddings.shape}"
            )
        if embeddings.shape[1] != self.dim:
            raise StoreError(
                f"catalogue: embeddings of dimension {embeddings.shape[1]}, store holds {self.dim}"
            )
        for rec, row in zip(records, embeddings):
            image_id = rec.image_id if hasattr(rec, "image_id") else str(rec[0])
            identity_id = rec.identity_id if hasattr(rec, "identity_id") else str(rec[1])
            date = rec.date if hasattr(rec, "date") else str(rec[2])
            if image_id in self._ids:
                raise StoreError(f"catalogue: duplicate image_id {image_id!r}")
            _encode_id(image_id)  # validate length early
            _encode_id(identity_id)
            _encode_date(date)
            self._ids.add(image_id)
            self.entries.append(
                CatalogueEntry(image_id, identity_id, date, np.array(row, dtype=np.float64))
            )

    def identities(self) -> list[str]:
        return sorted({e.identity_id for e in self.entries})


def _encode_id(value: str) -> bytes:
    raw = value.encode("utf-8")
    if not raw or len(raw) > _ID_BYTES:
        raise StoreError(f"catalogue: id {value!r} must encode to 1..{_ID_BYTES} utf-8 bytes")
    return raw.ljust(_ID_BYTES, b"\x00")


def _encode_date(value: str) -> bytes:
    raw = value.encode("ascii")
    if len(raw) != _DATE_BYTES:
        raise StoreError(f"catalogue: date {value!r} must be exactly YYYY-MM-DD")
    return raw


def store_save(store: CatalogueStore, path: str) -> None:
    header = _HEADER.pack(
        MAGIC,
        store.version,
        store.dim,
        len(store.entries),
        store.fingerprint.encode("ascii").ljust(64, b"\x00"),
    )
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        for e in store.entries:
            fh.write(_encode_id(e.image_id))
            fh.write(_encode_id(e.identity_id))
            fh.write(_encode_date(e.date))
            fh.write(b"\x00\x00")
            fh.write(np.ascontiguousarray(e.embedding, dtype="<f8").tobytes())
    os.replace(tmp, path)


def store_load(path: str) -> CatalogueStore:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise StoreError(f"catalogue: store not found: {path}") from None
    if len(raw) < _HEADER.size:
        raise StoreError(f"catalogue: {path} is truncated (header)")
    magic, version, dim, count, fp_raw = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StoreError(f"catalogue: {path} is not a finid store")
    if version != STORE_VERSION:
        raise StoreError(f"catalogue: {path} is version {version}, expected {STORE_VERSION}")
    entry_size = _ID_BYTES * 2 + _DATE_BYTES + 2 + 8 * dim
    expected = _HEADER.size + entry_size * count
    if len(raw) != expected:
        raise StoreError(
            f"catalogue: {path} holds {len(raw)} bytes, header promises {expected}"
        )
    fingerprint = fp_raw.rstrip(b"\x00").decode("ascii")
    entries = []
    offset = _HEADER.size
    for _ in range(count):
        image_id = raw[offset : offset + _ID_BYTES].rstrip(b"\x00").decode("utf-8")
        offset += _ID_BYTES
        identity_id = raw[offset : offset + _ID_BYTES].rstrip(b"\x00").decode("utf-8")
        offset += _ID_BYTES
        date = raw[offset : offset + _DATE_BYTES].decode("ascii")
        offset += _DATE_BYTES + 2
        emb = np.frombuffer(raw[offset : offset + 8 * dim], dtype="<f8").astype(np.float64)
        offset += 8 * dim
        entries.append(CatalogueEntry(image_id, identity_id, date, emb))
    return CatalogueStore(dim=dim, fingerprint=fingerprint, entries=entries, version=version)


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchItem:
    identity_id: str
    distance: float
    image_ids: list[str]  # that identity's images, nearest first


@dataclass
class MatchResult:
    items: list[MatchItem]


def match(store: CatalogueStore, query_embedding: np.ndarray, k_ids: int, score: str = "min") -> MatchResult:
    """Exhaustive exact search; identities ranked by their best (or mean)
    distance to the query, ties broken by identity id."""
    if not store.entries:
        raise StoreError("catalogue: cannot match against an empty store")
    if k_ids < 1:
        raise StoreError(f"catalogue: k_ids must be >= 1, got {k_ids}")
    if score not in ("min", "mean"):
        raise StoreError(f"catalogue: unknown score rule {score!r}")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (store.dim,):
        raise StoreError(f"catalogue: query of shape {q.shape}, store holds dimension {store.dim}")

    matrix = np.stack([e.embedding for e in store.entries])
    diff = matrix - q[None, :]
    dists = np.sqrt((diff * diff).sum(axis=1))

    per_identity: dict[str, list[tuple[float, str]]] = {}
    for entry, d in zip(store.entries, dists):
        per_identity.setdefault(entry.identity_id, []).append((float(d), entry.image_id))
    scored = []
    for identity, pairs in per_identity.items():
        pairs.sort()
        value = pairs[0][0] if score == "min" else float(np.mean([p[0] for p in pairs]))
        scored.append((value, identity, [img for _, img in pairs]))
    scored.sort(key=lambda t: (t[0], t[1]))
    items = [MatchItem(identity_id=i, distance=v, image_ids=imgs) for v, i, imgs in scored[:k_ids]]
    return MatchResult(items=items)


# ---------------------------------------------------------------------------
# k-means grouping


def kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (assignments, centers, inertia per iteration). Deterministic
    given the rng; converges when assignments stop changing.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise StoreError(f"catalogue: k={k} outside [1, {n}]")

    centers = np.empty((k, x.shape[1]))
    chosen: list[int] = [int(rng.integers(n))]
    centers[0] = x[chosen[0]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass at existing centers: take the lowest-index
            # point not yet chosen so that k distinct points seed k clusters
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    assignments = np.full(n, -1, dtype=np.intp)
    inertia_history: list[float] = []
    for _ in range(max_iter):
        d2_all = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignments = d2_all.argmin(axis=1)
        inertia_history.append(float(d2_all[np.arange(n), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            mask = assignments == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
    return assignments, centers, inertia_history


def group_encounter(embeddings: np.ndarray, k_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Cluster encounter images by embedding; returns a cluster id per image."""
    assignments, _, _ = kmeans(embeddings, k_clusters, rng)
    return assignments


# ---------------------------------------------------------------------------
# consistency checking


@dataclass(frozen=True)
class ConsistencyFlag:
    kind: str  # "intra_far" | "inter_near"
    image_a: str
    image_b: str
    identity_a: str
    identity_b: str
    distance: float


def default_thresholds(store: CatalogueStore) -> tuple[float | None, float | None]:
    """(intra, inter) thresholds from the store itself: 95th percentile of
    same-identity distances and 5th percentile of cross-identity distances."""
    same, cross = [], []
    matrix = np.stack([e.embedding for e in store.entries])
    idents = [e.identity_id for e in store.entries]
    for i in range(len(store.entries)):
        diff = matrix[i + 1 :] - matrix[i]
        dists = np.sqrt((diff * diff).sum(axis=1))
        for j, d in enumerate(dists, start=i + 1):
            (same if idents[i] == idents[j] else cross).append(float(d))
    intra = float(np.percentile(same, 95)) if same else None
    inter = float(np.percentile(cross, 5)) if cross else None
    return intra, inter


def consistency_check(
    store: CatalogueStore,
    intra_threshold: float | None = None,
    inter_threshold: float | None = None,
) -> list[ConsistencyFlag]:
    """Flag same-identity pairs farther than intra_threshold (possible
    mislabel/split) and cross-identity pairs closer than inter_threshold
    (possible duplicate identity)."""
    if intra_threshold is not None and intra_threshold <= 0:
        raise StoreError(f"catalogue: intra threshold must be positive, got {intra_threshold}")
    if inter_threshold is not None and inter_threshold <= 0:
        raise StoreError(f"catalogue: inter threshold must be positive, got {inter_threshold}")
    if intra_threshold is None or inter_threshold is None:
        auto_intra, auto_inter = default_thresholds(store)
        intra_threshold = auto_intra if intra_threshold is None else intra_threshold
        inter_threshold = auto_inter if inter_threshold is None else inter_threshold

    entries = store.entries
    matrix = np.stack([e.embedding for e in entries])
    flags: list[ConsistencyFlag] = []
    for i in range(len(entries)):
        diff = matrix[i + 1 :] - matrix[i]
        dists = np.sqrt((diff * diff).sum(axis=1))
        for j, d in enumerate(dists, start=i + 1):
            a, b = entries[i], entries[j]
            pair = sorted([(a.image_id, a.identity_id), (b.image_id, b.identity_id)])
            if a.identity_id == b.identity_id:
                if intra_threshold is not None and d > intra_threshold:
                    flags.append(
                        ConsistencyFlag("intra_far", pair[0][0], pair[1][0], pair[0][1], pair[1][1], float(d))
                    )
            elif inter_threshold is not None and d < inter_threshold:
                flags.append(
                    ConsistencyFlag("inter_near", pair[0][0], pair[1][0], pair[0][1], pair[1][1], float(d))
                )
    flags.sort(key=lambda f: (f.kind, f.image_a, f.image_b))
    return flags
