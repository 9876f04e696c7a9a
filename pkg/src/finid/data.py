"""Dataset manifests, PK batch sampling, and training-time augmentation.

A manifest is a list of labelled image records (identity, encounter date,
pixels). The file format is line-delimited JSON; pixels are either embedded
as a base64 raw buffer or referenced as a PNG/PGM path resolved at load.
"""

from __future__ import annotations

import datetime
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifestError
from .imageops import (
    decode_pixels,
    encode_pixels,
    hsv_to_rgb,
    read_image,
    resize_bilinear,
    rgb_to_hsv,
    rotate_bilinear,
)


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    identity_id: str
    date: str  # ISO-8601 calendar date
    pixels: np.ndarray  # (C, S, S) float64 in [0, 1]


class Manifest:
    """Immutable ordered collection of ImageRecords with identity indexes."""

    def __init__(self, records: list[ImageRecord]):
        if not records:
            raise ManifestError("data: manifest holds no records")
        seen: set[str] = set()
        by_identity: dict[str, list[ImageRecord]] = {}
        for rec in records:
            if rec.image_id in seen:
                raise ManifestError(f"data: duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            by_identity.setdefault(rec.identity_id, []).append(rec)
        self.records: list[ImageRecord] = list(records)
        self.by_identity: dict[str, list[ImageRecord]] = by_identity
        self.dates_by_identity: dict[str, tuple[str, ...]] = {
            ident: tuple(sorted({r.date for r in recs})) for ident, recs in by_identity.items()
        }

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def identities(self) -> list[str]:
        return sorted(self.by_identity)

    def subset(self, identity_ids) -> "Manifest":
        keep = set(identity_ids)
        records = [r for r in self.records if r.identity_id in keep]
        if not records:
            raise ManifestError("data: identity subset selects no records")
        return Manifest(records)

    def cap_images_per_identity(self, cap: int, rng: np.random.Generator) -> "Manifest":
        """Random per-identity subset of at most cap images."""
        if cap < 1:
            raise ManifestError(f"data: image cap must be >= 1, got {cap}")
        kept_ids: set[str] = set()
        for ident in self.identities:
            recs = self.by_identity[ident]
            if len(recs) <= cap:
                kept_ids.update(r.image_id for r in recs)
            else:
                picks = rng.choice(len(recs), size=cap, replace=False)
                kept_ids.update(recs[i].image_id for i in picks)
        return Manifest([r for r in self.records if r.image_id in kept_ids])


def _validate_record(image_id: str, identity_id: str, date: str, pixels: np.ndarray, where: str) -> ImageRecord:
    if not image_id:
        raise ManifestError(f"data: {where}: empty image_id")
    if not identity_id:
        raise ManifestError(f"data: {where}: empty identity_id")
    try:
        datetime.date.fromisoformat(date)
    except ValueError:
        raise ManifestError(f"data: {where}: bad date {date!r} (expected YYYY-MM-DD)") from None
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ManifestError(f"data: {where}: pixels must be (C, H, W), got shape {pixels.shape}")
    if pixels.size == 0:
        raise ManifestError(f"data: {where}: empty pixel array")
    if float(pixels.min()) < 0.0 or float(pixels.max()) > 1.0:
        raise ManifestError(
            f"data: {where}: pixel values outside [0, 1] "
            f"(min {float(pixels.min()):.4g}, max {float(pixels.max()):.4g})"
        )
    return ImageRecord(image_id=image_id, identity_id=identity_id, date=date, pixels=pixels)


def load_manifest(path: str) -> Manifest:
    """Parse a JSONL manifest; every violation names the offending line."""
    if not os.path.exists(path):
        raise ManifestError(f"data: manifest file not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{os.path.basename(path)} line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"data: {where}: invalid JSON ({exc.msg})") from None
            for key in ("image_id", "identity_id", "date"):
                if key not in obj:
                    raise ManifestError(f"data: {where}: missing field {key!r}")
            if "pixels" in obj:
                pixels = decode_pixels(obj["pixels"])
            elif "path" in obj:
                img_path = obj["path"]
                if not os.path.isabs(img_path):
                    img_path = os.path.join(base_dir, img_path)
                pixels = read_image(img_path)
            else:
                raise ManifestError(f"data: {where}: record needs 'pixels' or 'path'")
            rec = _validate_record(str(obj["image_id"]), str(obj["identity_id"]), str(obj["date"]), pixels, where)
            if rec.image_id in seen:
                raise ManifestError(f"data: {where}: duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            records.append(rec)
    if not records:
        raise ManifestError(f"data: manifest {path} holds no records")
    return Manifest(records)


def save_manifest(manifest: Manifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            obj = {
                "image_id": rec.image_id,
                "identity_id": rec.identity_id,
                "date": rec.date,
                "pixels": encode_pixels(rec.pixels),
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


@dataclass
class PKBatch:
    """K images from each of P identities, stacked in identity-major order."""

    records: list[ImageRecord]
    labels: list[str]
    rng_state: dict = field(repr=False, default=None)

    @property
    def images(self) -> np.ndarray:
        return np.stack([r.pixels for r in self.records])


def pk_sample(manifest: Manifest, p: int, k: int, rng: np.random.Generator) -> PKBatch:
    """Draw P identities uniformly without replacement, then K images per
    identity (with replacement only when the identity has fewer than K)."""
    if p < 2 or k < 2:
        raise ManifestError(f"data: PK sampling needs P >= 2 and K >= 2, got P={p}, K={k}")
    identities = manifest.identities
    if len(identities) < p:
        raise ManifestError(
            f"data: manifest has {len(identities)} identities, PK sampling needs P={p}"
        )
    state = rng.bit_generator.state
    chosen = rng.choice(len(identities), size=p, replace=False)
    records: list[ImageRecord] = []
    labels: list[str] = []
    for idx in chosen:
        ident = identities[int(idx)]
        recs = manifest.by_identity[ident]
        if len(recs) >= k:
            picks = list(rng.choice(len(recs), size=k, replace=False))
        else:
            picks = list(range(len(recs)))
            picks += list(rng.integers(0, len(recs), size=k - len(recs)))
        for i in picks:
            records.append(recs[int(i)])
            labels.append(ident)
    return PKBatch(records=records, labels=labels, rng_state=state)


def truncated_normal(rng: np.random.Generator, mu: float, sigma: float, bound: float) -> float:
    """Rejection-sampled normal truncated to |x - mu| <= bound."""
    while True:
        value = rng.normal(mu, sigma)
        if abs(value - mu) <= bound:
            return float(value)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    hue_delta_max: float = 0.1,
    sat_low: float = 0.9,
    sat_high: float = 1.1,
    rotation_sigma: float = 5.0,
    rotation_max: float = 10.0,
) -> np.ndarray:
    """Training-time augmentation: hue shift U(0, 0.1) with wrap-around,
    saturation factor U(0.9, 1.1), rotation by a truncated-normal angle.
    Grayscale images skip the colour ops."""
    out = np.asarray(image, dtype=np.float64)
    if out.shape[0] == 3:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + rng.uniform(0.0, hue_delta_max)) % 1.0
        hsv[1] = np.clip(hsv[1] * rng.uniform(sat_low, sat_high), 0.0, 1.0)
        out = hsv_to_rgb(hsv)
    angle = truncated_normal(rng, 0.0, rotation_sigma, rotation_max)
    out = rotate_bilinear(out, angle)
    return np.clip(out, 0.0, 1.0)


def resize(image: np.ndarray, side: int) -> np.ndarray:
    if side < 8:
        raise ManifestError(f"data: resize target must be >= 8 pixels, got {side}")
    out = resize_bilinear(np.asarray(image, dtype=np.float64), side)
    return np.clip(out, 0.0, 1.0)
