"""Synthetic fin-image generator.

Each identity is a parametric dorsal-fin silhouette: smooth leading and
trailing edges plus an identity-specific pattern of trailing-edge notches
(count, positions, depths). Images add per-shot nuisance (rotation, scale,
jitter, brightness, background gradient, noise) and a lighting offset
shared by all images of one identity-day, so same-day shots correlate the
way field encounters do.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass

import numpy as np

from .data import ImageRecord, Manifest
from .errors import ManifestError

_SUPERSAMPLE = 4
_BASE_DATE = datetime.date(2012, 3, 1)


@dataclass(frozen=True)
class FinShape:
    tip_x: float
    tip_y: float
    base_left: float
    base_right: float
    base_y: float
    lead_bulge: float
    trail_bulge: float
    trail_power: float
    notch_pos: tuple[float, ...]
    notch_depth: tuple[float, ...]
    notch_width: tuple[float, ...]


def identity_shape(seed: int, identity_index: int) -> FinShape:
    """The canonical silhouette parameters; a pure function of (seed, index)."""
    rng = np.random.default_rng([int(seed), 77, int(identity_index)])
    n_notches = int(rng.integers(1, 5))
    return FinShape(
        tip_x=float(rng.uniform(0.28, 0.55)),
        tip_y=float(rng.uniform(0.10, 0.32)),
        base_left=float(rng.uniform(0.08, 0.18)),
        base_right=float(rng.uniform(0.66, 0.88)),
        base_y=0.88,
        lead_bulge=float(rng.uniform(0.00, 0.17)),
        trail_bulge=float(rng.uniform(0.02, 0.22)),
        trail_power=float(rng.uniform(0.7, 1.3)),
        notch_pos=tuple(float(v) for v in np.sort(rng.uniform(0.15, 0.85, size=n_notches))),
        notch_depth=tuple(float(v) for v in rng.uniform(0.04, 0.11, size=n_notches)),
        notch_width=tuple(float(v) for v in rng.uniform(0.015, 0.05, size=n_notches)),
    )


def _edges(shape: FinShape, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left/right silhouette boundaries as functions of height fraction s."""
    x_left = (1.0 - s) * shape.base_left + s * shape.tip_x - shape.lead_bulge * np.sin(np.pi * s)
    x_right = (
        (1.0 - s) * shape.base_right
        + s * shape.tip_x
        + shape.trail_bulge * np.sin(np.pi * np.power(s, shape.trail_power))
    )
    notch = np.zeros_like(s)
    for pos, depth, width in zip(shape.notch_pos, shape.notch_depth, shape.notch_width):
        notch += depth * np.exp(-0.5 * ((s - pos) / width) ** 2)
    x_right = np.maximum(x_right - notch, x_left + 0.02)
    return x_left, x_right


def _silhouette_at(shape: FinShape, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of canonical-frame points (u right, v down) in the fin."""
    span = shape.base_y - shape.tip_y
    s = (shape.base_y - v) / span
    inside_band = (s >= 0.0) & (s <= 1.0)
    s_clamped = np.clip(s, 0.0, 1.0)
    x_left, x_right = _edges(shape, s_clamped)
    return (inside_band & (u >= x_left) & (u <= x_right)).astype(np.float64)


def render_silhouette(
    shape: FinShape,
    side: int,
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    jitter: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1], supersampled then box-averaged."""
    fine = side * _SUPERSAMPLE
    coords = (np.arange(fine) + 0.5) / fine
    v, u = np.meshgrid(coords, coords, indexing="ij")
    # Inverse-map display coordinates into the canonical frame.
    du = u - 0.5 - jitter[0]
    dv = v - 0.5 - jitter[1]
    theta = np.deg2rad(rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cu = (cos_t * du + sin_t * dv) / scale + 0.5
    cv = (-sin_t * du + cos_t * dv) / scale + 0.5
    mask = _silhouette_at(shape, cu, cv)
    return mask.reshape(side, _SUPERSAMPLE, side, _SUPERSAMPLE).mean(axis=(1, 3))


def canonical_silhouette(seed: int, identity_index: int, side: int) -> np.ndarray:
    return render_silhouette(identity_shape(seed, identity_index), side)


def _compose(
    mask: np.ndarray,
    rng: np.random.Generator,
    day_offset: float,
    side: int,
    channels: int,
) -> np.ndarray:
    fin_value = rng.uniform(0.12, 0.32)
    bg_lo, bg_hi = rng.uniform(0.60, 0.95, size=2)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    coords = (np.arange(side) + 0.5) / side
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    ramp = (np.cos(phi) * gx + np.sin(phi) * gy + 1.0) / 2.0
    background = bg_lo + (bg_hi - bg_lo) * ramp
    gray = mask * fin_value + (1.0 - mask) * background

    if channels == 3:
        tint = 1.0 + rng.uniform(-0.12, 0.12, size=3)
        img = np.stack([gray * t for t in tint])
    else:
        img = gray[None]
    img = img + day_offset + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(
    num_identities: int,
    images_per_identity: int,
    days_per_identity: int,
    side: int = 32,
    seed: int = 0,
    channels: int = 1,
    id_prefix: str = "id",
) -> Manifest:
    """Deterministic synthetic manifest of fin images.

    Images of one identity are spread as evenly as possible over
    days_per_identity distinct encounter dates.
    """
    if num_identities < 1 or images_per_identity < 1 or days_per_identity < 1:
        raise ManifestError(
            "data: synth_generate needs num_identities, images_per_identity and "
            "days_per_identity all >= 1"
        )
    if channels not in (1, 3):
        raise ManifestError(f"data: synth channels must be 1 or 3, got {channels}")

    records: list[ImageRecord] = []
    for idx in range(num_identities):
        shape = identity_shape(seed, idx)
        identity_id = f"{id_prefix}{idx:04d}"
        dates = [
            (_BASE_DATE + datetime.timedelta(days=(idx % 97) * 5 + d * 13)).isoformat()
            for d in range(days_per_identity)
        ]
        day_offsets = [
            float(np.random.default_rng([int(seed), 99, idx, d]).uniform(-0.08, 0.08))
            for d in range(days_per_identity)
        ]
        for j in range(images_per_identity):
            day = j % days_per_identity
            rng = np.random.default_rng([int(seed), 55, idx, j])
            mask = render_silhouette(
                shape,
                side,
                rotation_deg=rng.uniform(-8.0, 8.0),
                scale=rng.uniform(0.9, 1.1),
                jitter=(rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)),
            )
            pixels = _compose(mask, rng, day_offsets[day], side, channels)
            records.append(
                ImageRecord(
                    image_id=f"{identity_id}-im{j:03d}",
                    identity_id=identity_id,
                    date=dates[day],
                    pixels=pixels,
                )
            )
    return Manifest(records)
