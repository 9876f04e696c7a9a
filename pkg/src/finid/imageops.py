"""Raster helpers: bilinear resampling, HSV conversion, image file io.

Images are channel-first float64 arrays (C, H, W) with values in [0, 1].
All resampling uses the half-pixel-center convention and replicates edge
pixels for out-of-frame samples.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

from .errors import ManifestError


def bilinear_sample(channel: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a single channel at float coordinates, clamping to the edges."""
    h, w = channel.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = channel[y0, x0] * (1.0 - fx) + channel[y0, x1] * fx
    bottom = channel[y1, x0] * (1.0 - fx) + channel[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def resize_bilinear(image: np.ndarray, side: int) -> np.ndarray:
    """Resample to side x side. Identity geometry maps pixel centers to
    pixel centers, so resizing to the same side is exact."""
    c, h, w = image.shape
    ys = (np.arange(side) + 0.5) * (h / side) - 0.5
    xs = (np.arange(side) + 0.5) * (w / side) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([bilinear_sample(image[k], grid_y, grid_x) for k in range(c)])


_CENTERED_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _centered_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cached = _CENTERED_GRID_CACHE.get((h, w))
    if cached is None:
        rows, cols = np.meshgrid(
            np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
        )
        cached = (rows - (h - 1) / 2.0, cols - (w - 1) / 2.0)
        _CENTERED_GRID_CACHE[(h, w)] = cached
    return cached


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; out-of-frame pixels replicate edges."""
    c, h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = _centered_grid(h, w)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return np.stack([bilinear_sample(image[k], src_y, src_x) for k in range(c)])


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0,1] -> HSV with hue scaled to [0, 1)."""
    r, g, b = image[0], image[1], image[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    with np.errstate(invalid="ignore", divide="ignore"):
        rc = (maxc - r) / delta
        gc = (maxc - g) / delta
        bc = (maxc - b) / delta
    h = np.select(
        [delta == 0, maxc == r, maxc == g],
        [0.0, bc - gc, 2.0 + rc - bc],
        default=4.0 + gc - rc,
    )
    h = (h / 6.0) % 1.0
    return np.stack([h, s, v])


def hsv_to_rgb(image: np.ndarray) -> np.ndarray:
    h, s, v = image[0], image[1], image[2]
    i = np.floor(h * 6.0).astype(np.intp) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def read_image(path: str) -> np.ndarray:
    """Load a PNG or PGM file as (C, H, W) float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode == "L" or im.format == "PPM" and im.mode == "L":
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
                return arr[None]
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            return arr.transpose(2, 0, 1)
    except FileNotFoundError:
        raise ManifestError(f"data: image file not found: {path}") from None
    except Exception as exc:  # Pillow raises a family of decode errors
        raise ManifestError(f"data: cannot decode image {path}: {exc}") from None


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def png_bytes(image: np.ndarray) -> bytes:
    c = image.shape[0]
    if c == 1:
        pil = Image.fromarray(to_uint8(image)[0], mode="L")
    else:
        pil = Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def write_png(image: np.ndarray, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(png_bytes(image))


def encode_pixels(arr: np.ndarray) -> dict:
    """Pixel payload for manifest records: little-endian raw buffer + shape."""
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "dtype": "f8",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_pixels(payload: dict) -> np.ndarray:
    shape = tuple(int(v) for v in payload["shape"])
    dtype = payload.get("dtype", "f8")
    if dtype not in ("f4", "f8"):
        raise ManifestError(f"data: unsupported pixel dtype {dtype!r}")
    raw = base64.b64decode(payload["data"])
    arr = np.frombuffer(raw, dtype="<" + dtype)
    if arr.size != int(np.prod(shape)):
        raise ManifestError(
            f"data: pixel buffer holds {arr.size} values, shape {shape} needs {int(np.prod(shape))}"
        )
    return arr.reshape(shape).astype(np.float64)
