"""HDR image io and comparison metrics.

Renders are exchanged as PFM (portable float map): a three line ASCII
header followed by raw 32-bit floats, rows stored bottom-up.  Only the
color variant ("PF") with little-endian payload is produced here; the
reader additionally accepts big-endian files since the sign of the
scale field is the only thing that distinguishes them.

The error metric is a mean absolute percentage error with a small
denominator floor so dark pixels do not dominate.  It is asymmetric on
purpose: the reference goes in the denominator.
"""

from __future__ import annotations

import numpy as np

from .pathtracer import Image

__all__ = ["write_pfm", "read_pfm", "mape", "tonemap_srgb", "write_png"]


def write_pfm(path, image: Image) -> None:
    """Write a color PFM file, little-endian, bottom-up row order."""
    px = np.asarray(image.pixels, dtype=np.float64)
    if px.shape != (image.height, image.width, 3):
        raise ValueError(f"pixel block {px.shape} does not match image size")
    if not np.all(np.isfinite(px)):
        raise ValueError("refusing to write non-finite pixels")
    header = f"PF\n{image.width} {image.height}\n-1.0\n".encode("ascii")
    # PFM stores the bottom scanline first.
    payload = np.flipud(px).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _take_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace, then scoop one run of non-whitespace bytes
    n = len(buf)
    while pos < n and buf[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("malformed pfm header: truncated")
    return buf[start:pos], pos


def read_pfm(path) -> Image:
    """Read a color PFM file written by :func:`write_pfm` or compatible."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _take_token(buf, 0)
    if magic == b"Pf":
        raise ValueError("grayscale pfm (Pf) is not supported, expected color (PF)")
    if magic != b"PF":
        raise ValueError(f"malformed pfm header: bad magic {magic!r}")
    wtok, pos = _take_token(buf, pos)
    htok, pos = _take_token(buf, pos)
    stok, pos = _take_token(buf, pos)
    try:
        width = int(wtok)
        height = int(htok)
        scale = float(stok)
    except ValueError as exc:
        raise ValueError(f"malformed pfm header: {exc}") from None
    if width <= 0 or height <= 0:
        raise ValueError(f"malformed pfm header: bad dimensions {width}x{height}")
    if scale == 0.0 or not np.isfinite(scale):
        raise ValueError(f"malformed pfm header: bad scale {scale}")
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    dtype = "<f4" if scale < 0.0 else ">f4"
    need = width * height * 3 * 4
    if len(buf) - pos < need:
        raise ValueError("malformed pfm payload: truncated")
    if len(buf) - pos > need:
        raise ValueError("malformed pfm payload: trailing bytes")
    flat = np.frombuffer(buf, dtype=dtype, count=width * height * 3, offset=pos)
    rows = flat.reshape(height, width, 3).astype(np.float64)
    return Image(width=width, height=height, pixels=np.flipud(rows).copy())


def mape(image, reference, eps: float = 0.01) -> float:
    """Mean absolute percentage error over all pixels and channels.

    ``mean(|image - reference| / (reference + eps))``.  The floor keeps
    near-black reference pixels from blowing up the ratio.
    """
    a = np.asarray(image.pixels if isinstance(image, Image) else image, dtype=np.float64)
    b = np.asarray(
        reference.pixels if isinstance(reference, Image) else reference, dtype=np.float64
    )
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty image")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    return float(np.mean(np.abs(a - b) / (b + eps)))


def tonemap_srgb(pixels: np.ndarray) -> np.ndarray:
    """Reinhard tonemap followed by sRGB encoding, returns uint8."""
    x = np.asarray(pixels, dtype=np.float64)
    x = np.clip(x, 0.0, None)
    x = x / (1.0 + x)
    lin = x <= 0.0031308
    enc = np.where(lin, 12.92 * x, 1.055 * np.power(np.maximum(x, 1e-12), 1.0 / 2.4) - 0.055)
    return np.clip(np.round(enc * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: Image) -> None:
    """Tonemapped 8-bit preview next to the HDR output."""
    from PIL import Image as PILImage

    PILImage.fromarray(tonemap_srgb(image.pixels), mode="RGB").save(path)
