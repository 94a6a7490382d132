"""Dense rasters: sampling, backward warping, masks, fusion and file I/O.

Images are float64 arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1]. Masks are float64 arrays of shape (H, W). Flows use the backward
convention: output pixel p samples the input at p + (dx, dy).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ContractViolation, SchemaError

# Sample coordinates this close to an integer are snapped onto it, so that
# round-off from homography products does not perturb exact pixel lookups.
SNAP_EPS = 1e-9
BINARY_THRESHOLD = 0.999

FLOW_MAGIC = b"WFF1"


@dataclass
class FlowField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.dx.ndim != 2 or self.dx.shape != self.dy.shape:
            raise ContractViolation(
                f"flow components must be equal 2-D arrays, got {self.dx.shape} and {self.dy.shape}")
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise ContractViolation("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def stacked(self) -> np.ndarray:
        """(H, W, 2) view of the displacement."""
        return np.stack([self.dx, self.dy], axis=-1)


def as_image(arr) -> np.ndarray:
    """Validate and normalize an image array to (H, W, C) float64."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ContractViolation(f"image must be (H, W) or (H, W, 1|3), got {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ContractViolation("image intensities must lie in [0, 1]")
    return img


def _as3d(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def ones_mask(height: int, width: int) -> np.ndarray:
    return np.ones((height, width))


def binarize(mask: np.ndarray, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
    return (np.asarray(mask) >= threshold).astype(np.float64)


def _snap(c: np.ndarray) -> np.ndarray:
    r = np.rint(c)
    return np.where(np.abs(c - r) < SNAP_EPS, r, c)


def _cell(c: np.ndarray, size: int):
    """Lower cell index and local weight; integer coordinates use the left cell."""
    if size == 1:
        return np.zeros(c.shape, dtype=np.intp), np.zeros(c.shape)
    lo = np.clip(np.ceil(c) - 1, 0, size - 2).astype(np.intp)
    return lo, c - lo


def _prepare(img, x, y):
    h, w = img.shape[:2]
    x = _snap(np.asarray(x, dtype=np.float64))
    y = _snap(np.asarray(y, dtype=np.float64))
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(inb, x, 0.0)
    ys = np.where(inb, y, 0.0)
    x0, tx = _cell(xs, w)
    y0, ty = _cell(ys, h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return inb, x0, x1, y0, y1, tx[..., None], ty[..., None]


def bilinear_sample(img, x, y):
    """Bilinearly sample ``img`` at (x, y).

    Returns ``(values, inbounds)`` where ``values`` has shape
    ``x.shape + (C,)``. Samples outside [0, W-1] x [0, H-1] are zero and
    flagged out of bounds.
    """
    img = _as3d(img)
    inb, x0, x1, y0, y1, tx, ty = _prepare(img, x, y)
    top = (1 - tx) * img[y0, x0] + tx * img[y0, x1]
    bot = (1 - tx) * img[y1, x0] + tx * img[y1, x1]
    vals = (1 - ty) * top + ty * bot
    vals = np.where(inb[..., None], vals, 0.0)
    return vals, inb


def bilinear_sample_grad(img, x, y):
    """Sample plus partial derivatives with respect to x and y.

    At integer coordinates the derivative is the left (or top) one-sided
    limit, except on the first row/column where only the right cell exists.
    Out-of-bounds samples have zero value and zero derivative.
    """
    img = _as3d(img)
    inb, x0, x1, y0, y1, tx, ty = _prepare(img, x, y)
    i00, i01, i10, i11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    top = (1 - tx) * i00 + tx * i01
    bot = (1 - tx) * i10 + tx * i11
    vals = (1 - ty) * top + ty * bot
    gx = (1 - ty) * (i01 - i00) + ty * (i11 - i10)
    gy = bot - top
    m = inb[..., None]
    return np.where(m, vals, 0.0), np.where(m, gx, 0.0), np.where(m, gy, 0.0), inb


def _check_same_hw(*arrays):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ContractViolation(f"raster dimensions differ: {sorted(shapes)}")


def pixel_grid(height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def warp_with_flow(img, flow: FlowField, canvas: bool = False):
    """Backward-warp ``img`` by ``flow``; returns (warped image, validity mask).

    The flow must match the image size unless ``canvas`` is set, in which
    case the output takes the flow's shape (a canvas larger than the frame).
    """
    img = _as3d(img)
    if not canvas and img.shape[:2] != flow.shape:
        raise ContractViolation(f"image {img.shape[:2]} and flow {flow.shape} differ")
    xs, ys = pixel_grid(*flow.shape)
    vals, inb = bilinear_sample(img, xs + flow.dx, ys + flow.dy)
    return vals, inb.astype(np.float64)


def overlap_mask(m1, m2):
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.shape != m2.shape:
        raise ContractViolation(f"mask dimensions differ: {m1.shape} vs {m2.shape}")
    return m1 * m2


def average_fuse(a, mask_a, b, mask_b):
    """Average where both masks are positive, copy where only one is, else 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    _check_same_hw(a, b, mask_a, mask_b)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    pa = (mask_a > 0)[..., None]
    pb = (mask_b > 0)[..., None]
    both = (a + b) / 2
    return np.where(pa & pb, both, np.where(pa, a, np.where(pb, b, 0.0)))


# --------------------------------------------------------------------- I/O

def load_image(path) -> np.ndarray:
    """Load PNG/PPM/PGM (or anything Pillow reads) as an (H, W, C) float image."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(arr)


def save_image(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def save_flow(path, flow: FlowField) -> None:
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(flow.dx.astype("<f4").tobytes())
        f.write(flow.dy.astype("<f4").tobytes())


def load_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise SchemaError(f"{path}: bad flow magic {raw[:4]!r}")
    if len(raw) < 12:
        raise SchemaError(f"{path}: truncated header")
    h, w = struct.unpack("<II", raw[4:12])
    n = h * w
    if len(raw) != 12 + 8 * n:
        raise SchemaError(f"{path}: expected {12 + 8 * n} bytes, found {len(raw)}")
    dx = np.frombuffer(raw, dtype="<f4", count=n, offset=12).reshape(h, w)
    dy = np.frombuffer(raw, dtype="<f4", count=n, offset=12 + 4 * n).reshape(h, w)
    return FlowField(dx.astype(np.float64), dy.astype(np.float64))
