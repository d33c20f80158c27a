"""Color-texture feature maps (CTM).

Every 8x8 window (stride 4) of a 160x80 image is summarised by an RGB
histogram (8 bins per channel), an HSV histogram (8 bins per channel) and a
16-bin SILTP texture histogram.  Bin ``b`` of the window anchored at grid
cell ``(i, j)`` becomes ``ctm[b, i, j]``, giving a 64x40x20 stack.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

IMAGE_HEIGHT = 160
IMAGE_WIDTH = 80
WINDOW = 8
STEP = 4
COLOR_BINS = 8
SILTP_BINS = 16
SILTP_TAU = 0.3
SILTP_RADIUS = 3
MAP_HEIGHT = 40
MAP_WIDTH = 20
CTM_CHANNELS = 3 * COLOR_BINS * 2 + SILTP_BINS  # 24 RGB + 24 HSV + 16 SILTP

RGB_SLICE = slice(0, 24)
HSV_SLICE = slice(24, 48)
SILTP_SLICE = slice(48, 64)

CTM_HEADER = f"CTM {CTM_CHANNELS} {MAP_HEIGHT} {MAP_WIDTH}\n"


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV for arrays shaped (..., 3) in [0, 1]; hue is scaled to [0, 1)."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    v = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6.0,
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    h = np.where(h >= 1.0, h - 1.0, h)
    return np.stack([h, s, v], axis=-1)


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def siltp_codes(gray: np.ndarray, tau: float = SILTP_TAU, radius: int = SILTP_RADIUS) -> np.ndarray:
    """One-sided 4-neighbour SILTP codes in [0, 15].

    Bit k is set when neighbour k (up, right, down, left at distance
    ``radius``) exceeds ``(1 + tau)`` times the centre.  Borders replicate.
    """
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    p = np.pad(gray, radius, mode="edge")
    c = gray
    r = radius
    neighbours = (
        p[0:h, r:r + w],                  # up
        p[r:r + h, 2 * r:2 * r + w],      # right
        p[2 * r:2 * r + h, r:r + w],      # down
        p[r:r + h, 0:w],                  # left
    )
    upper = (1.0 + tau) * c
    codes = np.zeros((h, w), dtype=np.int64)
    for bit, nb in enumerate(neighbours):
        codes |= (nb > upper).astype(np.int64) << bit
    return codes


# Values that sit exactly on a bin edge (hue 1/8 from 8-bit input, say) can come out of
# the float formulas a few ulps low; the guard puts them in the upper bin like exact
# arithmetic would.  Distinct 8-bit colours never land this close to an edge otherwise.
BIN_EDGE_GUARD = 1e-9


def _quantize(values: np.ndarray, bins: int = COLOR_BINS) -> np.ndarray:
    return np.minimum((values * bins + BIN_EDGE_GUARD).astype(np.int64), bins - 1)


def pixel_bins(img: np.ndarray) -> np.ndarray:
    """Per-pixel bin indices (7, H, W): R, G, B, H, S, V bins offset into 0..47, SILTP into 48..63."""
    hsv = rgb_to_hsv(img)
    out = []
    for ch in range(3):
        out.append(_quantize(img[..., ch]) + ch * COLOR_BINS)
    for ch in range(3):
        out.append(_quantize(hsv[..., ch]) + 24 + ch * COLOR_BINS)
    out.append(siltp_codes(luminance(img)) + 48)
    return np.stack(out)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (IMAGE_HEIGHT, IMAGE_WIDTH, 3):
        raise ValueError(
            f"expected a {IMAGE_HEIGHT}x{IMAGE_WIDTH}x3 image, got shape {img.shape}"
        )
    return np.clip(img, 0.0, 1.0)


def window_histograms(img: np.ndarray) -> np.ndarray:
    """Compute the 64x40x20 CTM stack for one 160x80 RGB image in [0, 1].

    The per-pixel bin maps are replicate-padded by 4 pixels at the bottom
    and right so the stride-4 anchor grid is exactly 40x20.
    """
    img = check_image(img)
    bins = pixel_bins(img)
    bins = np.pad(bins, ((0, 0), (0, STEP), (0, STEP)), mode="edge")
    hp, wp = bins.shape[1:]
    onehot = np.zeros((CTM_CHANNELS, hp, wp), dtype=np.float64)
    rows, cols = np.indices((hp, wp))
    for plane in bins:
        onehot[plane, rows, cols] += 1.0
    # 4x4 block counts, then each 8x8 window is a 2x2 group of blocks
    blocks = onehot.reshape(CTM_CHANNELS, hp // STEP, STEP, wp // STEP, STEP).sum(axis=(2, 4))
    counts = blocks[:, :-1, :-1] + blocks[:, 1:, :-1] + blocks[:, :-1, 1:] + blocks[:, 1:, 1:]
    ctm = counts / float(WINDOW * WINDOW)
    # RGB and HSV groups each hold three 64-pixel channel histograms
    ctm[RGB_SLICE] /= 3.0
    ctm[HSV_SLICE] /= 3.0
    return ctm


def extract_batch(images) -> np.ndarray:
    return np.stack([window_histograms(im) for im in images])


def write_ctm(path, ctm: np.ndarray) -> None:
    """Write a CTM stack as a text header line followed by little-endian float64 values."""
    ctm = np.asarray(ctm, dtype="<f8")
    if ctm.shape != (CTM_CHANNELS, MAP_HEIGHT, MAP_WIDTH):
        raise ValueError(f"CTM stack has shape {ctm.shape}")
    with open(path, "wb") as fh:
        fh.write(CTM_HEADER.encode("ascii"))
        fh.write(ctm.tobytes(order="C"))


def read_ctm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, _, body = raw.partition(b"\n")
    parts = header.decode("ascii").split()
    if len(parts) != 4 or parts[0] != "CTM":
        raise ValueError(f"{path}: not a CTM dump")
    shape = tuple(int(v) for v in parts[1:])
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)
