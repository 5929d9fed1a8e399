"""Binary image file formats: PPM (P6) for color, PFM for float maps,
PGM (P5) for masks.  All writers are deterministic byte-for-byte."""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray):
    """Write an (H, W, 3) float image in [0, 1] as binary PPM, maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    H, W = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float64 image in [0, 1]."""
    with open(path, "rb") as fh:
        magic, dims, maxval, offset = _read_pnm_header(fh.read(), path)
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    W, H = dims
    raw = np.fromfile(path, dtype=np.uint8, offset=offset, count=W * H * 3)
    if raw.size != W * H * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(H, W, 3).astype(np.float64) / float(maxval)


def write_pgm(path, mask: np.ndarray):
    """Write an (H, W) boolean/0-1 mask as binary PGM (255 = set)."""
    mask = np.asarray(mask)
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    H, W = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) bool mask (nonzero = set)."""
    with open(path, "rb") as fh:
        magic, dims, _maxval, offset = _read_pnm_header(fh.read(), path)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    W, H = dims
    raw = np.fromfile(path, dtype=np.uint8, offset=offset, count=W * H)
    if raw.size != W * H:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(H, W) > 0


def _read_pnm_header(blob: bytes, path):
    """Parse a PNM header: magic, (W, H), maxval and pixel-data offset."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated header")
        ch = blob[pos : pos + 1]
        if ch == b"#":  # comment to end of line
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    return tokens[0], (int(tokens[1]), int(tokens[2])), int(tokens[3]), pos


def write_pfm(path, data: np.ndarray):
    """Write an (H, W) float map as grayscale PFM.

    Little-endian (scale -1.0); rows are stored bottom-to-top as the format
    prescribes.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"expected (H, W) map, got {data.shape}")
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into an (H, W) float32 map (top-down rows)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = blob.split(b"\n", 3)
    if len(lines) < 4 or lines[0] != b"Pf":
        raise ValueError(f"{path}: not a grayscale PFM")
    W, H = (int(tok) for tok in lines[1].split())
    scale = float(lines[2])
    dtype = "<f4" if scale < 0 else ">f4"
    raw = np.frombuffer(lines[3], dtype=dtype, count=W * H)
    if raw.size != W * H:
        raise ValueError(f"{path}: truncated pixel data")
    return np.ascontiguousarray(raw.reshape(H, W)[::-1]).astype(np.float32)
