"""Binary PPM (P6) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def encode_ppm(img: np.ndarray, layout: str = "chw") -> bytes:
    """Encode a uint8 RGB image stored as [3, H, W] (``chw``) or [H, W, 3] (``hwc``)."""
    arr = np.asarray(img)
    if layout not in ("chw", "hwc"):
        raise ValueError(f"layout must be 'chw' or 'hwc', got {layout!r}")
    if arr.ndim == 3 and layout == "chw":
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image in {layout} layout, got shape {np.shape(img)}")
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def write_ppm(path, img: np.ndarray, layout: str = "chw") -> None:
    Path(path).write_bytes(encode_ppm(img, layout))


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def ppm_size(path) -> tuple[int, int]:
    """(width, height) read from the header only."""
    with open(path, "rb") as fh:
        head = fh.read(256)
    tok, _ = _tokens(head, 4)
    if tok[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    return int(tok[1]), int(tok[2])


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode to a [3, H, W] uint8 array."""
    tok, off = _tokens(buf, 4)
    if tok[0] != b"P6":
        raise ValueError("not a binary PPM (P6)")
    w, h, maxval = int(tok[1]), int(tok[2]), int(tok[3])
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
