"""Image reading/writing (binary PPM natively, PNG via Pillow) and box drawing."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import FormatError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _ppm_header(data: bytes):
    """Parse 'P6 <w> <h> <maxval>' with '#' comments; returns (w, h, maxval, offset)."""
    tokens, pos = [], 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError("truncated PPM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError("truncated PPM header comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace() and data[end:end + 1] != b"#":
                end += 1
            tok = data[pos:end]
            if not tok.isdigit():
                raise FormatError(f"bad PPM header token {tok!r}")
            tokens.append(int(tok))
            pos = end
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("PPM header must end with a single whitespace byte")
    w, h, maxval = tokens
    return w, h, maxval, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise FormatError("not a binary PPM (P6) file")
    w, h, maxval, off = _ppm_header(data)
    if w < 1 or h < 1:
        raise FormatError(f"invalid PPM size {w}x{h}")
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported PPM maxval {maxval} (8-bit only)")
    need = w * h * 3
    body = data[off:off + need]
    if len(body) != need:
        raise FormatError(f"PPM pixel data truncated: {len(body)} of {need} bytes")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return img.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_png(data: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise FormatError(f"corrupt PNG: {e}") from None


def load_image(path) -> np.ndarray:
    """H x W x 3 uint8 RGB array."""
    data = Path(path).read_bytes()
    if data.startswith(b"P6"):
        return decode_ppm(data)
    if data.startswith(PNG_MAGIC):
        return decode_png(data)
    raise FormatError(f"{path}: unsupported image format (expected P6 PPM or PNG)")


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), "RGB").save(path)
    else:
        path.write_bytes(encode_ppm(img))


def draw_detections(img: np.ndarray, dets, color=(255, 0, 0), thickness: int = 1) -> np.ndarray:
    """Copy of ``img`` with box outlines and landmark dots; all pixels clamped in-bounds."""
    out = np.array(img, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]

    def clamp_x(v):
        return int(min(max(round(v), 0), w - 1))

    def clamp_y(v):
        return int(min(max(round(v), 0), h - 1))

    for d in dets:
        x, y, bw, bh = d.box
        x0, x1 = clamp_x(x), clamp_x(x + bw)
        y0, y1 = clamp_y(y), clamp_y(y + bh)
        for t in range(thickness):
            ya, yb = clamp_y(y0 + t), clamp_y(y1 - t)
            xa, xb = clamp_x(x0 + t), clamp_x(x1 - t)
            out[ya, x0:x1 + 1] = color
            out[yb, x0:x1 + 1] = color
            out[y0:y1 + 1, xa] = color
            out[y0:y1 + 1, xb] = color
        for px, py in d.landmarks or ():
            cx, cy = clamp_x(px), clamp_y(py)
            out[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2] = (0, 255, 0)
    return out
