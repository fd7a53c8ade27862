"""PNG loading/saving and resizing for ImageBuffer."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .domain import ImageBuffer


def load_image(path: str) -> ImageBuffer:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return ImageBuffer.from_array(np.asarray(rgb, dtype=np.uint8))


def resize_image(buf: ImageBuffer, size: int) -> ImageBuffer:
    if buf.height == size and buf.width == size:
        return buf
    im = Image.fromarray(buf.pixels, mode="RGB").resize((size, size), Image.BILINEAR)
    return ImageBuffer.from_array(np.asarray(im, dtype=np.uint8))


def save_png(buf: ImageBuffer, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(buf.pixels, mode="RGB").save(path, format="PNG")


def png_bytes(buf: ImageBuffer) -> bytes:
    import io

    out = io.BytesIO()
    Image.fromarray(buf.pixels, mode="RGB").save(out, format="PNG")
    return out.getvalue()
