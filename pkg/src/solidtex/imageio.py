"""PNG ingestion and volume export.

Images travel through the library as float32 arrays of shape (3, H, W, 1)
with values in [0, 1]. Volumes are exported either as raw little-endian
float32 (channel-last, x-fastest: index order z, y, x, rgb) with a text
sidecar, or as a stack of per-z-slice PNGs. Clamping to [0, 1] happens only
at export.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

ROTATIONS = (0, 90, 180, 270)


class ImageFormatError(ValueError):
    """Unsupported bit depth or color mode."""


def ingest_image(path, rotation=0, flip=False):
    """Load an 8-bit RGB (or grayscale, expanded to 3 equal channels) PNG as
    floats in [0, 1], applying rotation then horizontal flip.

    A 90-degree rotation maps pixel (i, j) to (j, H-1-i).
    """
    if rotation not in ROTATIONS:
        raise ValueError(f"rotation must be one of {ROTATIONS}, got {rotation}")
    img = Image.open(path)
    if img.mode == "L":
        img = img.convert("RGB")
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode == "RGBA":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise ImageFormatError(
            f"{path}: unsupported image mode {img.mode!r} (need 8-bit RGB)")
    arr = np.asarray(img, dtype=np.uint8)  # (H, W, 3)
    if rotation:
        arr = np.rot90(arr, k=rotation // 90, axes=(1, 0))
    if flip:
        arr = arr[:, ::-1, :]
    data = np.ascontiguousarray(arr.transpose(2, 0, 1))[..., None]
    return data.astype(np.float32) / 255.0


def export_image(path, image):
    """Write a (3, H, W, 1) float image as 8-bit RGB PNG, clamping to [0,1]."""
    arr = np.clip(image[..., 0], 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path)


def export_png_stack(prefix, volume):
    """Write one PNG per z-slice: ``{prefix}_z{index:04d}.png``."""
    paths = []
    for z in range(volume.shape[3]):
        img = volume[:, :, :, z:z + 1]
        path = f"{prefix}_z{z:04d}.png"
        export_image(path, img)
        paths.append(path)
    return paths


def export_raw(path, volume, sidecar_extra=None):
    """Write raw little-endian float32: channel-last, x-fastest order
    (outermost z, then y, then x, rgb contiguous). A ``.json`` sidecar with
    the dims/dtype/layout (plus provenance fields) is written next to it."""
    data = np.ascontiguousarray(volume.transpose(3, 2, 1, 0).astype("<f4"))
    data.tofile(path)
    sidecar = {
        "dtype": "float32-le",
        "layout": "z,y,x,rgb (x fastest spatial, channel last)",
        "size": [int(volume.shape[1]), int(volume.shape[2]),
                 int(volume.shape[3])],
        "channels": int(volume.shape[0]),
    }
    if sidecar_extra:
        sidecar.update(sidecar_extra)
    sidecar_path = path + ".json"
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return sidecar_path


def import_raw(path):
    """Read a raw volume back using its sidecar; returns (volume, sidecar)."""
    with open(path + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    n1, n2, n3 = sidecar["size"]
    c = sidecar["channels"]
    data = np.fromfile(path, dtype="<f4").reshape(n3, n2, n1, c)
    return np.ascontiguousarray(data.transpose(3, 2, 1, 0)), sidecar
