"""Quantitative self-checks: correspondence maps, volume loss reports and
architecture/footprint inspection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import descriptor, noise


@dataclass
class CorrespondenceMap:
    """Per-pixel coordinates of the best-matching patch in a second image."""

    coords: np.ndarray  # (H', W', 2) row/col into the second image
    patch: int
    target_shape: tuple  # (H, W) of the second image


def correspondence_map(a, b, patch=4):
    """For each pixel of ``a`` with full patch support, the coordinates of
    the pixel in ``b`` whose patch (plain squared L2 on RGB, stride 1) is
    closest; ties broken by lowest linear index.

    Images are (3, H, W, 1). Border pixels without full patch support are
    skipped.
    """
    ha, wa = a.shape[1] - patch + 1, a.shape[2] - patch + 1
    hb, wb = b.shape[1] - patch + 1, b.shape[2] - patch + 1
    if ha < 1 or wa < 1 or hb < 1 or wb < 1:
        raise ValueError("correspondence_map: images smaller than the patch")
    pa = _patch_matrix(a, patch)
    pb = _patch_matrix(b, patch)
    # squared distances via |x|^2 + |y|^2 - 2 x.y with 64-bit accumulation
    na = (pa * pa).sum(axis=1)[:, None]
    nb = (pb * pb).sum(axis=1)[None, :]
    d = na + nb - 2.0 * (pa @ pb.T)
    best = np.argmin(d, axis=1)  # first occurrence = lowest linear index
    coords = np.stack([best // wb, best % wb], axis=-1).reshape(ha, wa, 2)
    return CorrespondenceMap(coords=coords, patch=patch, target_shape=(hb, wb))


def _patch_matrix(img, patch):
    c, h, w = img.shape[0], img.shape[1], img.shape[2]
    x = np.ascontiguousarray(img.reshape(c, h, w).transpose(1, 2, 0),
                             dtype=np.float64)
    hh, ww = h - patch + 1, w - patch + 1
    view = np.lib.stride_tricks.sliding_window_view(x, (patch, patch), (0, 1))
    return view.reshape(hh * ww, -1).copy()


def identity_fraction(cmap):
    """Fraction of pixels mapped to their own coordinates."""
    h, w = cmap.coords.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    return float(np.mean((cmap.coords[..., 0] == rows)
                         & (cmap.coords[..., 1] == cols)))


def longest_identical_run(cmap):
    """Longest horizontal run of identical displacement vectors (a noisiness
    proxy for diversity checks)."""
    h, w = cmap.coords.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    disp = cmap.coords - np.stack([rows, cols], axis=-1)
    best = 0
    for r in range(h):
        run = 1
        for c in range(1, w):
            if (disp[r, c] == disp[r, c - 1]).all():
                run += 1
                best = max(best, run)
            else:
                run = 1
        best = max(best, run, 1)
    return max(best, 1)


def render_correspondence(cmap):
    """Render coordinates as a u8 RGB image (row -> red, col -> green)."""
    h, w = cmap.coords.shape[:2]
    hb, wb = cmap.target_shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0] = (255 * cmap.coords[..., 0] / max(hb - 1, 1)).astype(np.uint8)
    img[..., 1] = (255 * cmap.coords[..., 1] / max(wb - 1, 1)).astype(np.uint8)
    return img


def evaluate_volume(net, volume, exemplar_set):
    """Per-direction, per-layer loss decomposition of a generated volume.

    The report's total equals the slice-based 3D loss exactly.
    """
    report = descriptor.loss3d_report(net, volume, exemplar_set)
    per_direction = {d: sum(layers.values()) for d, layers in report.items()}
    return {
        "per_direction": per_direction,
        "per_layer": report,
        "total": sum(per_direction.values()),
    }


def inspect(model):
    """Margin table, unit-voxel noise footprint, parameter count and channel
    schedule of a generator."""
    margins = model.margins
    spec = noise.noise_extents(noise.Region((0, 0, 0), (1, 1, 1)),
                               margins, 0, model.m_i)
    extents = [w.extent[0] for w in spec.windows]
    return {
        "K": model.K,
        "M_i": model.m_i,
        "M_s": model.m_s,
        "margins": list(margins),
        "unit_voxel_extents": extents,
        "unit_voxel_noise_per_channel": spec.total_per_channel,
        "unit_voxel_noise_total": spec.total,
        "parameter_count": model.parameter_count(),
        "channel_schedule": model.channel_schedule(),
    }


def format_inspect(report):
    lines = [
        f"scales: K={report['K']} (M_i={report['M_i']}, M_s={report['M_s']})",
        f"margin coefficients c_k: {report['margins']}",
        f"unit-voxel noise extents per dim: {report['unit_voxel_extents']}",
        f"unit-voxel noise scalars per channel: "
        f"{report['unit_voxel_noise_per_channel']}",
        f"unit-voxel noise scalars total ({report['M_i']} channels): "
        f"{report['unit_voxel_noise_total']}",
        f"parameter count: {report['parameter_count']}",
        f"channel schedule (join width, fine to coarse): "
        f"{report['channel_schedule']}",
    ]
    return "\n".join(lines)
