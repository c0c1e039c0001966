"""Patch visualization: normal sampling lattice (blue) vs offset-displaced
adaptive sampling points (red) of the first deformable-token stage of the
multiscale stack, overlaid on the RGB image."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import write_ppm
from .model import Detector

BLUE = np.array([0.0, 0.0, 1.0])
RED = np.array([1.0, 0.0, 0.0])


def first_stage_offsets(model: Detector, rgb: np.ndarray, ir: np.ndarray) -> np.ndarray:
    """Offset field [B, 2*K*K, Ho, Wo] of the first deformable-token stage
    of the multiscale stack, in pixel units of its input feature grid."""
    with ad.no_grad():
        fused = model.ffar(Tensor(rgb), Tensor(ir))
        return model.mdtmb.stage1.dtmb.offsets(fused).data


def max_offset_magnitude(offsets: np.ndarray) -> float:
    dy = offsets[:, 0::2]
    dx = offsets[:, 1::2]
    return float(np.sqrt(dy ** 2 + dx ** 2).max())


def visualize_patches(model: Detector, rgb: np.ndarray, ir: np.ndarray,
                      out_path, site_step: int = 4) -> np.ndarray:
    """Render the overlay onto the RGB image and write it as PPM.

    Every ``site_step``-th token site is annotated, plus the site with the
    largest learned displacement.  Feature-grid coordinates are mapped to
    image pixels through the fusion front-end's patch stride, so one unit
    of learned offset moves a red point one grid cell off its blue lattice
    point.  Returns the painted [3,H,W] array.
    """
    offs = first_stage_offsets(model, rgb[None] if rgb.ndim == 3 else rgb,
                               ir[None] if ir.ndim == 3 else ir)[0]
    dtmb = model.mdtmb.stage1.dtmb
    K, stride, pad = dtmb.kernel, dtmb.stride, dtmb.padding
    scale = model.cfg.ffar_stride
    T = K * K
    Ho, Wo = offs.shape[1], offs.shape[2]
    canvas = (rgb[0] if rgb.ndim == 4 else rgb).copy()

    mag = np.sqrt(offs[0::2] ** 2 + offs[1::2] ** 2).max(axis=0)
    hot = np.unravel_index(mag.argmax(), mag.shape)
    sites = {(oy, ox)
             for oy in range(0, Ho, site_step)
             for ox in range(0, Wo, site_step)}
    sites.add((int(hot[0]), int(hot[1])))

    def to_image(g: float) -> int:
        return int(round((g + 0.5) * scale))

    for oy, ox in sorted(sites):
        for t in range(T):
            ky, kx = divmod(t, K)
            _paint(canvas, to_image(oy * stride - pad + ky),
                   to_image(ox * stride - pad + kx), BLUE)
    for oy, ox in sorted(sites):
        for t in range(T):
            ky, kx = divmod(t, K)
            ay = oy * stride - pad + ky + offs[2 * t, oy, ox]
            axx = ox * stride - pad + kx + offs[2 * t + 1, oy, ox]
            _paint(canvas, to_image(ay), to_image(axx), RED)

    if out_path is not None:
        write_ppm(out_path, canvas)
    return canvas


def _paint(canvas: np.ndarray, y: int, x: int, color: np.ndarray) -> None:
    H, W = canvas.shape[1:]
    if 0 <= y < H and 0 <= x < W:
        canvas[:, y, x] = color
