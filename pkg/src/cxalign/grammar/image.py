"""Glyph-based rendering of a latent study onto a grayscale canvas.

Each positive finding paints a kind-specific glyph into its zone: disc for
opacity/consolidation, bottom wedge for effusion, rim band for pneumothorax,
enlarged ellipse for cardiomegaly, bright dot for nodule/granuloma, line
segment for devices, a horizontal streak for atelectasis and a diffuse haze
for edema. Image-left is the patient's right side.
"""

from __future__ import annotations

import numpy as np

from .types import LatentStudy

CANVAS = 64
BASE_INTENSITY = 0.1
SEVERITY_INTENSITY = {"mild": 0.4, "moderate": 0.7, "severe": 1.0}

# zone rectangles: (row_lo, row_hi, col_lo, col_hi), half-open
_ROW_BOUNDS = {"upper": (2, 22), "mid": (22, 42), "lower": (42, 62)}
_COL_BOUNDS = {"right": (2, 31), "left": (33, 62)}  # image-left = patient-right


def _zone(location: str):
    side, row = location.split()
    r0, r1 = _ROW_BOUNDS[row]
    c0, c1 = _COL_BOUNDS[side]
    return r0, r1, c0, c1


def _disc(canvas, cy, cx, radius, value):
    yy, xx = np.ogrid[: canvas.shape[0], : canvas.shape[1]]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    canvas[mask] += value


def _ellipse(canvas, cy, cx, ry, rx, value):
    yy, xx = np.ogrid[: canvas.shape[0], : canvas.shape[1]]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    canvas[mask] += value


def render_image(
    study: LatentStudy, rng: np.random.Generator, noise_sigma: float = 0.05
) -> np.ndarray:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    canvas = np.full((CANVAS, CANVAS), BASE_INTENSITY, dtype=np.float32)
    for f in study.findings:
        if f.negated:
            continue
        value = SEVERITY_INTENSITY[f.severity]
        kind = f.kind
        if kind == "cardiomegaly":
            ry, rx = {"mild": (7, 9), "moderate": (9, 12), "severe": (11, 15)}[f.severity]
            _ellipse(canvas, 42, 32, ry, rx, value)
            continue
        if kind == "edema":
            for side in ("right", "left"):
                c0, c1 = _COL_BOUNDS[side]
                canvas[2:62, c0:c1] += 0.3 * value
            continue
        r0, r1, c0, c1 = _zone(f.location)
        cy, cx = (r0 + r1) // 2, (c0 + c1) // 2
        if kind == "opacity":
            _disc(canvas, cy, cx, 10, 0.7 * value)
        elif kind == "consolidation":
            _disc(canvas, cy, cx, 6, value)
        elif kind == "pleural_effusion":
            # wedge filling the bottom of the zone, widening downward
            height = r1 - r0
            for i, r in enumerate(range(r0 + height // 2, r1)):
                frac = (i + 1) / (height - height // 2)
                half = int(frac * (c1 - c0) / 2)
                canvas[r, cx - half : cx + half + 1] += value
        elif kind == "pneumothorax":
            outer = slice(c0, c0 + 3) if f.location.startswith("right") else slice(c1 - 3, c1)
            canvas[r0:r1, outer] += value
        elif kind == "nodule":
            _disc(canvas, cy, cx, 2, value)
        elif kind == "granuloma":
            _disc(canvas, cy + 6, cx + 6, 2, value)
        elif kind == "atelectasis":
            canvas[cy - 1 : cy + 2, c0:c1] += value
        elif kind == "support_device":
            for step in range(c1 - c0):
                r = r0 + int(step * (r1 - r0 - 1) / max(c1 - c0 - 1, 1))
                canvas[r, c0 + step] += value
    if noise_sigma > 0:
        canvas += rng.normal(0.0, noise_sigma, canvas.shape).astype(np.float32)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)
