"""Image loading, window-driven rescaling, and annotation/result persistence.

Pixel arrays are float64 (H, W, C) in [0, 1]; grayscale sources load with one
channel, color with three. Coordinate transforms use the pixel-center
convention so round-trips land within half a pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .matching import TEMPLATE_SIZE, BoundingWindow


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]

    def __post_init__(self) -> None:
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise ValueError(f"expected (H, W, C) pixels, got {self.pixels.shape}")
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class RescaleTransform:
    scale_x: float
    scale_y: float
    orig_width: int
    orig_height: int
    out_width: int
    out_height: int

    def to_rescaled(self, x, y):
        return (
            (np.asarray(x, dtype=np.float64) + 0.5) * self.scale_x - 0.5,
            (np.asarray(y, dtype=np.float64) + 0.5) * self.scale_y - 0.5,
        )

    def to_original(self, x, y):
        return (
            (np.asarray(x, dtype=np.float64) + 0.5) / self.scale_x - 0.5,
            (np.asarray(y, dtype=np.float64) + 0.5) / self.scale_y - 0.5,
        )

    @staticmethod
    def identity(width: int, height: int) -> "RescaleTransform":
        return RescaleTransform(1.0, 1.0, width, height, width, height)


def load_image(path: str | Path) -> Image:
    with PILImage.open(path) as img:
        if img.mode in ("1", "L", "I", "I;16", "F"):
            arr = np.asarray(img.convert("F"), dtype=np.float64)[:, :, None]
            if arr.max() > 1.0:
                arr /= 255.0 if arr.max() <= 255.0 else arr.max()
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Image(np.clip(arr, 0.0, 1.0))


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(data).save(path, format="PNG")


def bilinear_rescale(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Anisotropic bilinear resampling with pixel-center alignment."""
    h, w = pixels.shape[:2]
    sx = out_w / w
    sy = out_h / h
    src_x = np.clip((np.arange(out_w) + 0.5) / sx - 0.5, 0.0, w - 1.0)
    src_y = np.clip((np.arange(out_h) + 0.5) / sy - 0.5, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[None, :, None]
    fy = (src_y - y0)[:, None, None]
    top = pixels[y0][:, x0] * (1 - fx) + pixels[y0][:, x1] * fx
    bottom = pixels[y1][:, x0] * (1 - fx) + pixels[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def rescale_for_window(
    image: Image, windows: list[BoundingWindow]
) -> tuple[Image, RescaleTransform, list[BoundingWindow]]:
    """Rescale so the largest marked window becomes TEMPLATE_SIZE squared.

    Returns the rescaled image, the transform, and every window mapped into
    rescaled coordinates.
    """
    if not windows:
        raise ValueError("at least one bounding window is required")
    for win in windows:
        win.validate(image.width, image.height)
    largest = max(windows, key=lambda w: w.width * w.height)
    scale_x = TEMPLATE_SIZE / largest.width
    scale_y = TEMPLATE_SIZE / largest.height
    out_w = max(TEMPLATE_SIZE, int(round(image.width * scale_x)))
    out_h = max(TEMPLATE_SIZE, int(round(image.height * scale_y)))
    transform = RescaleTransform(scale_x, scale_y, image.width, image.height, out_w, out_h)
    if (scale_x, scale_y) == (1.0, 1.0) and (out_w, out_h) == (image.width, image.height):
        rescaled = Image(image.pixels.copy())
    else:
        rescaled = Image(bilinear_rescale(image.pixels, out_h, out_w))
    mapped = []
    for win in windows:
        x0, y0 = transform.to_rescaled(win.x, win.y)
        mapped.append(
            BoundingWindow(
                x=int(round(x0)),
                y=int(round(y0)),
                width=max(3, int(round(win.width * scale_x))),
                height=max(3, int(round(win.height * scale_y))),
            )
        )
    return rescaled, transform, mapped


# ---------------------------------------------------------------------------
# annotation / result files


def save_detections(points: np.ndarray, path: str | Path) -> None:
    doc = {
        "count": int(len(points)),
        "points": [[round(float(x), 2), round(float(y), 2)] for x, y in np.asarray(points).reshape(-1, 2)],
        "space": "original",
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_detections(path: str | Path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    pts = np.asarray(doc.get("points", []), dtype=np.float64).reshape(-1, 2)
    if doc.get("count") != len(pts):
        raise ValueError(f"{path}: count field {doc.get('count')} != {len(pts)} points")
    return pts


def load_ground_truth(path: str | Path):
    """Accept JSON {"points": [[x, y], ...]} or CSV 'x,y' lines."""
    from .oracle import GroundTruth

    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(text)
        pts = np.asarray(doc["points"], dtype=np.float64)
        types = doc.get("types")
    else:
        rows = [line.split(",") for line in text.splitlines() if line.strip() and not line.startswith("#")]
        if rows and not rows[0][0].strip().lstrip("-").replace(".", "").isdigit():
            rows = rows[1:]  # header line
        pts = np.asarray([[float(r[0]), float(r[1])] for r in rows])
        types = None
    return GroundTruth(np.round(pts.reshape(-1, 2)).astype(np.int64), types)


def save_ground_truth(gt, path: str | Path) -> None:
    doc: dict = {"points": [[int(x), int(y)] for x, y in gt.points]}
    if gt.types is not None:
        doc["types"] = list(gt.types)
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def render_overlay(
    image: Image,
    detections: np.ndarray,
    path: str | Path | None = None,
    queries: list | None = None,
    radius: int = 6,
) -> PILImage.Image:
    """Detections as circles (plus optional query frames) over the image."""
    arr = np.clip(image.pixels, 0.0, 1.0)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    canvas = PILImage.fromarray(np.round(arr * 255.0).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for x, y in np.asarray(detections).reshape(-1, 2):
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], outline=(255, 220, 0), width=2)
    for q in queries or []:
        x0, y0, w, h = q["rect"]
        color = (0, 200, 0) if q["tentative"] == "pos" else (220, 0, 0)
        draw.rectangle([x0, y0, x0 + w, y0 + h], outline=color, width=2)
    if path is not None:
        canvas.save(path, format="PNG")
    return canvas
