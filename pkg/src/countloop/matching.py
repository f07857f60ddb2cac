"""Template matching and suppression: NCC score maps, 11x11 non-max suppression,
and the conservative initial label harvest.

Coordinates are (x, y) pairs with x the column; arrays of points have shape
(K, 2). Score maps are float64 (H, W) arrays indexed map[y, x].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.signal import correlate

TEMPLATE_SIZE = 21
SUPPRESSION_WINDOW = 11
POSITIVE_NCC_THRESHOLD = 0.85
MIN_INITIAL_POSITIVES = 10

# Sum-of-squared-deviations below this counts as a flat patch (score 0).
_VAR_EPS = 1e-9


@dataclass(frozen=True)
class BoundingWindow:
    """User-marked rectangle around one object instance, in image coordinates."""

    x: int
    y: int
    width: int
    height: int

    def validate(self, image_width: int, image_height: int) -> None:
        if self.width < 3 or self.height < 3:
            raise ValueError(f"window {self.width}x{self.height} smaller than 3x3")
        if self.x < 0 or self.y < 0 or self.x + self.width > image_width or self.y + self.height > image_height:
            raise ValueError(
                f"window ({self.x},{self.y},{self.width},{self.height}) leaves the "
                f"{image_width}x{image_height} image"
            )

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + (self.width - 1) / 2.0, self.y + (self.height - 1) / 2.0)


@dataclass(frozen=True)
class ScoreMap:
    values: np.ndarray  # (H, W) float64
    kind: str  # "ncc" | "classification"


def _box_sums(field: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Sliding-window sums over all fully-inside windows, via an integral image."""
    ii = np.zeros((field.shape[0] + 1, field.shape[1] + 1))
    np.cumsum(np.cumsum(field, axis=0), axis=1, out=ii[1:, 1:])
    return ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]


def extract_template(image: np.ndarray, window: BoundingWindow) -> np.ndarray:
    """Cut the TEMPLATE_SIZE patch centered on the window from a rescaled image."""
    h, w = image.shape[:2]
    half = TEMPLATE_SIZE // 2
    cx, cy = window.center
    cx = int(round(min(max(cx, half), w - 1 - half)))
    cy = int(round(min(max(cy, half), h - 1 - half)))
    return image[cy - half : cy + half + 1, cx - half : cx + half + 1, :]


def ncc(image: np.ndarray, template: np.ndarray) -> ScoreMap:
    """Normalized cross-correlation of every fully-inside window with the template.

    Channels are normalized jointly (one mean/variance over all template
    entries). Border pixels whose window leaves the image score 0 (the
    correlation is undefined there, so they join neither label set), as do
    flat image patches.
    """
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got {image.shape}")
    if template.shape != (TEMPLATE_SIZE, TEMPLATE_SIZE, image.shape[2]):
        raise ValueError(
            f"template must be {TEMPLATE_SIZE}x{TEMPLATE_SIZE}x{image.shape[2]}, "
            f"got {template.shape}"
        )
    th, tw, c = template.shape
    tz = template - template.mean()
    tvar = float((tz * tz).sum())
    if tvar <= _VAR_EPS:
        raise ValueError("template has zero variance")

    h, w = image.shape[:2]
    out = np.zeros((h, w))
    if h < th or w < tw:
        return ScoreMap(out, "ncc")

    num = np.zeros((h - th + 1, w - tw + 1))
    for ch in range(c):
        num += correlate(image[:, :, ch], tz[:, :, ch], mode="valid", method="fft")
    n = th * tw * c
    s1 = _box_sums(image.sum(axis=2), th, tw)
    s2 = _box_sums((image * image).sum(axis=2), th, tw)
    pvar = np.maximum(s2 - s1 * s1 / n, 0.0)

    scores = np.zeros_like(num)
    ok = pvar > _VAR_EPS
    np.divide(num, np.sqrt(pvar * tvar), out=scores, where=ok)
    out[th // 2 : th // 2 + scores.shape[0], tw // 2 : tw // 2 + scores.shape[1]] = scores
    return ScoreMap(out, "ncc")


def max_suppress(score: ScoreMap | np.ndarray, window: int = SUPPRESSION_WINDOW) -> np.ndarray:
    """Non-max suppression: keep pixels that dominate their window.

    A pixel survives iff it is >= every value in the centered window x window
    neighborhood and no already-accepted pixel lies within that neighborhood
    (equal-valued plateaus keep the first pixel in scan order). Returns (K, 2)
    (x, y) coordinates in scan order.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    values = score.values if isinstance(score, ScoreMap) else score
    r = window // 2
    local_max = maximum_filter(values, size=window, mode="nearest")
    cand_y, cand_x = np.nonzero(values >= local_max)
    h, w = values.shape
    blocked = np.zeros((h, w), dtype=bool)
    keep_x, keep_y = [], []
    for y, x in zip(cand_y.tolist(), cand_x.tolist()):
        if blocked[y, x]:
            continue
        keep_x.append(x)
        keep_y.append(y)
        blocked[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1] = True
    return np.column_stack([keep_x, keep_y]).astype(np.int64) if keep_x else np.empty((0, 2), dtype=np.int64)


def suppress_points(
    points: np.ndarray, values: np.ndarray, window: int = SUPPRESSION_WINDOW
) -> np.ndarray:
    """Greedy suppression of a sparse point set by descending score."""
    if len(points) == 0:
        return np.empty((0, 2), dtype=np.int64)
    r = window // 2
    order = np.lexsort((points[:, 0], points[:, 1], -values))
    kept: list[int] = []
    for idx in order.tolist():
        px, py = points[idx]
        if all(abs(px - points[k][0]) > r or abs(py - points[k][1]) > r for k in kept):
            kept.append(idx)
    kept.sort()
    return points[kept]


@dataclass
class InitLabels:
    positives: np.ndarray  # (P, 2) int coords
    negatives: np.ndarray  # (N, 2) int coords
    insufficient: bool
    score_maps: list[ScoreMap] = field(default_factory=list)


def init_labels(image: np.ndarray, windows: list[BoundingWindow]) -> InitLabels:
    """Harvest conservative labels from the NCC response to the marked windows.

    Positives: suppressed NCC peaks above POSITIVE_NCC_THRESHOLD, unioned over
    windows and suppressed again. Negatives: pixels anti-correlated with every
    window. Flags insufficiency when fewer than MIN_INITIAL_POSITIVES positives
    turn up, so the caller can ask for more windows.
    """
    if not windows:
        raise ValueError("at least one bounding window is required")
    maps = [ncc(image, extract_template(image, w)) for w in windows]

    pos_list = []
    for smap in maps:
        peaks = max_suppress(smap)
        if len(peaks):
            vals = smap.values[peaks[:, 1], peaks[:, 0]]
            pos_list.append(peaks[vals > POSITIVE_NCC_THRESHOLD])
    best = maps[0].values.copy()
    for smap in maps[1:]:
        np.maximum(best, smap.values, out=best)

    if pos_list:
        union = np.concatenate(pos_list)
        union = np.unique(union, axis=0)
        positives = suppress_points(union, best[union[:, 1], union[:, 0]])
    else:
        positives = np.empty((0, 2), dtype=np.int64)

    neg_y, neg_x = np.nonzero(best < 0.0)
    negatives = np.column_stack([neg_x, neg_y]).astype(np.int64)
    return InitLabels(
        positives=positives,
        negatives=negatives,
        insufficient=len(positives) < MIN_INITIAL_POSITIVES,
        score_maps=maps,
    )
