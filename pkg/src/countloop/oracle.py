"""Ground truth, the synthetic scene generator, and the simulated user that
answers queries from dot annotations so sessions can run unattended.

Ground-truth dots live in original-image coordinates, (x, y) with x the
column. The simulated user applies the same 21x21 window rule used by the
scoring module: a query is truly positive iff some dot lies within
MATCH_RADIUS (Chebyshev) of it in rescaled space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import MATCH_RADIUS  # one 21x21 window rule for judging and scoring


@dataclass
class GroundTruth:
    points: np.ndarray  # (K, 2) int, original image space
    types: list[str] | None = None  # per-dot tag for two-type scenes

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        if self.types is not None and len(self.types) != len(self.points):
            raise ValueError("types must align with points")

    @property
    def count(self) -> int:
        return len(self.points)

    def of_type(self, tag: str) -> "GroundTruth":
        if self.types is None:
            raise ValueError("ground truth carries no type tags")
        keep = [i for i, t in enumerate(self.types) if t == tag]
        return GroundTruth(self.points[keep], None)


def oracle_label(coord: tuple[float, float], gt: GroundTruth, transform) -> bool:
    """True (positive) iff the 21x21 rescaled-space window at coord holds a dot."""
    rx, ry = transform.to_rescaled(gt.points[:, 0].astype(float), gt.points[:, 1].astype(float))
    near = (np.abs(rx - coord[0]) <= MATCH_RADIUS) & (np.abs(ry - coord[1]) <= MATCH_RADIUS)
    return bool(near.any())


@dataclass
class SimulatedUser:
    gt: GroundTruth
    transform: object
    error_rate: float = 0.0
    undetermined_rate: float = 0.0
    seed: int = 0
    rng: np.random.Generator = field(init=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.error_rate <= 1.0 or not 0.0 <= self.undetermined_rate <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, batch) -> list:
        return self.respond(batch)

    def respond(self, batch) -> list:
        """Decide each query: flip when the tentative label disagrees with the
        ground truth, with optional seeded corruption and 'cannot determine'."""
        from .active_loop import LabelDecision

        decisions = []
        for q in batch.queries:
            truly_positive = oracle_label((q.x, q.y), self.gt, self.transform)
            correct = "accept" if truly_positive == (q.tentative == "pos") else "flip"
            action = correct
            if self.undetermined_rate > 0.0 and self.rng.random() < self.undetermined_rate:
                action = "undetermined"
            elif self.error_rate > 0.0 and self.rng.random() < self.error_rate:
                action = "flip" if correct == "accept" else "accept"
            decisions.append(LabelDecision(x=q.x, y=q.y, action=action))
        return decisions


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class GeneratorSpec:
    width: int = 512
    height: int = 512
    count: int = 100
    kind: str = "disk"  # disk | ring | two-type
    radius_min: float = 16.0
    radius_max: float = 20.0
    intensity_jitter: float = 0.3
    background_level: float = 0.08
    background_noise: float = 0.02
    min_spacing: float = 0.0  # 0 -> derived from radius_max
    allow_overlap: bool = False
    count_secondary: int = 0  # second object type; defaults to `count`
    secondary_radius_min: float = 0.0  # 0 -> same range as the primary type
    secondary_radius_max: float = 0.0
    edge_margin: float = 0.0  # 0 -> radius_max + 2
    edge_softness: float = 3.0  # px over which object edges ramp; keeps shapes
    # stable under sub-pixel placement and downscaling

    def largest_radius(self) -> float:
        return max(self.radius_max, self.secondary_radius_max or 0.0)

    def spacing(self) -> float:
        if self.allow_overlap:
            return 0.0
        derived = 2.0 * self.largest_radius() + 4.0
        return max(12.0, self.min_spacing or derived)

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise ValueError(f"unknown generator fields: {sorted(bad)}")
        return cls(**doc)


class PackingError(ValueError):
    """Too many objects for the canvas at the required spacing."""


def _place_centers(spec: GeneratorSpec, total: int, rng: np.random.Generator) -> np.ndarray:
    """Centers on a jittered grid whose pitch guarantees the minimum spacing.

    A grid keeps placement feasible at densities where dart throwing stalls;
    the jitter is sized so even clipped boundary cells respect the spacing.
    """
    margin = max(spec.edge_margin, spec.largest_radius() + 2.0)
    span_x = spec.width - 2.0 * margin
    span_y = spec.height - 2.0 * margin
    if span_x <= 0 or span_y <= 0:
        raise PackingError("objects do not fit the canvas at all")
    spacing = spec.spacing()
    if spacing <= 0.0:
        xs = rng.uniform(margin, spec.width - margin, size=total)
        ys = rng.uniform(margin, spec.height - margin, size=total)
        return np.column_stack([xs, ys])
    jitter = 0.08 * spacing
    pitch = spacing + 2.0 * jitter
    nx = int(span_x // pitch) + 1
    ny = int(span_y // pitch) + 1
    if nx * ny < total:
        raise PackingError(
            f"cannot place {total} objects with {spacing:.0f}px spacing on a "
            f"{spec.width}x{spec.height} canvas ({nx * ny} sites available)"
        )
    cells = rng.permutation(nx * ny)[:total]
    gx = margin + (cells % nx) * pitch + rng.uniform(-jitter, jitter, size=total)
    gy = margin + (cells // nx) * pitch + rng.uniform(-jitter, jitter, size=total)
    gx = np.clip(gx, margin, spec.width - margin)
    gy = np.clip(gy, margin, spec.height - margin)
    return np.column_stack([gx, gy])


def _stamp(canvas: np.ndarray, cx: float, cy: float, profile) -> None:
    r_ext = profile.extent
    x0, x1 = int(np.floor(cx - r_ext - 1)), int(np.ceil(cx + r_ext + 2))
    y0, y1 = int(np.floor(cy - r_ext - 1)), int(np.ceil(cy + r_ext + 2))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, canvas.shape[1]), min(y1, canvas.shape[0])
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    np.maximum(canvas[y0:y1, x0:x1], profile(dist), out=canvas[y0:y1, x0:x1])


class _Disk:
    def __init__(self, radius: float, amp: float, edge: float):
        self.radius, self.amp, self.edge = radius, amp, max(edge, 0.5)
        self.extent = radius + self.edge

    def __call__(self, dist: np.ndarray) -> np.ndarray:
        return self.amp * np.clip((self.radius - dist) / self.edge + 0.5, 0.0, 1.0)


class _Ring:
    def __init__(self, radius: float, amp: float, edge: float):
        self.radius, self.amp, self.edge = radius, amp, max(edge, 0.5)
        self.inner = 0.55 * radius
        self.extent = radius + self.edge

    def __call__(self, dist: np.ndarray) -> np.ndarray:
        outer = np.clip((self.radius - dist) / self.edge + 0.5, 0.0, 1.0)
        inner = np.clip((self.inner - dist) / self.edge + 0.5, 0.0, 1.0)
        return self.amp * np.clip(outer - inner, 0.0, 1.0)


def generate_synthetic(spec: GeneratorSpec, seed: int) -> tuple[np.ndarray, GroundTruth]:
    """Deterministic synthetic scene: (H, W, 1) pixels in [0,1] plus dot list."""
    if spec.kind not in ("disk", "ring", "two-type"):
        raise ValueError(f"unknown object kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    secondary = spec.count_secondary or spec.count if spec.kind == "two-type" else 0
    centers = _place_centers(spec, spec.count + secondary, rng)

    canvas = np.zeros((spec.height, spec.width))
    types: list[str] = []
    ring_lo = spec.secondary_radius_min or spec.radius_min
    ring_hi = spec.secondary_radius_max or spec.radius_max
    for i, (cx, cy) in enumerate(centers):
        amp = 1.0 - rng.uniform(0.0, spec.intensity_jitter)
        if spec.kind == "disk" or (spec.kind == "two-type" and i < spec.count):
            radius = rng.uniform(spec.radius_min, spec.radius_max)
            _stamp(canvas, cx, cy, _Disk(radius, amp, spec.edge_softness))
            types.append("disk")
        else:
            radius = rng.uniform(ring_lo, ring_hi)
            _stamp(canvas, cx, cy, _Ring(radius, amp, spec.edge_softness))
            types.append("ring")

    image = spec.background_level + (1.0 - spec.background_level) * canvas
    if spec.background_noise > 0.0:
        image = image + rng.normal(0.0, spec.background_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)[:, :, None]

    points = np.round(centers).astype(np.int64)
    gt = GroundTruth(points, types if spec.kind == "two-type" else None)
    return image, gt
