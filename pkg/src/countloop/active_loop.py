"""The active-learning engine: candidate extraction, latent clustering, query
selection, feedback application, retraining, and final detection.

A Session owns one image (rescaled working copy plus transform), the label
sets, the classifier, and the interaction log. Responders are callables
(batch -> list[LabelDecision]); the simulated user and the HTTP service both
plug in here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.spatial.distance import cdist

from .imgio import Image, RescaleTransform
from .matching import (
    MIN_INITIAL_POSITIVES,
    SUPPRESSION_WINDOW,
    TEMPLATE_SIZE,
    BoundingWindow,
    init_labels,
    max_suppress,
)
from .network import (
    ClassifierState,
    ForwardPass,
    NetworkConfig,
    classify,
    detect,
    init_classifier,
    select_capacity,
    train_to_labels,
)

QUERIES_PER_SET = 5
CLUSTERS_PER_SET = 10

PROVENANCE_NCC = "ncc-init"
PROVENANCE_ACCEPTED = "tentative-accepted"
PROVENANCE_CONFIRMED = "user-confirmed"


class LabelSets:
    """Disjoint, append-only positive/negative coordinate sets with provenance."""

    def __init__(self) -> None:
        self.pos = np.empty((0, 2), dtype=np.int64)
        self.neg = np.empty((0, 2), dtype=np.int64)
        self.pos_meta: list[tuple[str, int]] = []
        self.neg_meta: list[tuple[str, int]] = []
        self._seen: set[tuple[int, int]] = set()

    def _add(self, coords: np.ndarray, provenance: str, iteration: int, positive: bool) -> int:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        fresh = [c for c in map(tuple, coords.tolist()) if c not in self._seen]
        if not fresh:
            return 0
        self._seen.update(fresh)
        arr = np.asarray(fresh, dtype=np.int64)
        meta = [(provenance, iteration)] * len(fresh)
        if positive:
            self.pos = np.concatenate([self.pos, arr])
            self.pos_meta.extend(meta)
        else:
            self.neg = np.concatenate([self.neg, arr])
            self.neg_meta.extend(meta)
        return len(fresh)

    def add_positives(self, coords, provenance: str, iteration: int) -> int:
        overlap = self._overlap(coords, self.neg)
        if overlap:
            raise ValueError(f"positive labels collide with negatives at {overlap[:5]}")
        return self._add(coords, provenance, iteration, positive=True)

    def add_negatives(self, coords, provenance: str, iteration: int) -> int:
        overlap = self._overlap(coords, self.pos)
        if overlap:
            raise ValueError(f"negative labels collide with positives at {overlap[:5]}")
        return self._add(coords, provenance, iteration, positive=False)

    @staticmethod
    def _overlap(coords, existing: np.ndarray) -> list:
        if len(existing) == 0:
            return []
        want = set(map(tuple, np.asarray(coords, dtype=np.int64).reshape(-1, 2).tolist()))
        have = set(map(tuple, existing.tolist()))
        return sorted(want & have)

    def is_labeled(self, coord: tuple[int, int]) -> bool:
        return tuple(coord) in self._seen

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.pos), len(self.neg)


@dataclass(frozen=True)
class Query:
    x: int
    y: int
    tentative: str  # "pos" | "neg"
    d_w: float
    cluster: int
    rect: tuple[int, int, int, int]  # display window in rescaled space


@dataclass(frozen=True)
class QueryBatch:
    iteration: int
    queries: tuple[Query, ...]

    def __len__(self) -> int:
        return len(self.queries)


@dataclass(frozen=True)
class LabelDecision:
    x: int
    y: int
    action: str  # "accept" | "flip" | "undetermined"

    def __post_init__(self) -> None:
        if self.action not in ("accept", "flip", "undetermined"):
            raise ValueError(f"unknown decision action {self.action!r}")


@dataclass
class CandidateSet:
    coords: np.ndarray  # (K, 2)
    latents: np.ndarray  # (K, 2N) unit vectors
    d_w: np.ndarray  # (K,) latent distance to nearest labeled coordinate
    pos_side: np.ndarray  # (K,) bool: True -> W^P

    def side(self, positive: bool) -> np.ndarray:
        return np.nonzero(self.pos_side == positive)[0]


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # (K,) cluster index per member
    centroids: np.ndarray  # (k, D)


def latent_at(fp: ForwardPass, coords: np.ndarray) -> np.ndarray:
    cells = coords // 2
    return fp.c2[cells[:, 1], cells[:, 0], :]


def extract_candidates(fp: ForwardPass, labels: LabelSets, window: int = SUPPRESSION_WINDOW) -> np.ndarray:
    """Suppressed positive classification peaks, minus labeled coordinates.

    Positive labels block their whole suppression window (their object is
    already resolved, re-querying it would waste a click); negative labels
    block only their exact pixel — they are dense around objects, and blanket
    neighborhood exclusion would leave nothing to query.
    """
    peaks = max_suppress(fp.c, window)
    if len(peaks) == 0:
        return peaks
    keep = fp.c[peaks[:, 1], peaks[:, 0]] >= 0.0
    peaks = peaks[keep]
    if len(peaks) == 0:
        return peaks
    blocked = np.zeros(fp.c.shape, dtype=np.uint8)
    if len(labels.neg):
        blocked[labels.neg[:, 1], labels.neg[:, 0]] = 1
    if len(labels.pos):
        mask = np.zeros(fp.c.shape, dtype=np.uint8)
        mask[labels.pos[:, 1], labels.pos[:, 0]] = 1
        blocked |= maximum_filter(mask, size=window, mode="constant")
    free = blocked[peaks[:, 1], peaks[:, 0]] == 0
    return peaks[free]


def _labeled_latents(fp: ForwardPass, coords: np.ndarray) -> np.ndarray:
    if len(coords) == 0:
        return np.empty((0, fp.c2.shape[2]))
    cells = np.unique(coords // 2, axis=0)
    return fp.c2[cells[:, 1], cells[:, 0], :]


def _min_sq_dist(queries: np.ndarray, refs: np.ndarray, chunk: int = 8192) -> np.ndarray:
    if len(refs) == 0:
        return np.full(len(queries), np.inf)
    best = np.full(len(queries), np.inf)
    for lo in range(0, len(refs), chunk):
        d = cdist(queries, refs[lo : lo + chunk], metric="sqeuclidean")
        np.minimum(best, d.min(axis=1), out=best)
    return best


def split_candidates(fp: ForwardPass, cand_coords: np.ndarray, labels: LabelSets) -> CandidateSet:
    """Partition candidates by their nearest labeled latent (ties and an empty
    negative set both land on the positive side), computing d_w on the way."""
    n_pos, n_neg = labels.counts
    if n_pos == 0 and n_neg == 0:
        raise ValueError("cannot split candidates before any labels exist")
    latents = latent_at(fp, cand_coords)
    dp = _min_sq_dist(latents, _labeled_latents(fp, labels.pos))
    dn = _min_sq_dist(latents, _labeled_latents(fp, labels.neg))
    d_w = np.sqrt(np.minimum(dp, dn))
    return CandidateSet(coords=cand_coords, latents=latents, d_w=d_w, pos_side=dp <= dn)


def cluster_latents(latents: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> ClusterAssignment:
    """Seeded k-means++ plus Lloyd iterations to an assignment fixpoint; empty
    clusters are re-seeded from the farthest point."""
    n = len(latents)
    if n == 0:
        return ClusterAssignment(np.empty(0, dtype=np.int64), np.empty((0, latents.shape[1] if latents.ndim == 2 else 0)))
    k = min(k, n)
    centroids = np.empty((k, latents.shape[1]))
    centroids[0] = latents[int(rng.integers(n))]
    closest = cdist(latents, centroids[:1], "sqeuclidean")[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 1e-18:
            centroids[i:] = latents[int(rng.integers(n))]
            break
        centroids[i] = latents[int(rng.choice(n, p=closest / total))]
        np.minimum(closest, cdist(latents, centroids[i : i + 1], "sqeuclidean")[:, 0], out=closest)

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = cdist(latents, centroids, "sqeuclidean")
        new_assign = dists.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for ci in range(k):
            members = latents[assign == ci]
            if len(members):
                centroids[ci] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(dists[np.arange(n), assign]))
                centroids[ci] = latents[farthest]
    return ClusterAssignment(assign, centroids)


def select_queries(
    cands: CandidateSet,
    assignments: dict[bool, ClusterAssignment],
    iteration: int,
    per_set: int = QUERIES_PER_SET,
) -> QueryBatch:
    """Per cluster, the member farthest from any label; then the top per_set by
    d_w from each side. Tentative labels follow the side of origin."""
    queries: list[Query] = []
    half = TEMPLATE_SIZE // 2
    for positive in (True, False):
        idx = cands.side(positive)
        assignment = assignments.get(positive)
        if assignment is None or len(idx) == 0:
            continue
        reps: list[tuple[float, int, int]] = []  # (d_w, cand index, cluster)
        for ci in range(len(assignment.centroids)):
            members = idx[assignment.labels == ci]
            if len(members) == 0:
                continue
            dws = cands.d_w[members]
            best = dws.max()
            ties = members[dws == best]
            order = np.lexsort((cands.coords[ties, 0], cands.coords[ties, 1]))
            reps.append((float(best), int(ties[order[0]]), ci))
        reps.sort(key=lambda r: (-r[0], cands.coords[r[1], 1], cands.coords[r[1], 0]))
        for d_w, cand_idx, ci in reps[:per_set]:
            x, y = map(int, cands.coords[cand_idx])
            queries.append(
                Query(
                    x=x, y=y,
                    tentative="pos" if positive else "neg",
                    d_w=d_w, cluster=ci,
                    rect=(x - half, y - half, TEMPLATE_SIZE, TEMPLATE_SIZE),
                )
            )
    return QueryBatch(iteration=iteration, queries=tuple(queries))


def apply_feedback(labels: LabelSets, batch: QueryBatch, decisions: list[LabelDecision], iteration: int) -> dict:
    """Fold user decisions into the label sets.

    Absent decisions mean accept-tentative; flips land on the opposite side,
    undetermined queries on neither. Returns counters for the log.
    """
    by_coord = {(q.x, q.y): q for q in batch.queries}
    decided: dict[tuple[int, int], str] = {}
    for dec in decisions:
        key = (dec.x, dec.y)
        if key not in by_coord:
            raise ValueError(f"decision for {key} which is not in the current batch")
        decided[key] = dec.action
    added_pos, added_neg, clicks = 0, 0, 0
    for key, query in by_coord.items():
        action = decided.get(key, "accept")
        if action != "accept":
            clicks += 1
        if action == "undetermined":
            continue
        tentative_pos = query.tentative == "pos"
        final_pos = tentative_pos if action == "accept" else not tentative_pos
        provenance = PROVENANCE_ACCEPTED if action == "accept" else PROVENANCE_CONFIRMED
        coord = np.array([[query.x, query.y]])
        if final_pos:
            added_pos += labels.add_positives(coord, provenance, iteration)
        else:
            added_neg += labels.add_negatives(coord, provenance, iteration)
    return {"added_pos": added_pos, "added_neg": added_neg, "clicks": clicks}


# ---------------------------------------------------------------------------
# session


class InsufficientPositives(ValueError):
    def __init__(self, found: int):
        self.found = found
        super().__init__(
            f"only {found} positive labels found; at least {MIN_INITIAL_POSITIVES} "
            "are required — mark additional bounding windows"
        )


@dataclass
class Session:
    image: Image  # rescaled working image
    transform: RescaleTransform
    config: NetworkConfig
    seed: int
    labels: LabelSets = field(default_factory=LabelSets)
    classifier: ClassifierState | None = None
    forward: ForwardPass | None = None
    iteration: int = 0
    clicks: int = 0
    log: list[dict] = field(default_factory=list)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    # -- initialization ----------------------------------------------------

    def harvest_initial_labels(self, windows: list[BoundingWindow]) -> int:
        """NCC label harvest from rescaled-space windows. Raises
        InsufficientPositives when below the required minimum."""
        t0 = time.perf_counter()
        init = init_labels(self.image.pixels, windows)
        self.labels = LabelSets()
        self.labels.add_positives(init.positives, PROVENANCE_NCC, 0)
        self.labels.add_negatives(init.negatives, PROVENANCE_NCC, 0)
        self._log("init-labels", positives=len(init.positives), negatives=len(init.negatives),
                  insufficient=bool(init.insufficient), wall_time=time.perf_counter() - t0)
        if init.insufficient:
            raise InsufficientPositives(len(init.positives))
        return len(init.positives)

    def select_network_capacity(self) -> int:
        t0 = time.perf_counter()
        result = select_capacity(self.image.pixels, self.config, seed=self.seed)
        self.config.n_filters = result.n_filters
        self._log("capacity", n_filters=result.n_filters,
                  errors={str(k): v for k, v in result.errors.items()},
                  wall_time=time.perf_counter() - t0)
        return result.n_filters

    def train_initial(self) -> int:
        if self.classifier is None:
            self.classifier = init_classifier(self.config, self.seed)
        return self._train("train-init")

    def _train(self, phase: str) -> int:
        t0 = time.perf_counter()
        result = train_to_labels(self.classifier, self.image.pixels, self.labels.pos, self.labels.neg)
        self.forward = result.forward
        self._log(phase, steps=result.steps, loss=result.final_loss,
                  labels=self.labels.counts, wall_time=time.perf_counter() - t0)
        return result.steps

    # -- the iteration cycle ------------------------------------------------

    def build_queries(self) -> QueryBatch:
        """Candidate extraction through query selection, no user involved."""
        if self.forward is None:
            raise RuntimeError("session is not trained yet")
        cand_coords = extract_candidates(self.forward, self.labels)
        if len(cand_coords) == 0:
            return QueryBatch(iteration=self.iteration + 1, queries=())
        cands = split_candidates(self.forward, cand_coords, self.labels)
        assignments = {}
        for positive in (True, False):
            idx = cands.side(positive)
            assignments[positive] = cluster_latents(cands.latents[idx], CLUSTERS_PER_SET, self.rng)
        return select_queries(cands, assignments, self.iteration + 1)

    def run_iteration(self, responder) -> dict:
        """One full cycle: queries -> decisions -> feedback -> retrain."""
        t0 = time.perf_counter()
        batch = self.build_queries()
        record: dict = {"iteration": self.iteration + 1, "queries": [
            {"x": q.x, "y": q.y, "tentative": q.tentative, "d_w": round(q.d_w, 6), "cluster": q.cluster}
            for q in batch.queries
        ]}
        if len(batch) == 0:
            self.iteration += 1
            record.update({"decisions": [], "clicks": 0, "train_steps": 0})
            self._log("iteration", **record, wall_time=time.perf_counter() - t0)
            return record
        decisions = responder(batch)
        stats = apply_feedback(self.labels, batch, decisions, self.iteration + 1)
        self.clicks += stats["clicks"]
        train_result = train_to_labels(self.classifier, self.image.pixels, self.labels.pos, self.labels.neg)
        self.forward = train_result.forward
        self.iteration += 1
        record.update({
            "decisions": [{"x": d.x, "y": d.y, "action": d.action} for d in decisions],
            "clicks": stats["clicks"],
            "added_pos": stats["added_pos"],
            "added_neg": stats["added_neg"],
            "train_steps": train_result.steps,
            "labels": self.labels.counts,
        })
        self._log("iteration", **record, wall_time=time.perf_counter() - t0)
        return record

    # -- results -------------------------------------------------------------

    def count_estimate(self) -> int:
        if self.forward is None:
            return 0
        return int(len(detect(self.forward)))

    def final_detections(self) -> np.ndarray:
        """Positive suppressed pixels of the final map, in original coordinates."""
        if self.forward is None:
            raise RuntimeError("session is not trained yet")
        pts = detect(self.forward).astype(np.float64)
        if len(pts) == 0:
            return pts
        ox, oy = self.transform.to_original(pts[:, 0], pts[:, 1])
        return np.column_stack([ox, oy])

    def refresh_forward(self) -> None:
        self.forward = classify(self.classifier, self.image.pixels)

    def _log(self, phase: str, **payload) -> None:
        self.log.append({"phase": phase, **payload})


# ---------------------------------------------------------------------------
# headless driver


@dataclass
class HeadlessResult:
    session: Session
    detections: np.ndarray  # original-space coordinates
    count: int
    iterations_run: int


def expand_windows_from_gt(gt, transform, base: BoundingWindow, existing: list[BoundingWindow]) -> BoundingWindow | None:
    """Pick a ground-truth dot far from existing windows and wrap it in a
    base-sized window — the headless stand-in for a user adding windows."""
    if gt is None or len(gt.points) == 0:
        return None
    centers = np.array([[w.x + w.width / 2, w.y + w.height / 2] for w in existing])
    pts = gt.points.astype(np.float64)
    dists = cdist(pts, centers).min(axis=1)
    order = np.argsort(-dists)
    for idx in order:
        x = int(pts[idx, 0] - base.width // 2)
        y = int(pts[idx, 1] - base.height // 2)
        x = max(0, min(x, transform.orig_width - base.width))
        y = max(0, min(y, transform.orig_height - base.height))
        candidate = BoundingWindow(x=x, y=y, width=base.width, height=base.height)
        if all((candidate.x, candidate.y) != (w.x, w.y) for w in existing):
            return candidate
    return None


def run_headless_session(
    image: Image,
    windows: list[BoundingWindow],
    responder,
    config: NetworkConfig | None = None,
    seed: int = 0,
    iterations: int = 5,
    stop_on_clean_round: bool = True,
    select_capacity_first: bool = True,
    gt=None,
) -> HeadlessResult:
    """Initialization plus a bounded number of feedback iterations.

    With the default policy the loop ends early once a round needs no
    corrections. `gt` (when given) lets the driver add bounding windows if the
    NCC harvest is insufficient, mirroring the interactive flow.
    """
    rescaled, transform, mapped = rescale_for_window_list(image, windows)
    config = config or NetworkConfig(c_in=image.channels)
    if config.c_in != image.channels:
        raise ValueError(f"config expects {config.c_in} channels, image has {image.channels}")
    session = Session(image=rescaled, transform=transform, config=config, seed=seed)

    windows = list(windows)
    while True:
        try:
            session.harvest_initial_labels(mapped)
            break
        except InsufficientPositives:
            extra = expand_windows_from_gt(gt, transform, max(windows, key=lambda w: w.width * w.height), windows)
            if extra is None:
                raise
            windows.append(extra)
            rescaled, transform, mapped = rescale_for_window_list(image, windows)
            session = Session(image=rescaled, transform=transform, config=config, seed=seed)

    if select_capacity_first:
        session.select_network_capacity()
    session.train_initial()

    ran = 0
    for _ in range(iterations):
        record = session.run_iteration(responder)
        ran += 1
        if stop_on_clean_round and record["clicks"] == 0:
            break
    detections = session.final_detections()
    return HeadlessResult(session=session, detections=detections, count=len(detections), iterations_run=ran)


def rescale_for_window_list(image: Image, windows: list[BoundingWindow]):
    from .imgio import rescale_for_window

    return rescale_for_window(image, windows)
