import numpy as np
import pytest

from countloop.active_loop import (
    CLUSTERS_PER_SET,
    CandidateSet,
    LabelDecision,
    LabelSets,
    Query,
    QueryBatch,
    apply_feedback,
    cluster_latents,
    extract_candidates,
    latent_at,
    select_queries,
    split_candidates,
)
from countloop.network import ForwardPass
from countloop.tensor_ops import PoolSwitches

from helpers import nearest_label_split_oracle


def fake_forward(c: np.ndarray, c2: np.ndarray) -> ForwardPass:
    sw = PoolSwitches(np.zeros((*c2.shape[:2], c2.shape[2]), dtype=np.uint8), c.shape[0], c.shape[1])
    return ForwardPass(c=c, c2=c2, switches=sw, cache={})


def unit_latents(h, w, d, seed):
    v = np.random.default_rng(seed).standard_normal((h, w, d))
    return v / np.linalg.norm(v, axis=2, keepdims=True)


def labels_with(pos=None, neg=None):
    ls = LabelSets()
    if pos is not None and len(pos):
        ls.add_positives(np.asarray(pos), "ncc-init", 0)
    if neg is not None and len(neg):
        ls.add_negatives(np.asarray(neg), "ncc-init", 0)
    return ls


class TestLabelSets:
    def test_append_only_and_disjoint(self):
        ls = labels_with(pos=[[1, 1]], neg=[[5, 5]])
        with pytest.raises(ValueError, match="collide"):
            ls.add_negatives(np.array([[1, 1]]), "user-confirmed", 1)
        ls.add_positives(np.array([[2, 2]]), "tentative-accepted", 1)
        assert ls.counts == (2, 1)
        assert ls.pos_meta[1] == ("tentative-accepted", 1)

    def test_duplicate_adds_ignored(self):
        ls = labels_with(pos=[[1, 1]])
        assert ls.add_positives(np.array([[1, 1]]), "ncc-init", 1) == 0
        assert ls.counts == (1, 0)


class TestExtractCandidates:
    def test_all_negative_map_empty(self):
        c = np.full((40, 40), -0.5)
        fp = fake_forward(c, unit_latents(20, 20, 4, 0))
        assert len(extract_candidates(fp, labels_with(pos=[[1, 1]]))) == 0

    def test_labeled_neighborhood_omitted(self):
        c = np.full((40, 40), -1.0)
        for x, y in [(10, 10), (30, 10), (20, 30)]:
            c[y, x] = 1.0
        fp = fake_forward(c, unit_latents(20, 20, 4, 1))
        got = extract_candidates(fp, labels_with(pos=[[10, 10]], neg=[[1, 1]]))
        assert sorted(map(tuple, got.tolist())) == [(20, 30), (30, 10)]

    def test_near_positive_label_within_window_omitted(self):
        c = np.full((40, 40), -1.0)
        c[12, 13] = 1.0  # 3 px from the label at (10, 12): inside the 11x11 window
        fp = fake_forward(c, unit_latents(20, 20, 4, 2))
        assert len(extract_candidates(fp, labels_with(pos=[[10, 12]]))) == 0

    def test_near_negative_label_kept_exact_coordinate_dropped(self):
        c = np.full((40, 40), -1.0)
        c[12, 13] = 1.0
        c[30, 30] = 1.0
        fp = fake_forward(c, unit_latents(20, 20, 4, 2))
        # negative 3 px away blocks nothing; negative exactly on a peak removes it
        got = extract_candidates(fp, labels_with(pos=[[1, 1]], neg=[[10, 12], [30, 30]]))
        assert sorted(map(tuple, got.tolist())) == [(13, 12)]

    def test_zero_value_peak_kept(self):
        c = np.full((40, 40), -1.0)
        c[20, 20] = 0.0
        fp = fake_forward(c, unit_latents(20, 20, 4, 3))
        got = extract_candidates(fp, labels_with(pos=[[1, 1]]))
        assert (20, 20) in set(map(tuple, got.tolist()))


class TestSplitCandidates:
    def test_identical_latent_goes_positive(self):
        c2 = unit_latents(10, 10, 6, 4)
        c2[2, 2] = c2[1, 1]  # candidate cell (2,2) equals the P-label cell (1,1)
        fp = fake_forward(np.zeros((20, 20)), c2)
        cands = split_candidates(fp, np.array([[4, 4]]), labels_with(pos=[[2, 2]], neg=[[18, 18]]))
        assert cands.pos_side.tolist() == [True]
        assert cands.d_w[0] == pytest.approx(0.0)

    def test_tie_goes_positive(self):
        c2 = np.zeros((4, 4, 2))
        c2[:, :, 0] = 1.0  # every latent identical: equidistant to P and N
        fp = fake_forward(np.zeros((8, 8)), c2)
        cands = split_candidates(fp, np.array([[4, 4]]), labels_with(pos=[[0, 0]], neg=[[6, 6]]))
        assert cands.pos_side.tolist() == [True]

    def test_empty_negatives_all_positive_side(self):
        fp = fake_forward(np.zeros((12, 12)), unit_latents(6, 6, 4, 5))
        cands = split_candidates(fp, np.array([[2, 2], [8, 8]]), labels_with(pos=[[4, 4]]))
        assert cands.pos_side.all()

    def test_no_labels_invalid(self):
        fp = fake_forward(np.zeros((12, 12)), unit_latents(6, 6, 4, 6))
        with pytest.raises(ValueError):
            split_candidates(fp, np.array([[2, 2]]), LabelSets())

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(25):
            h = w = 16
            c2 = unit_latents(h, w, 8, 100 + trial)
            fp = fake_forward(np.zeros((2 * h, 2 * w)), c2)
            def draw(k):
                return np.column_stack([rng.integers(0, 2 * w, k), rng.integers(0, 2 * h, k)])
            cands_xy = np.unique(draw(12), axis=0)
            pos_xy = np.unique(draw(4), axis=0)
            neg_xy = np.unique(np.minimum(draw(4) + [[1, 0]], 2 * w - 1), axis=0)
            overlap = set(map(tuple, pos_xy.tolist()))
            neg_xy = np.array([p for p in neg_xy.tolist() if tuple(p) not in overlap])
            labels = labels_with(pos=pos_xy, neg=neg_xy)
            got = split_candidates(fp, cands_xy, labels)
            want = nearest_label_split_oracle(
                latent_at(fp, cands_xy),
                latent_at(fp, pos_xy),
                latent_at(fp, neg_xy) if len(neg_xy) else np.empty((0, 8)),
            )
            assert got.pos_side.tolist() == want.tolist(), f"trial {trial}"


class TestClusterLatents:
    def test_single_point_single_cluster(self):
        rng = np.random.default_rng(8)
        asg = cluster_latents(rng.standard_normal((1, 6)), 10, rng)
        assert asg.labels.tolist() == [0]
        assert len(asg.centroids) == 1

    def test_separated_blobs_recovered(self):
        rng = np.random.default_rng(9)
        a = rng.normal(0, 0.01, (20, 4)) + [10, 0, 0, 0]
        b = rng.normal(0, 0.01, (20, 4)) - [10, 0, 0, 0]
        asg = cluster_latents(np.vstack([a, b]), 2, np.random.default_rng(10))
        la, lb = set(asg.labels[:20].tolist()), set(asg.labels[20:].tolist())
        assert len(la) == 1 and len(lb) == 1 and la != lb

    def test_wcss_not_worse_than_random_restarts(self):
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((50, 8))
        asg = cluster_latents(pts, 10, np.random.default_rng(12))
        wcss = sum(
            float(((pts[asg.labels == i] - c) ** 2).sum())
            for i, c in enumerate(asg.centroids)
        )
        worst = -np.inf
        for seed in range(20):
            rr = np.random.default_rng(1000 + seed)
            cent = pts[rr.choice(50, size=10, replace=False)]
            for _ in range(30):
                d = ((pts[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
                lab = d.argmin(axis=1)
                for i in range(10):
                    if (lab == i).any():
                        cent[i] = pts[lab == i].mean(axis=0)
            d = ((pts[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
            worst = max(worst, float(d.min(axis=1).sum()))
        assert wcss <= worst + 1e-9

    def test_empty_set(self):
        asg = cluster_latents(np.empty((0, 4)), 10, np.random.default_rng(13))
        assert len(asg.labels) == 0

    def test_deterministic_given_rng_state(self):
        pts = np.random.default_rng(14).standard_normal((30, 5))
        a = cluster_latents(pts, 7, np.random.default_rng(15))
        b = cluster_latents(pts, 7, np.random.default_rng(15))
        assert np.array_equal(a.labels, b.labels)


def make_candidate_set(coords, d_w, pos_side, dim=4):
    coords = np.asarray(coords)
    latents = np.zeros((len(coords), dim))
    return CandidateSet(coords=coords, latents=latents,
                        d_w=np.asarray(d_w, dtype=float), pos_side=np.asarray(pos_side))


class TestSelectQueries:
    def test_top_five_singleton_clusters(self):
        coords = [[i * 20, 50] for i in range(10)]
        d_w = [0.1 * (i + 1) for i in range(10)]
        cands = make_candidate_set(coords, d_w, [True] * 10)
        from countloop.active_loop import ClusterAssignment

        asg = ClusterAssignment(np.arange(10), np.zeros((10, 4)))
        batch = select_queries(cands, {True: asg, False: None}, iteration=1)
        assert len(batch) == 5
        assert all(q.tentative == "pos" for q in batch.queries)
        # top d_w first, sorted descending
        assert [q.x for q in batch.queries] == [180, 160, 140, 120, 100]
        assert all(batch.queries[i].d_w >= batch.queries[i + 1].d_w for i in range(4))

    def test_cluster_argmax_wins(self):
        coords = [[10, 10], [90, 90]]
        cands = make_candidate_set(coords, [0.0, 5.0], [True, True])
        from countloop.active_loop import ClusterAssignment

        asg = ClusterAssignment(np.array([0, 0]), np.zeros((1, 4)))
        batch = select_queries(cands, {True: asg, False: None}, iteration=1)
        assert len(batch) == 1
        assert (batch.queries[0].x, batch.queries[0].y) == (90, 90)

    def test_sides_keep_tentative_labels(self):
        coords = [[10, 10], [60, 60]]
        cands = make_candidate_set(coords, [1.0, 2.0], [True, False])
        from countloop.active_loop import ClusterAssignment

        asg_p = ClusterAssignment(np.array([0]), np.zeros((1, 4)))
        asg_n = ClusterAssignment(np.array([0]), np.zeros((1, 4)))
        batch = select_queries(cands, {True: asg_p, False: asg_n}, iteration=2)
        labels = {(q.x, q.y): q.tentative for q in batch.queries}
        assert labels == {(10, 10): "pos", (60, 60): "neg"}

    def test_at_most_one_query_per_cluster(self):
        rng = np.random.default_rng(16)
        coords = np.column_stack([rng.integers(0, 200, 30), rng.integers(0, 200, 30)])
        cands = make_candidate_set(coords, rng.random(30), [True] * 30)
        from countloop.active_loop import ClusterAssignment

        asg = ClusterAssignment(rng.integers(0, CLUSTERS_PER_SET, 30), np.zeros((CLUSTERS_PER_SET, 4)))
        batch = select_queries(cands, {True: asg, False: None}, iteration=1)
        clusters = [q.cluster for q in batch.queries]
        assert len(clusters) == len(set(clusters))


class TestApplyFeedback:
    def batch(self):
        return QueryBatch(iteration=1, queries=(
            Query(x=10, y=10, tentative="pos", d_w=1.0, cluster=0, rect=(0, 0, 21, 21)),
            Query(x=50, y=50, tentative="neg", d_w=0.9, cluster=1, rect=(40, 40, 21, 21)),
            Query(x=90, y=90, tentative="pos", d_w=0.8, cluster=2, rect=(80, 80, 21, 21)),
        ))

    def test_all_accepted(self):
        ls = labels_with(pos=[[1, 1]], neg=[[3, 3]])
        stats = apply_feedback(ls, self.batch(), [], iteration=1)
        assert stats == {"added_pos": 2, "added_neg": 1, "clicks": 0}
        assert ls.counts == (3, 2)

    def test_flip_lands_opposite(self):
        ls = labels_with(pos=[[1, 1]], neg=[[3, 3]])
        stats = apply_feedback(ls, self.batch(), [LabelDecision(10, 10, "flip")], iteration=1)
        assert stats["clicks"] == 1
        assert (10, 10) in set(map(tuple, ls.neg.tolist()))

    def test_undetermined_excluded(self):
        ls = labels_with(pos=[[1, 1]], neg=[[3, 3]])
        stats = apply_feedback(ls, self.batch(), [LabelDecision(50, 50, "undetermined")], iteration=1)
        assert stats["clicks"] == 1
        assert ls.counts == (3, 1)
        assert not ls.is_labeled((50, 50))

    def test_decision_outside_batch_rejected(self):
        ls = labels_with(pos=[[1, 1]])
        with pytest.raises(ValueError, match="not in the current batch"):
            apply_feedback(ls, self.batch(), [LabelDecision(0, 0, "flip")], iteration=1)

    def test_flip_provenance_recorded(self):
        ls = labels_with(pos=[[1, 1]], neg=[[3, 3]])
        apply_feedback(ls, self.batch(), [LabelDecision(50, 50, "flip")], iteration=4)
        idx = [tuple(c) for c in ls.pos.tolist()].index((50, 50))
        assert ls.pos_meta[idx] == ("user-confirmed", 4)
