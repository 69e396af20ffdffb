import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from ssmclip.metrics import (GeometryReport, ReportRow, SimilarityMatrix, alignment, check_unit_norm, geometry,
                             hubness_skew, k_occurrence, match_ranks, retrieval_recall, skewness, uniformity,
                             write_csv, zero_shot_classify)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_recall(S, K):
    """Direct rank counting with explicit lower-index tie-breaks."""
    n = S.shape[0]
    tr = ir = 0
    for i in range(n):
        row = sorted(range(n), key=lambda j: (-S[i, j], j))
        tr += i in row[:K]
        col = sorted(range(n), key=lambda j: (-S[j, i], j))
        ir += i in col[:K]
    return ir / n, tr / n


def test_diagonal_dominant_gives_perfect_recall(rng):
    S = rng.uniform(-0.5, 0.5, size=(7, 7)) + 2 * np.eye(7)
    assert retrieval_recall(SimilarityMatrix(np.clip(S, -1, 1)), 1) == (1.0, 1.0)


def test_ties_resolved_by_lower_index():
    # with every score equal only matches whose index is below K can be found
    n = 4
    for K in range(1, n + 1):
        ir, tr = retrieval_recall(SimilarityMatrix(np.zeros((n, n))), K)
        assert tr == ir == K / n
    hits = []
    for perm in itertools.permutations(range(n)):
        _, tr = retrieval_recall(SimilarityMatrix(np.zeros((n, n)), pairing=np.array(perm)), 2)
        hits.append(tr)
    assert np.mean(hits) == pytest.approx(2 / n)


def test_random_embeddings_near_chance():
    vals = []
    for seed in range(50):
        r = np.random.default_rng(seed)
        S = SimilarityMatrix.from_embeddings(unit_rows(r, 100, 16), unit_rows(r, 100, 16))
        vals.append(retrieval_recall(S, 1)[1])
    # mean of 5000 Bernoulli(0.01) draws: sd is about 0.0014
    assert np.mean(vals) == pytest.approx(0.01, abs=0.006)


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 15))
def test_recall_matches_brute_force(seed, n):
    r = np.random.default_rng(seed)
    S = np.round(r.uniform(-1, 1, size=(n, n)), 1)      # rounding creates ties
    for K in (1, min(3, n), n):
        assert retrieval_recall(SimilarityMatrix(S), K) == brute_recall(S, K)


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 20))
def test_recall_invariant_to_relabeling(seed, n):
    r = np.random.default_rng(seed)
    S = r.uniform(-1, 1, size=(n, n))
    perm = r.permutation(n)
    K = int(r.integers(1, n + 1))
    assert retrieval_recall(SimilarityMatrix(S), K) == retrieval_recall(SimilarityMatrix(S[perm][:, perm]), K)


def test_similarity_matrix_validation():
    with pytest.raises(ValueError):
        SimilarityMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        SimilarityMatrix(np.zeros((2, 3)), pairing=[1, 1])
    with pytest.raises(ValueError):
        SimilarityMatrix(np.zeros((2, 3)), pairing=[0, 3])
    with pytest.raises(ValueError):
        retrieval_recall(SimilarityMatrix(np.zeros((3, 3))), 4)
    with pytest.raises(ValueError):
        check_unit_norm(np.ones((2, 3)))


def test_rectangular_gallery_with_pairing(rng):
    txt = unit_rows(rng, 5, 4)
    pairing = np.array([4, 0, 2])
    S = SimilarityMatrix.from_embeddings(txt[pairing], txt, pairing)
    assert retrieval_recall(S, 1) == (1.0, 1.0)


def test_zero_shot_examples(rng):
    txt = unit_rows(rng, 12, 8)
    img = unit_rows(rng, 12, 8)
    zs = zero_shot_classify(img, txt, np.arange(12))
    assert zs.acc1 == retrieval_recall(SimilarityMatrix.from_embeddings(img, txt), 1)[1]
    two = unit_rows(rng, 2, 8)
    res = zero_shot_classify(two[:1], two, [0])
    assert res.acc1 == 1.0 and res.acc5 is None and "omitted" in res.note


def test_zero_shot_random_near_chance():
    accs = []
    for seed in range(40):
        r = np.random.default_rng(seed)
        accs.append(zero_shot_classify(unit_rows(r, 200, 16), unit_rows(r, 32, 16),
                                       r.integers(0, 32, size=200)).acc1)
    assert np.mean(accs) == pytest.approx(1 / 32, abs=0.01)


def test_geometry_goldens(rng):
    u = unit_rows(rng, 10, 5)
    assert alignment(u, u.copy()) == 0.0
    anti = np.array([[0.0, 1.0], [0.0, -1.0]])
    assert uniformity(anti) == pytest.approx(-8.0, abs=1e-9)
    assert skewness(np.full(7, 2.0)) == 0.0
    ang = 2 * np.pi * np.arange(12) / 12
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    np.testing.assert_array_equal(k_occurrence(ring, ring, 3), np.full(12, 3))
    assert hubness_skew(ring, ring, 3) == 0.0


def test_skewness_hand_value():
    # population skewness of [0, 0, 0, 4]: mean 1, m2 = 3, m3 = 6
    assert skewness(np.array([0.0, 0.0, 0.0, 4.0])) == pytest.approx(6 / 3 ** 1.5)


def test_uniformity_against_direct_mean(rng):
    x = unit_rows(rng, 9, 3)
    pairs = [np.exp(-2 * np.sum((x[i] - x[j]) ** 2)) for i in range(9) for j in range(i + 1, 9)]
    assert uniformity(x) == pytest.approx(np.log(np.mean(pairs)), rel=1e-12)
    with pytest.raises(ValueError):
        uniformity(x[:1])


@given(st.integers(0, 2 ** 32 - 1))
def test_metric_ranges_and_rotation_invariance(seed):
    r = np.random.default_rng(seed)
    img, txt = unit_rows(r, 12, 4), unit_rows(r, 12, 4)
    rep = geometry(img, txt, k=3)
    assert rep.alignment >= 0 and rep.uniformity_img <= 0 and rep.uniformity_txt <= 0
    assert all(0.0 <= v <= 1.0 for v in rep.recall.values())
    Q = special_ortho_group.rvs(4, random_state=seed % 2 ** 31)
    assert alignment(img @ Q, txt @ Q) == pytest.approx(rep.alignment, rel=1e-10, abs=1e-12)


def test_report_rows_and_csv(tmp_path, rng):
    rep = geometry(unit_rows(rng, 20, 4), unit_rows(rng, 20, 4))
    assert isinstance(rep, GeometryReport)
    names = [n for n, _ in rep.rows()]
    assert "alignment" in names and "IR@1" in names and "TR@10" in names
    row = ReportRow("alignment", 0.5, resolution=64, arch="ssm")
    assert str(row) == "metric=alignment value=0.5 resolution=64 arch=ssm"
    assert str(ReportRow("x", 1.25)) == "metric=x value=1.25"
    path = tmp_path / "out.csv"
    write_csv(path, [row])
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:2] == ["metric", "value"]
    assert lines[1].startswith("alignment,0.5")


def test_match_ranks_simple():
    scores = np.array([[0.1, 0.9, 0.5], [0.3, 0.3, 0.3]])
    np.testing.assert_array_equal(match_ranks(scores, np.array([2, 2])), [1, 2])
