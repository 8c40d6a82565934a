import itertools

import numpy as np
import pytest

from maha.clustering import (
    ClusterModel,
    LatentCatalog,
    agglomerate,
    cut_merges,
    fit_cluster_model,
    linkage_merges,
    purity,
    purity_by_k,
    route,
    route_batch,
    select_k,
    silhouette,
)
from maha.errors import ContractError, ShapeError


def catalog(mu, families):
    mu = np.asarray(mu, dtype=np.float64)
    return LatentCatalog(task_ids=np.arange(len(mu), dtype=np.int64),
                         families=list(families), mu=mu)


# -- agglomerate -----------------------------------------------------------------

def test_k_equals_rows_gives_singletons():
    mu = np.random.default_rng(0).normal(size=(6, 3))
    labels = agglomerate(mu, 6)
    assert sorted(labels.tolist()) == list(range(6))


def test_two_separated_pairs_match_exhaustive_average_linkage():
    # pair gap 100x pair diameter
    mu = np.array([[0.0, 0.0], [0.01, 0.0], [5.0, 5.0], [5.0, 5.01]])
    labels = agglomerate(mu, 2)

    def avg_linkage_cost(partition):
        # largest inter-cluster average distance after the partition; the
        # optimal 2-partition maximizes separation, found by enumeration
        a, b = partition
        d = 0.0
        for i in a:
            for j in b:
                d += np.linalg.norm(mu[i] - mu[j])
        return d / (len(a) * len(b))

    best = None
    for size in range(1, 4):
        for a in itertools.combinations(range(4), size):
            b = tuple(i for i in range(4) if i not in a)
            cost = avg_linkage_cost((a, b))
            if best is None or cost > best[0]:
                best = (cost, set(a))
    got_cluster0 = set(np.flatnonzero(labels == labels[0]).tolist())
    assert got_cluster0 in (best[1], set(range(4)) - best[1])


def test_duplicate_points_merge_first():
    mu = np.array([[1.0, 1.0], [4.0, 0.0], [1.0, 1.0], [9.0, 9.0]])
    merges = linkage_merges(mu)
    assert merges[0] == (0, 2)


def test_agglomerate_deterministic_across_runs():
    mu = np.random.default_rng(3).normal(size=(40, 4))
    a = agglomerate(mu.copy(), 5)
    b = agglomerate(mu.copy(), 5)
    assert np.array_equal(a, b)


def test_agglomerate_rejects_empty():
    with pytest.raises(ContractError):
        linkage_merges(np.zeros((0, 2)))


def test_agglomerate_rejects_k_above_rows():
    with pytest.raises(ContractError):
        agglomerate(np.zeros((3, 2)), 4)


@pytest.mark.parametrize("method", ["average", "single", "complete", "ward"])
def test_all_linkages_recover_clear_clusters(method):
    rng = np.random.default_rng(11)
    blobs = [rng.normal(size=(10, 2)) * 0.1 + c for c in [(0, 0), (20, 0), (0, 20)]]
    mu = np.concatenate(blobs)
    labels = agglomerate(mu, 3, method)
    truth = np.repeat([0, 1, 2], 10)
    assert purity(labels, truth.astype(str)) == 1.0


# -- purity -------------------------------------------------------------------------

def test_purity_perfect_partition():
    assert purity(np.array([0, 0, 1, 1]), ["a", "a", "b", "b"]) == 1.0


def test_purity_single_cluster_over_four_labels():
    labels = ["a", "b", "c", "d"]
    assert purity(np.zeros(4, dtype=int), labels) == 0.25


def test_purity_invariant_under_relabeling():
    rng = np.random.default_rng(5)
    assign = rng.integers(0, 4, size=60)
    fams = rng.integers(0, 3, size=60).astype(str)
    base = purity(assign, fams)
    perm_assign = np.array([3, 1, 0, 2])[assign]
    fam_map = {"0": "x", "1": "y", "2": "z"}
    perm_fams = np.array([fam_map[f] for f in fams])
    assert purity(perm_assign, fams) == base
    assert purity(assign, perm_fams) == base


def test_purity_mismatch_rejected():
    with pytest.raises(ContractError):
        purity(np.zeros(3, dtype=int), ["a", "b"])


def test_purity_nondecreasing_along_dendrogram_cuts():
    rng = np.random.default_rng(7)
    mu = rng.normal(size=(30, 3))
    fams = rng.integers(0, 4, size=30).astype(str)
    table = purity_by_k(mu, fams, range(1, 12))
    vals = [table[k] for k in sorted(table)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


# -- select_k -------------------------------------------------------------------------

def test_select_k_single_family_returns_min():
    mu = np.random.default_rng(1).normal(size=(12, 2))
    assert select_k(mu, ["only"] * 12, range(1, 6)) == 1


def test_select_k_four_well_separated_families():
    rng = np.random.default_rng(2)
    mus, fams = [], []
    for i, c in enumerate([(0, 0), (10, 0), (0, 10), (10, 10)]):
        mus.append(rng.normal(size=(15, 2)) * 0.3 + c)  # inter gap ~10, intra ~1
        fams += [f"fam{i}"] * 15
    mu = np.concatenate(mus)
    table = purity_by_k(mu, fams, range(1, 9))
    assert table[4] == 1.0  # exhaustive check of separation
    assert select_k(mu, fams, range(1, 9)) == 4


def test_select_k_degenerate_identical_vectors():
    mu = np.ones((8, 3))
    fams = ["a", "b"] * 4
    assert select_k(mu, fams, range(1, 5)) == 1


def test_select_k_deterministic():
    rng = np.random.default_rng(9)
    mu = rng.normal(size=(25, 4))
    fams = rng.integers(0, 3, size=25).astype(str)
    assert select_k(mu, fams, range(1, 9)) == select_k(mu, fams, range(1, 9))


def test_select_k_silhouette_fallback():
    rng = np.random.default_rng(4)
    mu = np.concatenate([rng.normal(size=(12, 2)) * 0.2 + c for c in [(0, 0), (8, 8)]])
    k = select_k(mu, ["?"] * 24, range(2, 6), selection="silhouette")
    assert k == 2


def test_silhouette_single_cluster_is_minus_one():
    assert silhouette(np.random.default_rng(0).normal(size=(5, 2)), np.zeros(5)) == -1.0


# -- routing ----------------------------------------------------------------------------

def test_route_center_returns_itself():
    centers = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 0.0]])
    for j in range(3):
        assert route(centers[j], centers) == j


def test_route_midpoint_tie_goes_to_lower_index():
    centers = np.array([[0.0], [2.0]])
    assert route(np.array([1.0]), centers) == 0


def test_route_matches_brute_force():
    rng = np.random.default_rng(6)
    centers = rng.normal(size=(7, 5))
    for _ in range(200):
        e = rng.normal(size=5)
        expected = min(range(7), key=lambda j: (np.linalg.norm(centers[j] - e), j))
        assert route(e, centers) == expected


def test_route_dimension_mismatch():
    with pytest.raises(ShapeError):
        route(np.zeros(3), np.zeros((2, 4)))


def test_route_batch_agrees_with_scalar_route():
    rng = np.random.default_rng(8)
    centers = rng.normal(size=(4, 3))
    embs = rng.normal(size=(50, 3))
    batch = route_batch(embs, centers)
    for i in range(50):
        assert batch[i] == route(embs[i], centers)


# -- catalog and model serialization ------------------------------------------------------

def test_catalog_csv_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    cat = catalog(rng.normal(size=(9, 4)), [f"fam{i%3}" for i in range(9)])
    path = str(tmp_path / "embeddings.csv")
    cat.save_csv(path)
    back = LatentCatalog.load_csv(path)
    assert np.array_equal(back.mu, cat.mu)
    assert back.families == cat.families
    assert np.array_equal(back.task_ids, cat.task_ids)


def test_catalog_requires_unique_ids():
    with pytest.raises(ContractError):
        LatentCatalog(task_ids=np.array([1, 1]), families=["a", "b"], mu=np.zeros((2, 2)))


def test_cluster_model_fit_and_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    mu = np.concatenate([rng.normal(size=(10, 2)) * 0.2 + c for c in [(0, 0), (9, 9)]])
    fams = ["sine"] * 10 + ["line"] * 8 + ["sine"] * 2
    cat = catalog(mu, fams)
    model = fit_cluster_model(cat, 2, purity_table={1: 0.6, 2: 0.9})
    # centers are the member means
    for c in range(2):
        sel = [i for i, t in enumerate(cat.task_ids) if model.assignments[t] == c]
        assert np.allclose(model.centers[c], mu[sel].mean(axis=0), atol=1e-12)
    # weights per cluster sum to 1
    for w in model.sampling_weights:
        assert abs(sum(w.values()) - 1.0) < 1e-12
    path = str(tmp_path / "clusters.json")
    model.save_json(path)
    back = ClusterModel.load_json(path)
    assert back.k == 2
    assert np.array_equal(back.centers, model.centers)
    assert back.assignments == model.assignments
    assert back.sampling_weights == model.sampling_weights


def test_cut_merges_relabels_in_first_appearance_order():
    merges = linkage_merges(np.array([[0.0], [0.1], [5.0], [5.1]]))
    labels = cut_merges(merges, 4, 2)
    assert labels[0] == 0  # first row always cluster 0
    assert labels.tolist() == [0, 0, 1, 1]
