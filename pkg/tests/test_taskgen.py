import numpy as np
import pytest
from scipy import stats

from maha.config import DatasetConfig
from maha.errors import ContractError
from maha.taskgen import (
    TEST_BASE,
    draw_poly_coeffs,
    export_episodes,
    import_episodes,
    make_batch,
    poly_intervals,
    poly_value,
    region_centers,
    sample_classification_episode,
    sample_episode,
    sample_gp_episode,
    sample_poly_episode,
    se_kernel,
    split_context_target,
)
from maha.tensor import Rng


def gp_cfg(**kw):
    cfg = DatasetConfig(kind="gp")
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def poly_cfg(**kw):
    cfg = DatasetConfig(kind="poly")
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def blob_cfg(**kw):
    cfg = DatasetConfig(kind="blobs")
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# -- GP ------------------------------------------------------------------------

def test_kernel_diagonal_is_sigma_squared():
    x = np.array([-1.3, 0.0, 2.7])
    k = se_kernel(x, x, sigma=1.7, length_scale=0.9)
    assert np.allclose(np.diag(k), 1.7**2, atol=1e-12)


def test_kernel_closed_form_at_unit_gap():
    k = se_kernel(np.array([0.0]), np.array([1.0]), sigma=1.0, length_scale=1.0)
    assert abs(k[0, 0] - np.exp(-0.5)) < 1e-12


def test_gp_monte_carlo_covariance_matches_kernel():
    # oracle: 1e5 function draws through the same Cholesky sampling path
    x = np.array([0.0, 1.0])
    k = se_kernel(x, x, 1.0, 1.0)
    chol = np.linalg.cholesky(k + 1e-10 * np.eye(2))
    rng = Rng(123, "gpcov")
    draws = (chol @ rng.normal((2, 100_000))).T
    emp = np.cov(draws[:, 0], draws[:, 1])[0, 1]
    true = k[0, 1]
    stderr = np.sqrt((k[0, 0] * k[1, 1] + true**2) / len(draws))
    assert abs(emp - true) < 3 * stderr


def test_gp_episode_shapes_and_containment():
    ep = sample_gp_episode(gp_cfg(), task_seed=5)
    assert ep.target_x.shape == (50, 1)
    assert ep.way == 1
    assert ep.family == "GP"
    # context is a subset of the target rows
    tx = {(float(a), float(b)) for a, b in zip(ep.target_x[:, 0], ep.target_y[:, 0])}
    for a, b in zip(ep.context_x[:, 0], ep.context_y[:, 0]):
        assert (float(a), float(b)) in tx


# -- polynomial family ------------------------------------------------------------

def test_line_value_by_hand():
    assert poly_value("Line", np.array([2.0, 1.0]), np.array([3.0]))[0] == 7.0


def test_cubic_all_zero_coefficients():
    x = np.linspace(-5, 5, 11)
    assert np.array_equal(poly_value("Cubic", np.zeros(4), x), np.zeros(11))


def test_sine_value_by_hand():
    y = poly_value("Sine", np.array([2.0, 1.0, 0.5]), np.array([np.pi / 2]))
    assert abs(y[0] - (2.0 * np.sin(np.pi / 2) + 0.5)) < 1e-12


def test_poly_coefficients_uniform_ks():
    cfg = poly_cfg()
    intervals = poly_intervals(cfg)
    n = 10_000
    rng = Rng(77, "ks")
    draws = np.array([draw_poly_coeffs("Sine", intervals, rng.child(i)) for i in range(n)])
    critical = 1.63 / np.sqrt(n)  # 1% asymptotic Kolmogorov-Smirnov threshold
    for j, (lo, hi) in enumerate(intervals["Sine"]):
        u = (draws[:, j] - lo) / (hi - lo)
        stat = stats.kstest(u, "uniform").statistic
        assert stat < critical, f"coefficient {j} KS={stat:.4f}"


def test_poly_family_weights_respected():
    cfg = poly_cfg()
    cfg.poly.weights = "sine:1.0,line:0.0,quad:0.0,cubic:0.0"
    for ts in range(20):
        assert sample_poly_episode(cfg, ts).family == "Sine"


def test_poly_weights_must_sum_to_one():
    cfg = poly_cfg()
    cfg.poly.weights = "sine:0.9,line:0.9,quad:0.0,cubic:0.0"
    with pytest.raises(ContractError):
        sample_poly_episode(cfg, 0)


def test_forced_family_recorded():
    ep = sample_poly_episode(poly_cfg(), 3, family="Cubic")
    assert ep.family == "Cubic"


# -- classification ---------------------------------------------------------------

def test_classification_label_histogram_exact():
    cfg = blob_cfg(shot=3, query_shot=4)
    ep = sample_classification_episode(cfg, 9)
    counts = np.bincount(ep.context_y, minlength=cfg.blobs.way)
    assert np.array_equal(counts, np.full(cfg.blobs.way, 3))
    tcounts = np.bincount(ep.target_y, minlength=cfg.blobs.way)
    assert np.array_equal(tcounts, np.full(cfg.blobs.way, 7))


def test_label_shuffle_permutes_labels_only():
    cfg = blob_cfg()
    p1 = np.array([0, 1, 2, 3, 4])
    p2 = np.array([4, 2, 0, 1, 3])
    e1 = sample_classification_episode(cfg, 21, label_perm=p1)
    e2 = sample_classification_episode(cfg, 21, label_perm=p2)
    assert np.array_equal(e1.context_x, e2.context_x)
    assert np.array_equal(e1.target_x, e2.target_x)
    remap = {a: b for a, b in zip(p1, p2)}
    assert np.array_equal(np.array([remap[v] for v in e1.context_y]), e2.context_y)


def test_blob_region_recoverable_by_nearest_centroid():
    cfg = blob_cfg(shot=5, query_shot=0)
    centers = region_centers(cfg)
    hits = 0
    n = 500
    for ts in range(n):
        ep = sample_classification_episode(cfg, ts)
        centroid = ep.context_x.mean(axis=0)
        guess = int(np.linalg.norm(centers - centroid, axis=1).argmin())
        hits += ep.family == f"Blob{chr(65 + guess)}"
    assert hits / n >= 0.99


def test_region_separation_is_at_least_configured():
    cfg = blob_cfg()
    centers = region_centers(cfg)
    d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= cfg.blobs.region_separation - 1e-9


# -- context/target split -----------------------------------------------------------

def test_split_full_context_equals_targets():
    pts = np.linspace(0, 1, 8)
    idx = split_context_target(pts, 8, "interpolate", Rng(0, "s"))
    assert np.array_equal(idx, np.arange(8))


def test_split_rejects_empty_context():
    with pytest.raises(ContractError):
        split_context_target(np.linspace(0, 1, 8), 0, "interpolate", Rng(0, "s"))


def test_extrapolate_window_bounds_context_span():
    rng = Rng(5, "ex")
    for trial in range(200):
        pts = rng.child("pts", trial).uniform(-5, 5, (50,))
        idx = split_context_target(pts, 5, "extrapolate", rng.child("sp", trial))
        span = pts[idx].max() - pts[idx].min()
        assert span <= 0.4 * (pts.max() - pts.min()) + 1e-12


def test_interpolate_subsets_uniform_chi_squared():
    n, nc, draws = 20, 5, 10_000
    pts = np.linspace(0, 1, n)
    rng = Rng(31, "chi")
    counts = np.zeros(n)
    for t in range(draws):
        idx = split_context_target(pts, nc, "interpolate", rng.child(t))
        counts[idx] += 1
    expected = draws * nc / n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # marginal inclusion counts, df = n-1, 1% critical value
    assert chi2 < stats.chi2.ppf(0.99, df=n - 1)


# -- determinism and hygiene -----------------------------------------------------------

def test_same_task_seed_bit_identical_regardless_of_order():
    cfg = poly_cfg()
    first = sample_episode(cfg, 1234)
    for ts in range(50):
        sample_episode(cfg, ts)
    again = sample_episode(cfg, 1234)
    for field in ("context_x", "context_y", "target_x", "target_y"):
        assert np.array_equal(getattr(first, field), getattr(again, field))
    assert first.family == again.family


def test_regression_episodes_have_way_one():
    assert sample_episode(gp_cfg(), 0).way == 1
    assert sample_episode(poly_cfg(), 0).way == 1


def test_batch_shares_context_size():
    batch = make_batch(poly_cfg(), list(range(16)))
    assert batch.cx.shape[0] == 16
    assert batch.cx.shape[1] >= 3


def test_export_import_round_trip(tmp_path):
    cfg = poly_cfg()
    path = str(tmp_path / "episodes.jsonl")
    export_episodes(cfg, [TEST_BASE + i for i in range(5)], path)
    eps = import_episodes(path)
    assert len(eps) == 5
    orig = sample_episode(cfg, TEST_BASE + 2)
    assert np.array_equal(eps[2].target_y, orig.target_y)
    assert eps[2].family == orig.family
    assert eps[2].way == 1
