import numpy as np
import pytest

from maha.config import ModelConfig
from maha.encoders import (
    EncoderOutput,
    MLPSetEncoder,
    MultiheadAttention,
    PMA,
    SAB,
    StConfig,
    StSetEncoder,
    pool_dimensionwise,
)
from maha.errors import ContractError, ShapeError
from maha.models import build_model
from maha.tensor import Rng, Tensor, no_grad
from maha.variational import BOUNDED_SIGMOID, DiagonalGaussian


def pairs_tensor(rng, b, n, d):
    return np.asarray(rng.normal(size=(b, n, d)))


# -- st config ------------------------------------------------------------------

def test_st_config_head_divisibility():
    with pytest.raises(ContractError):
        StConfig(num_heads=3, feature_dim=32)


def test_st_config_rejects_inducing_points():
    with pytest.raises(ContractError):
        StConfig(num_inducing=8)


# -- NP mean-pool encoder ----------------------------------------------------------

def test_np_encoder_single_point_pooling_is_identity():
    enc = MLPSetEncoder(3, 8, 5, 4, 2, Rng(0, "np"))
    x = np.random.default_rng(0).normal(size=(2, 1, 3))
    with no_grad():
        out = enc(Tensor(x))
        per_point = enc.r_ff(Tensor(x))
    assert np.allclose(out.r.data, per_point.data, atol=1e-15)


def test_np_encoder_empty_set_rejected():
    enc = MLPSetEncoder(3, 8, 5, 4, 2, Rng(0, "np"))
    with pytest.raises(ContractError):
        enc(Tensor(np.zeros((2, 0, 3))))


def test_np_encoder_permutation_invariance_all_orders():
    import itertools

    enc = MLPSetEncoder(2, 16, 6, 4, 2, Rng(1, "np"))
    base = np.random.default_rng(1).normal(size=(1, 3, 2))
    with no_grad():
        ref = enc(Tensor(base))
        for perm in itertools.permutations(range(3)):
            out = enc(Tensor(base[:, list(perm)]))
            assert np.allclose(out.r.data, ref.r.data, atol=1e-9)
            assert np.allclose(out.z.mean.data, ref.z.mean.data, atol=1e-9)


# -- attention primitives ------------------------------------------------------------

def test_attention_single_context_point_ignores_query():
    attn = MultiheadAttention(8, 2, Rng(2, "mha"))
    rng = np.random.default_rng(2)
    k = Tensor(rng.normal(size=(1, 1, 8)))
    v = Tensor(rng.normal(size=(1, 1, 8)))
    with no_grad():
        out1 = attn(Tensor(rng.normal(size=(1, 4, 8))), k, v)
        out2 = attn(Tensor(rng.normal(size=(1, 4, 8))), k, v)
    # softmax over one score is 1 for any query, so rows coincide
    assert np.allclose(out1.data, out2.data, atol=1e-12)
    assert np.allclose(out1.data[0, 0], out1.data[0, 3], atol=1e-12)


def test_attention_equal_scores_average_values():
    attn = MultiheadAttention(6, 1, Rng(3, "mha"))
    # zero query projection makes all scores equal
    attn.wq.w.assign(np.zeros((6, 6)))
    rng = np.random.default_rng(3)
    k = rng.normal(size=(1, 5, 6))
    v = rng.normal(size=(1, 5, 6))
    with no_grad():
        out = attn(Tensor(rng.normal(size=(1, 2, 6))), Tensor(k), Tensor(v))
        vh = attn.wv(Tensor(v))
        expected = attn.wo(Tensor(vh.data.mean(axis=1, keepdims=True)))
    assert np.allclose(out.data[0, 0], expected.data[0, 0], atol=1e-12)


def test_attention_peaked_scores_select_matching_value():
    dim = 4
    attn = MultiheadAttention(dim, 1, Rng(4, "mha"))
    scale = 40.0  # score gap >= 20 between matching and mismatched keys
    eye = np.eye(dim)
    attn.wq.w.assign(eye * scale)
    attn.wk.w.assign(eye)
    attn.wv.w.assign(eye)
    attn.wo.w.assign(eye)
    for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
        lin.b.assign(np.zeros(dim))
    keys = np.eye(dim)[None]  # orthonormal context
    values = np.arange(dim * dim, dtype=np.float64).reshape(1, dim, dim)
    query = keys[:, 2:3]
    with no_grad():
        out = attn(Tensor(query), Tensor(keys), Tensor(values))
    assert np.allclose(out.data[0, 0], values[0, 2], atol=1e-6)


def test_attention_rejects_empty_context():
    attn = MultiheadAttention(8, 2, Rng(5, "mha"))
    with pytest.raises(ContractError):
        attn(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 0, 8))),
             Tensor(np.zeros((1, 0, 8))))


def test_attention_key_mask_excludes_points():
    attn = MultiheadAttention(8, 2, Rng(6, "mha"))
    rng = np.random.default_rng(6)
    q = Tensor(rng.normal(size=(1, 3, 8)))
    kv = rng.normal(size=(1, 5, 8))
    masked_kv = kv.copy()
    masked_kv[0, 3:] = 1e6  # junk that must not leak through the mask
    mask = np.array([[True, True, True, False, False]])
    with no_grad():
        out_masked = attn(q, Tensor(masked_kv), Tensor(masked_kv), mask=mask)
        out_trunc = attn(q, Tensor(kv[:, :3]), Tensor(kv[:, :3]))
    assert np.allclose(out_masked.data, out_trunc.data, atol=1e-9)


# -- Set Transformer encoder -----------------------------------------------------------

def make_st(dim_in=3, r_width=6, z_dim=4, seeds=1):
    cfg = StConfig(num_sab_blocks=2, num_heads=2, feature_dim=8, pma_seeds=seeds)
    return StSetEncoder(dim_in, cfg, r_width, z_dim, 8, Rng(7, "st"))


def test_st_permutation_invariance():
    import itertools

    enc = make_st()
    base = np.random.default_rng(7).normal(size=(1, 4, 3))
    with no_grad():
        ref = enc(Tensor(base))
        for perm in itertools.permutations(range(4)):
            out = enc(Tensor(base[:, list(perm)]))
            assert np.allclose(out.r.data, ref.r.data, atol=1e-9)
            assert np.allclose(out.z.mean.data, ref.z.mean.data, atol=1e-9)
            assert np.allclose(out.z.raw_scale.data, ref.z.raw_scale.data, atol=1e-9)


def test_st_single_point_set_is_valid():
    enc = make_st()
    x = np.random.default_rng(8).normal(size=(2, 1, 3))
    with no_grad():
        out = enc(Tensor(x))
    assert out.r.shape == (2, 1, 6)
    assert np.isfinite(out.r.data).all()


def test_st_is_invariant_to_uniform_duplication():
    # softmax attention computes weighted means, so duplicating every point
    # leaves each block's output unchanged, exactly like mean pooling
    st = make_st(dim_in=2)
    a, b = np.array([[0.5, -1.0]]), np.array([[2.0, 0.3]])
    once = np.stack([np.concatenate([a, b])])
    twice = np.stack([np.concatenate([a, a, b, b])])
    with no_grad():
        diff = np.abs(st(Tensor(once)).r.data - st(Tensor(twice)).r.data).max()
    assert diff <= 1e-9


def test_st_flexibility_beyond_mean_pooling_union_linearity():
    # mean pooling of per-point features is linear under equal-size set
    # union: r(A | B) == (r(A) + r(B)) / 2. Attention pooling computes
    # interaction-dependent features and breaks that linearity, which is the
    # extra flexibility the mean-pool encoder lacks.
    st = make_st(dim_in=2)
    mlp = MLPSetEncoder(2, 8, 6, 4, 2, Rng(9, "np"))
    rng = np.random.default_rng(99)
    set_a = rng.normal(size=(1, 2, 2))
    set_b = rng.normal(size=(1, 2, 2))
    union = np.concatenate([set_a, set_b], axis=1)
    with no_grad():
        mlp_gap = np.abs(
            mlp(Tensor(union)).r.data
            - 0.5 * (mlp(Tensor(set_a)).r.data + mlp(Tensor(set_b)).r.data)
        ).max()
        st_gap = np.abs(
            st(Tensor(union)).r.data
            - 0.5 * (st(Tensor(set_a)).r.data + st(Tensor(set_b)).r.data)
        ).max()
    assert mlp_gap <= 1e-12
    assert st_gap > 1e-6


def test_st_two_seeds_separate_paths():
    enc = make_st(seeds=2)
    assert enc.pma.seeds.data.shape[0] == 2
    x = np.random.default_rng(10).normal(size=(2, 5, 3))
    with no_grad():
        out = enc(Tensor(x))
    assert out.r.shape == (2, 1, 6)
    assert out.z.mean.shape == (2, 4)


# -- dimension-wise pooling ---------------------------------------------------------------

def _enc_out(r, z_mean=None, z_raw=None, per_way=False):
    z = None
    if z_mean is not None:
        z = DiagonalGaussian(Tensor(z_mean), Tensor(z_raw), BOUNDED_SIGMOID)
    return EncoderOutput(r=Tensor(r), z=z, per_way=per_way)


def test_pool_regression_batch_of_identical_tasks():
    r = np.tile(np.arange(6.0), (4, 1, 1))  # [4,1,6] identical rows
    out = _enc_out(r, np.zeros((4, 3)), np.zeros((4, 3)))
    pooled = pool_dimensionwise(out, "regression")
    assert np.array_equal(pooled.r_bar.data[0], r[0])
    assert pooled.r_bar.shape == (1, 1, 6)


def test_pool_regression_z_identity():
    zm = np.random.default_rng(11).normal(size=(4, 3))
    out = _enc_out(np.zeros((4, 1, 6)), zm, zm * 0.5)
    pooled = pool_dimensionwise(out, "regression")
    assert pooled.z_bar is out.z  # identity, bit-exact by construction


def test_pool_r_bar_is_exact_batch_mean():
    rng = np.random.default_rng(12)
    r = rng.normal(size=(5, 1, 7))
    pooled = pool_dimensionwise(_enc_out(r, np.zeros((5, 2)), np.zeros((5, 2))), "regression")
    assert np.array_equal(pooled.r_bar.data, r.mean(axis=0, keepdims=True))


def test_pool_classification_two_way_toy():
    z_mean = np.array([[[1.0, 3.0], [3.0, 5.0]]])  # [1, way=2, 2]
    z_raw = np.zeros((1, 2, 2))
    out = _enc_out(np.zeros((1, 2, 4)), z_mean, z_raw, per_way=True)
    pooled = pool_dimensionwise(out, "classification")
    assert np.array_equal(pooled.z_bar.mean.data, [[2.0, 4.0]])


def test_pool_sensitivity_and_constancy():
    rng = np.random.default_rng(13)
    r = rng.normal(size=(4, 1, 6))
    base = pool_dimensionwise(_enc_out(r, np.zeros((4, 2)), np.zeros((4, 2))), "regression")
    bumped = r.copy()
    bumped[2] += 1.0
    after = pool_dimensionwise(_enc_out(bumped, np.zeros((4, 2)), np.zeros((4, 2))), "regression")
    assert not np.allclose(base.r_bar.data, after.r_bar.data)  # sensitivity
    assert base.r_bar.shape[0] == 1  # constancy across the batch axis by construction


def test_pool_mode_mismatch_rejected():
    out = _enc_out(np.zeros((2, 1, 4)), np.zeros((2, 3)), np.zeros((2, 3)), per_way=False)
    with pytest.raises(ShapeError):
        pool_dimensionwise(out, "classification")
    per_way = _enc_out(np.zeros((2, 5, 4)), np.zeros((2, 5, 3)), np.zeros((2, 5, 3)), per_way=True)
    with pytest.raises(ShapeError):
        pool_dimensionwise(per_way, "regression")


# -- classification label-shuffle invariance ------------------------------------------------

def test_classification_z_bar_invariant_to_label_shuffle():
    cfg = ModelConfig(kind="FELD", task="classification", dim_x=2, feature_dim=8,
                      z_dim=6, hidden_dim=8, st_heads=2)
    model = build_model(cfg, Rng(14, "cls"), way=4)
    rng = np.random.default_rng(14)
    x = rng.normal(size=(2, 12, 2))
    labels = np.tile(np.repeat(np.arange(4), 3), (2, 1))
    perm = np.array([2, 0, 3, 1])
    shuffled = perm[labels]
    with no_grad():
        out1 = model.encode_set(x, labels)
        out2 = model.encode_set(x, shuffled)
        p1 = pool_dimensionwise(out1, "classification")
        p2 = pool_dimensionwise(out2, "classification")
    assert np.allclose(p1.z_bar.mean.data, p2.z_bar.mean.data, atol=1e-9)
    assert np.allclose(p1.z_bar.raw_scale.data, p2.z_bar.raw_scale.data, atol=1e-9)
    # per-way encodings are permuted consistently with the label map
    inv = np.argsort(perm)
    assert np.allclose(out2.r.data[:, perm[np.argsort(perm)]], out2.r.data, atol=0)
    assert np.allclose(out1.r.data, out2.r.data[:, perm], atol=1e-9)


def test_anp_r_is_shot_equivariant():
    cfg = ModelConfig(kind="ANP", task="regression", dim_x=1, dim_y=1,
                      feature_dim=8, z_dim=4, hidden_dim=8, st_heads=2,
                      anp_self_attn_blocks=1)
    model = build_model(cfg, Rng(15, "anp"))
    rng = np.random.default_rng(15)
    cx, cy = rng.normal(size=(1, 4, 1)), rng.normal(size=(1, 4, 1))
    tx = rng.normal(size=(1, 6, 1))
    perm = rng.permutation(6)
    with no_grad():
        out = model.encode_set(cx, cy, query_x=tx)
        out_p = model.encode_set(cx, cy, query_x=tx[:, perm])
    assert np.allclose(out.r.data[:, perm], out_p.r.data, atol=1e-9)
    # stochastic path is shot-independent
    assert np.allclose(out.z.mean.data, out_p.z.mean.data, atol=1e-12)
