import math

import numpy as np
import pytest

from stsam import model as m
from stsam import numerics as nx
from stsam.dataio import DatasetMeta
from stsam.numerics import Tensor
from stsam.training import loss_joint_rmse

from conftest import perturbed_params, random_batch


def const_params(**arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}


def fd_error(f, params, coords=100):
    return nx.finite_diff_check(f, params, step=1e-6, coords=coords, rng=np.random.default_rng(0))


def probe(t, seed=0):
    return nx.tsum(nx.mul(t, np.random.default_rng(seed).standard_normal(t.shape)))


# -- hyperparameters ----------------------------------------------------------------
def test_default_hyperparams_snapshot():
    hp = m.HyperParams()
    assert (hp.d, hp.M, hp.k, hp.ff_dim, hp.dropout_rate, hp.n_blocks) == (64, 4, 5, 128, 0.1, 1)
    assert hp.time_vocab == 48 * 7


@pytest.mark.parametrize(
    "kwargs", [{"d": 0}, {"M": 0}, {"dropout_rate": 1.0}, {"attention_norm": "x"}, {"head_split": True, "d": 6, "M": 4}]
)
def test_hyperparams_validation(kwargs):
    with pytest.raises(ValueError):
        m.HyperParams(**kwargs)


# -- init -----------------------------------------------------------------------
def test_init_same_seed_bitwise():
    hp = m.HyperParams(d=8, n_regions=5, time_vocab=14)
    a, b = m.init_params(hp, 3), m.init_params(hp, 3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = m.init_params(hp, 4)
    assert a["W1"].data.tobytes() != c["W1"].data.tobytes()


def test_init_biases_zero_gains_one():
    hp = m.HyperParams(d=8, n_regions=5, time_vocab=14, n_blocks=2)
    params = m.init_params(hp, 0)
    m.check_params(params, hp)
    for name, p in params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            assert np.all(p.data == 1.0)
        elif leaf.startswith("b") or leaf.endswith("beta"):
            assert not p.data.any()


def test_init_variance_matches_uniform_law():
    hp = m.HyperParams(d=64, n_regions=5, time_vocab=14)
    w = m.init_params(hp, 0)["W6"].data
    expected = 2.0 / (64 + 64)  # var of U(-a, a) with a = sqrt(6/(fan_in+fan_out))
    assert abs(w.var() - expected) <= 0.2 * expected


def test_param_shapes_declared():
    hp = m.HyperParams(d=8, M=3, k=4, ff_dim=16, n_regions=7, time_vocab=21)
    s = m.param_shapes(hp)
    assert s["W1"] == (4, 8) and s["W3"] == (16, 8) and s["W4"] == (7, 8) and s["W5"] == (21, 8)
    assert s["block0.WQ"] == (3, 8, 8) and s["block0.W7"] == (24, 8)
    assert s["WP2"] == (8, 2) and s["bP2"] == (2,)


def test_check_params_rejects_wrong_shape(tiny_hp):
    params = m.init_params(tiny_hp)
    params["W3"] = Tensor(np.zeros((2, 2)), name="W3")
    with pytest.raises(ValueError, match="W3"):
        m.check_params(params, tiny_hp)


# -- flow embedding ---------------------------------------------------------------
def test_embed_flows_zero_history():
    hp = m.HyperParams(d=4, k=3, n_regions=2, time_vocab=7)
    params = m.init_params(hp)
    out = m.embed_flows(np.zeros((2, 3)), np.zeros((2, 3)), params)
    assert out.shape == (2, 4) and not out.data.any()


def test_embed_flows_hand_example():
    d = 3
    params = const_params(
        W1=np.ones((1, d)), b1=np.zeros(d), W2=np.ones((1, d)), b2=np.zeros(d),
        W3=np.vstack([np.eye(d), np.eye(d)]), b3=np.zeros(d),
    )
    out = m.embed_flows([[2.0]], [[3.0]], params)
    assert out.data.tolist() == [[5.0, 5.0, 5.0]]


def test_embed_flows_k_mismatch(tiny_hp):
    params = m.init_params(tiny_hp)
    with pytest.raises(ValueError, match="k=2"):
        m.embed_flows(np.zeros((3, 3)), np.zeros((3, 3)), params)


def test_embed_flows_gradients(tiny_hp, rng):
    params = perturbed_params(tiny_hp)
    hin, hout = rng.random((3, 2)), rng.random((3, 2))
    names = ["W1", "b1", "W2", "b2", "W3", "b3"]
    f = lambda: probe(m.embed_flows(hin, hout, params))
    assert fd_error(f, [params[n] for n in names]) <= 1e-5


# -- spatial / temporal -----------------------------------------------------------
def test_embed_spatial_selects_row(tiny_hp):
    params = m.init_params(tiny_hp, 1)
    for i in range(3):
        assert np.array_equal(m.embed_spatial(i, params).data, params["W4"].data[i])
    assert not np.array_equal(m.embed_spatial(0, params).data, m.embed_spatial(1, params).data)
    with pytest.raises(IndexError):
        m.embed_spatial(3, params)


def test_embed_spatial_gradient_only_in_row(tiny_hp):
    params = perturbed_params(tiny_hp)
    w4 = params["W4"]
    f = lambda: probe(m.embed_spatial(1, params))
    assert fd_error(f, [w4, params["b4"]]) <= 1e-6
    assert not w4.grad[[0, 2]].any() and w4.grad[1].any()


def test_embed_temporal_weekly_periodicity():
    meta = DatasetMeta(2, slots_per_day=48, interval_minutes=30, start_slot_of_week=17)
    hp = m.HyperParams(d=4, n_regions=2, time_vocab=meta.slots_per_week)
    assert hp.time_vocab == 336
    params = perturbed_params(hp)
    a = m.embed_temporal(5, meta, params).data
    b = m.embed_temporal(5 + 336, meta, params).data
    assert np.array_equal(a, b)
    assert m.time_slot_index(0, meta, 336) == 17


def test_embed_temporal_row_when_bias_zero(tiny_meta):
    hp = m.HyperParams(d=4, n_regions=3, time_vocab=tiny_meta.slots_per_week)
    params = m.init_params(hp, 2)
    out = m.embed_temporal(9, tiny_meta, params).data
    assert np.array_equal(out, params["W5"].data[9 % 14])


def test_embed_temporal_non_weekly_vocab_wraps():
    meta = DatasetMeta(2, slots_per_day=48, interval_minutes=30, start_slot_of_week=3)
    assert m.time_slot_index(50, meta, 48) == 2


# -- fusion -----------------------------------------------------------------------
def test_fuse_identity_and_zero(rng):
    d = 4
    params = const_params(W6=np.eye(d), b6=np.zeros(d))
    flow = Tensor(rng.standard_normal((3, d)))
    out = m.fuse_region(flow, Tensor(np.zeros((3, d))), Tensor(np.zeros(d)), params)
    assert np.array_equal(out.data, flow.data)
    zero = m.fuse_region(Tensor(np.zeros((3, d))), Tensor(np.zeros((3, d))), Tensor(np.zeros(d)), params)
    assert not zero.data.any()


def test_fuse_width_mismatch():
    params = const_params(W6=np.eye(4), b6=np.zeros(4))
    with pytest.raises(ValueError, match="spatial"):
        m.fuse_region(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(4)), params)


def test_fuse_permutation(rng, tiny_hp):
    params = perturbed_params(tiny_hp)
    f, s, t = (Tensor(rng.standard_normal(sh)) for sh in [(3, 4), (3, 4), (4,)])
    perm = np.array([2, 0, 1])
    base = m.fuse_region(f, s, t, params).data
    moved = m.fuse_region(Tensor(f.data[perm]), Tensor(s.data[perm]), t, params).data
    np.testing.assert_allclose(moved, base[perm], rtol=0, atol=1e-14)


# -- attention --------------------------------------------------------------------
def test_attention_scores_zero(tiny_hp):
    params = perturbed_params(tiny_hp)
    out = m.attention_scores(Tensor(np.zeros((3, 4))), 0, params)
    assert out.shape == (3, 3) and not out.data.any()


def test_attention_scores_scalar_case():
    params = const_params(**{"block0.WQ": [[[1.0]]], "block0.WK": [[[1.0]]]})
    out = m.attention_scores(Tensor([[2.0], [3.0]]), 0, params)
    assert out.data.tolist() == [[4.0, 6.0], [6.0, 9.0]]


def test_attention_scores_literal_formula(tiny_hp, rng):
    params = perturbed_params(tiny_hp)
    r = rng.standard_normal((3, 4))
    wq, wk = params["block0.WQ"].data[1], params["block0.WK"].data[1]
    expected = (r @ wq) @ (r @ wk).T / math.sqrt(4)
    np.testing.assert_allclose(m.attention_scores(Tensor(r), 1, params).data, expected, rtol=1e-13)


def test_attention_scores_quadratic_in_scale(tiny_hp, rng):
    params = perturbed_params(tiny_hp)
    r = rng.standard_normal((3, 4))
    c = 2.5
    base = m.attention_scores(Tensor(r), 0, params).data
    np.testing.assert_allclose(m.attention_scores(Tensor(c * r), 0, params).data, c * c * base, rtol=1e-12)


def test_aggregate_equal_scores_average(rng):
    r = rng.standard_normal((4, 3))
    out = m.attention_aggregate(Tensor(np.full((4, 4), 0.7)), Tensor(r)).data
    np.testing.assert_allclose(out, np.tile(r.mean(axis=0), (4, 1)), rtol=0, atol=1e-14)


def test_aggregate_single_region(rng):
    r = rng.standard_normal((1, 5))
    out = m.attention_aggregate(Tensor([[3.2]]), Tensor(r)).data
    assert np.array_equal(out, r)


def test_attention_weights_row_sums(rng):
    for _ in range(20):
        weights = m.normalize_scores(Tensor(rng.standard_normal((6, 6)) * 5)).data
        assert np.all(np.abs(weights.sum(axis=-1) - 1.0) <= 1e-9) and weights.min() >= 0


def test_literal_normalization_variant(rng):
    a = rng.standard_normal((3, 3))
    out = m.normalize_scores(Tensor(a), "exp_denominator").data
    np.testing.assert_allclose(out, a / np.exp(a).sum(axis=-1, keepdims=True), rtol=1e-14)


def test_multi_head_combine_identity_and_zero(rng):
    x = rng.standard_normal((3, 4))
    params = const_params(**{"block0.W7": np.eye(4)})
    assert np.array_equal(m.multi_head_combine([Tensor(x)], params).data, x)
    params = const_params(**{"block0.W7": rng.standard_normal((8, 4))})
    zero = m.multi_head_combine([Tensor(np.zeros((3, 4)))] * 2, params)
    assert not zero.data.any()
    with pytest.raises(ValueError):
        m.multi_head_combine([Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4)))], params)


def test_multi_head_combine_gradient(rng):
    params = const_params(**{"block0.W7": rng.standard_normal((8, 4))})
    heads = [Tensor(rng.standard_normal((3, 4))) for _ in range(2)]
    assert fd_error(lambda: probe(m.multi_head_combine(heads, params)), [params["block0.W7"]]) <= 1e-6


@pytest.mark.parametrize("head_split", [False, True])
@pytest.mark.parametrize("norm", ["softmax", "exp_denominator"])
def test_batched_attention_matches_per_head_path(rng, head_split, norm):
    hp = m.HyperParams(d=4, M=2, k=2, ff_dim=8, n_regions=3, time_vocab=7, head_split=head_split, attention_norm=norm)
    params = perturbed_params(hp)
    r = Tensor(rng.standard_normal((2, 3, 4)))
    fast = m.multi_head_attention(r, params, hp).data
    dh = hp.head_dim
    heads = []
    for h in range(hp.M):
        values = Tensor(r.data[..., h * dh : (h + 1) * dh]) if head_split else r
        heads.append(m.attention_aggregate(m.attention_scores(r, h, params), values, norm))
    slow = m.multi_head_combine(heads, params).data
    np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-14)


# -- encoder block ------------------------------------------------------------------
def test_encoder_block_permutation_equivariant(rng):
    hp = m.HyperParams(d=8, M=2, ff_dim=16, n_regions=10, time_vocab=7)
    params = perturbed_params(hp)
    x = rng.standard_normal((10, 8))
    base = m.encoder_block(Tensor(x), params, hp).data
    for _ in range(10):
        perm = rng.permutation(10)
        moved = m.encoder_block(Tensor(x[perm]), params, hp).data
        assert np.max(np.abs(moved - base[perm])) <= 1e-9


@pytest.mark.parametrize("n", [1, 2, 7])
def test_encoder_block_shape(n, rng):
    hp = m.HyperParams(d=4, M=2, ff_dim=8, n_regions=n, time_vocab=7)
    out = m.encoder_block(Tensor(rng.standard_normal((n, 4))), perturbed_params(hp), hp)
    assert out.shape == (n, 4)


def test_encoder_block_eval_deterministic(rng):
    hp = m.HyperParams(d=4, M=2, ff_dim=8, n_regions=5, time_vocab=7, dropout_rate=0.5)
    params = perturbed_params(hp)
    x = Tensor(rng.standard_normal((5, 4)))
    a = m.encoder_block(x, params, hp).data
    b = m.encoder_block(x, params, hp).data
    assert a.tobytes() == b.tobytes()
    c = m.encoder_block(x, params, hp, training=True, rng=np.random.default_rng(0)).data
    assert c.tobytes() != a.tobytes()


# -- forecasting head ------------------------------------------------------------------
def test_forecast_zero_hidden_gives_bias(rng):
    d = 4
    params = const_params(WP1=np.zeros((d, d)), bP1=np.zeros(d), WP2=rng.standard_normal((d, 2)), bP2=[1.5, -2.0])
    out = m.forecast(Tensor(rng.standard_normal((6, d))), params).data
    assert out.shape == (6, 2)
    assert np.array_equal(out, np.tile([1.5, -2.0], (6, 1)))


def test_forecast_gradients(tiny_hp, rng):
    params = perturbed_params(tiny_hp)
    x = Tensor(rng.standard_normal((3, 4)))
    names = ["WP1", "bP1", "WP2", "bP2"]
    assert fd_error(lambda: probe(m.forecast(x, params)), [params[n] for n in names]) <= 1e-6


# -- full forward -------------------------------------------------------------------------
def unbatched(params, hp, hin, hout, t, meta):
    flow = m.embed_flows(hin, hout, params)
    spatial = m.embed_spatial(np.arange(hp.n_regions), params)
    temporal = m.embed_temporal(t, meta, params)
    x = m.fuse_region(flow, spatial, temporal, params)
    for j in range(hp.n_blocks):
        x = m.encoder_block(x, params, hp, j)
    return m.forecast(x, params)


def test_forward_batch_of_one_matches_unbatched(tiny_hp, tiny_meta, rng):
    params = perturbed_params(tiny_hp)
    batch = random_batch(tiny_hp, rng, batch=1)
    a = m.forward(params, batch, tiny_hp, tiny_meta).data[0]
    b = unbatched(params, tiny_hp, batch.history_in[0], batch.history_out[0], batch.time_index[0], tiny_meta).data
    assert a.tobytes() == b.tobytes()


def test_forward_each_batch_row_matches_unbatched(tiny_hp, tiny_meta, rng):
    params = perturbed_params(tiny_hp)
    batch = random_batch(tiny_hp, rng, batch=5)
    out = m.forward(params, batch, tiny_hp, tiny_meta).data
    for i in range(5):
        ref = unbatched(params, tiny_hp, batch.history_in[i], batch.history_out[i], batch.time_index[i], tiny_meta)
        np.testing.assert_allclose(out[i], ref.data, rtol=1e-12, atol=1e-14)


def test_forward_rejects_wrong_region_count(tiny_hp, rng):
    params = m.init_params(tiny_hp)
    batch = random_batch(m.HyperParams(d=4, M=2, k=2, n_regions=4, time_vocab=14), rng)
    with pytest.raises(ValueError, match="n=4"):
        m.forward(params, batch, tiny_hp)


def test_forward_eval_deterministic(tiny_hp, rng):
    hp = m.HyperParams(**{**tiny_hp.to_dict(), "dropout_rate": 0.3})
    params = perturbed_params(hp)
    batch = random_batch(hp, rng)
    assert m.predict(params, batch, hp).tobytes() == m.predict(params, batch, hp).tobytes()


# deeper stacks push some query/key gradients down to ~1e-8, where round-off at
# step 1e-6 alone exceeds 1e-4 relative; those use step 1e-4
@pytest.mark.parametrize("n_blocks, step", [(1, 1e-6), (2, 1e-4), (3, 1e-4)])
def test_full_gradient_check(n_blocks, step, rng):
    hp = m.HyperParams(d=4, M=2, k=2, ff_dim=8, n_blocks=n_blocks, dropout_rate=0.0, n_regions=3, time_vocab=14)
    params = perturbed_params(hp, seed=n_blocks)
    batch = random_batch(hp, rng)
    f = lambda: loss_joint_rmse(m.forward(params, batch, hp), batch.target)
    assert m.forward(params, batch, hp).shape == (4, 3, 2)
    errors = nx.finite_diff_errors(f, params.values(), step=step, coords=100, rng=np.random.default_rng(1))
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-4, (worst, errors[worst])


@pytest.mark.parametrize("variant", [{"head_split": True}, {"attention_norm": "exp_denominator"}])
def test_variant_gradient_check(variant, rng):
    hp = m.HyperParams(d=4, M=2, k=2, ff_dim=8, dropout_rate=0.0, n_regions=3, time_vocab=14, **variant)
    params = perturbed_params(hp)
    batch = random_batch(hp, rng)
    f = lambda: loss_joint_rmse(m.forward(params, batch, hp), batch.target)
    assert nx.finite_diff_check(f, params.values(), coords=50) <= 1e-4


def test_collate_rejects_mixed_shapes():
    from stsam.dataio import Sample

    a = Sample(np.zeros((3, 2)), np.zeros((3, 2)), 1, np.zeros(3), np.zeros(3))
    b = Sample(np.zeros((3, 3)), np.zeros((3, 3)), 1, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        m.collate([a, b])
    with pytest.raises(ValueError):
        m.collate([])
