import logging

import numpy as np
import pytest

from oracles import planted
from tsinterp import numerics as nx
from tsinterp.forecaster import HookSite
from tsinterp.numerics import Parameter
from tsinterp.sae import (
    SaeConfig,
    SaeFormatError,
    SaeParams,
    SparseCode,
    dead_feature_scan,
    decode,
    decode_dense,
    encode,
    encode_dense,
    fvu,
    load_sae,
    loss_and_grads,
    resample_dead,
    save_sae,
    topk_mask,
    train_sae,
)


def make_params(d_model=6, d_sae=4, k=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    W_dec = rng.normal(size=(d_model, d_sae))
    W_dec /= np.linalg.norm(W_dec, axis=0)
    return SaeParams(
        W_enc=rng.normal(size=(d_sae, d_model)).astype(dtype),
        b_enc=rng.normal(size=d_sae).astype(dtype) * 0.1,
        W_dec=W_dec.astype(dtype),
        b_dec=rng.normal(size=d_model).astype(dtype),
        k=k,
    )


def test_topk_tie_rule_example():
    a = np.array([[0.1, -3.0, 5.0, 0.1]])
    np.testing.assert_array_equal(topk_mask(a, 2), [[True, False, True, False]])


def test_encode_example_with_ties():
    p = SaeParams(W_enc=np.eye(4), b_enc=np.zeros(4), W_dec=np.eye(4), b_dec=np.zeros(4), k=2)
    z = encode(p, np.array([0.1, -3.0, 5.0, 0.1]))
    np.testing.assert_array_equal(z.indices, [0, 2])
    np.testing.assert_allclose(z.values, [0.1, 5.0])


def test_retained_values_may_be_negative():
    p = SaeParams(W_enc=np.eye(3), b_enc=np.zeros(3), W_dec=np.eye(3), b_dec=np.zeros(3), k=2)
    z = encode(p, np.array([-1.0, -2.0, -3.0]))
    np.testing.assert_array_equal(z.indices, [0, 1])
    np.testing.assert_allclose(z.values, [-1.0, -2.0])


def test_k_equals_d_sae_is_dense():
    p = make_params(k=4)
    x = np.random.default_rng(1).normal(size=(5, 6))
    a = (x - p.b_dec) @ p.W_enc.T + p.b_enc
    np.testing.assert_allclose(encode_dense(p, x), a)


def test_centering_fixed_point():
    p = make_params()
    p.b_enc[:] = 0
    z = encode(p, p.b_dec.copy())
    np.testing.assert_array_equal(z.indices, [0, 1])
    np.testing.assert_array_equal(z.values, [0.0, 0.0])
    np.testing.assert_array_equal(decode(p, z), p.b_dec)


def test_decode_examples():
    p = make_params()
    empty = SparseCode(np.array([], dtype=np.int64), np.array([]))
    np.testing.assert_array_equal(decode(p, empty), p.b_dec)
    np.testing.assert_allclose(decode(p, SparseCode(np.array([2]), np.array([1.5]))), p.b_dec + 1.5 * p.W_dec[:, 2])
    with pytest.raises(IndexError):
        decode(p, SparseCode(np.array([4]), np.array([1.0])))


def test_exact_k_sparsity():
    p = make_params(d_model=8, d_sae=32, k=5, seed=2)
    X = np.random.default_rng(3).normal(size=(50, 8))
    Z = encode_dense(p, X)
    assert np.all((Z != 0).sum(axis=1) <= 5)
    masks = topk_mask((X - p.b_dec) @ p.W_enc.T + p.b_enc, 5)
    assert np.all(masks.sum(axis=1) == 5)
    # all-equal rows still fill exactly k by lowest index
    np.testing.assert_array_equal(topk_mask(np.zeros((2, 6)), 3), [[1, 1, 1, 0, 0, 0]] * 2)


def test_dense_and_sparse_paths_agree():
    p = make_params(d_model=8, d_sae=16, k=3, seed=4)
    x = np.random.default_rng(5).normal(size=8)
    z = encode(p, x)
    dense = encode_dense(p, x[None])[0]
    np.testing.assert_array_equal(np.nonzero(dense)[0], z.indices)
    np.testing.assert_allclose(decode(p, z), decode_dense(p, dense[None])[0])


def test_support_recovery_low_coherence():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(64, 16)))
    W = q + 0.02 * rng.normal(size=q.shape)
    W /= np.linalg.norm(W, axis=0)
    G = np.abs(W.T @ W - np.eye(16))
    assert G.max() < 0.3
    p = SaeParams(W_enc=W.T.copy(), b_enc=np.zeros(16), W_dec=W, b_dec=rng.normal(size=64), k=3)
    for _ in range(20):
        support = np.sort(rng.choice(16, size=3, replace=False))
        z = np.zeros(16)
        z[support] = [6.0, 4.0, 2.0]
        x = W @ z + p.b_dec
        np.testing.assert_array_equal(encode(p, x).indices, support)


def test_sae_loss_gradient_float32():
    p = make_params(d_model=8, d_sae=16, k=4, seed=6, dtype=np.float32)
    # keep rows whose k-th and (k+1)-th pre-activations are well apart, so the
    # finite-difference steps never change the selected support
    cand = np.random.default_rng(7).normal(size=(200, 8)).astype(np.float32)
    a = np.sort((cand - p.b_dec) @ p.W_enc.T + p.b_enc, axis=1)
    X = cand[(a[:, -4] - a[:, -5]) > 0.05][:12]
    assert len(X) == 12
    _, grads = loss_and_grads(p, X)
    for name in ("W_enc", "b_enc", "W_dec", "b_dec"):
        prm = Parameter(getattr(p, name), name=name)
        live = [tuple(ix) for ix in np.argwhere(np.abs(grads[name]) > 1e-4)][:20]
        err = nx.finite_diff_check(lambda: loss_and_grads(p, X)[0], prm, h=1e-2, indices=live,
                                   analytic=grads[name])
        assert err < 1e-2, name


def test_dead_feature_scan():
    p = make_params(d_model=6, d_sae=8, k=8)
    X = np.random.default_rng(0).normal(size=(20, 6))
    dead, frac = dead_feature_scan(p, X)
    assert dead.size == 0 and frac == 1.0
    p = make_params(d_model=6, d_sae=8, k=2)
    p.W_enc[3] = 0
    p.b_enc[3] = -1e9
    dead, frac = dead_feature_scan(p, X)
    assert 3 in dead
    assert frac == 1 - dead.size / 8


def test_resample_noop_cases(caplog):
    p = make_params(d_model=6, d_sae=8, k=2)
    before = [a.copy() for a in (p.W_enc, p.W_dec, p.b_enc)]
    assert resample_dead(p, np.array([], dtype=np.int64), np.zeros((4, 6))) == 0
    for a, b in zip(before, (p.W_enc, p.W_dec, p.b_enc)):
        np.testing.assert_array_equal(a, b)
    # constant input equal to its own reconstruction leaves no residual
    p2 = SaeParams(W_enc=np.zeros((4, 3)), b_enc=np.full(4, -1.0), W_dec=np.eye(3, 4), b_dec=np.ones(3), k=1)
    p2.b_enc[0] = 0.0
    with caplog.at_level(logging.WARNING):
        assert resample_dead(p2, np.arange(4), np.ones((5, 3))) == 0
    assert "no reconstruction residuals" in caplog.text


def test_resample_sets_residual_direction_and_resets_moments():
    p = make_params(d_model=6, d_sae=8, k=2, seed=3)
    params = {n: Parameter(getattr(p, n), name=n) for n in ("W_enc", "b_enc", "W_dec", "b_dec")}
    for prm in params.values():
        prm.adam_m[...] = 1.0
        prm.adam_v[...] = 1.0
    X = np.random.default_rng(4).normal(size=(30, 6))
    live_norm = np.linalg.norm(np.delete(p.W_enc, [1, 5], axis=0), axis=1).mean()
    assert resample_dead(p, np.array([1, 5]), X, params) == 2
    np.testing.assert_allclose(np.linalg.norm(p.W_dec[:, [1, 5]], axis=0), 1.0)
    np.testing.assert_allclose(np.linalg.norm(p.W_enc[[1, 5]], axis=1), 0.2 * live_norm)
    assert p.b_enc[1] == 0 and p.b_enc[5] == 0
    assert np.all(params["W_dec"].adam_m[:, [1, 5]] == 0) and np.all(params["W_dec"].adam_m[:, 0] == 1)
    assert np.all(params["W_enc"].adam_v[[1, 5]] == 0)


def test_zero_steps_returns_initialization():
    X = planted(600, 8, 16, 2, 0)
    p, log = train_sae(X, SaeConfig(d_sae=16, k=2, steps=0, batch=64, seed=0))
    assert log.mse == [] and log.dead_counts == [] and log.resample_events == []
    np.testing.assert_allclose(p.W_enc, p.W_dec.T)
    np.testing.assert_allclose(p.b_enc, 0)


def test_training_keeps_unit_decoder_and_lowers_loss():
    X = planted(4000, 16, 32, 3, 1)
    p, log = train_sae(X, SaeConfig(d_sae=32, k=3, steps=1200, batch=128, base_lr=3e-3,
                                    dead_scan_every=300, seed=1))
    np.testing.assert_allclose(np.linalg.norm(p.W_dec, axis=0), 1.0, atol=1e-4)
    S = len(log.mse)
    assert np.mean(log.mse[S - 100 : S]) <= np.mean(log.mse[S // 2 - 100 : S // 2])
    assert log.fvu < 0.2


def test_doubling_d_sae_does_not_hurt():
    X = planted(4000, 16, 24, 3, 2)
    for seed in range(3):
        small, ls = train_sae(X, SaeConfig(d_sae=24, k=3, steps=3000, batch=128, base_lr=3e-3,
                                           dead_scan_every=250, seed=seed))
        big, lb = train_sae(X, SaeConfig(d_sae=48, k=3, steps=3000, batch=128, base_lr=3e-3,
                                         dead_scan_every=250, seed=seed))
        assert lb.fvu <= ls.fvu + 0.02


def test_resampling_reduces_dead_count_on_oversized_run():
    X = planted(6000, 32, 64, 4, 3)
    # no in-loop resampling, so the first resample event is the one below
    cfg = SaeConfig(d_sae=128, k=4, steps=1500, batch=128, base_lr=3e-3, dead_scan_every=0, seed=0)
    rng = np.random.default_rng(0)
    p, _ = train_sae(X, cfg)
    sample = X[rng.choice(len(X), 2048, replace=False)]
    dead, _ = dead_feature_scan(p, sample)
    assert dead.size > 0
    resample_dead(p, dead, sample)
    after, _ = dead_feature_scan(p, sample)
    assert after.size < dead.size


def test_checkpoint_round_trip(tmp_path):
    p = make_params(d_model=6, d_sae=8, k=3, dtype=np.float32)
    p.site = HookSite.parse("dec2")
    save_sae(p, tmp_path / "a.tsae", SaeConfig(d_sae=8, k=3))
    q, footer = load_sae(tmp_path / "a.tsae")
    assert q.site == p.site and q.k == 3
    for name in ("W_enc", "b_enc", "W_dec", "b_dec"):
        np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
    assert footer["config"]["d_sae"] == 8
    (tmp_path / "b.tsae").write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(SaeFormatError):
        load_sae(tmp_path / "b.tsae")


def test_fvu_definition():
    p = make_params(d_model=6, d_sae=8, k=8)
    X = np.random.default_rng(9).normal(size=(40, 6))
    err = ((decode_dense(p, encode_dense(p, X)) - X) ** 2).sum()
    assert fvu(p, X) == pytest.approx(err / ((X - X.mean(0)) ** 2).sum())
