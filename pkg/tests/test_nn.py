import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import max_relative_error, random_vae_problem
from violin_hpr.nn import (AdamState, CheckpointError, DenseLayer, MlpParams, adam_step, init_mlp, init_vae,
                           load_checkpoint, mlp_backward, mlp_forward, reparam_sample, save_checkpoint, vae_backward,
                           vae_decode, vae_encode, vae_forward, vae_loss)


def numpy_reference_mlp(params, x):
    h = x
    for i, l in enumerate(params.layers):
        h = h @ l.weights.T + l.bias
        if i < len(params.layers) - 1:
            h = np.maximum(h, 0) + params.slope * np.minimum(h, 0)
    return h


def test_mlp_forward_matches_reference():
    rng = np.random.default_rng(0)
    p = init_mlp([5, 7, 6, 3], rng)
    x = rng.normal(size=(4, 5))
    out, cache = mlp_forward(p, x)
    np.testing.assert_allclose(out, numpy_reference_mlp(p, x), atol=1e-14)
    assert len(cache) == 3 and p.dims == [5, 7, 6, 3]


def test_mlp_hand_computed():
    p = MlpParams([DenseLayer(np.array([[1.0, -1.0]]), np.array([0.0])),
                   DenseLayer(np.array([[2.0]]), np.array([1.0]))], slope=0.1)
    out, _ = mlp_forward(p, np.array([[1.0, 3.0], [3.0, 1.0]]))
    # hidden -2 -> -0.2, 2 -> 2
    np.testing.assert_allclose(out[:, 0], [0.6, 5.0])


def test_mlp_shape_errors():
    p = init_mlp([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(p, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        MlpParams([DenseLayer(np.zeros((4, 3)), np.zeros(4)), DenseLayer(np.zeros((2, 5)), np.zeros(2))])
    with pytest.raises(ValueError):
        MlpParams(p.layers, slope=1.5)


def test_mlp_backward_input_gradient():
    rng = np.random.default_rng(1)
    p = init_mlp([4, 6, 2], rng)
    x = rng.normal(size=(3, 4))
    g_out = rng.normal(size=(3, 2))
    _, cache = mlp_forward(p, x)
    _, gx = mlp_backward(p, cache, g_out)
    h = 1e-6
    for i in range(3):
        for j in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            num = np.sum((mlp_forward(p, xp)[0] - mlp_forward(p, xm)[0]) * g_out) / (2 * h)
            assert gx[i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_init_vae_shapes_and_unit_variance():
    rng = np.random.default_rng(2)
    vae = init_vae(60, 1, rng, latent_dim=32, hidden=(64, 48))
    assert vae.encoder.dims == [61, 64, 48, 64]
    assert vae.decoder.dims == [33, 48, 64, 60]
    assert vae.x_dim == 60
    mu, lv = vae_encode(vae, rng.normal(size=(5, 60)) * 100, np.ones((5, 1)))
    np.testing.assert_array_equal(lv, 0.0)
    assert vae_decode(vae, mu, np.ones((5, 1))).shape == (5, 60)


def test_reparam_statistics():
    rng = np.random.default_rng(3)
    mu = np.full((20000, 2), [1.0, -2.0])
    lv = np.full((20000, 2), [0.0, np.log(4.0)])
    z = reparam_sample(mu, lv, rng)
    np.testing.assert_allclose(z.mean(axis=0), [1.0, -2.0], atol=0.05)
    np.testing.assert_allclose(z.std(axis=0), [1.0, 2.0], atol=0.05)


def test_forward_eps_modes():
    rng = np.random.default_rng(4)
    vae = init_vae(6, 0, rng, latent_dim=3, hidden=(5,))
    x = rng.normal(size=(2, 6))
    f0 = vae_forward(vae, x)
    np.testing.assert_array_equal(f0.z, f0.mu)
    eps = np.ones((2, 3))
    f1 = vae_forward(vae, x, eps=eps)
    np.testing.assert_allclose(f1.z, f1.mu + np.exp(0.5 * f1.logvar))
    a = vae_forward(vae, x, rng=np.random.default_rng(9))
    b = vae_forward(vae, x, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.x_hat, b.x_hat)


def test_loss_closed_form():
    x = np.zeros((2, 3))
    x_hat = np.ones((2, 3))
    mu = np.array([[1.0, 0.0], [0.0, 0.0]])
    lv = np.zeros((2, 2))
    total, mse, kl = vae_loss(x_hat, x, mu, lv, 0.5)
    assert mse == 1.0
    assert kl == pytest.approx(0.25)       # 0.5 * 1 on one row, averaged over 2
    assert total == pytest.approx(1.125)
    # a unit-variance-off posterior: 0.5 (e^lv - lv - 1)
    _, _, kl2 = vae_loss(x, x, np.zeros((1, 1)), np.array([[1.0]]), 1.0)
    assert kl2 == pytest.approx(0.5 * (np.e - 2))
    with pytest.raises(ValueError):
        vae_loss(np.zeros(3), np.zeros(4), mu, lv, 1.0)


@given(st.integers(0, 10000))
@settings(max_examples=30, deadline=None)
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    _, _, kl = vae_loss(np.zeros((3, 2)), np.zeros((3, 2)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) * 3, 1.0)
    assert kl >= 0


@pytest.mark.parametrize("n_layers", [2, 3, 4])
@pytest.mark.parametrize("include_kl", [True, False])
def test_gradients_match_finite_differences(n_layers, include_kl):
    for seed in range(3):
        vae, x, cond, eps = random_vae_problem(np.random.default_rng(100 * n_layers + seed), n_hidden=n_layers - 1)
        assert max_relative_error(vae, x, cond, eps, include_kl) < 1e-4


def test_zero_loss_zero_gradient():
    # decoder that returns exactly zeros, encoder that returns mu = 0 and logvar = 0
    rng = np.random.default_rng(5)
    vae = init_vae(4, 0, rng, latent_dim=2, hidden=(3,), beta=0.7)
    for a in vae.arrays():
        a[...] = 0.0
    x = np.zeros((3, 4))
    f = vae_forward(vae, x, eps=rng.standard_normal((3, 2)))
    assert vae_loss(f.x_hat, x, f.mu, f.logvar, vae.beta)[0] == 0.0
    for g in vae_backward(vae, f, x):
        np.testing.assert_array_equal(g, 0.0)


def test_kl_gradient_wrt_mu():
    # with no reconstruction term the gradient on mu reaching the encoder output is beta * mu / batch
    rng = np.random.default_rng(6)
    vae = init_vae(3, 0, rng, latent_dim=2, hidden=(4,), beta=1.0)
    x = rng.normal(size=(5, 3))
    for a in vae.decoder.arrays():
        a[...] = 0.0
    f = vae_forward(vae, x)
    f.x_hat[...] = x                       # kill the MSE path
    grads = vae_backward(vae, f, x)
    h_last, _ = f.enc_cache[-1]
    d_out = np.hstack([f.mu / 5, 0.5 * (np.exp(f.logvar) - 1) / 5])
    enc_last_w = grads[len(vae.encoder.arrays()) - 2]
    np.testing.assert_allclose(enc_last_w, d_out.T @ h_last, atol=1e-12)
    np.testing.assert_allclose(grads[len(vae.encoder.arrays()) - 1][:2], f.mu.sum(axis=0) / 5, atol=1e-12)


def test_adam_first_step_is_lr():
    p = [np.zeros(4), np.ones((2, 2))]
    g = [np.array([1.0, -2.0, 0.5, 3.0]), np.full((2, 2), -0.1)]
    st_ = AdamState.for_params(p, lr=1e-3)
    adam_step(st_, p, g)
    np.testing.assert_allclose(p[0], -1e-3 * np.sign(g[0]), rtol=1e-4)
    np.testing.assert_allclose(p[1], 1 + 1e-3, rtol=1e-6)
    assert st_.t == 1


def test_adam_zero_gradient_no_motion():
    p = [np.arange(5.0)]
    st_ = AdamState.for_params(p)
    for _ in range(100):
        adam_step(st_, p, [np.zeros(5)])
    np.testing.assert_array_equal(p[0], np.arange(5.0))


def test_adam_bowl_converges():
    p = [np.array([3.0, -2.0])]
    st_ = AdamState.for_params(p, lr=0.015)
    for _ in range(2000):
        adam_step(st_, p, [2 * p[0]])
    assert np.linalg.norm(p[0]) < 1e-2


def test_adam_length_mismatch():
    st_ = AdamState.for_params([np.zeros(2)])
    with pytest.raises(ValueError):
        adam_step(st_, [np.zeros(2)], [np.zeros(2), np.zeros(1)])
    with pytest.raises(ValueError):
        adam_step(st_, [np.zeros(2)], [np.zeros(3)])


def test_fixed_batch_loss_mostly_decreases():
    ok = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        vae = init_vae(8, 1, rng, latent_dim=3, hidden=(12, 10), beta=1e-3)
        x = rng.normal(size=(16, 8))
        c = rng.uniform(size=(16, 1))
        eps = np.zeros((16, 3))
        st_ = AdamState.for_params(vae.arrays(), lr=1e-3)
        losses = []
        for _ in range(50):
            f = vae_forward(vae, x, c, eps=eps)
            losses.append(vae_loss(f.x_hat, x, f.mu, f.logvar, vae.beta)[0])
            adam_step(st_, vae.arrays(), vae_backward(vae, f, x))
        ok += np.all(np.diff(losses) <= 1e-12)
    assert ok >= 19


def test_checkpoint_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(7)
    vae = init_vae(5, 1, rng, latent_dim=2, hidden=(4, 3), beta=0.01)
    st_ = AdamState.for_params(vae.arrays())
    adam_step(st_, vae.arrays(), [rng.normal(size=a.shape) for a in vae.arrays()])
    save_checkpoint(tmp_path / "a.json", vae, st_, rng_state={"seed": 7}, extra={"name": "h"})
    v2, a2, rs, extra = load_checkpoint(tmp_path / "a.json")
    for a, b in zip(vae.arrays(), v2.arrays()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(st_.m + st_.v, a2.m + a2.v):
        np.testing.assert_array_equal(a, b)
    assert (a2.t, v2.beta, v2.cond_dim, v2.latent_dim) == (1, 0.01, 1, 2)
    assert rs == {"seed": 7} and extra == {"name": "h"}
    save_checkpoint(tmp_path / "b.json", v2, a2, rs, extra)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_checkpoint_errors(tmp_path):
    vae = init_vae(3, 0, np.random.default_rng(8), latent_dim=2, hidden=(3,))
    save_checkpoint(tmp_path / "c.json", vae)
    raw = (tmp_path / "c.json").read_text()
    (tmp_path / "t.json").write_text(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.json")
    (tmp_path / "f.json").write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "f.json")
    (tmp_path / "v.json").write_text(raw.replace('"version":1', '"version":99'))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "v.json")
    (tmp_path / "d.json").write_text(raw.replace('"latent_dim":2', '"latent_dim":5'))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.json")
