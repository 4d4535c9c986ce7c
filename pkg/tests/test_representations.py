import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from tdal.datasets import SyntheticConfig, make_synthetic_messy
from tdal.numerics import ContractError, Mlp, Rng, grad_check
from tdal.representations import (EncoderModel, FineTuneConfig, SplitVae, SplitVaeConfig, elbo,
                                  finetune_loss, fit_identity, fit_pca, fit_td_ft, fit_td_split,
                                  gaussian_kl, interleave_schedule, load_encoder,
                                  pretrain_autoencoder, reconstruction_loss, save_encoder,
                                  split_objective, upsample_indices)


def probe_accuracy(train_x, train_y, test_x, test_y):
    clf = LogisticRegression(max_iter=2000).fit(train_x, train_y)
    return float(clf.score(test_x, test_y))


def small_vae(seed=0, d=4, C=3, likelihood="gaussian_unit_var"):
    cfg = SplitVaeConfig(latent_dim=3, classified_dim=2, hidden=8, classifier_hidden=8,
                         decoder_likelihood=likelihood)
    vae = SplitVae.init(d, C, cfg, Rng(seed))
    assert sum(p.size for p in vae.params()) <= 300
    return vae


def randomise(params, rng, scale=0.4):
    for p in params:
        p[...] = rng.normal(scale=scale, size=p.shape)


# -- PCA -------------------------------------------------------------------

def test_pca_keeps_dominant_axis():
    x = np.random.default_rng(0).normal(size=(4000, 2)) * [3.0, 1.0]
    comp = fit_pca(x, 1).tensors["components"][:, 0]
    assert abs(comp[0]) > 0.999 and comp[0] > 0


def test_pca_full_rank_is_isometry():
    x = np.random.default_rng(1).normal(size=(30, 5)) @ np.diag([5, 3, 2, 1, 0.5])
    z = fit_pca(x, 5).encode(x)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dz = np.linalg.norm(z[:, None] - z[None], axis=-1)
    assert np.max(np.abs(dx - dz)) <= 1e-9


def test_pca_out_dim_bounds():
    with pytest.raises(ContractError):
        fit_pca(np.zeros((5, 3)), 4)


def test_pca_discards_task_dims_on_messy_data():
    data, task = make_synthetic_messy(SyntheticConfig(), seed=0)
    y = task.task_labels(data.labels)
    rng = np.random.default_rng(0)
    # task-class-balanced probe set so chance is 1/4
    idx = np.concatenate([rng.choice(np.flatnonzero(y == k), 1200, replace=False)
                          for k in range(4)])
    idx = rng.permutation(idx)
    tr, te = idx[:2400], idx[2400:]
    z = fit_pca(data.features, 3).encode(data.features)
    pca_acc = probe_accuracy(z[tr], y[tr], z[te], y[te])
    task_acc = probe_accuracy(data.features[tr, :3], y[tr], data.features[te, :3], y[te])
    assert pca_acc <= 0.6
    assert task_acc >= 0.9


# -- KL and ELBO -----------------------------------------------------------

def test_kl_closed_form_examples():
    assert gaussian_kl(np.zeros((1, 4)), np.zeros((1, 4)))[0] == 0.0
    assert gaussian_kl(np.ones((1, 1)), np.zeros((1, 1)))[0] == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(7)
    n = 1_000_000
    for _ in range(20):
        d = int(rng.integers(1, 4))
        mu, logvar = rng.normal(size=d), rng.normal(scale=0.7, size=d)
        std = np.exp(0.5 * logvar)
        z = mu + std * rng.standard_normal((n, d))
        log_q = np.sum(-0.5 * ((z - mu) / std) ** 2 - 0.5 * logvar, axis=1)
        log_p = np.sum(-0.5 * z * z, axis=1)
        diff = log_q - log_p
        se = diff.std(ddof=1) / np.sqrt(n)
        assert abs(diff.mean() - gaussian_kl(mu[None], logvar[None])[0]) <= 3 * se


@pytest.mark.parametrize("likelihood", ["gaussian_unit_var", "bernoulli"])
def test_elbo_gradient_matches_finite_differences(likelihood):
    rng = np.random.default_rng(3)
    vae = small_vae(likelihood=likelihood)
    x = rng.random((6, 4)) if likelihood == "bernoulli" else rng.normal(size=(6, 4))
    eps = rng.standard_normal((6, 3))
    for _ in range(10):
        randomise(vae.params(), rng)
        assert grad_check(lambda ps: elbo(vae, x, eps=eps), vae.params()) <= 1e-4


@pytest.mark.parametrize("log_prob", [False, True])
def test_split_objective_gradient_matches_finite_differences(log_prob):
    rng = np.random.default_rng(4)
    vae = small_vae()
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    eps = rng.standard_normal((6, 3))
    for _ in range(10):
        randomise(vae.params(), rng)

        def fn(ps):
            value, grads, _ = split_objective(vae, x, eps, y, alpha=2.5, log_prob=log_prob)
            return value, grads

        assert grad_check(fn, vae.params()) <= 1e-4


def test_alpha_zero_reduces_to_elbo():
    rng = np.random.default_rng(5)
    vae = small_vae()
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    eps = rng.standard_normal((5, 3))
    v0, g0, _ = split_objective(vae, x, eps, y, alpha=0.0)
    ve, ge = elbo(vae, x, eps=eps)
    assert v0 == ve
    n_cls = len(vae.classifier.params())
    for g in g0[-n_cls:]:
        assert np.all(g == 0.0)
    for a, b in zip(g0[:-n_cls], ge[:-n_cls]):
        np.testing.assert_array_equal(a, b)


def test_reconstruction_and_finetune_gradients():
    rng = np.random.default_rng(6)
    enc = Mlp.init([4, 6, 2], Rng(1))
    dec = Mlp.init([2, 6, 4], Rng(2))
    cls = Mlp.init([2, 5, 3], Rng(3), output="softmax")
    x, y = rng.normal(size=(7, 4)), rng.integers(0, 3, 7)
    for _ in range(10):
        randomise(enc.params() + dec.params() + cls.params(), rng, 0.6)
        assert grad_check(lambda ps: reconstruction_loss(enc, dec, x),
                          enc.params() + dec.params()) <= 1e-4
        assert grad_check(lambda ps: finetune_loss(enc, cls, x, y),
                          enc.params() + cls.params()) <= 1e-4


# -- TD-SPLIT --------------------------------------------------------------

def test_split_config_defaults():
    cfg = SplitVaeConfig()
    assert (cfg.latent_dim, cfg.classified_dim, cfg.alpha) == (10, 3, 20.0)
    assert (cfg.learning_rate, cfg.batch_size) == (2e-4, 200)


def test_split_config_validation():
    with pytest.raises(ValueError):
        SplitVaeConfig(latent_dim=2, classified_dim=3)
    with pytest.raises(ValueError):
        SplitVaeConfig(alpha=-1)


def test_upsampling_equalises_classes():
    y = np.array([0] * 13 + [1] * 2 + [2] * 5 + [3] * 1)
    idx = upsample_indices(y, Rng(0))
    counts = np.bincount(y[idx])
    assert np.all(counts == 13)
    # every original example of a minority class appears
    assert set(np.flatnonzero(y == 2)) <= set(idx.tolist())


def test_interleave_spreads_labelled_batches():
    sched = interleave_schedule(9, 3)
    assert len(sched) == 12
    positions = [i for i, (k, _) in enumerate(sched) if k == "l"]
    assert positions == [2, 6, 10]
    assert [i for k, i in sched if k == "u"] == list(range(9))


def _messy_splits(seed):
    data, task = make_synthetic_messy(SyntheticConfig(n_per_class=300), seed)
    y = task.task_labels(data.labels)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    pool, test = perm[:2000], perm[2000:3000]
    # 60 labels, 15 per task class
    lab = np.concatenate([rng.choice(pool[y[pool] == k], 15, replace=False) for k in range(4)])
    return data.features, y, pool, test, lab


def test_td_split_head_dims_and_determinism():
    x, y, pool, _, lab = _messy_splits(0)
    cfg = SplitVaeConfig(epochs=2, learning_rate=2e-3, seed=3)
    enc = fit_td_split(x[pool], x[lab], y[lab], cfg, n_classes=4)
    assert enc.head_inputs(x[:5]).shape == (5, 3)
    assert list(enc.head_input_selector) == [0, 1, 2]
    np.testing.assert_array_equal(enc.encode(x[:50]), enc.encode(x[:50]))
    again = fit_td_split(x[pool], x[lab], y[lab], cfg, n_classes=4)
    np.testing.assert_array_equal(enc.encode(x[:50]), again.encode(x[:50]))


def test_td_split_beats_pca_probe():
    gaps = []
    for seed in range(4):
        x, y, pool, test, lab = _messy_splits(seed)
        cfg = SplitVaeConfig(epochs=60, learning_rate=2e-3, seed=seed)
        enc = fit_td_split(x[pool], x[lab], y[lab], cfg, n_classes=4)
        pca = fit_pca(x[pool], 3)
        a_split = probe_accuracy(enc.head_inputs(x[lab]), y[lab], enc.head_inputs(x[test]), y[test])
        a_pca = probe_accuracy(pca.encode(x[lab]), y[lab], pca.encode(x[test]), y[test])
        gaps.append(a_split - a_pca)
    assert np.mean(gaps) >= 0.10


# -- TD-FT -----------------------------------------------------------------

def _blobs(seed, n=60, d=6):
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=4.0, size=(3, d))
    y = np.repeat(np.arange(3), n // 3)
    return centres[y] + rng.normal(size=(n, d)), y


def test_td_ft_zero_epochs_returns_pretrained_encoder():
    x, y = _blobs(0)
    cfg = FineTuneConfig(pretrain_epochs=3, finetune_epochs=0, batch_size=20)
    pre = pretrain_autoencoder(x, cfg)
    model = fit_td_ft(x, x, y, cfg, pretrained=pre)
    np.testing.assert_array_equal(model.encode(x), pre.encoder.forward(x))


def test_td_ft_guidance_classifier_fits_separable_data():
    x, y = _blobs(1)
    cfg = FineTuneConfig(pretrain_epochs=20, finetune_epochs=100, batch_size=20)
    res = fit_td_ft(x, x, y, cfg, return_details=True)
    assert res.train_accuracy >= 0.9
    assert res.final_loss < res.initial_loss


def test_td_ft_refits_restore_checkpoint_without_mutation():
    x, y = _blobs(2)
    cfg = FineTuneConfig(pretrain_epochs=5, finetune_epochs=5, batch_size=20)
    pre = pretrain_autoencoder(x, cfg)
    snapshot = [p.copy() for p in pre.encoder.params() + pre.decoder.params()]
    r5 = fit_td_ft(x, x[:30], y[:30], cfg, pretrained=pre, return_details=True)
    r10 = fit_td_ft(x, x[:30], y[:30], cfg, pretrained=pre, return_details=True)
    assert r5.initial_loss == r10.initial_loss
    for a, b in zip(snapshot, pre.encoder.params() + pre.decoder.params()):
        np.testing.assert_array_equal(a, b)
        assert not b.flags.writeable


def test_td_ft_requires_labels():
    x, _ = _blobs(3)
    with pytest.raises(ContractError):
        fit_td_ft(x, np.zeros((0, 6)), np.zeros(0), FineTuneConfig(pretrain_epochs=0))


# -- encoder model and checkpoints -----------------------------------------

@pytest.mark.parametrize("variant", ["identity", "pca", "td_split", "td_ft"])
def test_save_load_round_trip(tmp_path, variant):
    x, y = _blobs(4)
    if variant == "identity":
        enc = fit_identity(x)
    elif variant == "pca":
        enc = fit_pca(x, 2)
    elif variant == "td_split":
        enc = fit_td_split(x, x, y, SplitVaeConfig(epochs=1, hidden=8, classifier_hidden=8), 3)
    else:
        enc = fit_td_ft(x, x, y, FineTuneConfig(pretrain_epochs=1, finetune_epochs=1))
    loaded = load_encoder(save_encoder(enc, tmp_path / variant))
    assert (loaded.variant, loaded.output_dim, loaded.head_dims) == (
        enc.variant, enc.output_dim, enc.head_dims)
    np.testing.assert_array_equal(loaded.head_inputs(x), enc.head_inputs(x))
    assert (tmp_path / variant / "manifest.json").exists()


def test_encoder_model_validation():
    with pytest.raises(ContractError):
        EncoderModel("pca", {}, 2, 3, {"input_dim": 2})
    with pytest.raises(ContractError):
        EncoderModel("umap", {}, 2, 2, {"input_dim": 2})
    with pytest.raises(ContractError):
        fit_identity(np.zeros((3, 2))).encode(np.zeros((3, 4)))
