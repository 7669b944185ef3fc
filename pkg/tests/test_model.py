import math

import numpy as np
import pytest
from scipy import stats

from conftest import MIXED_SCHEMA, mixed_data, small_model
from survae import autodiff as ad
from survae import distributions as dist
from survae.data import SynthSpec, kfold_split, stratified_holdout, synth_generate
from survae.model import (
    ModelFileError,
    SurvaeConfig,
    covariate_output_width,
    decode_covariates,
    decode_time,
    elbo_batch,
    elbo_terms,
    encode,
    evaluate,
    load_model,
    loss_and_grads,
    predict,
    predict_cdf_matrix,
    predict_time_params,
    save_model,
    train,
)
from survae.nn import NonFiniteError, dropout_mask, mlp_forward


def _masks(r, n, h, keep=0.8):
    return {"time": dropout_mask(r, (n, h), keep), "cov": dropout_mask(r, (n, h), keep)}


# -- config and shapes -----------------------------------------------------------


def test_config_defaults_and_validation():
    c = SurvaeConfig()
    assert (c.latent_dim, c.hidden_width, c.keep_prob, c.max_epochs, c.batch_size) == (5, 50, 0.8, 3000, 64)
    assert (c.lr, c.patience, c.min_delta) == (1e-3, 50, 1e-4)
    for bad in ({"keep_prob": 0.0}, {"latent_dim": 0}, {"time_family": "gamma"}, {"patience": -1}):
        with pytest.raises(ValueError):
            SurvaeConfig(**bad)
    with pytest.raises(ValueError, match="unknown config keys"):
        SurvaeConfig.from_dict({"latent": 3})


@pytest.mark.parametrize("j, h, family", [(2, 8, "weibull"), (5, 50, "weibull"), (3, 7, "exponential")])
def test_shape_audit(j, h, family):
    data = mixed_data(10)
    m = small_model(data, latent_dim=j, hidden=h, family=family)
    d_in = 2 + 1 + 3
    out_t = 2 if family == "weibull" else 1
    assert covariate_output_width(MIXED_SCHEMA) == 2 + 2 + 1 + 3
    assert m.encoder.widths == [d_in, h, 2 * j]
    assert m.cov_decoder.widths == [j, h, 8]
    assert m.time_decoder.widths == [j, h, out_t]
    expected = (d_in * h + h + h * 2 * j + 2 * j) + (j * h + h + h * 8 + 8) + (j * h + h + h * out_t + out_t)
    assert m.n_params() == expected
    assert m.encoder.output_activation == "tanh"


# -- encoder / decoders ---------------------------------------------------------


def test_encode_shapes_and_zero_weights():
    data = mixed_data(6)
    m = small_model(data, latent_dim=3)
    x = m.preprocessor.transform(data).inputs
    q = encode(m, x)
    assert q.mu.shape == (6, 3) and q.logvar.shape == (6, 3)
    m.encoder.weights[0][...] = 0.0
    m.encoder.weights[1][...] = 0.0
    q = encode(m, x)
    np.testing.assert_array_equal(q.mu, np.tile(np.tanh(m.encoder.biases[1][:3]), (6, 1)))
    a = encode(m, x)
    assert a.mu.tobytes() == q.mu.tobytes()
    with pytest.raises(ValueError, match="input width"):
        encode(m, np.zeros((2, 5)))


def _zero_last_layer(net):
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = 0.0


def test_decode_time_heads():
    m = small_model(mixed_data(5))
    _zero_last_layer(m.time_decoder)
    tp = decode_time(m, np.zeros(2))
    assert tp.alpha == pytest.approx(math.log(2) + 1e-3, abs=1e-12)
    assert tp.lam == pytest.approx(0.6941, abs=1e-4)
    m.time_decoder.biases[-1][...] = [30.0, 50.0]
    big = decode_time(m, np.zeros(2))
    assert big.alpha > tp.alpha and big.lam > 30
    with pytest.raises(ValueError, match="latent width"):
        decode_time(m, np.zeros(3))


def test_decode_time_invariants_random_sweep():
    m = small_model(mixed_data(5))
    for net in m.nets().values():
        for w in net.weights:
            w *= 10
    z = np.random.default_rng(0).normal(scale=5, size=(10_000, 2))
    tp = decode_time(m, z)
    assert np.all(tp.alpha > 0) and np.all(tp.lam > 0)
    assert np.all(np.isfinite(tp.alpha)) and np.all(np.isfinite(tp.lam))


def test_decode_covariate_heads():
    m = small_model(mixed_data(5))
    _zero_last_layer(m.cov_decoder)
    params = decode_covariates(m, np.zeros(2))
    assert len(params) == 4
    assert params[0].mu == 0.0
    assert params[0].sigma == pytest.approx(math.log(2) + 1e-3)
    assert params[2].beta == 0.5
    np.testing.assert_allclose(params[3].theta, [1 / 3] * 3, rtol=0, atol=1e-15)
    batch = decode_covariates(m, np.zeros((4, 2)))
    assert np.shape(batch[3].theta) == (4, 3)


# -- ELBO ------------------------------------------------------------------------


def test_elbo_decomposition_from_public_calls():
    data = mixed_data(9, 4)
    m = small_model(data)
    b = m.batch(data)
    r = np.random.default_rng(5)
    eps = r.standard_normal((9, 2))
    masks = _masks(r, 9, 8)

    q = encode(m, b.enc.inputs)
    z = dist.reparameterize(q.mu, q.logvar, eps)
    kl = dist.kl_std_normal(q.mu, q.logvar)
    raw_t = mlp_forward(m.time_decoder, z, masks["time"])
    alpha, lam = np.logaddexp(0, raw_t[:, 0]) + 1e-3, np.logaddexp(0, raw_t[:, 1]) + 1e-3
    time_ll = dist.censored_time_loglik(b.t, b.d, alpha, lam)
    raw_c = mlp_forward(m.cov_decoder, z, masks["cov"])
    cov = dist.gaussian_loglik(b.enc.real, raw_c[:, :2], np.logaddexp(0, raw_c[:, 2:4]) + 1e-3).sum(axis=1)
    cov += dist.bernoulli_loglik(b.enc.binary[:, 0], 1 / (1 + np.exp(-raw_c[:, 4])))
    theta = np.exp(raw_c[:, 5:8]) / np.exp(raw_c[:, 5:8]).sum(axis=1, keepdims=True)
    cov += dist.categorical_loglik(b.enc.categorical[:, 0], theta)
    expected = np.mean(-kl + time_ll + cov)
    assert abs(elbo_batch(m, b, eps, masks) - expected) < 1e-12

    t = elbo_terms(m, b, eps, masks)
    np.testing.assert_allclose(t["kl"], kl, rtol=0, atol=1e-12)
    np.testing.assert_allclose(t["time"], time_ll, rtol=0, atol=1e-12)
    np.testing.assert_allclose(t["covariates"], cov, rtol=0, atol=1e-12)


def test_single_sample_elbo():
    data = mixed_data(1, 7)
    m = small_model(data)
    b = m.batch(data)
    eps = np.array([[0.3, -1.1]])
    t = elbo_terms(m, b, eps)
    assert elbo_batch(m, b, eps) == pytest.approx(-t["kl"][0] + t["time"][0] + t["covariates"][0], abs=1e-12)


def test_fully_censored_time_term_is_log_survival():
    data = mixed_data(10, 2)
    data.events[:] = 0
    m = small_model(data)
    b = m.batch(data)
    eps = np.random.default_rng(1).standard_normal((10, 2))
    tp = decode_time(m, dist.reparameterize(*_latent(m, b), eps))
    log_s = dist.weibull_log_survival(b.t, tp.alpha, tp.lam)
    assert elbo_terms(m, b, eps)["time"].mean() == np.mean(log_s)


def _latent(m, b):
    q = encode(m, b.enc.inputs)
    return q.mu, q.logvar


def test_censored_sample_ignores_hazard():
    data = mixed_data(1, 2)
    data.events[:] = 0
    m = small_model(data)
    b = m.batch(data)
    base = elbo_batch(m, b)
    m.time_decoder.weights[-1][:, 0] += 3.0  # moves alpha, and so the hazard, but S changes too
    tp = decode_time(m, encode(m, b.enc.inputs).mu)
    t = elbo_terms(m, b)
    assert t["time"][0] == dist.weibull_log_survival(b.t[0], tp.alpha[0], tp.lam[0])
    assert base != elbo_batch(m, b)


@pytest.mark.parametrize("family", ["weibull", "exponential"])
def test_elbo_gradient_matches_finite_differences(family):
    data = mixed_data(12, 3)
    m = small_model(data, family=family)
    b = m.batch(data)
    r = np.random.default_rng(0)
    eps = r.standard_normal((12, 2))
    masks = _masks(r, 12, 8)
    _, grads = loss_and_grads(m, b, eps, masks)

    arrays = m.param_arrays()
    names = list(arrays)
    flat = np.concatenate([arrays[k].ravel() for k in names])

    def neg_elbo(p):
        o = 0
        for k in names:
            a = arrays[k]
            a[...] = p[o : o + a.size].reshape(a.shape)
            o += a.size
        return -elbo_batch(m, b, eps, masks)

    numeric = ad.finite_diff_gradient(neg_elbo, flat, 1e-5)
    neg_elbo(flat)
    analytic = np.concatenate([grads[k].ravel() for k in names])
    # per-coordinate relative error, denominators floored at 1e-6
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    assert rel.max() < 1e-4


# -- training --------------------------------------------------------------------


def _small_cfg(**kw):
    base = dict(latent_dim=2, hidden_width=8, batch_size=16, max_epochs=30, patience=5, lr=5e-3)
    base.update(kw)
    return SurvaeConfig(**base)


def test_patience_zero_runs_one_epoch():
    data = mixed_data(40, 1)
    _, hist = train(data.subset(range(30)), data.subset(range(30, 40)), _small_cfg(patience=0))
    assert hist.epochs == 1 and hist.best_epoch == 0 and hist.stop_reason == "early_stop"


def test_training_is_deterministic():
    data = mixed_data(60, 2)
    tr, va = data.subset(range(48)), data.subset(range(48, 60))
    m1, h1 = train(tr, va, _small_cfg())
    m2, h2 = train(tr, va, _small_cfg())
    assert h1.to_dict() == h2.to_dict()
    for k, v in m1.param_arrays().items():
        assert v.tobytes() == m2.param_arrays()[k].tobytes()
    _, h3 = train(tr, va, _small_cfg(seed=1))
    assert h3.train_elbo != h1.train_elbo


def test_best_epoch_weights_are_returned():
    data = mixed_data(80, 5)
    tr, va = data.subset(range(60)), data.subset(range(60, 80))
    m, hist = train(tr, va, _small_cfg(max_epochs=40, patience=8))
    assert hist.best_val_elbo == max(hist.val_elbo)
    assert hist.val_elbo[hist.best_epoch] == hist.best_val_elbo
    assert elbo_batch(m, m.batch(va)) == hist.best_val_elbo


def test_overfit_single_record():
    data = mixed_data(1, 9)
    rep = data.subset([0] * 50)
    m, hist = train(rep, rep, _small_cfg(max_epochs=200, patience=200, keep_prob=1.0, lr=3e-3))
    best_so_far = np.maximum.accumulate(hist.val_elbo)
    assert np.all(np.diff(best_so_far) >= 0)
    assert hist.best_val_elbo > hist.val_elbo[0] + 5.0
    # two Gaussian features with sigma >= 1e-3; Bernoulli and categorical terms are <= 0
    cap = 2 * (-math.log(1e-3) - 0.5 * math.log(2 * math.pi))
    cov = elbo_terms(m, m.batch(data))["covariates"][0]
    assert 0 < cov <= cap


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_errors():
    data = mixed_data(10)
    with pytest.raises(ValueError):
        train(data, data.subset([]), _small_cfg())
    huge = mixed_data(40)
    huge.covariates[:, 0] *= 1e200
    with pytest.raises(NonFiniteError, match=r"epoch 0, batch \d+: sample \d+: t="):
        train(huge, huge, _small_cfg(lr=1e12, max_epochs=5, patience=5))


def test_prediction_tracks_true_scale():
    data, truth = synth_generate(SynthSpec(n=800, seed=4))
    keep, hold = stratified_holdout(data.events, 0.2, 0)
    m, _ = train(data.subset(keep), data.subset(hold), SurvaeConfig(lr=3e-3, patience=20, max_epochs=300))
    tp = predict(m, data)
    rho = stats.spearmanr(tp.lam, truth.scales).statistic
    assert rho > 0.5


# -- prediction -------------------------------------------------------------------


def test_predictions_are_deterministic_and_valid():
    data = mixed_data(20, 6)
    m = small_model(data)
    x = m.preprocessor.transform(data).inputs
    x[1] = x[0]
    tp = predict_time_params(m, x)
    assert tp.lam[0] == tp.lam[1] and tp.alpha[0] == tp.alpha[1]
    assert np.all(tp.lam > 0) and np.all(tp.alpha > 0)
    m.config.predict_samples = 5
    tp5 = predict_time_params(m, x)
    assert tp5.lam.tobytes() == predict_time_params(m, x).lam.tobytes()


def test_cdf_matrix():
    data = mixed_data(100, 8)
    m = small_model(data)
    x = m.preprocessor.transform(data).inputs
    np.testing.assert_array_equal(predict_cdf_matrix(m, x, [0.0]), np.zeros((100, 1)))
    grid = np.linspace(0, 150, 40)
    f = predict_cdf_matrix(m, x, grid)
    assert np.all(np.diff(f, axis=1) >= 0) and np.all((f >= 0) & (f <= 1))
    tp = predict_time_params(m, x)
    assert f[7, 12] == dist.weibull_cdf(grid[12] / m.time_scale, tp.alpha[7], tp.lam[7])
    with pytest.raises(ValueError, match="ascending"):
        predict_cdf_matrix(m, x, [2.0, 1.0])
    with pytest.raises(ValueError):
        predict_cdf_matrix(m, x, [-1.0, 1.0])


def test_predict_rescales_to_original_units():
    data = mixed_data(10)
    m = small_model(data)
    tp_norm = predict_time_params(m, m.preprocessor.transform(data).inputs)
    tp = predict(m, data)
    np.testing.assert_allclose(tp.lam, tp_norm.lam * m.time_scale, rtol=1e-15)


# -- persistence ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    data = mixed_data(30, 3)
    m = small_model(data)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json", expected_schema=MIXED_SCHEMA)
    for k, v in m.param_arrays().items():
        assert v.tobytes() == back.param_arrays()[k].tobytes()
    assert back.config == m.config and back.levels == m.levels
    assert evaluate(m, data) == evaluate(back, data)


def test_load_rejects_bad_files(tmp_path):
    import json

    data = mixed_data(30, 3)
    m = small_model(data)
    p = tmp_path / "m.json"
    save_model(m, p)
    raw = json.loads(p.read_text())
    raw["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(raw))
    with pytest.raises(ModelFileError, match="version"):
        load_model(tmp_path / "v.json")
    other = data.schema.__class__(data.schema.features[:3], "time", "event")
    with pytest.raises(ModelFileError, match="schema"):
        load_model(p, expected_schema=other)
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "x.json")


def test_cv_fold_training_smoke():
    data, _ = synth_generate(SynthSpec(n=200, seed=1))
    tr, te = kfold_split(data, 5, 0).folds[0]
    m, _ = train(data.subset(tr[:150]), data.subset(tr[150:]), _small_cfg(max_epochs=20))
    r = evaluate(m, data.subset(te))
    assert 0 <= r["c_index"] <= 1 and r["ibs"] >= 0
