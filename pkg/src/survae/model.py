"""Survival VAE: Gaussian encoder, covariate decoder, and time decoder.

The encoder sees covariates only.  The time decoder emits Weibull (or
exponential) parameters for normalized time t / time_scale, where
time_scale is the largest observed time of the training split.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .data import Encoded, FeatureSchema, Preprocessor, SurvivalData, fit_preprocessor
from .metrics import evaluate_cdf
from .nn import AdamState, MlpParams, NonFiniteError, adam_step, dropout_mask, init_mlp, mlp_forward

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
POSITIVE_FLOOR = 1e-3


@dataclass
class SurvaeConfig:
    latent_dim: int = 5
    hidden_width: int = 50
    keep_prob: float = 0.8
    max_epochs: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 50
    min_delta: float = 1e-4
    time_family: str = "weibull"
    seed: int = 0
    # 0 predicts from the latent mean; M > 0 averages parameters over M draws
    predict_samples: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_width < 1 or self.batch_size < 1:
            raise ValueError("latent_dim, hidden_width and batch_size must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.time_family not in ("weibull", "exponential"):
            raise ValueError(f"unknown time family {self.time_family!r}")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "SurvaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Batch:
    enc: Encoded
    t: np.ndarray
    d: np.ndarray

    def rows(self, idx) -> "Batch":
        return Batch(self.enc.rows(idx), self.t[idx], self.d[idx])

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class TrainHistory:
    train_elbo: list = field(default_factory=list)
    val_elbo: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.val_elbo)

    @property
    def best_val_elbo(self) -> float:
        return self.val_elbo[self.best_epoch]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SurvaeModel:
    config: SurvaeConfig
    schema: FeatureSchema
    preprocessor: Preprocessor
    time_scale: float
    encoder: MlpParams
    cov_decoder: MlpParams
    time_decoder: MlpParams
    levels: dict = field(default_factory=dict)

    def nets(self) -> dict[str, MlpParams]:
        return {"enc": self.encoder, "cov": self.cov_decoder, "time": self.time_decoder}

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Name -> weight array; the arrays are the model's own storage."""
        out = {}
        for net_name, net in self.nets().items():
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{net_name}.W{k}"] = w
                out[f"{net_name}.b{k}"] = b
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays().values())

    def copy(self) -> "SurvaeModel":
        return replace(
            self,
            encoder=self.encoder.with_arrays([a.copy() for a in self.encoder.arrays()]),
            cov_decoder=self.cov_decoder.with_arrays([a.copy() for a in self.cov_decoder.arrays()]),
            time_decoder=self.time_decoder.with_arrays([a.copy() for a in self.time_decoder.arrays()]),
        )

    def batch(self, data: SurvivalData) -> Batch:
        return Batch(self.preprocessor.transform(data), data.times / self.time_scale, data.events.astype(float))


def covariate_output_width(schema: FeatureSchema) -> int:
    return sum(f.n_params for f in schema.features)


def time_output_width(family: str) -> int:
    return 2 if family == "weibull" else 1


def init_model(
    schema: FeatureSchema,
    preprocessor: Preprocessor,
    time_scale: float,
    config: SurvaeConfig,
    rng: np.random.Generator,
    levels: dict | None = None,
) -> SurvaeModel:
    j, h = config.latent_dim, config.hidden_width
    d_in = preprocessor.input_width
    encoder = init_mlp([d_in, h, 2 * j], rng, "relu", "tanh")
    cov = init_mlp([j, h, covariate_output_width(schema)], rng, "relu", "linear")
    time = init_mlp([j, h, time_output_width(config.time_family)], rng, "relu", "linear")
    return SurvaeModel(config, schema, preprocessor, float(time_scale), encoder, cov, time, dict(levels or {}))


# -- heads -------------------------------------------------------------------


def _positive(raw):
    return ad.add(ad.softplus(raw), POSITIVE_FLOOR)


def _time_heads(model: SurvaeModel, raw):
    if model.config.time_family == "weibull":
        return _positive(raw[:, 0]), _positive(raw[:, 1])
    return 1.0, _positive(raw[:, 0])


class _Layout:
    """Column offsets of each feature's parameters in the covariate-decoder output."""

    def __init__(self, schema: FeatureSchema):
        self.real = schema.of_kind("real")
        self.binary = schema.of_kind("binary")
        self.cat = schema.of_kind("categorical")
        nr, nb = len(self.real), len(self.binary)
        self.mu = slice(0, nr)
        self.sigma = slice(nr, 2 * nr)
        self.beta = slice(2 * nr, 2 * nr + nb)
        self.cat_slices = []
        o = 2 * nr + nb
        for i in self.cat:
            k = schema.features[i].k
            self.cat_slices.append(slice(o, o + k))
            o += k
        self.width = o


def _covariate_loglik(model: SurvaeModel, raw, enc: Encoded):
    """Per-sample sum of covariate log-likelihoods, shape (batch,)."""
    lay = _Layout(model.schema)
    parts = []
    if lay.real:
        ll = dist.gaussian_loglik(enc.real, raw[:, lay.mu], _positive(raw[:, lay.sigma]))
        parts.append(ad.total(ll, axis=1))
    if lay.binary:
        ll = dist.bernoulli_loglik(enc.binary, ad.sigmoid(raw[:, lay.beta]))
        parts.append(ad.total(ll, axis=1))
    for c, sl in enumerate(lay.cat_slices):
        parts.append(dist.categorical_loglik(enc.categorical[:, c], ad.softmax(raw[:, sl])))
    if not parts:
        return ad.constant(np.zeros(raw.shape[0]))
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out


def _as_leaves(model: SurvaeModel) -> tuple[dict, dict]:
    leaves = {name: ad.Node(arr, requires_grad=True) for name, arr in model.param_arrays().items()}
    nets = {}
    for net_name, net in model.nets().items():
        k = len(net.weights)
        nets[net_name] = MlpParams(
            [leaves[f"{net_name}.W{i}"] for i in range(k)],
            [leaves[f"{net_name}.b{i}"] for i in range(k)],
            net.hidden_activation,
            net.output_activation,
        )
    return leaves, nets


def _terms(model: SurvaeModel, nets: dict, batch: Batch, eps, masks=None):
    """(KL, time log-lik, covariate log-lik) per sample, as nodes."""
    j = model.config.latent_dim
    masks = masks or {}
    h = mlp_forward(nets["enc"], ad.constant(batch.enc.inputs))
    mu, logvar = h[:, :j], h[:, j:]
    kl = dist.kl_std_normal(mu, logvar)
    z = mu if eps is None else dist.reparameterize(mu, logvar, eps)
    alpha, lam = _time_heads(model, mlp_forward(nets["time"], z, masks.get("time")))
    time_ll = dist.censored_time_loglik(batch.t, batch.d, alpha, lam)
    cov_ll = _covariate_loglik(model, mlp_forward(nets["cov"], z, masks.get("cov")), batch.enc)
    return kl, time_ll, cov_ll


def _elbo_node(model, nets, batch, eps, masks=None):
    kl, time_ll, cov_ll = _terms(model, nets, batch, eps, masks)
    return ad.mean(ad.add(ad.sub(time_ll, kl), cov_ll))


def elbo_terms(model: SurvaeModel, batch: Batch, eps=None, masks=None) -> dict:
    """Per-sample ELBO pieces as arrays (``eps=None`` uses the latent mean)."""
    kl, time_ll, cov_ll = _terms(model, model.nets(), batch, eps, masks)
    return {"kl": kl.value, "time": time_ll.value, "covariates": cov_ll.value}


def elbo_batch(model: SurvaeModel, batch: Batch, eps=None, masks=None) -> float:
    """Mean over the batch of ``-KL + time log-lik + covariate log-lik``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(_elbo_node(model, model.nets(), batch, eps, masks).value)


def loss_and_grads(model: SurvaeModel, batch: Batch, eps=None, masks=None) -> tuple[float, dict]:
    """Negated ELBO and its gradient for every weight array."""
    leaves, nets = _as_leaves(model)
    loss = ad.neg(_elbo_node(model, nets, batch, eps, masks))
    ad.backward(loss)
    return float(loss.value), {name: node.grad for name, node in leaves.items()}


# -- inference ---------------------------------------------------------------


def encode(model: SurvaeModel, inputs) -> dist.LatentGaussian:
    x = np.asarray(inputs, dtype=np.float64)
    h = mlp_forward(model.encoder, x)
    j = model.config.latent_dim
    return dist.LatentGaussian(h[..., :j], h[..., j:])


def decode_time(model: SurvaeModel, z) -> dist.TimeParams:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.config.latent_dim:
        raise ValueError(f"latent width {z.shape[-1]} != {model.config.latent_dim}")
    raw = ad.constant(np.atleast_2d(mlp_forward(model.time_decoder, z)))
    alpha, lam = _time_heads(model, raw)
    alpha = alpha if isinstance(alpha, float) else alpha.value
    lam = lam.value
    if z.ndim == 1:
        alpha = alpha if isinstance(alpha, float) else alpha[0]
        lam = lam[0]
    return dist.TimeParams(lam, alpha, model.config.time_family)


def decode_covariates(model: SurvaeModel, z) -> list:
    """Distribution parameters of every feature, in schema order."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.config.latent_dim:
        raise ValueError(f"latent width {z.shape[-1]} != {model.config.latent_dim}")
    raw = ad.constant(np.atleast_2d(mlp_forward(model.cov_decoder, z)))
    lay = _Layout(model.schema)
    squeeze = z.ndim == 1
    pick = (lambda a: a[0]) if squeeze else (lambda a: a)
    out = [None] * len(model.schema.features)
    mu = raw.value[:, lay.mu]
    sigma = _positive(raw[:, lay.sigma]).value
    for c, i in enumerate(lay.real):
        out[i] = dist.GaussianParams(pick(mu[:, c]), pick(sigma[:, c]))
    beta = ad.sigmoid(raw[:, lay.beta]).value
    for c, i in enumerate(lay.binary):
        out[i] = dist.BernoulliParams(pick(beta[:, c]))
    for sl, i in zip(lay.cat_slices, lay.cat):
        out[i] = dist.CategoricalParams(pick(ad.softmax(raw[:, sl]).value))
    return out


def predict_time_params(model: SurvaeModel, inputs) -> dist.TimeParams:
    """Per-subject time distribution in normalized time (dropout off)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[-1] != model.preprocessor.input_width:
        raise ValueError(f"input width {x.shape[-1]} != {model.preprocessor.input_width}")
    q = encode(model, x)
    m = model.config.predict_samples
    if m <= 0:
        return decode_time(model, q.mu)
    rng = np.random.default_rng(model.config.seed)
    alphas, lams = [], []
    for _ in range(m):
        tp = decode_time(model, dist.reparameterize(q.mu, q.logvar, rng.standard_normal(q.mu.shape)))
        alphas.append(np.broadcast_to(tp.alpha, tp.lam.shape))
        lams.append(tp.lam)
    return dist.TimeParams(np.mean(lams, axis=0), np.mean(alphas, axis=0), model.config.time_family)


def predict(model: SurvaeModel, data: SurvivalData) -> dist.TimeParams:
    """Time distributions in the dataset's original time units."""
    tp = predict_time_params(model, model.preprocessor.transform(data).inputs)
    return tp.rescaled(model.time_scale)


def predict_cdf_matrix(model: SurvaeModel, inputs, grid) -> np.ndarray:
    """F(grid[c] | x_i) with the grid in original time units."""
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("time grid must be ascending and nonnegative")
    tp = predict_time_params(model, inputs)
    alpha = np.broadcast_to(tp.alpha, tp.lam.shape)
    return dist.weibull_cdf(grid[None, :] / model.time_scale, alpha[:, None], tp.lam[:, None])


def evaluate(model: SurvaeModel, data: SurvivalData, grid_size: int = 100) -> dict:
    inputs = model.preprocessor.transform(data).inputs
    return evaluate_cdf(lambda g: predict_cdf_matrix(model, inputs, g), data.times, data.events, grid_size)


# -- training ----------------------------------------------------------------


def _sample_diagnostic(model: SurvaeModel, batch: Batch, eps, masks) -> str:
    terms = elbo_terms(model, batch, eps, masks)
    total = -terms["kl"] + terms["time"] + terms["covariates"]
    bad = np.flatnonzero(~np.isfinite(total))
    if bad.size == 0:
        return "all per-sample terms finite"
    i = bad[0]
    return (
        f"sample {i}: t={batch.t[i]:.6g} d={batch.d[i]:g} kl={terms['kl'][i]:.6g} "
        f"time={terms['time'][i]:.6g} covariates={terms['covariates'][i]:.6g}"
    )


def train(
    train_data: SurvivalData,
    val_data: SurvivalData,
    config: SurvaeConfig | None = None,
) -> tuple[SurvaeModel, TrainHistory]:
    """Mini-batch Adam on the negated ELBO with early stopping.

    Validation ELBO is computed after each epoch with dropout off and the
    latent mean.  The returned model carries the weights of the epoch with
    the highest validation ELBO; ``min_delta`` only governs patience.
    """
    config = config or SurvaeConfig()
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if train_data.schema.digest() != val_data.schema.digest():
        raise ValueError("train and validation schemas differ")
    rng = np.random.default_rng(config.seed)
    pre = fit_preprocessor(train_data)
    model = init_model(train_data.schema, pre, train_data.times.max(), config, rng, train_data.levels)
    tb, vb = model.batch(train_data), model.batch(val_data)
    params = model.param_arrays()
    state = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    hist = TrainHistory()
    best_params = {k: v.copy() for k, v in params.items()}
    best_val, ref_val, ref_epoch = -np.inf, -np.inf, 0
    n, bs, j, h = len(tb), config.batch_size, config.latent_dim, config.hidden_width

    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        epoch_sum = 0.0
        for b, start in enumerate(range(0, n, bs)):
            idx = perm[start : start + bs]
            batch = tb.rows(idx)
            eps = rng.standard_normal((len(idx), j))
            masks = {
                "time": dropout_mask(rng, (len(idx), h), config.keep_prob),
                "cov": dropout_mask(rng, (len(idx), h), config.keep_prob),
            }
            loss, grads = loss_and_grads(model, batch, eps, masks)
            if not np.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    + _sample_diagnostic(model, batch, eps, masks)
                )
            try:
                adam_step(params, grads, state)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from None
            epoch_sum -= loss * len(idx)
        hist.train_elbo.append(epoch_sum / n)
        val = elbo_batch(model, vb)
        if not np.isfinite(val):
            raise NonFiniteError(f"non-finite validation ELBO at epoch {epoch}")
        hist.val_elbo.append(val)
        if val > best_val:
            best_val, hist.best_epoch = val, epoch
            for k, v in params.items():
                best_params[k][...] = v
        if val > ref_val + config.min_delta:
            ref_val, ref_epoch = val, epoch
        if epoch - ref_epoch >= config.patience:
            hist.stop_reason = "early_stop"
            break
    else:
        hist.stop_reason = "max_epochs"

    for k, v in params.items():
        v[...] = best_params[k]
    log.debug(
        "trained %d epochs (best %d, val ELBO %.4f, %s)",
        hist.epochs, hist.best_epoch, best_val, hist.stop_reason,
    )
    return model, hist


# -- serialization -----------------------------------------------------------


class ModelFileError(ValueError):
    pass


def save_model(model: SurvaeModel, path) -> None:
    payload = {
        "format": "survae-model",
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.digest(),
        "preprocessor": model.preprocessor.to_dict(),
        "time_scale": model.time_scale,
        "levels": model.levels,
        "networks": {
            name: {
                "hidden_activation": net.hidden_activation,
                "output_activation": net.output_activation,
                "arrays": [a.tolist() for a in net.arrays()],
            }
            for name, net in model.nets().items()
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path, expected_schema: FeatureSchema | None = None) -> SurvaeModel:
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != "survae-model":
        raise ModelFileError(f"{path}: not a model file")
    if raw.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {raw.get('format_version')!r}")
    schema = FeatureSchema.from_dict(raw["schema"])
    if schema.digest() != raw["schema_hash"]:
        raise ModelFileError(f"{path}: stored schema hash does not match stored schema")
    if expected_schema is not None and expected_schema.digest() != raw["schema_hash"]:
        raise ModelFileError(f"{path}: model schema does not match the dataset schema")
    nets = {}
    for name, net in raw["networks"].items():
        arrays = [np.array(a, dtype=np.float64) for a in net["arrays"]]
        nets[name] = MlpParams(arrays[0::2], arrays[1::2], net["hidden_activation"], net["output_activation"])
    return SurvaeModel(
        SurvaeConfig.from_dict(raw["config"]),
        schema,
        Preprocessor.from_dict(schema, raw["preprocessor"]),
        float(raw["time_scale"]),
        nets["enc"],
        nets["cov"],
        nets["time"],
        raw.get("levels", {}),
    )
