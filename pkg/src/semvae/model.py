"""Semantic VAE with a latent-layer classifier and reconstruction-density reweighting.

The encoder maps a feature ``x`` to ``N(mu_z, diag(sigma_z^2))``; a latent
sample ``z`` is scored against the category matrix ``A`` (m x C) through
``softmax(z^T A)`` and decoded back to ``mu_x`` with a unit-variance Gaussian
likelihood. The per-instance reconstruction density, max-normalised inside each
mini-batch, weights the classification loss so that poorly reconstructed
instances (likely outliers) contribute little.

Labels are 0-based category indices throughout.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .nn import Adam, DenseLayer, ParamStore, ShapeError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MODES = ("wsci", "unweighted", "sim1", "sim2")


class ConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


@dataclass
class WsciConfig:
    d: int
    m: int
    C: int
    hidden: int | None = None
    lam: float = 1e-4
    L_predict: int = 5
    batch: int = 64
    epochs: int = 50
    seed: int = 0
    lr: float = 1e-3
    decay: float = 0.98
    logvar_bias: float = -4.0   # initial log sigma_z^2; starts the latent noise small
    pin_weights: bool = False

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = max(1, round((self.d + self.m) / 2))
        self.validate()

    def validate(self) -> None:
        for name in ("d", "m", "C", "hidden", "L_predict", "batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.lr <= 0 or self.decay <= 0:
            raise ConfigError("lr and decay must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


@dataclass
class LatentSample:
    z: np.ndarray
    eps: np.ndarray


@dataclass
class DecoderOutput:
    mu_x: np.ndarray

    @property
    def sigma_x(self) -> np.ndarray:
        # unit observation noise, never learned
        return np.ones_like(self.mu_x)


@dataclass
class BatchWeights:
    log_p: np.ndarray
    tilde_p: np.ndarray


def _matrix(A) -> np.ndarray:
    return np.asarray(getattr(A, "A", A), dtype=np.float64)


# -- closed-form pieces ------------------------------------------------------

def recon_log_density(x: np.ndarray, mu_x: np.ndarray) -> np.ndarray | float:
    """log N(x; mu_x, I). Rows of a 2-d input are scored independently."""
    x = np.asarray(x, dtype=np.float64)
    mu_x = np.asarray(mu_x, dtype=np.float64)
    if x.shape != mu_x.shape:
        raise ShapeError(f"x shape {x.shape} != mu_x shape {mu_x.shape}")
    d = x.shape[-1]
    out = -0.5 * d * LOG_2PI - 0.5 * np.sum((x - mu_x) ** 2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl_standard_normal(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray | float:
    """KL[N(mu, diag sigma^2) || N(0, I)], summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    s2 = sigma ** 2
    out = 0.5 * np.sum(mu ** 2 + s2 - 1.0 - np.log(s2), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def semantic_class_probs(z: np.ndarray, A) -> np.ndarray:
    return softmax(np.asarray(z, dtype=np.float64) @ _matrix(A))


def reparameterize(q: GaussianPosterior, eps: np.ndarray) -> LatentSample:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.mu.shape:
        raise ShapeError(f"eps shape {eps.shape} != posterior shape {q.mu.shape}")
    return LatentSample(z=q.mu + q.sigma * eps, eps=eps)


def _check_labels(c: np.ndarray, C: int) -> np.ndarray:
    c = np.asarray(c)
    if c.size and (c.min() < 0 or c.max() >= C):
        raise ValueError(f"labels must lie in [0, {C - 1}]")
    return c.astype(np.intp)


def semantic_vae_loss(x, c, z, A, mu_x) -> float:
    """Softmax loss on z^T A plus negative reconstruction log-density, summed."""
    A = _matrix(A)
    z2 = np.atleast_2d(z)
    c = _check_labels(np.atleast_1d(c), A.shape[1])
    logq = log_softmax(z2 @ A)
    nll = -logq[np.arange(len(c)), c]
    logp = np.atleast_1d(recon_log_density(np.atleast_2d(x), np.atleast_2d(mu_x)))
    return float(np.sum(nll - logp))


def normalize_batch_weights(log_p: np.ndarray) -> BatchWeights:
    log_p = np.asarray(log_p, dtype=np.float64)
    if log_p.size == 0:
        raise ValueError("cannot normalise an empty batch")
    return BatchWeights(log_p=log_p, tilde_p=np.exp(log_p - log_p.max()))


# -- network -----------------------------------------------------------------

class SemanticVAE:
    """Encoder/decoder pair plus, for the ablation modes, a classifier on x.

    ``wsci`` and ``unweighted`` classify through the latent head ``z^T A``;
    ``sim1`` pairs a plain VAE with an independent classifier; ``sim2`` keeps
    the latent head for the VAE loss but predicts with the independent one.
    """

    def __init__(self, cfg: WsciConfig, mode: str = "wsci", rng: np.random.Generator | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.mode = mode
        d, m, h = cfg.d, cfg.m, cfg.hidden
        self.enc_h = DenseLayer(d, h, "tanh", rng, "enc_h")
        self.enc_mu = DenseLayer(h, m, "identity", rng, "enc_mu")
        self.enc_logvar = DenseLayer(h, m, "identity", rng, "enc_logvar")
        self.enc_logvar.b[:] = cfg.logvar_bias
        self.dec_h = DenseLayer(m, h, "tanh", rng, "dec_h")
        self.dec_out = DenseLayer(h, d, "identity", rng, "dec_out")
        layers = [self.enc_h, self.enc_mu, self.enc_logvar, self.dec_h, self.dec_out]
        self.clf_h = self.clf_out = None
        if mode in ("sim1", "sim2"):
            self.clf_h = DenseLayer(d, h, "tanh", rng, "clf_h")
            self.clf_out = DenseLayer(h, cfg.C, "identity", rng, "clf_out")
            layers += [self.clf_h, self.clf_out]
        self.params = ParamStore(layers)

    @property
    def uses_latent_head(self) -> bool:
        return self.mode in ("wsci", "unweighted", "sim2")

    def encode(self, x: np.ndarray) -> GaussianPosterior:
        hidden = self.enc_h(x)
        return GaussianPosterior(mu=self.enc_mu(hidden), logvar=self.enc_logvar(hidden))

    def decode(self, z: np.ndarray) -> DecoderOutput:
        return DecoderOutput(mu_x=self.dec_out(self.dec_h(z)))

    def classify_x(self, x: np.ndarray) -> np.ndarray:
        """Logits of the independent classifier (sim modes only)."""
        return self.clf_out(self.clf_h(x))

    # backward through decoder then encoder; caches come from the last forward
    def _backprop_vae(self, dz, dmu_x, eps, sigma, dmu_extra=0.0, dlogvar_extra=0.0):
        dz = dz + self.dec_h.backward(self.dec_out.backward(dmu_x))
        dmu = dz + dmu_extra
        dlogvar = dz * eps * 0.5 * sigma + dlogvar_extra
        dh = self.enc_mu.backward(dmu) + self.enc_logvar.backward(dlogvar)
        self.enc_h.backward(dh)

    def to_text(self) -> str:
        cfg = self.cfg
        buf = io.StringIO()
        buf.write(f"semvae-checkpoint d={cfg.d} m={cfg.m} C={cfg.C} hidden={cfg.hidden} "
                  f"lam={cfg.lam!r} seed={cfg.seed} mode={self.mode}\n")
        self.params.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "SemanticVAE":
        lines = text.splitlines()
        head = lines[0].split()
        if not head or head[0] != "semvae-checkpoint":
            raise ValueError("not a checkpoint file")
        fields = dict(tok.split("=", 1) for tok in head[1:])
        cfg = WsciConfig(d=int(fields["d"]), m=int(fields["m"]), C=int(fields["C"]),
                         hidden=int(fields["hidden"]), lam=float(fields["lam"]),
                         seed=int(fields["seed"]))
        model = cls(cfg, fields.get("mode", "wsci"))
        model.params.read(lines[1:])
        return model


# -- losses with gradients -----------------------------------------------------

def wsci_batch_loss(model: SemanticVAE, x: np.ndarray, c: np.ndarray, A, eps: np.ndarray,
                    lam: float | None = None, pin_weights: bool | None = None,
                    backward: bool = True, weights: np.ndarray | None = None,
                    ) -> tuple[float, np.ndarray]:
    """Weighted latent-softmax loss plus ``lam``-scaled reconstruction loss.

    ``tilde_p`` enters as a constant weight; no gradient flows through it.
    Passing ``weights`` substitutes fixed values for ``tilde_p``, which makes
    the loss an explicit function of the parameters (finite-difference checks).
    Returns the summed loss and the per-instance weights.
    """
    A = _matrix(A)
    cfg = model.cfg
    lam = cfg.lam if lam is None else lam
    pin = cfg.pin_weights if pin_weights is None else pin_weights
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    c = _check_labels(c, A.shape[1])
    n, C = len(c), A.shape[1]
    rows = np.arange(n)

    q = model.encode(x)
    sigma = q.sigma
    z = q.mu + sigma * eps
    mu_x = model.decode(z).mu_x
    log_p = recon_log_density(x, mu_x)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
    else:
        w = np.ones(n) if pin else normalize_batch_weights(log_p).tilde_p
    logits = z @ A
    logq = log_softmax(logits)
    loss = float(np.sum(-w * (logq[rows, c] + math.log(C))) - lam * np.sum(log_p))

    if backward:
        dlogits = np.exp(logq)
        dlogits[rows, c] -= 1.0
        dlogits *= w[:, None]
        model._backprop_vae(dlogits @ A.T, -lam * (x - mu_x), eps, sigma)
    return loss, w


def _sim_batch_loss(model: SemanticVAE, x, c, A, eps, backward=True,
                    weights=None) -> tuple[float, np.ndarray]:
    """Losses for the two detached-classifier ablations.

    sim1: plain VAE (KL + reconstruction) whose weights feed a classifier on x.
    sim2: semantic VAE (latent softmax + reconstruction), same weighted classifier.
    The two parts are summed with equal weight.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    C = model.cfg.C
    c = _check_labels(c, C)
    n = len(c)
    rows = np.arange(n)

    q = model.encode(x)
    sigma = q.sigma
    z = q.mu + sigma * eps
    mu_x = model.decode(z).mu_x
    log_p = recon_log_density(x, mu_x)
    w = normalize_batch_weights(log_p).tilde_p if weights is None else np.asarray(weights, float)

    if model.mode == "sim1":
        vae_loss = np.sum(kl_standard_normal(q.mu, sigma) - log_p)
    else:
        A = _matrix(A)
        logq_lat = log_softmax(z @ A)
        vae_loss = np.sum(-logq_lat[rows, c] - log_p)

    logq_clf = log_softmax(model.classify_x(x))
    clf_loss = np.sum(-w * (logq_clf[rows, c] + math.log(C)))
    loss = float(vae_loss + clf_loss)

    if backward:
        dlog_clf = np.exp(logq_clf)
        dlog_clf[rows, c] -= 1.0
        dlog_clf *= w[:, None]
        model.clf_h.backward(model.clf_out.backward(dlog_clf))
        dmu_x = -(x - mu_x)
        if model.mode == "sim1":
            model._backprop_vae(np.zeros_like(z), dmu_x, eps, sigma,
                                dmu_extra=q.mu, dlogvar_extra=0.5 * (sigma ** 2 - 1.0))
        else:
            dlat = np.exp(logq_lat)
            dlat[rows, c] -= 1.0
            model._backprop_vae(dlat @ A.T, dmu_x, eps, sigma)
    return loss, w


def batch_loss(model: SemanticVAE, x, c, A, eps, backward=True,
               weights=None) -> tuple[float, np.ndarray]:
    if model.mode == "wsci":
        return wsci_batch_loss(model, x, c, A, eps, backward=backward, weights=weights)
    if model.mode == "unweighted":
        return wsci_batch_loss(model, x, c, A, eps, lam=0.0, pin_weights=True, backward=backward)
    return _sim_batch_loss(model, x, c, A, eps, backward=backward, weights=weights)


# -- training and inference --------------------------------------------------

@dataclass
class TrainResult:
    model: SemanticVAE
    history: list[dict] = field(default_factory=list)
    tilde_p: np.ndarray | None = None  # per-instance weights from the final epoch


def train(x: np.ndarray, labels: np.ndarray, A, cfg: WsciConfig, mode: str = "wsci",
          on_epoch: Callable[[SemanticVAE, int, np.ndarray], dict] | None = None) -> TrainResult:
    """Mini-batch Adam training.

    Each epoch draws its shuffle and one ``eps`` per instance from a generator
    seeded by ``(cfg.seed, epoch)``. ``on_epoch`` may return extra metrics to
    merge into the epoch record; it receives the model, epoch index and the
    per-instance weights seen during that epoch.
    """
    A = _matrix(A)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("training set must be a non-empty 2-d array")
    if x.shape[1] != cfg.d:
        raise ConfigError(f"feature width {x.shape[1]} != config d={cfg.d}")
    if A.shape != (cfg.m, cfg.C):
        raise ConfigError(f"semantic matrix shape {A.shape} != (m={cfg.m}, C={cfg.C})")
    if len(labels) != len(x):
        raise ConfigError("labels and features differ in length")
    _check_labels(labels, cfg.C)
    if mode == "unweighted" or cfg.pin_weights:
        log.debug("weights pinned to 1")

    model = SemanticVAE(cfg, mode, np.random.default_rng(cfg.seed))
    opt = Adam(model.params, lr=cfg.lr, decay=cfg.decay)
    n = len(x)
    result = TrainResult(model=model)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        eps = rng.standard_normal((n, cfg.m))
        weights = np.empty(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, w = batch_loss(model, x[idx], labels[idx], A, eps[idx])
            opt.step()
            weights[idx] = w
            total += loss
        opt.end_epoch()
        record = {"epoch": epoch, "loss": total / n}
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        if on_epoch is not None:
            record.update(on_epoch(model, epoch, weights))
        result.history.append(record)
        result.tilde_p = weights
    return result


def predict(model: SemanticVAE, x: np.ndarray, A=None, L: int | None = None, seed: int = 0,
            eps: np.ndarray | None = None) -> np.ndarray:
    """Category probabilities, averaged over ``L`` latent draws for the latent head.

    The sim modes predict with their independent classifier on x, which is
    deterministic.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if model.mode in ("sim1", "sim2"):
        probs = softmax(model.classify_x(x2))
        return probs if np.ndim(x) == 2 else probs[0]
    L = model.cfg.L_predict if L is None else L
    if L < 1:
        raise ValueError("L must be >= 1")
    A = _matrix(A)
    q = model.encode(x2)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((L,) + q.mu.shape)
    probs = np.zeros((x2.shape[0], A.shape[1]))
    for l in range(L):
        probs += semantic_class_probs(reparameterize(q, eps[l]).z, A)
    probs /= L
    return probs if np.ndim(x) == 2 else probs[0]


def reconstruction_log_density(model: SemanticVAE, x: np.ndarray) -> np.ndarray:
    """log p(x | z = mu_z), the deterministic score used for outlier ranking."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = model.encode(x)
    return recon_log_density(x, model.decode(q.mu).mu_x)


def outlier_scores(model: SemanticVAE, x: np.ndarray, batch: int | None = None) -> np.ndarray:
    """Batch-max-normalised reconstruction densities; higher means more typical.

    Normalisation runs over consecutive chunks of ``batch`` rows (default: the
    training batch size) in the given order.
    """
    log_p = reconstruction_log_density(model, x)
    batch = model.cfg.batch if batch is None else batch
    out = np.empty_like(log_p)
    for start in range(0, len(log_p), batch):
        sl = slice(start, start + batch)
        out[sl] = normalize_batch_weights(log_p[sl]).tilde_p
    return out
