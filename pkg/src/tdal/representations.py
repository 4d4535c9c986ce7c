"""Encoders mapping inputs to the representation the prediction head sees.

Four variants:

* ``identity`` - raw features.
* ``pca`` - label-free linear projection (the unsupervised baseline).
* ``td_split`` - split-latent semi-supervised VAE; a guidance classifier
  reads only the first ``classified_dim`` latent coordinates, and only those
  coordinates are passed on to the prediction head.
* ``td_ft`` - autoencoder pretraining on the pool followed by supervised
  fine-tuning of the encoder through a guidance classifier.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (AdamState, ContractError, Mlp, Rng, adam_step, as_matrix,
                       sigmoid, softmax_cross_entropy)

log = logging.getLogger(__name__)

VARIANTS = ("identity", "pca", "td_split", "td_ft")
LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Fitted encoder


@dataclass
class EncoderModel:
    variant: str
    tensors: dict[str, np.ndarray]
    output_dim: int
    head_dims: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown encoder variant {self.variant!r}")
        if not 1 <= self.head_dims <= self.output_dim:
            raise ContractError("head input selector must lie within the representation")

    @property
    def head_input_selector(self) -> range:
        return range(self.head_dims)

    @property
    def input_dim(self) -> int:
        return int(self.meta["input_dim"])

    def encode(self, x) -> np.ndarray:
        """Deterministic representation of ``x`` (posterior mean for td_split)."""
        x = as_matrix(x, "x", cols=self.input_dim)
        if self.variant == "identity":
            return x.copy()
        if self.variant == "pca":
            return (x - self.tensors["mean"]) @ self.tensors["components"]
        net = _mlp_from_tensors(self.tensors, "enc", self.meta["enc"])
        out = net.forward(x)
        return out[:, : self.output_dim]

    def head_inputs(self, x) -> np.ndarray:
        return self.encode(x)[:, : self.head_dims]


def _mlp_tensors(net: Mlp, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.W{i}"] = w.copy()
        out[f"{prefix}.b{i}"] = b.copy()
    return out


def _mlp_meta(net: Mlp) -> dict:
    return {"sizes": list(net.sizes), "hidden": net.hidden, "output": net.output}


def _mlp_from_tensors(tensors: dict, prefix: str, meta: dict) -> Mlp:
    n = len(meta["sizes"]) - 1
    return Mlp(list(meta["sizes"]),
               [tensors[f"{prefix}.W{i}"] for i in range(n)],
               [tensors[f"{prefix}.b{i}"] for i in range(n)],
               meta["hidden"], meta["output"])


def fit_identity(x) -> EncoderModel:
    x = as_matrix(x)
    d = x.shape[1]
    return EncoderModel("identity", {}, d, d, {"input_dim": d})


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + flat little-endian float64 tensor blob


def save_encoder(model: EncoderModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "tensors.bin", "wb") as f:
        for name in sorted(model.tensors):
            arr = np.ascontiguousarray(model.tensors[name], dtype="<f8")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"variant": model.variant, "output_dim": model.output_dim,
                "head_dims": model.head_dims, "meta": model.meta, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_encoder(directory) -> EncoderModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = np.fromfile(directory / "tensors.bin", dtype="<f8")
    tensors = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = blob[e["offset"]: e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return EncoderModel(manifest["variant"], tensors, manifest["output_dim"],
                        manifest["head_dims"], manifest["meta"])


# ---------------------------------------------------------------------------
# PCA


def fit_pca(x, out_dim: int, seed: int = 0) -> EncoderModel:
    """Project onto the top ``out_dim`` eigenvectors of the sample covariance.

    Each component is sign-fixed so that its largest-magnitude entry is
    positive. ``seed`` is accepted for interface symmetry; the fit is exact.
    """
    x = as_matrix(x)
    n, d = x.shape
    if not 1 <= out_dim <= min(n, d):
        raise ContractError(f"out_dim={out_dim} must lie in [1, min(N, d)={min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    order = np.argsort(-vals, kind="stable")[:out_dim]
    comps = vecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(out_dim)])
    comps = comps * np.where(signs == 0, 1.0, signs)
    return EncoderModel("pca", {"mean": mean, "components": comps}, out_dim, out_dim,
                        {"input_dim": d, "explained_variance": vals[order].tolist()})


# ---------------------------------------------------------------------------
# Split-latent VAE


@dataclass(frozen=True)
class SplitVaeConfig:
    latent_dim: int = 10
    classified_dim: int = 3
    alpha: float = 20.0
    epochs: int = 500
    batch_size: int = 200
    learning_rate: float = 2e-4
    hidden: int = 64
    classifier_hidden: int = 128
    decoder_likelihood: str = "gaussian_unit_var"
    classifier_log_prob: bool = False
    upsample_minority: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.classified_dim <= self.latent_dim:
            raise ValueError(
                f"classified_dim={self.classified_dim} must lie in [1, latent_dim={self.latent_dim}]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.decoder_likelihood not in ("gaussian_unit_var", "bernoulli"):
            raise ValueError(f"unknown decoder likelihood {self.decoder_likelihood!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass
class SplitVae:
    encoder: Mlp      # x -> [mu, logvar]
    decoder: Mlp      # z -> reconstruction mean (gaussian) or logits (bernoulli)
    classifier: Mlp   # z_c -> class probabilities
    latent_dim: int
    classified_dim: int
    likelihood: str = "gaussian_unit_var"

    @classmethod
    def init(cls, input_dim: int, n_classes: int, cfg: SplitVaeConfig, rng: Rng) -> "SplitVae":
        L = cfg.latent_dim
        return cls(
            Mlp.init([input_dim, cfg.hidden, 2 * L], rng.child("encoder")),
            Mlp.init([L, cfg.hidden, input_dim], rng.child("decoder")),
            Mlp.init([cfg.classified_dim, cfg.classifier_hidden, n_classes],
                     rng.child("classifier"), output="softmax"),
            L, cfg.classified_dim, cfg.decoder_likelihood)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params() + self.classifier.params()


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) per row."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def split_objective(vae: SplitVae, x: np.ndarray, eps: np.ndarray, y=None,
                    alpha: float = 0.0, log_prob: bool = False):
    """Batch-mean objective and its gradient (ascent direction).

    Per example the objective is the one-sample ELBO, plus
    ``alpha * c(z_c)[y]`` when labels are given (``alpha * log c(z_c)[y]``
    with ``log_prob``). ``eps`` is the reparameterisation noise, passed in so
    that the objective is a deterministic function of the parameters.
    Returns ``(value, grads, parts)`` with grads ordered like ``vae.params()``.
    """
    B = x.shape[0]
    L = vae.latent_dim
    enc_out, enc_cache = vae.encoder.forward_cache(x)
    mu, logvar = enc_out[:, :L], enc_out[:, L:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    dec_out, dec_cache = vae.decoder.forward_cache(z)
    if vae.likelihood == "bernoulli":
        rec = np.sum(x * dec_out - np.logaddexp(0.0, dec_out), axis=1)
        drec = x - sigmoid(dec_out)
    else:
        diff = x - dec_out
        rec = -0.5 * np.sum(diff * diff, axis=1) - 0.5 * x.shape[1] * LOG_2PI
        drec = diff
    kl = gaussian_kl(mu, logvar)
    value = float(np.mean(rec - kl))
    parts = {"reconstruction": float(np.mean(rec)), "kl": float(np.mean(kl)), "classifier": 0.0}

    dec_grads, dz = vae.decoder.backward(dec_cache, drec / B)
    cls_grads = [np.zeros_like(p) for p in vae.classifier.params()]
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        zc = z[:, : vae.classified_dim]
        probs, cls_cache = vae.classifier.forward_cache(zc)
        rows = np.arange(B)
        if log_prob:
            term = np.log(np.clip(probs[rows, y], 1e-300, None))
            g = -probs
            g[rows, y] += 1.0
            cls_grads, dzc = vae.classifier.backward(cls_cache, alpha * g / B, wrt="logits")
        else:
            term = probs[rows, y]
            g = np.zeros_like(probs)
            g[rows, y] = alpha / B
            cls_grads, dzc = vae.classifier.backward(cls_cache, g)
        cterm = float(np.mean(term))
        value += alpha * cterm
        parts["classifier"] = cterm
        dz = dz.copy()
        dz[:, : vae.classified_dim] += dzc
    dmu = dz - mu / B
    dlogvar = dz * eps * 0.5 * std - 0.5 * (np.exp(logvar) - 1.0) / B
    enc_grads, _ = vae.encoder.backward(enc_cache, np.hstack([dmu, dlogvar]))
    return value, enc_grads + dec_grads + cls_grads, parts


def elbo(vae: SplitVae, x, rng: Rng | None = None, eps: np.ndarray | None = None):
    """Batch-mean one-sample ELBO and its gradient with respect to ``vae.params()``."""
    x = as_matrix(x, "x", cols=vae.encoder.n_in)
    if eps is None:
        if rng is None:
            raise ValueError("either rng or eps is required")
        eps = rng.gen.standard_normal((x.shape[0], vae.latent_dim))
    value, grads, _ = split_objective(vae, x, eps)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite ELBO: {value}")
    return value, grads


def upsample_indices(y: np.ndarray, rng: Rng) -> np.ndarray:
    """Indices giving every present class the majority count, by duplication."""
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    target = counts.max()
    out = []
    for c in classes:
        members = np.flatnonzero(y == c)
        reps, rem = divmod(target, members.size)
        extra = rng.child("class", int(c)).gen.choice(members, rem, replace=False)
        out.append(np.concatenate([np.tile(members, reps), extra]))
    return np.concatenate(out)


def interleave_schedule(n_unlabeled: int, n_labeled: int) -> list[tuple[str, int]]:
    """Merge two batch sequences with the labelled batches evenly spaced."""
    keys = [((i + 0.5) / n_unlabeled, 0, "u", i) for i in range(n_unlabeled)]
    keys += [((j + 0.5) / n_labeled, 1, "l", j) for j in range(n_labeled)]
    keys.sort()
    return [(kind, i) for _, _, kind, i in keys]


def _batches(idx: np.ndarray, size: int) -> list[np.ndarray]:
    return [idx[i:i + size] for i in range(0, idx.size, size)]


def fit_td_split(pool_x, labeled_x, labeled_y, cfg: SplitVaeConfig,
                 n_classes: int | None = None) -> EncoderModel:
    """Train the split-latent VAE on pool + labelled data and return its encoder."""
    labeled_x = np.asarray(labeled_x, dtype=np.float64)
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    if labeled_x.ndim != 2 or labeled_x.shape[0] == 0:
        raise ContractError("td_split needs a non-empty labelled set")
    pool_x = as_matrix(pool_x, "pool", cols=labeled_x.shape[1])
    d = pool_x.shape[1]
    C = n_classes or int(labeled_y.max()) + 1
    rng = Rng(cfg.seed, ("td_split",))
    vae = SplitVae.init(d, C, cfg, rng.child("init"))
    params = vae.params()
    opt = AdamState.for_params(params, lr=cfg.learning_rate)
    for epoch in range(cfg.epochs):
        erng = rng.child("epoch", epoch)
        u_idx = erng.child("pool").gen.permutation(pool_x.shape[0])
        if cfg.upsample_minority:
            l_idx = upsample_indices(labeled_y, erng.child("upsample"))
        else:
            l_idx = np.arange(labeled_y.size)
        l_idx = erng.child("labeled").gen.permutation(l_idx)
        u_batches = _batches(u_idx, cfg.batch_size)
        l_batches = _batches(l_idx, cfg.batch_size)
        noise = erng.child("noise").gen
        for step, (kind, i) in enumerate(interleave_schedule(len(u_batches), len(l_batches))):
            if kind == "u":
                xb, yb = pool_x[u_batches[i]], None
            else:
                xb, yb = labeled_x[l_batches[i]], labeled_y[l_batches[i]]
            eps = noise.standard_normal((xb.shape[0], vae.latent_dim))
            value, grads, parts = split_objective(vae, xb, eps, yb, cfg.alpha,
                                                  cfg.classifier_log_prob)
            if not np.isfinite(value):
                raise TrainingError(
                    f"td_split: non-finite objective at epoch {epoch} step {step} "
                    f"({kind} batch): {parts}")
            adam_step(opt, params, [-g for g in grads])
    tensors = _mlp_tensors(vae.encoder, "enc")
    tensors.update(_mlp_tensors(vae.classifier, "cls"))
    return EncoderModel("td_split", tensors, vae.latent_dim, cfg.classified_dim,
                        {"input_dim": d, "enc": _mlp_meta(vae.encoder),
                         "cls": _mlp_meta(vae.classifier)})


# ---------------------------------------------------------------------------
# Pretrain + fine-tune


@dataclass(frozen=True)
class FineTuneConfig:
    hidden: tuple[int, ...] = (64,)
    representation_dim: int = 3
    classifier_hidden: int = 128
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-3
    batch_size: int = 200
    upsample_minority: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.representation_dim < 1:
            raise ValueError("representation_dim must be >= 1")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass(frozen=True)
class Pretrained:
    """Frozen autoencoder checkpoint; refits copy from it, never write to it."""

    encoder: Mlp
    decoder: Mlp
    final_loss: float

    def __post_init__(self):
        for p in self.encoder.params() + self.decoder.params():
            p.setflags(write=False)


def pretrain_autoencoder(pool_x, cfg: FineTuneConfig) -> Pretrained:
    """Train an MLP autoencoder on the pool by mean squared reconstruction error."""
    x = as_matrix(pool_x, "pool")
    d = x.shape[1]
    rng = Rng(cfg.seed, ("td_ft", "pretrain"))
    sizes = [d, *cfg.hidden, cfg.representation_dim]
    enc = Mlp.init(sizes, rng.child("encoder"))
    dec = Mlp.init(sizes[::-1], rng.child("decoder"))
    params = enc.params() + dec.params()
    opt = AdamState.for_params(params, lr=cfg.pretrain_lr)
    loss = float("nan")
    for epoch in range(cfg.pretrain_epochs):
        perm = rng.child("epoch", epoch).gen.permutation(x.shape[0])
        for step, b in enumerate(_batches(perm, cfg.batch_size)):
            loss, grads = reconstruction_loss(enc, dec, x[b])
            if not np.isfinite(loss):
                raise TrainingError(f"td_ft pretrain: non-finite loss at epoch {epoch} step {step}")
            adam_step(opt, params, grads)
    if cfg.pretrain_epochs == 0:
        loss = reconstruction_loss(enc, dec, x)[0]
    return Pretrained(enc, dec, float(loss))


def reconstruction_loss(enc: Mlp, dec: Mlp, x: np.ndarray):
    """Mean over rows of the squared reconstruction error; grads for enc + dec."""
    z, ec = enc.forward_cache(x)
    xh, dc = dec.forward_cache(z)
    diff = xh - x
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    dg, dz = dec.backward(dc, 2.0 * diff / x.shape[0])
    eg, _ = enc.backward(ec, dz)
    return loss, eg + dg


def finetune_loss(enc: Mlp, cls: Mlp, x: np.ndarray, y: np.ndarray):
    """Cross-entropy of the guidance classifier on top of the encoder."""
    z, ec = enc.forward_cache(x)
    _, cc = cls.forward_cache(z)
    loss, dlogits = softmax_cross_entropy(cc["logits"], y)
    cg, dz = cls.backward(cc, dlogits, wrt="logits")
    eg, _ = enc.backward(ec, dz)
    return loss, eg + cg


@dataclass
class FineTuneResult:
    encoder: EncoderModel
    initial_loss: float
    final_loss: float
    train_accuracy: float


def fit_td_ft(pool_x, labeled_x, labeled_y, cfg: FineTuneConfig,
              pretrained: Pretrained | None = None, n_classes: int | None = None,
              return_details: bool = False):
    """Fine-tune a copy of the pretrained encoder through a guidance classifier."""
    labeled_x = np.asarray(labeled_x, dtype=np.float64)
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    if labeled_x.ndim != 2 or labeled_x.shape[0] == 0:
        raise ContractError("td_ft needs a non-empty labelled set")
    if pretrained is None:
        pretrained = pretrain_autoencoder(pool_x, cfg)
    enc = pretrained.encoder.copy()
    for p in enc.params():
        p.setflags(write=True)
    C = n_classes or int(labeled_y.max()) + 1
    rng = Rng(cfg.seed, ("td_ft", "finetune"))
    cls = Mlp.init([cfg.representation_dim, cfg.classifier_hidden, C],
                   rng.child("classifier"), output="softmax")
    params = enc.params() + cls.params()
    opt = AdamState.for_params(params, lr=cfg.finetune_lr)
    initial = finetune_loss(enc, cls, labeled_x, labeled_y)[0]
    for epoch in range(cfg.finetune_epochs):
        erng = rng.child("epoch", epoch)
        idx = (upsample_indices(labeled_y, erng.child("upsample"))
               if cfg.upsample_minority else np.arange(labeled_y.size))
        idx = erng.child("order").gen.permutation(idx)
        for step, b in enumerate(_batches(idx, cfg.batch_size)):
            loss, grads = finetune_loss(enc, cls, labeled_x[b], labeled_y[b])
            if not np.isfinite(loss):
                raise TrainingError(f"td_ft finetune: non-finite loss at epoch {epoch} step {step}")
            adam_step(opt, params, grads)
    final = finetune_loss(enc, cls, labeled_x, labeled_y)[0]
    acc = float(np.mean(np.argmax(cls.forward(enc.forward(labeled_x)), axis=1) == labeled_y))
    model = EncoderModel("td_ft", _mlp_tensors(enc, "enc"), cfg.representation_dim,
                         cfg.representation_dim,
                         {"input_dim": labeled_x.shape[1], "enc": _mlp_meta(enc)})
    if return_details:
        return FineTuneResult(model, initial, final, acc)
    return model
