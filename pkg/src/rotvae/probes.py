"""Linear probes measuring how much class information each latent block holds.

A probe is multinomial logistic regression on standardized latents, fit by
full-batch Adam with a fixed protocol so the two blocks are compared fairly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import batches
from .errors import ConfigError, ShapeError
from .model import parameter_hash, reparameterize, sample_noise
from .trainer import adam_step, init_adam_state

PROBE_EPOCHS = 200
PROBE_LR = 0.01


@dataclass
class LinearProbe:
    weights: torch.Tensor  # (classes, latent_dim)
    bias: torch.Tensor  # (classes,)
    trained_on: str  # "labeled_block" or "unlabeled_block"
    shift: torch.Tensor  # standardization fitted on the training latents
    scale: torch.Tensor
    losses: list

    def logits(self, latents):
        z = (torch.as_tensor(latents, dtype=torch.float64) - self.shift) / self.scale
        return z @ self.weights.T + self.bias

    def predict(self, latents):
        return self.logits(latents).argmax(dim=1)

    def accuracy(self, latents, labels):
        labels = torch.as_tensor(labels)
        return float((self.predict(latents) == labels).double().mean()) * 100.0


def extract_latents(model, data, mode="mean", seed=0, batch_size=512):
    """Row-aligned ``(z_l, z_u, labels)`` for every item of ``data``."""
    if mode not in ("mean", "sample"):
        raise ConfigError(f"unknown mode {mode!r}")
    gen = torch.Generator().manual_seed(seed)
    zl, zu, labels = [], [], []
    with torch.no_grad():
        for batch in batches(data, batch_size):
            post = model.encode(batch.pixels)
            noise = sample_noise(post, gen) if mode == "sample" else (None, None)
            a, b = reparameterize(post, *noise)
            zl.append(a)
            zu.append(b)
            labels.append(batch.labels)
    return torch.cat(zl), torch.cat(zu), torch.cat(labels)


def train_probe(latents, labels, classes, epochs=PROBE_EPOCHS, lr=PROBE_LR, seed=0, trained_on="labeled_block"):
    latents = torch.as_tensor(latents, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if latents.ndim != 2 or labels.shape != (latents.shape[0],):
        raise ShapeError("latents must be (N, dim) with one label per row")
    if labels.unique().numel() < 2:
        raise ConfigError("probe training needs at least two distinct classes")
    shift = latents.mean(0)
    scale = latents.std(0, unbiased=False)
    scale = torch.where(scale > 1e-12, scale, torch.ones_like(scale))
    z = (latents - shift) / scale

    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / latents.shape[1] ** 0.5
    w = ((torch.rand(classes, latents.shape[1], generator=gen, dtype=torch.float64) * 2 - 1) * bound).requires_grad_()
    b = torch.zeros(classes, dtype=torch.float64, requires_grad=True)
    state = init_adam_state([w, b])
    losses = []
    for _ in range(epochs):
        loss = F.cross_entropy(z @ w.T + b, labels)
        losses.append(loss.item())
        grads = torch.autograd.grad(loss, [w, b])
        adam_step([w, b], grads, state, lr)
    return LinearProbe(w.detach(), b.detach(), trained_on, shift, scale, losses)


def probe_report(model, spec, dataset, mode="mean", seed=0, epochs=PROBE_EPOCHS, lr=PROBE_LR):
    """Test-split accuracy (%) of probes fit on train-split ``z_l`` and ``z_u``.

    The model is only read; its parameter hash is checked before and after.
    """
    before = parameter_hash(model)
    classes = spec.num_classes
    zl_tr, zu_tr, y_tr = extract_latents(model, dataset.train, mode, seed)
    zl_te, zu_te, y_te = extract_latents(model, dataset.test, mode, seed + 1)
    probe_l = train_probe(zl_tr, y_tr, classes, epochs, lr, seed, "labeled_block")
    probe_u = train_probe(zu_tr, y_tr, classes, epochs, lr, seed, "unlabeled_block")
    if parameter_hash(model) != before:
        raise RuntimeError("probe training modified the model parameters")
    return {
        "acc_l": probe_l.accuracy(zl_te, y_te),
        "acc_u": probe_u.accuracy(zu_te, y_te),
        "chance": 100.0 / classes,
        "train_acc_l": probe_l.accuracy(zl_tr, y_tr),
        "train_acc_u": probe_u.accuracy(zu_tr, y_tr),
        "mode": mode,
        "num_classes": classes,
        "n_train": int(len(y_tr)),
        "n_test": int(len(y_te)),
    }


def format_report(report):
    rows = [("C_l (z_l)", report["acc_l"]), ("C_u (z_u)", report["acc_u"]), ("chance", report["chance"])]
    width = max(len(r[0]) for r in rows)
    lines = [f"{'probe':<{width}}  accuracy (%)"]
    lines += [f"{name:<{width}}  {acc:6.2f}" for name, acc in rows]
    return "\n".join(lines)


def class_mean_distances(model, spec, data):
    """Per-item distances from ``mu_l`` to every class mean, shape (N, C)."""
    z_l, _, labels = extract_latents(model, data)
    means = torch.from_numpy(np.array(spec.class_means)).to(z_l.dtype)
    return torch.cdist(z_l, means), labels
