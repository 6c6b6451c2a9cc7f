"""Beta-weighted two-block ELBO.

Minimizing ``total = recon + beta * (kl_l + kl_u)`` maximizes the modified
ELBO. KL terms are summed over latent dims; the reconstruction NLL is summed
over pixels (``"sum"``) or averaged per pixel (``"mean"``). Everything is
averaged over the batch.
"""
from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import ShapeError

BCE_EPS = 1e-7
RECON_REDUCTIONS = ("sum", "mean")


class LossBreakdown(NamedTuple):
    recon: torch.Tensor
    kl_l: torch.Tensor
    kl_u: torch.Tensor
    beta: float
    total: torch.Tensor

    def as_floats(self):
        return {
            "recon": self.recon.item(),
            "kl_l": self.kl_l.item(),
            "kl_u": self.kl_u.item(),
            "total": self.total.item(),
        }


def kl_to_shifted_identity(mu, logvar, center):
    """KL( N(mu, diag(exp(logvar))) || N(center, I) ), summed over dims, batch-averaged.

    ``center`` is either one vector shared by the batch or one row per item.
    """
    if mu.shape != logvar.shape or mu.ndim != 2:
        raise ShapeError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} must be equal 2-d shapes")
    center = torch.as_tensor(center, dtype=mu.dtype)
    if center.shape not in ((mu.shape[1],), tuple(mu.shape)):
        raise ShapeError(f"center of shape {tuple(center.shape)} incompatible with mu {tuple(mu.shape)}")
    per_item = 0.5 * (logvar.exp() + (mu - center) ** 2 - 1.0 - logvar).sum(dim=1)
    return per_item.mean()


def kl_to_standard_normal(mu, logvar):
    return kl_to_shifted_identity(mu, logvar, torch.zeros(mu.shape[1], dtype=mu.dtype))


def reconstruction_nll(x, recon, reduction="sum"):
    """Bernoulli negative log-likelihood (BCE), batch-averaged.

    ``reduction="sum"`` sums over pixels; ``"mean"`` averages over them.
    """
    if x.shape != recon.shape:
        raise ShapeError(f"target {tuple(x.shape)} and reconstruction {tuple(recon.shape)} differ")
    if reduction not in RECON_REDUCTIONS:
        raise ValueError(f"reduction must be one of {RECON_REDUCTIONS}")
    p = recon.clamp(BCE_EPS, 1.0 - BCE_EPS)
    nll = -(x * torch.log(p) + (1.0 - x) * torch.log1p(-p))
    per_item = nll.flatten(1).sum(dim=1) if reduction == "sum" else nll.flatten(1).mean(dim=1)
    return per_item.mean()


def cdvae_loss(x, recon, post, spec, labels, beta, recon_reduction="sum"):
    """Loss for one reparameterized sample.

    The labeled block is measured against ``spec.class_means[labels[i]]`` per
    item, the unlabeled block against the standard normal.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise ShapeError("labels must be a vector with one entry per batch item")
    if labels.numel() and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise IndexError(f"labels must lie in [0, {spec.num_classes})")
    means = torch.tensor(spec.class_means, dtype=post.mu_l.dtype)
    recon_term = reconstruction_nll(x, recon, recon_reduction)
    kl_l = kl_to_shifted_identity(post.mu_l, post.logvar_l, means[labels])
    kl_u = kl_to_standard_normal(post.mu_u, post.logvar_u)
    total = recon_term + beta * (kl_l + kl_u)
    return LossBreakdown(recon_term, kl_l, kl_u, float(beta), total)
