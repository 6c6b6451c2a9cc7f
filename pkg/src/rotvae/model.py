"""Convolutional encoder/decoder with two separate latent heads.

The encoder trunk is shared; ``z_l`` and ``z_u`` each get their own linear
head producing a mean and a log-variance. Nothing in this module sees a
class label: the same networks serve every domain.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass(frozen=True)
class ArchitectureConfig:
    input_shape: tuple  # (channels, height, width)
    conv_channels: tuple
    dim_l: int
    dim_u: int
    kernel_size: int = 3
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError("conv_channels must be a non-empty list of positive integers")
        if self.dim_l < 1 or self.dim_u < 1:
            raise ConfigError("latent dimensions must be >= 1")
        if self.kernel_size < 1 or self.stride < 1:
            raise ConfigError("kernel_size and stride must be positive")
        factor = self.stride ** len(self.conv_channels)
        _, h, w = self.input_shape
        if h % factor or w % factor:
            raise ConfigError(
                f"height and width ({h}x{w}) must be divisible by stride**layers = {factor}"
            )

    @property
    def feature_shape(self):
        factor = self.stride ** len(self.conv_channels)
        _, h, w = self.input_shape
        return (self.conv_channels[-1], h // factor, w // factor)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class LatentPosterior(NamedTuple):
    mu_l: torch.Tensor
    logvar_l: torch.Tensor
    mu_u: torch.Tensor
    logvar_u: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, arch):
        super().__init__()
        layers = []
        in_ch = arch.input_shape[0]
        pad = arch.kernel_size // 2
        for ch in arch.conv_channels:
            layers += [nn.Conv2d(in_ch, ch, arch.kernel_size, arch.stride, pad), nn.ReLU()]
            in_ch = ch
        self.trunk = nn.Sequential(*layers, nn.Flatten())
        n_feat = int(torch.Size(arch.feature_shape).numel())
        self.head_l = nn.Linear(n_feat, 2 * arch.dim_l)
        self.head_u = nn.Linear(n_feat, 2 * arch.dim_u)

    def forward(self, x):
        h = self.trunk(x)
        mu_l, logvar_l = self.head_l(h).chunk(2, dim=1)
        mu_u, logvar_u = self.head_u(h).chunk(2, dim=1)
        return LatentPosterior(
            mu_l,
            logvar_l.clamp(LOGVAR_MIN, LOGVAR_MAX),
            mu_u,
            logvar_u.clamp(LOGVAR_MIN, LOGVAR_MAX),
        )


class Decoder(nn.Module):
    def __init__(self, arch):
        super().__init__()
        self.feature_shape = arch.feature_shape
        self.fc = nn.Linear(arch.dim_l + arch.dim_u, int(torch.Size(self.feature_shape).numel()))
        chans = list(reversed(arch.conv_channels)) + [arch.input_shape[0]]
        pad = arch.kernel_size // 2
        layers = [nn.ReLU()]
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(
                nn.ConvTranspose2d(cin, cout, arch.kernel_size, arch.stride, pad, output_padding=arch.stride - 1)
            )
            if i < len(chans) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        h = self.fc(z).view(z.shape[0], *self.feature_shape)
        return torch.sigmoid(self.net(h))


class CDVAE(nn.Module):
    """Encoder/decoder parameters plus the architecture they were built from."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)

    def encode(self, x):
        arch = self.arch
        if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
            raise ShapeError(f"expected input of shape (batch, {arch.input_shape}), got {tuple(x.shape)}")
        return self.encoder(x)

    def decode(self, z_l, z_u):
        arch = self.arch
        if z_l.ndim != 2 or z_l.shape[1] != arch.dim_l or z_u.ndim != 2 or z_u.shape[1] != arch.dim_u:
            raise ShapeError(
                f"expected latents of width ({arch.dim_l}, {arch.dim_u}), "
                f"got {tuple(z_l.shape)}, {tuple(z_u.shape)}"
            )
        if z_l.shape[0] != z_u.shape[0]:
            raise ShapeError("latent blocks have different batch sizes")
        return self.decoder(torch.cat([z_l, z_u], dim=1))

    def forward(self, x, noise_l=None, noise_u=None):
        post = self.encode(x)
        z_l, z_u = reparameterize(post, noise_l, noise_u)
        return self.decode(z_l, z_u), post


def build_model(arch, seed=0, dtype=torch.float32):
    """Fresh model with fan-in scaled uniform init, fully determined by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CDVAE(arch)
    return model.to(dtype)


def encode(model, x):
    """Posterior parameters for both latent blocks; deterministic given weights and input."""
    return model.encode(x)


def reparameterize(post, noise_l=None, noise_u=None):
    """``z = mu + exp(logvar / 2) * noise`` per block. ``None`` noise means the mean."""
    out = []
    for mu, logvar, noise in ((post.mu_l, post.logvar_l, noise_l), (post.mu_u, post.logvar_u, noise_u)):
        if noise is None:
            out.append(mu)
            continue
        if noise.shape != mu.shape:
            raise ShapeError(f"noise shape {tuple(noise.shape)} does not match mean shape {tuple(mu.shape)}")
        out.append(mu + torch.exp(0.5 * logvar) * noise)
    return tuple(out)


def sample_noise(post, generator=None):
    return (
        torch.randn(post.mu_l.shape, generator=generator, dtype=post.mu_l.dtype),
        torch.randn(post.mu_u.shape, generator=generator, dtype=post.mu_u.dtype),
    )


def decode(model, z_l, z_u):
    """Bernoulli means in (0, 1) with the model's input shape."""
    return model.decode(z_l, z_u)


def parameters_finite(model):
    return all(bool(torch.isfinite(p).all()) for p in model.state_dict().values())


def parameter_hash(model):
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
