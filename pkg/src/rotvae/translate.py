"""Domain translation by rotating the labeled latent between class frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from .errors import ConfigError, ShapeError
from .prior_geometry import rotate_latent
from .model import reparameterize, sample_noise

MODES = ("mean", "sample")


@dataclass(frozen=True)
class TranslationRequest:
    source_class: int
    target_class: int
    mode: str = "mean"
    sample_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def check(self, spec):
        spec.check_class(self.source_class)
        spec.check_class(self.target_class)


class Translation(NamedTuple):
    images: torch.Tensor
    z_l: torch.Tensor  # labeled latent before rotation
    z_l_rotated: torch.Tensor
    z_u: torch.Tensor


def rotate_batch(spec, z_l, c, t):
    """Rotate rows of a float tensor from class ``c`` to ``t`` in 64-bit, cast back."""
    rotated = rotate_latent(spec, z_l.detach().double().numpy(), c, t)
    return torch.from_numpy(rotated).to(z_l.dtype)


def translate_latents(model, spec, x, req):
    """Full translation pipeline, returning the images and the latents used."""
    req.check(spec)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ShapeError(f"expected an image batch, got shape {tuple(x.shape)}")
    with torch.no_grad():
        post = model.encode(x)
        if req.mode == "mean":
            z_l, z_u = post.mu_l, post.mu_u
        else:
            gen = torch.Generator().manual_seed(req.sample_seed)
            z_l, z_u = reparameterize(post, *sample_noise(post, gen))
        z_rot = rotate_batch(spec, z_l, req.source_class, req.target_class)
        images = model.decode(z_rot, z_u)
    return Translation(images, z_l, z_rot, z_u)


def translate(model, spec, x, req):
    """Translate a batch of class-``req.source_class`` images to ``req.target_class``."""
    return translate_latents(model, spec, x, req).images


def reconstruct(model, x):
    """Mean-mode autoencoding with no rotation."""
    with torch.no_grad():
        post = model.encode(x)
        return model.decode(post.mu_l, post.mu_u)


def translation_grid(model, spec, inputs, source_classes=None):
    """Grid of shape ``(rows, C + 1, channels, H, W)`` in mean mode.

    Row ``i`` holds the original ``inputs[i]`` followed by its translation to
    every class ``0..C-1``. ``source_classes`` defaults to ``0..rows-1``
    (one input image per class).
    """
    inputs = torch.as_tensor(inputs)
    rows = inputs.shape[0]
    if source_classes is None:
        source_classes = list(range(rows))
    if len(source_classes) != rows:
        raise ShapeError("need one source class per input image")
    grid = torch.empty((rows, spec.num_classes + 1, *inputs.shape[1:]), dtype=inputs.dtype)
    for i, c in enumerate(source_classes):
        x = inputs[i:i + 1]
        grid[i, 0] = x[0]
        for t in range(spec.num_classes):
            grid[i, t + 1] = translate(model, spec, x, TranslationRequest(int(c), t))[0]
    return grid


def pick_one_per_class(data, num_classes):
    """First item of every class in ``data`` (a ``LabeledImages``)."""
    idx = []
    for c in range(num_classes):
        hits = (data.labels == c).nonzero()[0]
        if len(hits) == 0:
            raise ConfigError(f"no example of class {c} available")
        idx.append(int(hits[0]))
    return torch.from_numpy(data.pixels[idx])
