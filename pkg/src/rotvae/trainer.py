"""Training loop, Adam update, config files and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import datasets as ds
from .errors import ConfigError, PriorMismatchError, TrainingDiverged
from .loss import RECON_REDUCTIONS, cdvae_loss
from .model import ArchitectureConfig, build_model, parameters_finite, reparameterize, sample_noise
from .prior_geometry import build_prior_spec, load_prior_spec, prior_spec_hash, save_prior_spec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
PRIOR_FILE = "prior_spec.bin"
METRICS_FILE = "metrics.jsonl"
EVAL_FILE = "eval.jsonl"
LATEST_CHECKPOINT = "checkpoint.pt"


@dataclass
class TrainConfig:
    beta: float = 0.001
    recon_reduction: str = "mean"  # per-pixel mean BCE; "sum" sums over pixels
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    dataset: str = "mnist"
    conv_channels: tuple = (8, 16, 32, 64)
    kernel_size: int = 3
    stride: int = 2
    dim_l: int = 64
    dim_u: int = 64
    grad_clip: float = 0.0  # global-norm clipping; 0 disables
    max_bad_steps: int = 5
    # mnist
    data_dir: str = "data/mnist"
    train_size: int = 10000
    test_size: int = 2000
    # synthetic
    num_domains: int = 8
    num_styles: int = 5
    image_size: int = 32
    samples_per_cell: int = 25
    num_sizes: int = 2
    num_positions: int = 4
    synthetic_cache: str = ""

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.validate()

    def validate(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.recon_reduction not in RECON_REDUCTIONS:
            raise ConfigError(f"recon_reduction must be one of {RECON_REDUCTIONS}")

    def arch(self, input_shape):
        return ArchitectureConfig(
            input_shape, self.conv_channels, self.dim_l, self.dim_u, self.kernel_size, self.stride
        )

    def synthetic_spec(self):
        return ds.SyntheticSpec(
            num_domains=self.num_domains,
            num_styles=self.num_styles,
            image_size=self.image_size,
            samples_per_cell=self.samples_per_cell,
            num_sizes=self.num_sizes,
            num_positions=self.num_positions,
            seed=self.seed,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# -- config files -----------------------------------------------------------

def _coerce(name, raw):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind == "tuple":
            return tuple(int(v) for v in raw.replace("{", "").replace("}", "").split(",") if v.strip())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment, lists are comma separated."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def parse_overrides(pairs):
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = (part.strip() for part in pair.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("rotvae.presets").iterdir() if p.name.endswith(".cfg"))


def resolve_config_path(name):
    """A filesystem path if it exists, else a bundled preset by name."""
    path = Path(name)
    if path.is_file():
        return path
    stem = path.name[:-4] if path.name.endswith(".cfg") else path.name
    preset = resources.files("rotvae.presets") / f"{stem}.cfg"
    if preset.is_file():
        return preset
    raise ConfigError(f"config {name!r} not found (presets: {', '.join(preset_names())})")


def load_config(name=None, overrides=None):
    values = {}
    if name:
        values.update(parse_config_text(resolve_config_path(name).read_text()))
    values.update(parse_overrides(overrides) if isinstance(overrides, (list, tuple)) else (overrides or {}))
    return TrainConfig(**values)


def load_dataset(config):
    if config.dataset == "mnist":
        return ds.load_mnist(config.data_dir, config.train_size, config.test_size)
    spec = config.synthetic_spec()
    cache = Path(config.synthetic_cache) if config.synthetic_cache else None
    if cache and cache.exists():
        cached_spec, data, styles = ds.load_synthetic_cache(cache)
        if cached_spec != spec:
            raise ConfigError(f"synthetic cache {cache} was generated from a different spec")
    else:
        data, styles = ds.generate_synthetic(spec)
        if cache:
            ds.save_synthetic_cache(spec, data, styles, cache)
    tr, te = ds.stratified_split(data.labels, styles, spec.test_fraction, spec.seed)
    return ds.SplitDataset("synthetic", data.subset(tr), data.subset(te))


# -- Adam ---------------------------------------------------------------------

def init_adam_state(params):
    return {
        "step": 0,
        "bad_steps": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, max_bad_steps=5):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A step whose gradients are not all finite is skipped; after
    ``max_bad_steps`` consecutive skips ``TrainingDiverged`` is raised.
    """
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        state["bad_steps"] += 1
        log.warning("non-finite gradient, skipping step (%d consecutive)", state["bad_steps"])
        if state["bad_steps"] >= max_bad_steps:
            raise TrainingDiverged(f"{state['bad_steps']} consecutive non-finite gradients")
        return params, state
    state["bad_steps"] = 0
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
    return params, state


# -- checkpoints --------------------------------------------------------------

def derived_seed(seed, *key):
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1, np.uint64)[0] >> 1)


def save_checkpoint(path, model, config, adam_state, epoch, prior_hash, rng_state=None):
    if not parameters_finite(model):
        raise TrainingDiverged("refusing to save non-finite parameters")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.arch.to_dict(),
        "config": config.to_dict(),
        "model_state": model.state_dict(),
        "adam": {k: adam_state[k] for k in ("step", "bad_steps", "m", "v")},
        "epoch": int(epoch),
        "rng_state": rng_state if rng_state is not None else torch.empty(0, dtype=torch.uint8),
        "prior_spec_sha256": prior_hash,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


class Checkpoint:
    """Loaded checkpoint: model, config, optimizer state and the paired prior hash."""

    def __init__(self, payload):
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
        self.arch = ArchitectureConfig.from_dict(payload["arch"])
        self.config = TrainConfig.from_dict(payload["config"])
        self.model = build_model(self.arch, seed=0)
        self.model.load_state_dict(payload["model_state"])
        self.model.eval()
        if not parameters_finite(self.model):
            raise TrainingDiverged("checkpoint contains non-finite parameters")
        self.adam = payload["adam"]
        self.epoch = payload["epoch"]
        self.rng_state = payload["rng_state"]
        self.prior_hash = payload["prior_spec_sha256"]

    def check_prior(self, spec):
        found = prior_spec_hash(spec)
        if found != self.prior_hash:
            raise PriorMismatchError(
                f"prior spec hash {found[:12]} does not match checkpoint's {self.prior_hash[:12]}"
            )
        return spec


def load_checkpoint(path):
    return Checkpoint(torch.load(Path(path), map_location="cpu", weights_only=True))


def load_model_and_prior(checkpoint_path, prior_path=None):
    """Checkpoint plus its prior spec (default: ``prior_spec.bin`` beside it), hash-checked."""
    ckpt = load_checkpoint(checkpoint_path)
    prior_path = Path(prior_path) if prior_path else Path(checkpoint_path).with_name(PRIOR_FILE)
    spec = ckpt.check_prior(load_prior_spec(prior_path))
    return ckpt, spec


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    prior_spec: Path
    model: torch.nn.Module
    spec: object
    epoch_means: list = field(default_factory=list)


def evaluate(model, spec, data, beta, recon_reduction="sum", batch_size=512):
    """Batch-size-weighted mean loss over ``data`` using posterior means."""
    sums = {"recon": 0.0, "kl_l": 0.0, "kl_u": 0.0, "total": 0.0}
    with torch.no_grad():
        for batch in ds.batches(data, batch_size):
            post = model.encode(batch.pixels)
            recon = model.decode(post.mu_l, post.mu_u)
            parts = cdvae_loss(batch.pixels, recon, post, spec, batch.labels, beta, recon_reduction).as_floats()
            for k in sums:
                sums[k] += parts[k] * len(batch.labels)
    return {k: v / len(data) for k, v in sums.items()}


def _append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _truncate_log(path, keep_epochs):
    """Drop records beyond ``keep_epochs`` so a resumed run does not duplicate steps."""
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["epoch"] <= keep_epochs]
    path.write_text("".join(ln + "\n" for ln in kept))


def train(config, dataset, out_dir, resume_from=None, keep_every_epoch=True):
    """Optimize a fresh (or resumed) model on ``dataset.train``.

    Writes ``prior_spec.bin``, per-epoch checkpoints, ``metrics.jsonl`` (one
    record per step) and ``eval.jsonl`` (held-out loss per epoch) under
    ``out_dir``. A non-finite loss aborts with the last good checkpoint kept.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = build_prior_spec(config.dim_l, dataset.num_classes, config.seed)
    prior_path = save_prior_spec(spec, out / PRIOR_FILE)
    prior_hash = prior_spec_hash(spec)
    arch = config.arch(dataset.image_shape)

    metrics_path, eval_path = out / METRICS_FILE, out / EVAL_FILE
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        ckpt.check_prior(spec)
        if ckpt.arch != arch:
            raise ConfigError("checkpoint architecture does not match config")
        model = ckpt.model
        model.train()
        params = list(model.parameters())
        state = {"step": ckpt.adam["step"], "bad_steps": ckpt.adam["bad_steps"],
                 "m": [t.clone() for t in ckpt.adam["m"]], "v": [t.clone() for t in ckpt.adam["v"]]}
        start_epoch = ckpt.epoch
        log.info("resuming from %s at epoch %d", resume_from, start_epoch)
    else:
        model = build_model(arch, seed=derived_seed(config.seed, 1))
        params = list(model.parameters())
        state = init_adam_state(params)
        start_epoch = 0
    for path in (metrics_path, eval_path):
        if resume_from is None:
            path.write_text("")
        else:
            _truncate_log(path, start_epoch)

    epoch_means = []
    latest = out / LATEST_CHECKPOINT
    gen = torch.Generator()
    step = state["step"] + state["bad_steps"]
    for epoch in range(start_epoch, config.epochs):
        gen.manual_seed(derived_seed(config.seed, 2, epoch))
        totals, count = 0.0, 0
        model.train()
        for batch in ds.batches(dataset.train, config.batch_size, shuffle_seed=config.seed, epoch=epoch):
            x, labels = batch
            post = model.encode(x)
            z_l, z_u = reparameterize(post, *sample_noise(post, gen))
            recon = model.decode(z_l, z_u)
            loss = cdvae_loss(x, recon, post, spec, labels, config.beta, config.recon_reduction)
            if not math.isfinite(loss.total.item()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1} step {step}; last good checkpoint: {latest}"
                )
            grads = torch.autograd.grad(loss.total, params)
            if config.grad_clip > 0:
                norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
                if norm > config.grad_clip:
                    grads = [g * (config.grad_clip / float(norm)) for g in grads]
            adam_step(params, grads, state, config.learning_rate, config.adam_beta1,
                      config.adam_beta2, config.adam_epsilon, config.max_bad_steps)
            step += 1
            record = {"epoch": epoch + 1, "step": step, **loss.as_floats(), "wall_time": time.time()}
            _append_jsonl(metrics_path, record)
            totals += record["total"] * len(labels)
            count += len(labels)
        epoch_means.append(totals / count)
        model.eval()
        held_out = evaluate(model, spec, dataset.test, config.beta, config.recon_reduction)
        _append_jsonl(eval_path, {"epoch": epoch + 1, "train_total": epoch_means[-1], **held_out})
        log.info("epoch %d/%d  train %.3f  test %.3f", epoch + 1, config.epochs, epoch_means[-1], held_out["total"])
        save_checkpoint(latest, model, config, state, epoch + 1, prior_hash, gen.get_state())
        if keep_every_epoch:
            save_checkpoint(out / f"checkpoint_epoch{epoch + 1:03d}.pt", model, config, state, epoch + 1,
                            prior_hash, gen.get_state())
    model.eval()
    return TrainResult(latest, metrics_path, prior_path, model, spec, epoch_means)
