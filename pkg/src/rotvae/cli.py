"""Command-line entry point: ``rotvae {train,translate,grid,probe,priors}``.

Exit codes: 0 on success, 1 on a runtime failure (one ``error: Class: msg``
line on stderr), 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import RotVAEError
from .prior_geometry import build_prior_spec, orthogonality_residuals, pairwise_mean_distances, save_prior_spec
from .trainer import load_config, load_dataset, load_model_and_prior, parse_overrides, train

SEPARATOR = 2
DEFAULT_OUT = "runs"


# -- image export -------------------------------------------------------------

def grid_to_array(grid):
    """Lay out a ``(rows, cols, channels, H, W)`` grid as one uint8 image.

    Each cell is followed by a ``SEPARATOR``-pixel white band on its right and
    bottom, so the result is ``rows*(H+2)`` by ``cols*(W+2)``.
    """
    g = torch.as_tensor(grid).detach().cpu().double().numpy()
    if g.ndim != 5 or g.shape[2] not in (1, 3):
        raise ValueError(f"expected a (rows, cols, 1|3, H, W) grid, got shape {g.shape}")
    if np.isnan(g).any() or g.min() < 0 or g.max() > 1:
        raise ValueError("grid values must lie in [0, 1]")
    rows, cols, ch, h, w = g.shape
    ch_h, ch_w = h + SEPARATOR, w + SEPARATOR
    out = np.full((rows * ch_h, cols * ch_w, ch), 255, dtype=np.uint8)
    cells = np.rint(g * 255.0).astype(np.uint8).transpose(0, 1, 3, 4, 2)
    for r in range(rows):
        for c in range(cols):
            out[r * ch_h:r * ch_h + h, c * ch_w:c * ch_w + w] = cells[r, c]
    return out[:, :, 0] if ch == 1 else out


def _write_netpbm(path, img):
    magic = b"P5" if img.ndim == 2 else b"P6"
    header = magic + f"\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def export_image_grid(grid, path):
    """Write a grid tensor as 8-bit PNG, or PGM/PPM when asked for or Pillow is missing."""
    path = Path(path)
    img = grid_to_array(grid)
    if path.suffix.lower() in (".pgm", ".ppm"):
        _write_netpbm(path, img)
        return path
    try:
        from PIL import Image
    except ImportError:
        path = path.with_suffix(".pgm" if img.ndim == 2 else ".ppm")
        _write_netpbm(path, img)
        return path
    Image.fromarray(img).save(path, format="PNG")
    return path


# -- subcommands ---------------------------------------------------------------

def _out_dir(args):
    out = Path(args.out or os.environ.get("ROTVAE_OUT", DEFAULT_OUT))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    ckpt, spec = load_model_and_prior(args.checkpoint, args.prior_spec)
    config = ckpt.config.replace(**parse_overrides(args.override))
    return ckpt, spec, config


def cmd_train(args):
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config = load_config(args.config, overrides)
    out = _out_dir(args)
    result = train(config, load_dataset(config), out, resume_from=args.checkpoint)
    print(json.dumps({"checkpoint": str(result.checkpoint), "prior_spec": str(result.prior_spec),
                      "metrics": str(result.metrics), "final_train_loss": result.epoch_means[-1]}))
    return 0


def cmd_translate(args):
    from .translate import TranslationRequest, translate_latents

    ckpt, spec, config = _load(args)
    req = TranslationRequest(args.source_class, args.target_class, args.mode, args.seed or 0)
    req.check(spec)
    test = load_dataset(config).test
    idx = np.flatnonzero(test.labels == args.source_class)[: args.count]
    if len(idx) == 0:
        raise RotVAEError(f"no test items of class {args.source_class}")
    x = torch.from_numpy(test.pixels[idx])
    result = translate_latents(ckpt.model, spec, x, req)
    out = _out_dir(args)
    name = f"translate_{args.source_class}_to_{args.target_class}_{args.mode}"
    path = export_image_grid(torch.stack([x, result.images]), out / f"{name}.png")
    with torch.no_grad():
        mu_l = ckpt.model.encode(result.images).mu_l.double()
    means = torch.tensor(spec.class_means)
    dist = torch.cdist(mu_l, means)
    adopted = (dist[:, args.target_class] < dist[:, args.source_class]).double().mean().item()
    print(json.dumps({"image": str(path), "count": len(idx), "adoption": adopted, "mode": args.mode}))
    return 0


def cmd_grid(args):
    from .translate import pick_one_per_class, translation_grid

    ckpt, spec, config = _load(args)
    inputs = pick_one_per_class(load_dataset(config).test, spec.num_classes)
    grid = translation_grid(ckpt.model, spec, inputs)
    target = Path(args.out) if args.out else Path(os.environ.get("ROTVAE_OUT", DEFAULT_OUT)) / "grid.png"
    target.parent.mkdir(parents=True, exist_ok=True)
    path = export_image_grid(grid, target)
    print(json.dumps({"image": str(path), "rows": spec.num_classes, "cols": spec.num_classes + 1}))
    return 0


def cmd_probe(args):
    from .probes import format_report, probe_report

    ckpt, spec, config = _load(args)
    report = probe_report(ckpt.model, spec, load_dataset(config), mode=args.mode, seed=args.seed or 0)
    report["checkpoint"] = str(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probe.jsonl", "a") as fh:
        fh.write(json.dumps(report) + "\n")
    print(json.dumps(report))
    print(format_report(report))
    return 0


def cmd_priors(args):
    spec = build_prior_spec(args.dim, args.classes, args.seed or 0)
    dist = pairwise_mean_distances(spec)
    resid = orthogonality_residuals(spec)
    np.set_printoptions(precision=4, suppress=True, linewidth=120)
    print(f"prior: dim_l={spec.dim_l} classes={spec.num_classes} seed={spec.seed}")
    print(f"|mu_0| = {np.linalg.norm(spec.base_mean):.6f}")
    print("pairwise class-mean distances:")
    print(dist)
    off = dist[np.triu_indices(spec.num_classes, 1)]
    print(f"min {off.min():.6f}  max {off.max():.6f}")
    print("orthogonality residuals max|T^T T - I| per class:")
    print(" ".join(f"{r:.2e}" for r in resid))
    if args.out:
        path = Path(args.out)
        if path.suffix != ".bin":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "prior_spec.bin"
        print(f"wrote {save_prior_spec(spec, path)}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="rotvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required):
        p.add_argument("--checkpoint", required=checkpoint_required, help="model checkpoint (.pt)")
        p.add_argument("--prior-spec", help="prior spec file (default: prior_spec.bin beside the checkpoint)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--out", help="output directory or file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model from a config or preset")
    p.add_argument("--config", required=True, help="config file or preset name")
    common(p, False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate test images of one class to another")
    common(p, True)
    p.add_argument("--source-class", type=int, required=True)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("grid", help="export the all-classes translation grid")
    common(p, True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("probe", help="linear-probe accuracies for both latent blocks")
    common(p, True)
    p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("priors", help="inspect the class-conditional prior geometry")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also save the spec (directory or .bin path)")
    p.set_defaults(func=cmd_priors)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (RotVAEError, ValueError, OSError, IndexError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
