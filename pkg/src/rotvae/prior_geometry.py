"""Class-conditional prior geometry for the labeled latent block.

Every class ``c`` gets a Gaussian prior ``N(mu_c, I)`` whose mean is a fixed
random proper rotation ``T_c`` applied to a shared base mean ``mu_0``.
Translating a latent from class ``c`` to class ``t`` is then the rotation
``T_t @ T_c.T``, which maps ``mu_c`` onto ``mu_t`` exactly.

All arrays here are float64; callers working in float32 cast at the boundary.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidDimensionError, ShapeError

__all__ = [
    "PriorSpec",
    "sample_base_mean",
    "sample_rotation",
    "build_prior_spec",
    "translation_matrix",
    "rotate_latent",
    "class_rng",
    "base_mean_rng",
    "save_prior_spec",
    "load_prior_spec",
    "prior_spec_bytes",
    "prior_spec_hash",
    "pairwise_mean_distances",
    "orthogonality_residuals",
]

PRIOR_MAGIC = b"RVPRIOR\0"
PRIOR_FORMAT_VERSION = 1
# smallest |R_jj| accepted from a QR draw before it is considered degenerate
_DEGENERATE_PIVOT = 1e-12
_MAX_QR_RETRIES = 100


@dataclass(frozen=True, eq=False)
class PriorSpec:
    dim_l: int
    num_classes: int
    base_mean: np.ndarray
    rotations: np.ndarray  # (num_classes, dim_l, dim_l)
    class_means: np.ndarray  # (num_classes, dim_l)
    seed: int
    qr_retries: tuple = field(default=())

    def __post_init__(self):
        for arr in (self.base_mean, self.rotations, self.class_means):
            arr.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, PriorSpec):
            return NotImplemented
        return prior_spec_bytes(self) == prior_spec_bytes(other)

    def __hash__(self):
        return hash(prior_spec_hash(self))

    def check_class(self, c):
        if not 0 <= int(c) < self.num_classes:
            raise IndexError(f"class index {c} out of range [0, {self.num_classes})")
        return int(c)


def base_mean_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))


def class_rng(seed, c):
    """Independent stream for class ``c``; adding classes never perturbs earlier ones."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, c))))


def _check_dim(dim):
    if int(dim) != dim or dim < 1:
        raise InvalidDimensionError(f"dimension must be a positive integer, got {dim!r}")
    return int(dim)


def sample_base_mean(dim_l, rng):
    """Draw the shared base mean, i.i.d. uniform on [0, 1) per coordinate."""
    dim_l = _check_dim(dim_l)
    return rng.random(dim_l, dtype=np.float64)


def _sample_rotation(dim_l, rng):
    retries = 0
    while True:
        a = rng.random((dim_l, dim_l), dtype=np.float64)
        q, r = np.linalg.qr(a)
        diag = np.diag(r)
        if np.all(np.abs(diag) > _DEGENERATE_PIVOT) and np.all(np.isfinite(q)):
            break
        retries += 1
        if retries > _MAX_QR_RETRIES:
            raise np.linalg.LinAlgError("QR kept producing degenerate draws")
    # canonical sign: positive diagonal of R makes the factorization unique
    q = q * np.where(diag < 0, -1.0, 1.0)
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q, retries


def sample_rotation(dim_l, rng):
    """Proper rotation from the sign-normalized Q factor of a uniform random matrix.

    Columns of Q are negated where R has a negative diagonal entry, then the
    last column is flipped if the determinant is -1.
    """
    dim_l = _check_dim(dim_l)
    return _sample_rotation(dim_l, rng)[0]


def build_prior_spec(dim_l, num_classes, seed):
    dim_l = _check_dim(dim_l)
    if int(num_classes) != num_classes or num_classes < 2:
        raise InvalidDimensionError(f"need at least 2 classes, got {num_classes!r}")
    num_classes = int(num_classes)
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be unsigned")

    base = sample_base_mean(dim_l, base_mean_rng(seed))
    rotations = np.empty((num_classes, dim_l, dim_l), dtype=np.float64)
    retries = []
    for c in range(num_classes):
        rotations[c], n = _sample_rotation(dim_l, class_rng(seed, c))
        retries.append(n)
    class_means = rotations @ base
    return PriorSpec(dim_l, num_classes, base, rotations, class_means, seed, tuple(retries))


def translation_matrix(spec, c, t):
    """Rotation taking class-``c`` coordinates to class ``t``: ``T_t @ T_c.T``."""
    c, t = spec.check_class(c), spec.check_class(t)
    return spec.rotations[t] @ spec.rotations[c].T


def rotate_latent(spec, z_l, c, t):
    """Move labeled latent(s) from class ``c`` to class ``t``.

    ``z_l`` may be a single vector or a batch (rows). The result is float64.
    ``c == t`` returns the input unchanged (bit-exact) rather than multiplying
    by ``T_c @ T_c.T``, which is the identity only up to rounding.
    """
    c, t = spec.check_class(c), spec.check_class(t)
    z = np.asarray(z_l, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] != spec.dim_l:
        raise ShapeError(f"expected trailing dimension {spec.dim_l}, got shape {z.shape}")
    if c == t:
        return z.copy()
    # z_0 = T_c^T z, then T_t z_0 (row-vector form for batches)
    z0 = z @ spec.rotations[c]
    return z0 @ spec.rotations[t].T


def pairwise_mean_distances(spec):
    diff = spec.class_means[:, None, :] - spec.class_means[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def orthogonality_residuals(spec):
    eye = np.eye(spec.dim_l)
    return np.array([np.abs(r.T @ r - eye).max() for r in spec.rotations])


# -- serialization ---------------------------------------------------------
# layout (little endian): magic[8] | u32 version | u32 dim_l | u32 num_classes |
# u64 seed | f64 base_mean[dim_l] | f64 rotations[C*dim_l*dim_l] row-major |
# f64 class_means[C*dim_l] | u32 retries[C]
_HEADER = struct.Struct("<8sIIIQ")


def prior_spec_bytes(spec):
    buf = io.BytesIO()
    buf.write(_HEADER.pack(PRIOR_MAGIC, PRIOR_FORMAT_VERSION, spec.dim_l, spec.num_classes, spec.seed))
    for arr in (spec.base_mean, spec.rotations, spec.class_means):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    retries = spec.qr_retries or (0,) * spec.num_classes
    buf.write(np.asarray(retries, dtype="<u4").tobytes())
    return buf.getvalue()


def prior_spec_hash(spec):
    return hashlib.sha256(prior_spec_bytes(spec)).hexdigest()


def prior_spec_from_bytes(data):
    if len(data) < _HEADER.size:
        raise FormatError("prior spec file truncated in header", offset=len(data))
    magic, version, dim_l, num_classes, seed = _HEADER.unpack_from(data, 0)
    if magic != PRIOR_MAGIC:
        raise FormatError("not a prior spec file (bad magic)", offset=0)
    if version != PRIOR_FORMAT_VERSION:
        raise FormatError(f"unsupported prior spec version {version}", offset=8)
    sizes = [dim_l, num_classes * dim_l * dim_l, num_classes * dim_l]
    expected = _HEADER.size + 8 * sum(sizes) + 4 * num_classes
    if len(data) != expected:
        raise FormatError(f"prior spec has {len(data)} bytes, expected {expected}", offset=min(len(data), expected))
    pos = _HEADER.size
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    retries = tuple(int(x) for x in np.frombuffer(data, dtype="<u4", count=num_classes, offset=pos))
    base, rot, means = arrays
    return PriorSpec(
        dim_l,
        num_classes,
        base,
        rot.reshape(num_classes, dim_l, dim_l),
        means.reshape(num_classes, dim_l),
        seed,
        retries,
    )


def save_prior_spec(spec, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(prior_spec_bytes(spec))
    tmp.replace(path)
    return path


def load_prior_spec(path):
    return prior_spec_from_bytes(Path(path).read_bytes())
