"""Datasets, IDX ingestion and the perturbation pipeline.

The training stream yields :class:`BatchTriple` objects: a labelled source
batch plus two independently perturbed views of the same target rows.  The
triple has no field for target labels; those stay on the target
:class:`LabeledSet` and are only read at evaluation time.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DTYPE
from .whitening import Domain


class FormatError(ValueError):
    pass


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    domain: Domain = Domain.SOURCE

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.inputs[idx], self.labels[idx], self.domain)


@dataclass
class PerturbSpec:
    """Perturbation magnitudes. Translation is a fraction of the image size,
    angles are in degrees, ``scale`` is a ``(low, high)`` range.
    ``feature_noise`` is the Gaussian jitter std used for non-image inputs."""

    max_translation: float = 0.05
    blur_sigma: float = 0.1
    rotation: float = 10.0
    scale: tuple = (0.9, 1.1)
    shear: float = 5.0
    feature_noise: float = 0.0

    def __post_init__(self):
        self.scale = tuple(float(s) for s in self.scale)
        if len(self.scale) != 2 or min(self.scale) <= 0 or self.scale[0] > self.scale[1]:
            raise ValueError(f"invalid scale range {self.scale}")
        for name in ("max_translation", "blur_sigma", "rotation", "shear", "feature_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def none(cls) -> "PerturbSpec":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0)

    def is_identity(self) -> bool:
        return (self.max_translation == 0 and self.blur_sigma == 0 and self.rotation == 0
                and self.scale == (1.0, 1.0) and self.shear == 0 and self.feature_noise == 0)


@dataclass
class BatchTriple:
    source_x: np.ndarray
    source_y: np.ndarray
    target_v1: np.ndarray
    target_v2: np.ndarray
    # row indices into the target set, for coverage checks only
    target_index: np.ndarray | None = None


# ---------------------------------------------------------------- synthetic

def rotation_scaling(dim: int, angle_deg: float = 30.0, scales=(1.6, 0.6), plane=(0, 1)) -> np.ndarray:
    """Rotation by ``angle_deg`` in ``plane`` composed with an axis-aligned scaling."""
    i, j = plane
    t = math.radians(angle_deg)
    R = np.eye(dim)
    R[i, i], R[i, j], R[j, i], R[j, j] = math.cos(t), -math.sin(t), math.sin(t), math.cos(t)
    S = np.ones(dim)
    S[:len(scales)] = scales
    return R @ np.diag(S)


def block_correlation(dim: int, rho: float, block: int | None = None) -> np.ndarray:
    """Equicorrelation ``rho`` inside contiguous blocks, zero across blocks."""
    block = block or dim
    C = np.eye(dim)
    for s in range(0, dim, block):
        C[s:s + block, s:s + block] = rho
    np.fill_diagonal(C, 1.0)
    return C


def gen_synthetic_shift(seed: int, n: int, C: int = 3, dim: int = 8, A=None, b=None,
                        noise: float = 0.3, correlation: float = 0.0, corr_block: int | None = None,
                        class_sep: float = 1.0, mean_dims: int | None = None):
    """Gaussian class blobs for the source and an affinely shifted copy of the
    same distribution for the target (``x -> A x + b``).

    Class means are drawn once from ``seed`` at distance ``class_sep`` from
    the origin, inside the first ``mean_dims`` coordinates (all by default);
    both domains share them and the class covariance
    ``noise**2 * block_correlation(dim, correlation, corr_block)``.
    """
    A = np.eye(dim) if A is None else np.asarray(A, dtype=DTYPE)
    b = np.zeros(dim) if b is None else np.asarray(b, dtype=DTYPE)
    if A.shape != (dim, dim) or b.shape != (dim,):
        raise ValueError(f"shift must be ({dim},{dim}) and ({dim},)")
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("shift matrix A is singular")
    rng = np.random.default_rng(seed)
    means = np.zeros((C, dim))
    means[:, :mean_dims or dim] = rng.normal(size=(C, mean_dims or dim))
    means *= class_sep / np.linalg.norm(means, axis=1, keepdims=True)
    cov = noise ** 2 * block_correlation(dim, correlation, corr_block)
    chol = np.linalg.cholesky(cov)

    def draw(count):
        labels = rng.permutation(np.arange(count) % C)
        x = means[labels] + rng.normal(size=(count, dim)) @ chol.T
        return x, labels

    xs, ys = draw(n)
    xt, yt = draw(n)
    xt = xt @ A.T + b
    return LabeledSet(xs, ys, Domain.SOURCE), LabeledSet(xt, yt, Domain.TARGET)


def split(data: LabeledSet, n_test: int, seed: int = 0):
    """Random (train, test) split."""
    idx = np.random.default_rng(seed).permutation(len(data))
    return data.subset(np.sort(idx[n_test:])), data.subset(np.sort(idx[:n_test]))


# ---------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4),
              0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need 4 magic bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic at offset 0 ({raw[:4].hex()})")
    code, rank = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown element type 0x{code:02x} at offset 2")
    if rank == 0:
        raise FormatError(f"{path}: zero rank at offset 3")
    head = 4 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension fields at offset {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:head])
    dtype, size = _IDX_TYPES[code]
    need = head + size * int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes at offset {need}")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def load_idx(images_path, labels_path, domain: Domain = Domain.SOURCE) -> LabeledSet:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected rank-3 image file (magic 0x00000803), got rank {images.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected rank-1 label file (magic 0x00000801), got rank {labels.ndim}")
    if len(images) != len(labels):
        raise FormatError(f"count mismatch at offset 4: {len(images)} images vs {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise FormatError(f"{labels_path}: labels outside 0-9")
    x = images.astype(DTYPE)[:, None, :, :]
    if images.dtype == np.uint8:
        x /= 255.0
    return LabeledSet(x, labels.astype(np.int64), domain)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}
    code = codes.get(array.dtype)
    if code is None:
        raise ValueError("only uint8/int8 arrays are written")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ------------------------------------------------------------ perturbation

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (c, h, w) at float coordinates with zero fill outside."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros((c,) + ys.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(ok, wy * wx, 0.0) * vals
    return out


def affine_warp(img: np.ndarray, matrix: np.ndarray, shift) -> np.ndarray:
    """Output pixel ``p`` takes the value at ``matrix^{-1} (p - centre - shift) + centre``.

    Coordinates are (row, col); ``shift`` is in pixels.
    """
    c, h, w = img.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(matrix)
    rr, cc = np.meshgrid(np.arange(h, dtype=DTYPE), np.arange(w, dtype=DTYPE), indexing="ij")
    p = np.stack([rr - centre[0] - shift[0], cc - centre[1] - shift[1]])
    q = np.einsum("ij,jhw->ihw", inv, p)
    return _bilinear(img, q[0] + centre[0], q[1] + centre[1])


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), reflected borders."""
    if sigma <= 0:
        return img
    r = int(math.ceil(3 * sigma))
    t = np.arange(-r, r + 1, dtype=DTYPE)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    out = img
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect" if out.shape[axis] > r else "edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, wk in enumerate(k):
            acc += wk * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def sample_affine(spec: PerturbSpec, rng: np.random.Generator, h: int, w: int):
    ty = rng.uniform(-1, 1) * spec.max_translation * h
    tx = rng.uniform(-1, 1) * spec.max_translation * w
    angle = math.radians(rng.uniform(-1, 1) * spec.rotation)
    scale = rng.uniform(*spec.scale)
    shear = math.radians(rng.uniform(-1, 1) * spec.shear)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    shr = np.array([[1.0, 0.0], [math.tan(shear), 1.0]])
    return scale * rot @ shr, (ty, tx)


def perturb(image, spec: PerturbSpec, rng: np.random.Generator) -> np.ndarray:
    """Random affine warp then Gaussian blur of one ``(c, h, w)`` or ``(h, w)`` image,
    clamped to [0, 1]."""
    img = np.asarray(image, dtype=DTYPE)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    if spec.is_identity():
        out = img.copy()
    else:
        matrix, shift = sample_affine(spec, rng, *img.shape[1:])
        out = affine_warp(img, matrix, shift)
        out = np.clip(gaussian_blur(out, spec.blur_sigma), 0.0, 1.0)
    return out[0] if squeeze else out


def perturb_batch(x: np.ndarray, spec: PerturbSpec, rng: np.random.Generator) -> np.ndarray:
    """Images (ndim 4) go through :func:`perturb`; feature vectors get Gaussian jitter."""
    if spec.is_identity():
        return x.copy()
    if x.ndim == 4:
        return np.stack([perturb(img, spec, rng) for img in x])
    if spec.feature_noise == 0:
        return x.copy()
    return x + spec.feature_noise * rng.normal(size=x.shape)


# ------------------------------------------------------------------ stream

def _index_stream(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def batch_triples(source: LabeledSet, target: LabeledSet, m: int, spec: PerturbSpec,
                  seed: int, epoch: int = 0, perturb_source: bool = True) -> Iterator[BatchTriple]:
    """One epoch of triples: ``len(target) // m`` batches, each target row used at
    most once; source rows are drawn from reshuffled passes as needed."""
    if m < 2 or m > min(len(source), len(target)):
        raise ValueError(f"batch size {m} must be in [2, {min(len(source), len(target))}]")
    rng = np.random.default_rng([seed, epoch])
    t_order = rng.permutation(len(target))
    s_stream = _index_stream(len(source), np.random.default_rng([seed, epoch, 1]))
    src_spec = spec if perturb_source else PerturbSpec.none()
    for i in range(len(target) // m):
        t_idx = t_order[i * m:(i + 1) * m]
        s_idx = np.fromiter((next(s_stream) for _ in range(m)), dtype=np.int64, count=m)
        xt = target.inputs[t_idx]
        yield BatchTriple(
            source_x=perturb_batch(source.inputs[s_idx], src_spec, rng),
            source_y=source.labels[s_idx],
            target_v1=perturb_batch(xt, spec, rng),
            target_v2=perturb_batch(xt, spec, rng),
            target_index=t_idx,
        )
