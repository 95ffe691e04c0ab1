"""Datasets, channel decomposition and bit-exact file formats.

The synthetic generator draws a class-conditional latent and pushes it
through fixed random per-view maps with view-specific noise, so class
information is view-shared and noise is view-private by construction.
Labels ride along for evaluation only; the training path never sees
them.

File formats are hand-rolled little-endian layouts (no zip containers,
whose metadata breaks byte determinism): datasets under magic IPMCDAT,
and a generic named-section container used for checkpoints.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FormatError

DATASET_MAGIC = b"IPMCDAT"
DATASET_VERSION = 1

CONTAINER_MAGIC = b"IPMCCKPT"
CONTAINER_VERSION = 1

# luminance weights; chroma channels are (B - lum, R - lum) shifted into [0, 1]
LUM_R, LUM_G, LUM_B = 0.299, 0.587, 0.114
CB_SPAN = 2.0 * (1.0 - LUM_B)  # B - lum ranges over +- (1 - LUM_B)
CR_SPAN = 2.0 * (1.0 - LUM_R)


@dataclass
class MultiViewDataset:
    views: list[np.ndarray]      # m arrays of shape (n, d_v)
    labels: np.ndarray           # (n,) int64, evaluation-only
    train_mask: np.ndarray       # (n,) bool

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def m(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(v.shape[1] for v in self.views)

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.train_mask)

    def training_views(self) -> list[np.ndarray]:
        """Label-free view arrays restricted to the training split."""
        idx = self.train_indices
        return [v[idx] for v in self.views]

    def __post_init__(self):
        if not self.views:
            raise ConfigError("dataset needs at least one view")
        n = self.views[0].shape[0]
        if any(v.ndim != 2 or v.shape[0] != n for v in self.views):
            raise ConfigError("all views must be (n, d_v) with a shared n")
        if self.labels.shape != (n,) or self.train_mask.shape != (n,):
            raise ConfigError("labels and train_mask must have length n")


def gen_synthetic(
    classes: int,
    n_per_class: int,
    latent_dim: int,
    views: int,
    noise: float,
    seed: int,
    view_dim: int | list[int] = 24,
    class_sep: float = 3.0,
    train_fraction: float = 0.75,
    clusters_per_class: int = 1,
    private_noise: float = 0.0,
    private_dim: int = 4,
    view_offset: float = 0.0,
) -> MultiViewDataset:
    """Class-conditional latent Gaussians mapped through fixed per-view relus.

    Cluster means sit on a scaled simplex (pairwise distance `class_sep` in
    units of the unit latent noise); each view is relu(A_v z + b_v + eps_v)
    with its own fixed random map and noise draw, so class information is
    view-shared while eps_v is view-private.

    With clusters_per_class = 2 each class is the union of two antipodal
    latent clusters.  That keeps every view individually redundant for the
    task while making the class inseparable by a linear readout of the raw
    views, so representation quality shows up in probe accuracy.

    `private_noise` > 0 adds a structured view-private component to eps_v:
    a per-(sample, view) latent of `private_dim` dimensions through a fixed
    per-view map.  Unlike white noise it gives each view a distinct
    distributional signature for the alignment tier to remove.

    `view_offset` > 0 staggers the per-view bias by view index, a constant
    domain shift between views that carries no class or instance
    information; untrained and contrast-only encoders have no reason to
    undo it, distribution alignment does.
    """
    if views < 2:
        raise ConfigError("need at least two views")
    if classes < 2:
        raise ConfigError("need at least two classes")
    if clusters_per_class not in (1, 2):
        raise ConfigError("clusters_per_class must be 1 or 2")
    if latent_dim < classes:
        raise ConfigError("latent_dim must be at least the class count")
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError("train_fraction must lie in (0, 1)")
    if isinstance(view_dim, int):
        view_dims = [view_dim] * views
    else:
        view_dims = list(view_dim)
        if len(view_dims) != views:
            raise ConfigError("view_dim list must have one entry per view")
    rng = np.random.default_rng(np.uint64(seed))

    means = np.zeros((classes, latent_dim))
    means[np.arange(classes), np.arange(classes)] = class_sep / np.sqrt(2.0)
    if clusters_per_class == 1:
        means -= means.mean(axis=0)

    n = classes * n_per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    latents = means[labels] + rng.standard_normal((n, latent_dim))
    if clusters_per_class == 2:
        # second cluster of each class mirrors the first through the origin
        flip = rng.integers(0, 2, size=n) * 2 - 1
        latents = means[labels] * flip[:, None] + rng.standard_normal((n, latent_dim))

    view_arrays = []
    for v in range(views):
        a = rng.standard_normal((latent_dim, view_dims[v])) / np.sqrt(latent_dim)
        b = rng.uniform(0.0, 0.2, size=view_dims[v]) + view_offset * v
        eps = noise * rng.standard_normal((n, view_dims[v]))
        if private_noise > 0.0:
            c = rng.standard_normal((private_dim, view_dims[v])) / np.sqrt(private_dim)
            eps += private_noise * (rng.standard_normal((n, private_dim)) @ c)
        view_arrays.append(np.maximum(latents @ a + b + eps, 0.0))

    train_mask = np.zeros(n, dtype=bool)
    n_train_per_class = int(round(train_fraction * n_per_class))
    for c in range(classes):
        members = np.flatnonzero(labels == c)
        picked = rng.permutation(members)[:n_train_per_class]
        train_mask[picked] = True
    return MultiViewDataset(view_arrays, labels, train_mask)


# ---------------------------------------------------------------------------
# channel decomposition


def decompose_channels(images: np.ndarray) -> list[np.ndarray]:
    """Split (B, H, W, 3) images in [0, 1] into RGB / luminance / chroma views.

    luminance = 0.299 R + 0.587 G + 0.114 B; chroma stacks (B - lum, R - lum)
    affinely shifted into [0, 1].  All three views come back flattened.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DomainError(f"expected (B, H, W, 3) images, got {images.shape}")
    if np.any(images < 0.0) or np.any(images > 1.0):
        raise DomainError("pixel values must lie in [0, 1]")
    nb = images.shape[0]
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    lum = LUM_R * r + LUM_G * g + LUM_B * b
    cb = (b - lum + (1.0 - LUM_B)) / CB_SPAN
    cr = (r - lum + (1.0 - LUM_R)) / CR_SPAN
    chroma = np.stack([cb, cr], axis=-1)
    return [
        images.reshape(nb, -1),
        lum.reshape(nb, -1),
        chroma.reshape(nb, -1),
    ]


def recompose_channels(
    luminance: np.ndarray, chroma: np.ndarray, height: int, width: int
) -> np.ndarray:
    """Invert decompose_channels from the (luminance, chroma) pair."""
    nb = luminance.shape[0]
    lum = luminance.reshape(nb, height, width)
    ch = chroma.reshape(nb, height, width, 2)
    b = ch[..., 0] * CB_SPAN - (1.0 - LUM_B) + lum
    r = ch[..., 1] * CR_SPAN - (1.0 - LUM_R) + lum
    g = (lum - LUM_R * r - LUM_B * b) / LUM_G
    return np.stack([r, g, b], axis=-1)


# ---------------------------------------------------------------------------
# dataset file format


def write_dataset(dataset: MultiViewDataset, path) -> None:
    if dataset.n == 0:
        raise ConfigError("refusing to write an empty dataset")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", DATASET_VERSION, dataset.n, dataset.m))
        fh.write(np.asarray(dataset.dims, dtype="<u4").tobytes())
        fh.write(np.asarray(dataset.labels, dtype="<i8").tobytes())
        fh.write(np.asarray(dataset.train_mask, dtype="u1").tobytes())
        for view in dataset.views:
            fh.write(np.ascontiguousarray(view, dtype="<f8").tobytes())


def read_dataset(path) -> MultiViewDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:7] != DATASET_MAGIC:
        raise FormatError("bad dataset magic")
    if len(blob) < 7 + 12:
        raise FormatError("truncated dataset header")
    version, n, m = struct.unpack_from("<III", blob, 7)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = 7 + 12
    dims = np.frombuffer(blob, dtype="<u4", count=m, offset=off)
    off += 4 * m
    expected = off + 8 * n + n + 8 * n * int(dims.sum())
    if len(blob) != expected:
        raise FormatError(
            f"dataset payload has {len(blob)} bytes, expected {expected}"
        )
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=off).copy()
    off += 8 * n
    train_mask = np.frombuffer(blob, dtype="u1", count=n, offset=off).astype(bool)
    off += n
    views = []
    for d in dims:
        view = np.frombuffer(blob, dtype="<f8", count=n * int(d), offset=off)
        views.append(view.reshape(n, int(d)).copy())
        off += 8 * n * int(d)
    return MultiViewDataset(views, labels, train_mask)


# ---------------------------------------------------------------------------
# generic named-section container (checkpoints)

_KIND_F64 = 0
_KIND_I64 = 1
_KIND_BYTES = 2


def _section_bytes(value) -> tuple[int, tuple, bytes]:
    if isinstance(value, bytes):
        return _KIND_BYTES, (len(value),), value
    arr = np.asarray(value)
    if arr.dtype.kind in "iub":
        return _KIND_I64, arr.shape, np.ascontiguousarray(arr, dtype="<i8").tobytes()
    return _KIND_F64, arr.shape, np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_container(path, sections: dict[str, object]) -> None:
    """Write named arrays/bytes with a section table; byte-deterministic."""
    names = sorted(sections)
    header = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(names))]
    payloads = []
    for name in names:
        kind, shape, blob = _section_bytes(sections[name])
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)))
        header.append(encoded)
        header.append(struct.pack("<BB", kind, len(shape)))
        header.append(np.asarray(shape, dtype="<u4").tobytes())
        header.append(struct.pack("<Q", len(blob)))
        payloads.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payloads))


def read_container(path) -> dict[str, object]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CONTAINER_MAGIC:
        raise FormatError("bad container magic")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    off = 16
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        kind, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = tuple(np.frombuffer(blob, dtype="<u4", count=ndim, offset=off))
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", blob, off)
        off += 8
        table.append((name, kind, tuple(int(s) for s in shape), nbytes))
    out: dict[str, object] = {}
    for name, kind, shape, nbytes in table:
        chunk = blob[off : off + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"truncated container section {name!r}")
        off += nbytes
        if kind == _KIND_BYTES:
            out[name] = chunk
        elif kind == _KIND_I64:
            out[name] = np.frombuffer(chunk, dtype="<i8").reshape(shape).copy()
        else:
            out[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    if off != len(blob):
        raise FormatError("trailing bytes after container payload")
    return out


# ---------------------------------------------------------------------------
# metrics CSV (RFC 4180, header row mandatory)


def write_metrics_csv(rows: list[dict], path, fieldnames: list[str] | None = None) -> None:
    if fieldnames is None:
        if not rows:
            raise ConfigError("cannot infer a header from zero rows")
        fieldnames = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        writer.writerows(rows)


def read_metrics_csv(path) -> list[dict]:
    with open(path, "r", newline="") as fh:
        return list(csv.DictReader(fh))
