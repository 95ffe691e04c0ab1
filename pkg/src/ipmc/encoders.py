"""Per-view encoder stacks producing unit-norm, non-negative embeddings.

Each view gets its own affine/relu stack; the final activation is relu
followed by l2 normalization, which pins every embedding onto the
non-negative part of the unit sphere.  That makes the cosine similarity
of any two embeddings land in [0, 1] structurally, with no clamping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .errors import ConfigError, DomainError, FormatError, ShapeError

ENC_MAGIC = b"IPMCENC"
ENC_VERSION = 1

NORM_TOL = 1e-6


@dataclass
class EncoderParams:
    """Weights of m independent encoder stacks with a shared layer layout."""

    m: int
    in_dims: tuple[int, ...]
    widths: tuple[int, ...]
    stacks: list[list[tuple[np.ndarray, np.ndarray]]]

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def param_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of all parameters (trainer/optimizer keying)."""
        out = {}
        for v, stack in enumerate(self.stacks):
            for l, (w, b) in enumerate(stack):
                out[f"enc/v{v}/l{l}/W"] = w
                out[f"enc/v{v}/l{l}/b"] = b
        return out

    def replace_params(self, values: dict[str, np.ndarray]) -> "EncoderParams":
        stacks = [
            [
                (values[f"enc/v{v}/l{l}/W"], values[f"enc/v{v}/l{l}/b"])
                for l in range(len(stack))
            ]
            for v, stack in enumerate(self.stacks)
        ]
        return EncoderParams(self.m, self.in_dims, self.widths, stacks)


@dataclass(frozen=True)
class Embedding:
    """One encoded (sample, view): a non-negative unit vector."""

    vector: np.ndarray
    sample_index: int
    view_index: int

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if abs(float(np.linalg.norm(v)) - 1.0) > NORM_TOL:
            raise DomainError(
                f"embedding norm {np.linalg.norm(v):.8f} deviates from 1 "
                f"beyond {NORM_TOL}"
            )
        if np.any(v < 0.0):
            raise DomainError("embedding has negative components")
        object.__setattr__(self, "vector", v)


def init_params(
    widths: list[int], m: int, seed: int, in_dims: list[int] | int
) -> EncoderParams:
    """Deterministic scaled-uniform init (scale 1/sqrt(fan-in)) for m stacks.

    `widths` are the per-layer output widths; `in_dims` gives each view's raw
    feature dimension (a single int is shared by all views).
    """
    if not widths:
        raise ConfigError("widths must be non-empty")
    if any(w <= 0 for w in widths):
        raise ConfigError(f"zero or negative layer width in {widths}")
    if m < 1:
        raise ConfigError("need at least one view")
    if isinstance(in_dims, int):
        in_dims = [in_dims] * m
    if len(in_dims) != m or any(d <= 0 for d in in_dims):
        raise ConfigError(f"in_dims must hold m={m} positive dimensions")
    rng = np.random.default_rng(np.uint64(seed))
    stacks = []
    for v in range(m):
        fan_ins = [in_dims[v]] + list(widths[:-1])
        stack = []
        for fan_in, fan_out in zip(fan_ins, widths):
            scale = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-scale, scale, size=(fan_in, fan_out))
            # non-negative bias keeps relu units alive at birth
            b = rng.uniform(0.0, scale, size=fan_out)
            stack.append((w, b))
        stacks.append(stack)
    return EncoderParams(m, tuple(in_dims), tuple(widths), stacks)


def forward_node(x: dm.Node, layers: list[tuple[dm.Node, dm.Node]]) -> dm.Node:
    """Differentiable encoder forward: (affine, relu)* then l2 normalization."""
    h = x
    for w, b in layers:
        h = dm.relu(dm.affine(h, w, b))
    pre = h.value if h.value.ndim == 2 else h.value[None, :]
    if np.any(np.linalg.norm(pre, axis=1) == 0.0):
        raise DomainError("collapsed encoder: all-zero pre-normalization output")
    return dm.l2_normalize(h)


def encode(batch: np.ndarray, params: EncoderParams, view: int) -> np.ndarray:
    """Encode a (B, d_view) batch for one view into (B, D) unit embeddings."""
    if view >= params.m or view < 0:
        raise ShapeError(f"view {view} out of range for m={params.m}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.in_dims[view]:
        raise ShapeError(
            f"batch shape {batch.shape} does not match view {view} input "
            f"dimension {params.in_dims[view]}"
        )
    layers = [(dm.constant(w), dm.constant(b)) for w, b in params.stacks[view]]
    return forward_node(dm.constant(batch), layers).value


def concat_representation(per_view: list[Embedding]) -> np.ndarray:
    """Concatenate one sample's m embeddings in ascending view order."""
    if not per_view:
        raise ShapeError("no embeddings supplied")
    views = [e.view_index for e in per_view]
    if views != sorted(set(views)) or views != list(range(len(per_view))):
        raise ShapeError(f"expected views 0..{len(per_view) - 1} in order, got {views}")
    samples = {e.sample_index for e in per_view}
    if len(samples) != 1:
        raise ShapeError(f"embeddings mix sample indices {sorted(samples)}")
    return np.concatenate([e.vector for e in per_view])


# ---------------------------------------------------------------------------
# serialization: little-endian f64 payload after a fixed header


def params_to_bytes(params: EncoderParams) -> bytes:
    chunks = [
        ENC_MAGIC,
        struct.pack("<IIII", ENC_VERSION, params.m, len(params.widths), 0),
        np.asarray(params.widths, dtype="<u4").tobytes(),
        np.asarray(params.in_dims, dtype="<u4").tobytes(),
    ]
    for stack in params.stacks:
        for w, b in stack:
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(blob: bytes) -> EncoderParams:
    if blob[:7] != ENC_MAGIC:
        raise FormatError("bad encoder magic")
    if len(blob) < 7 + 16:
        raise FormatError("truncated encoder header")
    version, m, n_layers, _ = struct.unpack_from("<IIII", blob, 7)
    if version != ENC_VERSION:
        raise FormatError(f"unsupported encoder version {version}")
    off = 7 + 16
    if len(blob) < off + 4 * (n_layers + m):
        raise FormatError("truncated encoder header")
    widths = np.frombuffer(blob, dtype="<u4", count=n_layers, offset=off)
    off += 4 * n_layers
    in_dims = np.frombuffer(blob, dtype="<u4", count=m, offset=off)
    off += 4 * m
    stacks = []
    for v in range(m):
        fan_ins = [int(in_dims[v])] + [int(w) for w in widths[:-1]]
        stack = []
        for fan_in, fan_out in zip(fan_ins, widths):
            need = 8 * (fan_in + 1) * int(fan_out)
            if off + need > len(blob):
                raise FormatError("truncated encoder payload")
            w = np.frombuffer(blob, dtype="<f8", count=fan_in * int(fan_out), offset=off)
            off += 8 * fan_in * int(fan_out)
            b = np.frombuffer(blob, dtype="<f8", count=int(fan_out), offset=off)
            off += 8 * int(fan_out)
            stack.append((w.reshape(fan_in, int(fan_out)).copy(), b.copy()))
        stacks.append(stack)
    if off != len(blob):
        raise FormatError("trailing bytes after encoder payload")
    return EncoderParams(m, tuple(int(d) for d in in_dims), tuple(int(w) for w in widths), stacks)


def save_params(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
