"""Deterministic invertible 7-layer residual codec over a synthetic signal space.

A "signal" is a sequence of integers in [0, B^7). Encoding is the base-B digit
expansion, coarse digit first, so layer 1 carries the most significant digit
and layer 7 the least. This preserves the coarse-to-fine layer structure that
the delay pattern exploits, while keeping round trips exact and testable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .vocab import N_AUDIO_LAYERS

GRID_MAGIC = b"OMNG"
GRID_VERSION = 1


class CodecError(ValueError):
    pass


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    base: int = 8
    n_layers: int = N_AUDIO_LAYERS

    def __post_init__(self):
        if self.base < 2:
            raise CodecError(f"codebook base must be >= 2, got {self.base}")
        if self.n_layers != N_AUDIO_LAYERS:
            raise CodecError(f"codec is fixed at {N_AUDIO_LAYERS} layers, got {self.n_layers}")

    @property
    def signal_range(self) -> int:
        return self.base**self.n_layers


@dataclass
class TokenGrid:
    """Rectangular layers x steps grid of token IDs.

    ``id_space`` records whether entries are local per-layer indices or global
    VocabSpec IDs; operations that mix the two must convert explicitly.
    """

    tokens: np.ndarray  # (n_layers, n_steps) int64
    id_space: str = "local"  # "local" | "global"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise CodecError(f"grid tokens must be 2-D, got shape {self.tokens.shape}")
        if self.id_space not in ("local", "global"):
            raise CodecError(f"unknown id_space {self.id_space!r}")

    @property
    def n_layers(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_steps(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.id_space)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.id_space == other.id_space
            and self.tokens.shape == other.tokens.shape
            and bool(np.array_equal(self.tokens, other.tokens))
        )


def encode_signal(signal, cfg: CodecConfig) -> TokenGrid:
    """Encode samples into a 7 x len(signal) grid of base-B digits, coarse first."""
    samples = np.asarray(signal, dtype=np.int64)
    if samples.ndim != 1:
        raise CodecError("signal must be a 1-D integer sequence")
    bad = np.nonzero((samples < 0) | (samples >= cfg.signal_range))[0]
    if bad.size:
        raise CodecError(
            f"sample {samples[bad[0]]} at step {bad[0]} out of range [0, {cfg.signal_range})"
        )
    powers = cfg.base ** np.arange(cfg.n_layers - 1, -1, -1, dtype=np.int64)
    tokens = (samples[None, :] // powers[:, None]) % cfg.base
    return TokenGrid(tokens, id_space="local")


def decode_grid(grid: TokenGrid, cfg: CodecConfig) -> np.ndarray:
    """Exact inverse of encode_signal."""
    if grid.n_layers != cfg.n_layers:
        raise CodecError(f"expected {cfg.n_layers} layers, got {grid.n_layers}")
    if grid.id_space != "local":
        raise CodecError("decode_grid requires a grid in the local id_space")
    if grid.n_steps and (grid.tokens.min() < 0 or grid.tokens.max() >= cfg.base):
        raise CodecError(f"grid contains tokens outside [0, {cfg.base})")
    powers = cfg.base ** np.arange(cfg.n_layers - 1, -1, -1, dtype=np.int64)
    return (grid.tokens * powers[:, None]).sum(axis=0)


def flatten_grid(grid: TokenGrid) -> np.ndarray:
    """Step-major interleaving: step 0 layers 1..L, step 1 layers 1..L, ..."""
    return grid.tokens.T.reshape(-1).copy()


def unflatten(seq, n_layers: int) -> TokenGrid:
    """Inverse of flatten_grid."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1:
        raise CodecError("flat token sequence must be 1-D")
    if len(seq) % n_layers != 0:
        raise CodecError(f"sequence length {len(seq)} not divisible by {n_layers} layers")
    return TokenGrid(seq.reshape(-1, n_layers).T, id_space="local")


# -- binary grid file format --------------------------------------------------
# magic "OMNG", u16 LE version, u16 LE n_layers, u32 LE n_steps,
# u8 id_space tag (0=local, 1=global), then layer-major u32 LE token IDs.

def write_grid(path, grid: TokenGrid) -> None:
    header = GRID_MAGIC + struct.pack(
        "<HHIB",
        GRID_VERSION,
        grid.n_layers,
        grid.n_steps,
        0 if grid.id_space == "local" else 1,
    )
    body = grid.tokens.astype("<u4").tobytes(order="C")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def read_grid(path) -> TokenGrid:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 13:
        raise GridFormatError(f"file too short for a grid header ({len(data)} bytes)")
    if data[:4] != GRID_MAGIC:
        raise GridFormatError(f"bad magic {data[:4]!r}, expected {GRID_MAGIC!r}")
    version, n_layers, n_steps, tag = struct.unpack("<HHIB", data[4:13])
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported grid version {version}")
    if tag not in (0, 1):
        raise GridFormatError(f"unknown id_space tag {tag}")
    expected = 13 + 4 * n_layers * n_steps
    if len(data) != expected:
        raise GridFormatError(f"expected {expected} bytes, got {len(data)}")
    tokens = np.frombuffer(data[13:], dtype="<u4").astype(np.int64)
    tokens = tokens.reshape(n_layers, n_steps)
    return TokenGrid(tokens, id_space="local" if tag == 0 else "global")
