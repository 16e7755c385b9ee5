"""Text-first delay pattern: staggers the 8 parallel streams by per-layer offsets.

Stream 0 (text) leads; audio layer l's token for time t is generated at decode
step t + offsets[l] (+ the global text-advance N for audio streams), so one
autoregressive pass emits all layers with bounded lag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toycodec import TokenGrid
from .vocab import N_STREAMS


class DelayError(ValueError):
    pass


@dataclass(frozen=True)
class DelayPattern:
    offsets: tuple[int, ...] = tuple(range(N_STREAMS))

    def __post_init__(self):
        offsets = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, "offsets", offsets)
        if not offsets:
            raise DelayError("delay pattern needs at least one offset")
        if offsets[0] != 0:
            raise DelayError(f"text stream must lead: offsets[0] = {offsets[0]} != 0")
        if any(o < 0 for o in offsets):
            raise DelayError("offsets must be non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.offsets)

    @property
    def max_offset(self) -> int:
        return max(self.offsets)

    def with_text_advance(self, n: int) -> "DelayPattern":
        """Fold the audio-side text-advance N into the structural offsets."""
        if n < 0:
            raise DelayError(f"text advance must be non-negative, got {n}")
        return DelayPattern((self.offsets[0],) + tuple(o + n for o in self.offsets[1:]))


def shift_rows(arr: np.ndarray, offsets: tuple[int, ...], fill) -> np.ndarray:
    """Right-shift each row by its offset, padding vacated cells with fill."""
    n_layers, n_steps = arr.shape
    out_steps = n_steps + max(offsets)
    out = np.full((n_layers, out_steps), fill, dtype=arr.dtype)
    for l, off in enumerate(offsets):
        out[l, off : off + n_steps] = arr[l]
    return out


def apply_delay(grid: TokenGrid, pattern: DelayPattern, pad: int) -> TokenGrid:
    """Stagger an L x T grid into an L x (T + max offset) grid, padding with pad."""
    if grid.n_layers != pattern.n_layers:
        raise DelayError(
            f"grid has {grid.n_layers} layers but pattern has {pattern.n_layers} offsets"
        )
    return TokenGrid(shift_rows(grid.tokens, pattern.offsets, pad), grid.id_space)


def revert_delay(grid: TokenGrid, pattern: DelayPattern, pad: int) -> TokenGrid:
    """Exact inverse of apply_delay; rejects grids inconsistent with the pattern."""
    if grid.n_layers != pattern.n_layers:
        raise DelayError(
            f"grid has {grid.n_layers} layers but pattern has {pattern.n_layers} offsets"
        )
    t_out = grid.n_steps - pattern.max_offset
    if t_out < 0:
        raise DelayError(
            f"grid of {grid.n_steps} steps is shorter than the max offset {pattern.max_offset}"
        )
    out = np.empty((grid.n_layers, t_out), dtype=np.int64)
    for l, off in enumerate(pattern.offsets):
        row = grid.tokens[l]
        for t in range(off):
            if row[t] != pad:
                raise DelayError(f"non-pad token {row[t]} in structurally padded cell "
                                 f"(layer {l}, step {t})")
        for t in range(off + t_out, grid.n_steps):
            if row[t] != pad:
                raise DelayError(f"non-pad token {row[t]} in structurally padded cell "
                                 f"(layer {l}, step {t})")
        out[l] = row[off : off + t_out]
    return TokenGrid(out, grid.id_space)


def first_emission_step(pattern: DelayPattern, text_advance: int, layer: int) -> int:
    """First decode step at which a stream emits a non-pad token.

    Text (layer 0) starts at its structural offset; audio layers wait an extra
    text-advance N so the corresponding text is always produced first.
    """
    if not 0 <= layer < pattern.n_layers:
        raise DelayError(f"layer {layer} out of range [0, {pattern.n_layers})")
    if layer == 0:
        return pattern.offsets[0]
    return pattern.offsets[layer] + text_advance
