"""Partitioned token ID space: text stream, 7 audio codebook layers, special tokens.

Every other module resolves token meaning through a VocabSpec. The global ID
space is laid out as contiguous disjoint ranges in a fixed order:

    [text ids) [audio layer 1) ... [audio layer 7) [specials)

so classification is pure range arithmetic and serialization is trivially
deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

N_AUDIO_LAYERS = 7
N_STREAMS = 8  # 1 text stream + 7 audio layers

# Fixed assignment order; IDs in the specials tail follow this order exactly.
SPECIAL_ROLES = (
    "PAD",
    "BOS",
    "EOS_TEXT",
    "EOS_AUDIO",
    "ANSWER_TEXT",
    "ANSWER_AUDIO",
    "INPUT_AUDIO_MARK",
)


class Role(Enum):
    TEXT = "text"
    AUDIO = "audio"
    SPECIAL = "special"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class VocabSpec:
    """Immutable description of the combined token ID space."""

    text_size: int
    audio_layer_sizes: tuple[int, ...]
    specials: dict[str, int]
    total_size: int
    audio_offsets: tuple[int, ...]  # global ID of local index 0 for layers 1..7

    # -- special-token shorthands -------------------------------------------
    @property
    def pad(self) -> int:
        return self.specials["PAD"]

    @property
    def bos(self) -> int:
        return self.specials["BOS"]

    @property
    def eos_text(self) -> int:
        return self.specials["EOS_TEXT"]

    @property
    def eos_audio(self) -> int:
        return self.specials["EOS_AUDIO"]

    @property
    def answer_text(self) -> int:
        return self.specials["ANSWER_TEXT"]

    @property
    def answer_audio(self) -> int:
        return self.specials["ANSWER_AUDIO"]

    @property
    def input_audio_mark(self) -> int:
        return self.specials["INPUT_AUDIO_MARK"]

    # -- ID construction ----------------------------------------------------
    def text_global(self, local: int) -> int:
        if not 0 <= local < self.text_size:
            raise VocabError(f"text local index {local} out of range [0, {self.text_size})")
        return local

    def audio_global(self, layer: int, local: int) -> int:
        if not 1 <= layer <= N_AUDIO_LAYERS:
            raise VocabError(f"audio layer {layer} out of range [1, {N_AUDIO_LAYERS}]")
        if not 0 <= local < self.audio_layer_sizes[layer - 1]:
            raise VocabError(
                f"audio local index {local} out of range for layer {layer} "
                f"(size {self.audio_layer_sizes[layer - 1]})"
            )
        return self.audio_offsets[layer - 1] + local

    def classify(self, token_id: int) -> tuple[Role, int | None, int]:
        """Map a global ID back to its (role, layer, local_index) triple.

        Layer is 0 for text, 1..7 for audio layers, None for specials.
        Raises on out-of-range IDs; never returns a default.
        """
        if not 0 <= token_id < self.total_size:
            raise VocabError(f"token ID {token_id} out of range [0, {self.total_size})")
        if token_id < self.text_size:
            return (Role.TEXT, 0, token_id)
        for layer in range(1, N_AUDIO_LAYERS + 1):
            lo = self.audio_offsets[layer - 1]
            if token_id < lo + self.audio_layer_sizes[layer - 1]:
                return (Role.AUDIO, layer, token_id - lo)
        specials_base = self.total_size - len(SPECIAL_ROLES)
        return (Role.SPECIAL, None, token_id - specials_base)

    # -- per-head legal ID sets ---------------------------------------------
    def legal_ids_for_stream(self, stream: int) -> list[int]:
        """IDs a generation head for this stream may emit.

        Stream 0 (text): text IDs plus PAD / EOS_TEXT.
        Streams 1..7 (audio): that layer's IDs plus PAD / EOS_AUDIO.
        """
        if stream == 0:
            ids = list(range(self.text_size))
            ids += [self.pad, self.eos_text]
        elif 1 <= stream <= N_AUDIO_LAYERS:
            lo = self.audio_offsets[stream - 1]
            ids = list(range(lo, lo + self.audio_layer_sizes[stream - 1]))
            ids += [self.pad, self.eos_audio]
        else:
            raise VocabError(f"stream index {stream} out of range [0, {N_STREAMS})")
        return ids

    def valid_for_stream(self, stream: int, token_id: int) -> bool:
        role, layer, _ = self.classify(token_id)
        if role is Role.SPECIAL:
            return True
        return layer == stream

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "text_size": self.text_size,
            "audio_layer_sizes": list(self.audio_layer_sizes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "VocabSpec":
        return build_vocab(d["text_size"], list(d["audio_layer_sizes"]))


def build_vocab(text_size: int, audio_layer_sizes: list[int]) -> VocabSpec:
    """Construct the ID space: text, then audio layers 1..7, then specials."""
    if text_size < 2:
        raise VocabError(f"text_size must be >= 2, got {text_size}")
    if len(audio_layer_sizes) != N_AUDIO_LAYERS:
        raise VocabError(
            f"expected exactly {N_AUDIO_LAYERS} audio layer sizes, got {len(audio_layer_sizes)}"
        )
    for i, size in enumerate(audio_layer_sizes):
        if size < 2:
            raise VocabError(f"audio layer {i + 1} size must be >= 2, got {size}")

    offsets = []
    cursor = text_size
    for size in audio_layer_sizes:
        offsets.append(cursor)
        cursor += size
    specials = {role: cursor + i for i, role in enumerate(SPECIAL_ROLES)}
    total = cursor + len(SPECIAL_ROLES)
    return VocabSpec(
        text_size=text_size,
        audio_layer_sizes=tuple(audio_layer_sizes),
        specials=specials,
        total_size=total,
        audio_offsets=tuple(offsets),
    )
