"""Builds the 8 aligned input sequences, answer markers, targets, and loss masks.

Each task kind fixes which streams carry input and which carry output. Inputs
are right-aligned to a common length with left PAD; an answer marker is placed
at the end of the input region on every stream that will produce output; the
target grid is staggered by the delay pattern, and the loss mask is true
exactly on real target cells (never on structural padding or input copies).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .delay import DelayPattern, apply_delay, shift_rows
from .toycodec import CodecConfig, TokenGrid, encode_signal
from .vocab import N_AUDIO_LAYERS, N_STREAMS, Role, VocabSpec


class LayoutError(ValueError):
    pass


class TaskKind(Enum):
    ASR = "asr"                              # audio in  -> text out
    TTS = "tts"                              # text in   -> audio out
    TEXT_QA = "text_qa"                      # text in   -> text out
    AUDIO_QA_TEXT_OUT = "audio_qa_text_out"  # audio in  -> text out
    AUDIO_QA_FULL = "audio_qa_full"          # audio in  -> text + audio out


# (text_in, audio_in, text_out, audio_out) per task
TASK_IO: dict[TaskKind, tuple[bool, bool, bool, bool]] = {
    TaskKind.ASR: (False, True, True, False),
    TaskKind.TTS: (True, False, False, True),
    TaskKind.TEXT_QA: (True, False, True, False),
    TaskKind.AUDIO_QA_TEXT_OUT: (False, True, True, False),
    TaskKind.AUDIO_QA_FULL: (False, True, True, True),
}


@dataclass
class TrainingExample:
    task: TaskKind
    text_in: list[int] = field(default_factory=list)    # local text IDs
    signal_in: list[int] = field(default_factory=list)
    text_out: list[int] = field(default_factory=list)
    signal_out: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task.value,
                "text_in": list(map(int, self.text_in)),
                "signal_in": list(map(int, self.signal_in)),
                "text_out": list(map(int, self.text_out)),
                "signal_out": list(map(int, self.signal_out)),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "TrainingExample":
        d = json.loads(line)
        return TrainingExample(
            task=TaskKind(d["task"]),
            text_in=list(d["text_in"]),
            signal_in=list(d["signal_in"]),
            text_out=list(d["text_out"]),
            signal_out=list(d["signal_out"]),
        )


@dataclass
class Corpus:
    examples: list[TrainingExample]

    def __len__(self) -> int:
        return len(self.examples)

    def filter_tasks(self, tasks) -> "Corpus":
        tasks = set(tasks)
        return Corpus([e for e in self.examples if e.task in tasks])

    def save(self, path) -> None:
        with open(path, "w") as f:
            for ex in self.examples:
                f.write(ex.to_json() + "\n")

    @staticmethod
    def load(path) -> "Corpus":
        examples = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    examples.append(TrainingExample.from_json(line))
        return Corpus(examples)


@dataclass
class InputLayout:
    """One example, laid out as the model consumes it."""

    input_ids: TokenGrid                 # 8 x T_in, global IDs, PAD on unused cells
    feature_frames: np.ndarray | None    # (T_in, feature_dim) or None
    feature_mask: np.ndarray             # (T_in,) bool, true where a frame is present
    answer_positions: dict[int, int]     # stream -> input position of its answer marker
    target_ids: TokenGrid                # 8 x T_out, delayed layout, global IDs
    loss_mask: np.ndarray                # (8, T_out) bool
    pattern: DelayPattern
    text_advance: int

    @property
    def effective_pattern(self) -> DelayPattern:
        return self.pattern.with_text_advance(self.text_advance)


def feature_dim(codec: CodecConfig) -> int:
    return 1 + codec.n_layers


def make_features(signal, codec: CodecConfig) -> np.ndarray:
    """Per-sample continuous stand-in for encoder features.

    One frame per sample: the normalized sample value followed by its
    normalized base-B digits, coarse first.
    """
    samples = np.asarray(signal, dtype=np.int64)
    grid = encode_signal(samples, codec)
    frames = np.empty((len(samples), feature_dim(codec)), dtype=np.float64)
    frames[:, 0] = samples / codec.signal_range
    frames[:, 1:] = grid.tokens.T / (codec.base - 1)
    return frames


def build_layout(
    ex: TrainingExample,
    spec: VocabSpec,
    pattern: DelayPattern,
    text_advance: int = 0,
    codec: CodecConfig | None = None,
    with_features: bool = True,
    inference: bool = False,
) -> InputLayout:
    """Lay out one example: 8 input rows, answer markers, delayed targets, mask.

    With inference=True output payloads are not required and the target grid
    is empty; only the input side (and answer markers) matters.
    """
    if codec is None:
        codec = CodecConfig(base=spec.audio_layer_sizes[0])
    text_in, audio_in, text_out, audio_out = TASK_IO[ex.task]

    if text_in and not ex.text_in:
        raise LayoutError(f"{ex.task.value}: text input payload missing")
    if audio_in and not len(ex.signal_in):
        raise LayoutError(f"{ex.task.value}: audio input payload missing")
    if not text_in and ex.text_in:
        raise LayoutError(f"{ex.task.value}: task forbids a text input payload")
    if not audio_in and len(ex.signal_in):
        raise LayoutError(f"{ex.task.value}: task forbids an audio input payload")
    if not inference:
        if text_out and not ex.text_out:
            raise LayoutError(f"{ex.task.value}: text output payload missing")
        if audio_out and not len(ex.signal_out):
            raise LayoutError(f"{ex.task.value}: audio output payload missing")
    if not audio_out and len(ex.signal_out):
        raise LayoutError(f"{ex.task.value}: task forbids an audio output payload")

    pad = spec.pad

    # Input rows, built left to right, then right-aligned with left PAD.
    rows: list[list[int]] = []
    text_row = [spec.bos]
    if text_in:
        text_row += [spec.text_global(t) for t in ex.text_in]
    if text_out:
        text_row.append(spec.answer_text)
    rows.append(text_row)

    in_grid = encode_signal(ex.signal_in, codec) if audio_in else None
    for layer in range(1, N_AUDIO_LAYERS + 1):
        row: list[int] = []
        if audio_in:
            row.append(spec.input_audio_mark)
            row += [spec.audio_global(layer, int(t)) for t in in_grid.tokens[layer - 1]]
        if audio_out:
            row.append(spec.answer_audio)
        rows.append(row)

    t_in = max(len(r) for r in rows)
    input_arr = np.full((N_STREAMS, t_in), pad, dtype=np.int64)
    left_pad = []
    for s, row in enumerate(rows):
        lp = t_in - len(row)
        left_pad.append(lp)
        if row:
            input_arr[s, lp:] = row

    answer_positions: dict[int, int] = {}
    if text_out:
        answer_positions[0] = t_in - 1
    if audio_out:
        for layer in range(1, N_AUDIO_LAYERS + 1):
            answer_positions[layer] = t_in - 1

    # Continuous feature frames, aligned 1:1 with the audio token positions.
    feat_mask = np.zeros(t_in, dtype=bool)
    frames = None
    if audio_in and with_features:
        frames = np.zeros((t_in, feature_dim(codec)), dtype=np.float64)
        start = left_pad[1] + 1  # past the INPUT_AUDIO_MARK on layer 1
        vals = make_features(ex.signal_in, codec)
        frames[start : start + len(vals)] = vals
        feat_mask[start : start + len(vals)] = True

    # Undelayed targets: text row then audio rows, padded to a common width.
    target_rows: list[list[int]] = []
    has_text_tgt = text_out and not inference
    has_audio_tgt = audio_out and not inference
    trow = [spec.text_global(t) for t in ex.text_out] + [spec.eos_text] if has_text_tgt else []
    target_rows.append(trow)
    out_grid = encode_signal(ex.signal_out, codec) if has_audio_tgt else None
    for layer in range(1, N_AUDIO_LAYERS + 1):
        if has_audio_tgt:
            arow = [spec.audio_global(layer, int(t)) for t in out_grid.tokens[layer - 1]]
            arow.append(spec.eos_audio)
        else:
            arow = []
        target_rows.append(arow)

    t_out = max(len(r) for r in target_rows)
    target_arr = np.full((N_STREAMS, t_out), pad, dtype=np.int64)
    mask_arr = np.zeros((N_STREAMS, t_out), dtype=bool)
    for s, row in enumerate(target_rows):
        if row:
            target_arr[s, : len(row)] = row
            mask_arr[s, : len(row)] = True

    eff = pattern.with_text_advance(text_advance)
    target_ids = apply_delay(TokenGrid(target_arr, "global"), eff, pad)
    loss_mask = shift_rows(mask_arr, eff.offsets, False)

    return InputLayout(
        input_ids=TokenGrid(input_arr, "global"),
        feature_frames=frames,
        feature_mask=feat_mask,
        answer_positions=answer_positions,
        target_ids=target_ids,
        loss_mask=loss_mask,
        pattern=pattern,
        text_advance=text_advance,
    )


def validate_layout(layout: InputLayout, spec: VocabSpec) -> list[tuple[int, int, str]]:
    """Check InputLayout invariants; violations are data, not exceptions."""
    violations: list[tuple[int, int, str]] = []
    pad = spec.pad

    ids = layout.input_ids.tokens
    if ids.shape[0] != N_STREAMS:
        violations.append((-1, -1, f"input grid has {ids.shape[0]} streams, expected {N_STREAMS}"))
        return violations
    for s in range(N_STREAMS):
        for t in range(ids.shape[1]):
            tok = int(ids[s, t])
            try:
                role, layer, _ = spec.classify(tok)
            except Exception:
                violations.append((s, t, f"input ID {tok} outside the vocabulary"))
                continue
            if role is not Role.SPECIAL and layer != s:
                violations.append((s, t, f"input ID {tok} belongs to stream {layer}, not {s}"))

    eff = layout.effective_pattern
    tgt = layout.target_ids.tokens
    mask = layout.loss_mask
    if tgt.shape != mask.shape:
        violations.append((-1, -1, "target grid and loss mask shapes differ"))
        return violations
    t_payload = tgt.shape[1] - eff.max_offset
    for s in range(N_STREAMS):
        off = eff.offsets[s]
        for t in range(tgt.shape[1]):
            structural = not (off <= t < off + t_payload)
            if structural:
                if mask[s, t]:
                    violations.append((s, t, "loss mask true on a structurally padded cell"))
                if tgt[s, t] != pad:
                    violations.append((s, t, "non-pad target in a structurally padded cell"))
                continue
            if mask[s, t]:
                tok = int(tgt[s, t])
                try:
                    ok = spec.valid_for_stream(s, tok)
                except Exception:
                    ok = False
                if not ok:
                    violations.append((s, t, f"target ID {tok} invalid for stream {s}"))

    for s, pos in layout.answer_positions.items():
        want = spec.answer_text if s == 0 else spec.answer_audio
        if not (0 <= pos < ids.shape[1]) or ids[s, pos] != want:
            violations.append((s, pos, "answer marker missing at recorded position"))

    return violations
