"""Streaming autoregressive decoding over the 8 delayed parallel streams.

Three modes share one stepping core:

* parallel       - one member, text and audio heads sampled together (the
                   staggered text-first layout).
* text_only      - one member, audio heads forced to PAD; the reference for
                   batch-parallel text equivalence.
* batch_parallel - two members with the same input through one batched forward
                   pass: member A samples all 8 heads, member B only its text
                   head (audio forced to PAD). B's text token is sampled, A's
                   text sample is discarded, and B's token is written into A's
                   text position, so A's audio is genuinely conditioned on
                   text that is free of audio-feedback drift.

Events are pushed to the sink before the next step's computation begins.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .delay import DelayPattern, revert_delay
from .layout import InputLayout
from .model import (
    KVCache,
    ModelConfig,
    Parameters,
    N_STREAMS,
    _fuse_sequence,
    forward_prefill,
    forward_step,
    head_legal_mask,
    hidden_from_fused,
    step_logits,
)
from .toycodec import TokenGrid
from .vocab import Role


class EngineError(ValueError):
    pass


@dataclass
class DecodeConfig:
    mode: str = "parallel"  # "parallel" | "batch_parallel" | "text_only"
    max_steps: int = 64
    top_k: int | None = None  # None = greedy
    temperature: float = 1.0
    text_advance: int = 0
    pattern: DelayPattern = field(default_factory=DelayPattern)
    seed: int = 0
    use_cache: bool = True  # False = re-evaluate from scratch each step (oracle)

    def __post_init__(self):
        if self.mode not in ("parallel", "batch_parallel", "text_only"):
            raise EngineError(f"unknown decode mode {self.mode!r}")
        floor = self.pattern.with_text_advance(self.text_advance).max_offset + 1
        if self.max_steps < floor:
            raise EngineError(
                f"max_steps {self.max_steps} below the minimum {floor} for this pattern"
            )


@dataclass
class StreamEvent:
    kind: str  # "TEXT_TOKEN" | "AUDIO_COLUMN" | "DONE"
    step: int
    payload: object = None
    undelayed_step: int | None = None


@dataclass
class DecodeReport:
    first_text_step: int | None
    first_audio_column_step: int | None
    n_steps: int
    truncated: bool
    wall_s: float

    @property
    def wall_per_step(self) -> float:
        return self.wall_s / max(self.n_steps, 1)


def sample_step(logits, cfg: DecodeConfig, forcing, rng) -> np.ndarray:
    """Sample one token per head from (8, V) masked logits.

    forcing[s] pins stream s to a token ID, bypassing its logits. Greedy is
    argmax; top-k renormalizes the temperature-scaled top k.
    """
    out = np.empty(N_STREAMS, dtype=np.int64)
    for s in range(N_STREAMS):
        if forcing[s] is not None:
            out[s] = forcing[s]
            continue
        row = logits[s]
        if not np.isfinite(row).any():
            raise EngineError(f"all logits masked on stream {s}")
        if cfg.top_k is None:
            out[s] = int(row.argmax())
        else:
            k = min(cfg.top_k, int(np.isfinite(row).sum()))
            top = np.argpartition(-row, k - 1)[:k]
            scaled = row[top] / max(cfg.temperature, 1e-8)
            scaled -= scaled.max()
            p = np.exp(scaled)
            p /= p.sum()
            out[s] = int(top[rng.choice(k, p=p)])
    return out


def text_only_variant(layout: InputLayout) -> InputLayout:
    """Member-B layout: the identical input; only head forcing differs.

    Keeping the input byte-identical to member A means B's first prediction
    is exactly the computation the model was trained on; the text-only
    behavior comes entirely from forcing B's audio heads to PAD.
    """
    return layout


class _Member:
    """Per-batch-member decode state: emitted rows and (optionally) a cache."""

    def __init__(self, layout: InputLayout):
        self.layout = layout
        self.rows: list[list[int]] = [[] for _ in range(N_STREAMS)]


def _fused_inputs(params, cfg, layout):
    return _fuse_sequence(
        params, cfg, layout.input_ids.tokens, layout.feature_frames, layout.feature_mask
    )[0]


def _fuse_column(params, cfg, ids, pos):
    """Fuse one emitted column (B, 8) at absolute position pos -> (B, d)."""
    total = np.zeros((ids.shape[0], cfg.d_model))
    for s in range(N_STREAMS):
        total += params[f"emb_{s}"][ids[:, s]]
    if cfg.fusion == "mean":
        total /= N_STREAMS
    return total + params["pos_emb"][pos]


def _decode(params, cfg, layouts, dcfg, sink):
    """Shared stepping core. layouts: [A] or [A, B] (B drives the text stream)."""
    vocab = cfg.vocab
    pad, eos_text, eos_audio = vocab.pad, vocab.eos_text, vocab.eos_audio
    eff = dcfg.pattern.with_text_advance(dcfg.text_advance)
    max_off = eff.max_offset
    audio_max_off = max(eff.offsets[1:]) if len(eff.offsets) > 1 else 0
    legal = head_legal_mask(vocab)
    rng = np.random.default_rng(dcfg.seed)
    batch = len(layouts)
    text_member = batch - 1  # B when batched, A otherwise
    members = [_Member(lay) for lay in layouts]
    t_in = layouts[0].input_ids.n_steps

    emit = sink if sink is not None else (lambda ev: None)
    started = time.perf_counter()

    x0 = np.concatenate([_fused_inputs(params, cfg, lay) for lay in layouts], axis=0)
    cache = KVCache(cfg, batch)
    if dcfg.use_cache:
        h_last = forward_prefill(params, cfg, x0, cache)[:, -1, :]
    else:
        h_last = hidden_from_fused(params, cfg, x0)[:, -1, :]

    text_finished = False
    text_end = None  # undelayed text row length incl. EOS
    audio_len = 0 if dcfg.mode == "text_only" else None  # incl. the EOS column
    first_text = None
    first_audio = None
    truncated = False
    stop_at = None
    step = 0
    while True:
        logits = step_logits(params, cfg, h_last, legal)
        # member carrying the text stream
        text_forcing: list[int | None] = [None] * N_STREAMS
        if text_finished:
            text_forcing[0] = pad
        for s in range(1, N_STREAMS):
            text_forcing[s] = pad  # text member never emits audio
        audio_forcing: list[int | None] = [None] * N_STREAMS
        for s in range(1, N_STREAMS):
            if step < eff.offsets[s]:
                audio_forcing[s] = pad
            elif audio_len is not None and step >= eff.offsets[s] + audio_len:
                audio_forcing[s] = pad

        if batch == 2:
            ids_b = sample_step(logits[1], dcfg, text_forcing, rng)
            audio_forcing[0] = int(ids_b[0])  # A's own text sample is discarded
            ids_a = sample_step(logits[0], dcfg, audio_forcing, rng)
            columns = [ids_a, ids_b]
            text_token = int(ids_b[0])
            audio_col_src = ids_a
        else:
            merged = list(audio_forcing)
            merged[0] = text_forcing[0]
            if dcfg.mode == "text_only":
                for s in range(1, N_STREAMS):
                    merged[s] = pad
            ids_a = sample_step(logits[0], dcfg, merged, rng)
            columns = [ids_a]
            text_token = int(ids_a[0])
            audio_col_src = ids_a

        for m, col in zip(members, columns):
            for s in range(N_STREAMS):
                m.rows[s].append(int(col[s]))

        if not text_finished and text_token == eos_text:
            text_finished = True
            text_end = step + 1
        if audio_len is None and int(audio_col_src[1]) == eos_audio:
            audio_len = step - eff.offsets[1] + 1

        # events for this step, before the next step's computation
        if text_token != pad:
            if first_text is None:
                first_text = step
            emit(StreamEvent("TEXT_TOKEN", step, text_token))
        t_col = step - audio_max_off
        if t_col >= 0:
            col = [members[0].rows[s][t_col + eff.offsets[s]] for s in range(1, N_STREAMS)]
            if all(vocab.classify(tok)[0] is Role.AUDIO for tok in col):
                if first_audio is None:
                    first_audio = step
                emit(StreamEvent("AUDIO_COLUMN", step, col, undelayed_step=t_col))

        step += 1
        if text_finished and audio_len is not None and stop_at is None:
            stop_at = max(text_end, audio_len) + max_off
        if stop_at is not None and step >= stop_at:
            break
        if step >= dcfg.max_steps:
            truncated = True  # stop_at unreached: the final columns never flushed
            break

        prev = np.stack([np.array([m.rows[s][-1] for s in range(N_STREAMS)])
                         for m in members])
        if dcfg.use_cache:
            x_t = _fuse_column(params, cfg, prev, t_in + step - 1)
            h_last = forward_step(params, cfg, cache, x_t)
        else:
            emitted = np.stack(
                [np.array(m.rows, dtype=np.int64) for m in members]
            )  # (B, 8, step)
            xs = []
            for bi, lay in enumerate(layouts):
                cols = _fuse_column_seq(params, cfg, emitted[bi], t_in)
                xs.append(np.concatenate([_fused_inputs(params, cfg, lay), cols], axis=1))
            h_last = hidden_from_fused(params, cfg, np.concatenate(xs, axis=0))[:, -1, :]

    wall = time.perf_counter() - started

    # assemble the raw delayed grid: text stream from the text member,
    # audio streams from member A
    raw = np.array(members[0].rows, dtype=np.int64)
    raw[0] = np.array(members[text_member].rows[0], dtype=np.int64)
    n_steps = raw.shape[1]
    t_payload = max(0, n_steps - max_off)
    if truncated:
        for s in range(N_STREAMS):
            off = eff.offsets[s]
            raw[s, :off] = pad
            raw[s, off + t_payload :] = pad
    grid = revert_delay(TokenGrid(raw, "global"), eff, pad)
    report = DecodeReport(
        first_text_step=first_text,
        first_audio_column_step=first_audio,
        n_steps=n_steps,
        truncated=truncated,
        wall_s=wall,
    )
    emit(StreamEvent("DONE", n_steps, None))
    return grid, report


def _fuse_column_seq(params, cfg, ids, t_in):
    """Fuse emitted columns (8, T) at positions t_in .. t_in+T-1 -> (1, T, d)."""
    t = ids.shape[1]
    total = np.zeros((t, cfg.d_model))
    for s in range(N_STREAMS):
        total += params[f"emb_{s}"][ids[s]]
    if cfg.fusion == "mean":
        total /= N_STREAMS
    return (total + params["pos_emb"][t_in : t_in + t])[None]


def decode_parallel(params, cfg, layout, dcfg: DecodeConfig, sink=None):
    """Text-first delayed parallel decoding of one member."""
    if dcfg.mode not in ("parallel", "text_only"):
        raise EngineError(f"decode_parallel cannot run mode {dcfg.mode!r}")
    return _decode(params, cfg, [layout], dcfg, sink)


def decode_text_only(params, cfg, layout, dcfg: DecodeConfig, sink=None):
    """Text stream only; audio heads forced to PAD throughout."""
    return _decode(params, cfg, [text_only_variant(layout)],
                   replace(dcfg, mode="text_only"), sink)


def decode_batch_parallel(params, cfg, layout, dcfg: DecodeConfig, sink=None):
    """Batch of two copies of the input; the text-only member drives the text stream."""
    if dcfg.mode != "batch_parallel":
        raise EngineError(f"decode_batch_parallel requires mode 'batch_parallel', got {dcfg.mode!r}")
    member_b = text_only_variant(layout)
    return _decode(params, cfg, [layout, member_b], dcfg, sink)


# -- analytic step counts -----------------------------------------------------

def flatten_total_steps(n_audio_steps: int, text_len: int) -> int:
    """Steps to emit the same content with step-major flattened audio tokens."""
    return 7 * n_audio_steps + text_len


def delayed_total_steps(text_len: int, n_audio_steps: int,
                        pattern: DelayPattern, text_advance: int) -> int:
    """Steps the delayed parallel layout needs for the same content.

    Lengths count undelayed rows including their EOS entries.
    """
    eff = pattern.with_text_advance(text_advance)
    return max(text_len, n_audio_steps) + eff.max_offset
