"""Streaming text+audio token modeling with delayed parallel generation.

A desk-scale stack: a partitioned text/audio vocabulary, an invertible
7-layer residual toy codec, the text-first delay pattern, task layouts with
answer markers and loss masks, a tiny numpy transformer with hand-rolled
backprop and staged adapter training, and a streaming decode engine with
batch-parallel text swapping.
"""

from .vocab import N_AUDIO_LAYERS, N_STREAMS, Role, VocabError, VocabSpec, build_vocab
from .toycodec import (
    CodecConfig,
    CodecError,
    TokenGrid,
    decode_grid,
    encode_signal,
    flatten_grid,
    read_grid,
    unflatten,
    write_grid,
)
from .delay import DelayError, DelayPattern, apply_delay, first_emission_step, revert_delay
from .layout import (
    Corpus,
    InputLayout,
    LayoutError,
    TaskKind,
    TrainingExample,
    build_layout,
    validate_layout,
)
from .model import (
    ModelConfig,
    ModelError,
    Parameters,
    STAGE_PLANS,
    StagePlan,
    TrainSchedule,
    embed_fuse,
    forward,
    grad_check,
    init_parameters,
    load_checkpoint,
    nll_loss,
    save_checkpoint,
    train_stage,
)
from .engine import (
    DecodeConfig,
    DecodeReport,
    EngineError,
    StreamEvent,
    decode_batch_parallel,
    decode_parallel,
    decode_text_only,
    delayed_total_steps,
    flatten_total_steps,
    sample_step,
)
from .grammar import Grammar, GrammarError, gen_data, synthesize

__all__ = [name for name in dir() if not name.startswith("_")]
