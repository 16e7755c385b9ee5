"""Closed synthetic task grammar and the text-to-signal synthesis mapping.

"Speech" for any text is a fixed deterministic rendering: each text token
becomes 4 signal samples, sample value = token_id * B^4 + within-token
position. Audio is therefore a pure function of text, which makes audio
outputs exactly gradable.

The grammar has two question templates over abstract text tokens:
echo (answer the operand) and modular addition (answer (a+b) mod the value
count). Answers are deterministic, so every task kind has an exact oracle.
"""

from __future__ import annotations

import numpy as np

from .layout import Corpus, TaskKind, TrainingExample
from .toycodec import CodecConfig
from .vocab import VocabSpec

SAMPLES_PER_TOKEN = 4


class GrammarError(ValueError):
    pass


def synthesize(text_tokens, base: int) -> list[int]:
    """Render text tokens into the synthetic signal space."""
    out = []
    for tok in text_tokens:
        if not 0 <= tok < base**3:
            raise GrammarError(
                f"text token {tok} cannot be rendered at base {base} (needs < {base**3})"
            )
        for r in range(SAMPLES_PER_TOKEN):
            out.append(tok * base**4 + r)
    return out


class Grammar:
    """Token roles inside the text vocabulary: values, then two operators."""

    def __init__(self, spec: VocabSpec, codec: CodecConfig):
        if spec.text_size < 4:
            raise GrammarError(f"text vocabulary of {spec.text_size} too small for the grammar")
        if spec.text_size - 1 >= codec.base**3:
            raise GrammarError(
                f"text vocabulary of {spec.text_size} not renderable at base {codec.base}"
            )
        self.spec = spec
        self.codec = codec
        self.n_values = spec.text_size - 2
        self.op_echo = spec.text_size - 2
        self.op_add = spec.text_size - 1

    def answer_for(self, prompt: list[int]) -> list[int]:
        """The grammar's deterministic answer; raises on out-of-grammar prompts."""
        if len(prompt) == 2 and prompt[0] == self.op_echo and 0 <= prompt[1] < self.n_values:
            return [prompt[1]]
        if (
            len(prompt) == 3
            and prompt[0] == self.op_add
            and all(0 <= v < self.n_values for v in prompt[1:])
        ):
            return [(prompt[1] + prompt[2]) % self.n_values]
        raise GrammarError(f"prompt {prompt} is not in the grammar")

    def random_prompt(self, rng: np.random.Generator) -> list[int]:
        if rng.integers(2) == 0:
            return [self.op_echo, int(rng.integers(self.n_values))]
        return [self.op_add, int(rng.integers(self.n_values)), int(rng.integers(self.n_values))]

    def random_words(self, rng: np.random.Generator, max_len: int = 3) -> list[int]:
        n = int(rng.integers(1, max_len + 1))
        return [int(v) for v in rng.integers(self.n_values, size=n)]

    def all_prompts(self) -> list[list[int]]:
        prompts = [[self.op_echo, v] for v in range(self.n_values)]
        prompts += [
            [self.op_add, a, b]
            for a in range(self.n_values)
            for b in range(self.n_values)
        ]
        return prompts


def gen_data(spec: VocabSpec, codec: CodecConfig, count: int, seed: int) -> Corpus:
    """Deterministically generate a mixed corpus covering all five task kinds."""
    if count < 1:
        raise GrammarError(f"count must be >= 1, got {count}")
    g = Grammar(spec, codec)
    rng = np.random.default_rng(seed)
    kinds = list(TaskKind)
    examples = []
    for i in range(count):
        task = kinds[i % len(kinds)]
        if task is TaskKind.ASR:
            words = g.random_words(rng)
            ex = TrainingExample(task, signal_in=synthesize(words, codec.base), text_out=words)
        elif task is TaskKind.TTS:
            words = g.random_words(rng)
            ex = TrainingExample(task, text_in=words, signal_out=synthesize(words, codec.base))
        elif task is TaskKind.TEXT_QA:
            prompt = g.random_prompt(rng)
            ex = TrainingExample(task, text_in=prompt, text_out=g.answer_for(prompt))
        elif task is TaskKind.AUDIO_QA_TEXT_OUT:
            prompt = g.random_prompt(rng)
            ex = TrainingExample(
                task, signal_in=synthesize(prompt, codec.base), text_out=g.answer_for(prompt)
            )
        else:  # AUDIO_QA_FULL
            prompt = g.random_prompt(rng)
            answer = g.answer_for(prompt)
            ex = TrainingExample(
                task,
                signal_in=synthesize(prompt, codec.base),
                text_out=answer,
                signal_out=synthesize(answer, codec.base),
            )
        examples.append(ex)
    return Corpus(examples)
