"""Operator surface: corpus generation, staged training, decoding, bench, inspect.

Config files are flat key=value text with section prefixes (model., decode.,
train., data.); see config.example.txt at the repository root. All randomness
flows from seeds; a run is reproducible from the config plus corpus files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .delay import DelayPattern
from .engine import (
    DecodeConfig,
    StreamEvent,
    decode_batch_parallel,
    decode_parallel,
    decode_text_only,
    delayed_total_steps,
    flatten_total_steps,
)
from .grammar import SAMPLES_PER_TOKEN, Grammar, gen_data, synthesize
from .layout import Corpus, TaskKind, TrainingExample, build_layout
from .model import (
    ModelConfig,
    Parameters,
    STAGE_PLANS,
    TrainSchedule,
    group_of,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    train_stage,
)
from .toycodec import (
    CodecConfig,
    GRID_MAGIC,
    TokenGrid,
    decode_grid,
    read_grid,
    write_grid,
)
from .model import CKPT_MAGIC
from .vocab import N_AUDIO_LAYERS, N_STREAMS, build_vocab


class CliError(ValueError):
    pass


# -- run configuration --------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


@dataclass
class RunConfig:
    text_size: int = 16
    audio_base: int = 8
    d_model: int = 128
    n_trunk_blocks: int = 4
    n_extension_blocks: int = 2
    n_attn_heads: int = 4
    max_seq_len: int = 160
    fusion: str = "mean"
    model_seed: int = 0
    pattern: tuple[int, ...] = tuple(range(N_STREAMS))

    decode_mode: str = "parallel"
    max_steps: int = 64
    top_k: int | None = None
    temperature: float = 1.0
    text_advance: int = 0
    decode_seed: int = 0

    epochs: dict[int, int] = field(default_factory=lambda: {1: 3, 2: 86, 3: 14})
    batch_size: int = 16
    lr_max: float = 1e-2
    lr_min: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "sgd"
    train_seed: int = 0

    data_count: int = 2000
    data_seed: int = 0

    @staticmethod
    def from_file(path) -> "RunConfig":
        kv = parse_config_file(path)
        rc = RunConfig()
        setters = {
            "model.text_size": ("text_size", int),
            "model.audio_base": ("audio_base", int),
            "model.d_model": ("d_model", int),
            "model.n_trunk_blocks": ("n_trunk_blocks", int),
            "model.n_extension_blocks": ("n_extension_blocks", int),
            "model.n_attn_heads": ("n_attn_heads", int),
            "model.max_seq_len": ("max_seq_len", int),
            "model.fusion": ("fusion", str),
            "model.seed": ("model_seed", int),
            "decode.mode": ("decode_mode", str),
            "decode.max_steps": ("max_steps", int),
            "decode.temperature": ("temperature", float),
            "decode.text_advance": ("text_advance", int),
            "decode.seed": ("decode_seed", int),
            "train.batch_size": ("batch_size", int),
            "train.lr_max": ("lr_max", float),
            "train.lr_min": ("lr_min", float),
            "train.momentum": ("momentum", float),
            "train.optimizer": ("optimizer", str),
            "train.seed": ("train_seed", int),
            "data.count": ("data_count", int),
            "data.seed": ("data_seed", int),
        }
        for key, val in kv.items():
            if key in setters:
                attr, conv = setters[key]
                setattr(rc, attr, conv(val))
            elif key == "decode.top_k":
                rc.top_k = None if val.lower() in ("none", "") else int(val)
            elif key == "model.pattern":
                rc.pattern = tuple(int(v) for v in val.split(","))
            elif key.startswith("train.epochs_stage"):
                rc.epochs[int(key.removeprefix("train.epochs_stage"))] = int(val)
            else:
                raise CliError(f"unknown config key {key!r}")
        return rc

    def model_config(self) -> ModelConfig:
        vocab = build_vocab(self.text_size, [self.audio_base] * N_AUDIO_LAYERS)
        return ModelConfig(
            vocab=vocab,
            pattern=DelayPattern(self.pattern),
            d_model=self.d_model,
            n_trunk_blocks=self.n_trunk_blocks,
            n_extension_blocks=self.n_extension_blocks,
            n_attn_heads=self.n_attn_heads,
            max_seq_len=self.max_seq_len,
            fusion=self.fusion,
            seed=self.model_seed,
        )

    def codec(self) -> CodecConfig:
        return CodecConfig(base=self.audio_base)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            mode=self.decode_mode,
            max_steps=self.max_steps,
            top_k=self.top_k,
            temperature=self.temperature,
            text_advance=self.text_advance,
            pattern=DelayPattern(self.pattern),
            seed=self.decode_seed,
        )

    def schedule(self, stage: int) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs[stage],
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            momentum=self.momentum,
            optimizer=self.optimizer,
            text_advance=self.text_advance,
            seed=self.train_seed + stage,
        )


def _load_run_config(args) -> RunConfig:
    return RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = _load_run_config(args)
    if args.count is not None:
        rc.data_count = args.count
    if args.seed is not None:
        rc.data_seed = args.seed
    mc = rc.model_config()
    corpus = gen_data(mc.vocab, rc.codec(), rc.data_count, rc.data_seed)
    corpus.save(args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise CliError(f"corpus file {corpus_path} does not exist")
    corpus = Corpus.load(corpus_path)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mc = rc.model_config()
    codec = rc.codec()

    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    all_metrics: list[dict] = []
    if stages[0] == 1:
        params = init_parameters(mc)
    else:
        prev = outdir / f"stage{stages[0] - 1}.ckpt"
        if not prev.exists():
            raise CliError(f"missing prior-stage checkpoint {prev}")
        params, mc = load_checkpoint(prev)
    for stage in stages:
        plan = STAGE_PLANS[stage]
        started = time.perf_counter()
        params, metrics = train_stage(params, mc, plan, corpus, rc.schedule(stage), codec)
        elapsed = time.perf_counter() - started
        save_checkpoint(outdir / f"stage{stage}.ckpt", params, mc)
        all_metrics.extend(metrics)
        print(
            f"stage {stage}: {len(metrics)} epochs, final loss {metrics[-1]['loss']:.4f}, "
            f"token accuracy {metrics[-1]['token_accuracy']:.3f} ({elapsed:.1f}s)"
        )
    metrics_path = outdir / "metrics.json"
    existing = []
    if args.stage != "all" and metrics_path.exists():
        existing = json.loads(metrics_path.read_text())
    metrics_path.write_text(json.dumps(existing + all_metrics, indent=2))
    print(f"wrote {metrics_path}")
    return 0


def example_for_prompt(task: TaskKind, prompt: list[int], base: int) -> TrainingExample:
    """Wrap a raw prompt in an inference-side example for the given task."""
    if task in (TaskKind.TEXT_QA, TaskKind.TTS):
        return TrainingExample(task, text_in=prompt)
    return TrainingExample(task, signal_in=synthesize(prompt, base))


def grid_text_row(grid: TokenGrid, mc: ModelConfig) -> list[int]:
    """Local text tokens of an undelayed result grid, up to (not incl.) EOS."""
    vocab = mc.vocab
    out = []
    for tok in grid.tokens[0]:
        if tok == vocab.eos_text or tok == vocab.pad:
            break
        out.append(int(tok))
    return out


def grid_audio_local(grid: TokenGrid, mc: ModelConfig) -> TokenGrid:
    """Audio rows of an undelayed result grid as local indices, EOS stripped."""
    vocab = mc.vocab
    n = grid.n_steps
    for t in range(grid.n_steps):
        if grid.tokens[1, t] in (vocab.eos_audio, vocab.pad):
            n = t
            break
    local = np.empty((N_AUDIO_LAYERS, n), dtype=np.int64)
    for layer in range(1, N_AUDIO_LAYERS + 1):
        for t in range(n):
            tok = int(grid.tokens[layer, t])
            _, lay, local_idx = vocab.classify(tok)
            if lay != layer:
                local_idx = 0  # non-audio stray; render as silence
            local[layer - 1, t] = local_idx
    return TokenGrid(local, "local")


def cmd_decode(args) -> int:
    params, mc = load_checkpoint(args.checkpoint)
    rc = _load_run_config(args)
    dcfg = rc.decode_config()
    dcfg = replace(
        dcfg,
        mode={"parallel": "parallel", "batch": "batch_parallel"}[args.mode],
        max_steps=args.max_steps,
        top_k=args.top_k,
        temperature=args.temp,
        text_advance=args.text_advance,
        seed=args.seed,
        pattern=mc.pattern,
    )
    task = TaskKind(args.task)
    prompt = [int(v) for v in args.prompt.split()]
    base = mc.vocab.audio_layer_sizes[0]
    ex = example_for_prompt(task, prompt, base)
    layout = build_layout(ex, mc.vocab, mc.pattern, dcfg.text_advance,
                          CodecConfig(base=base), inference=True)

    def sink(ev: StreamEvent):
        if ev.kind == "TEXT_TOKEN":
            print(f"text[{ev.step}] {ev.payload}", flush=True)

    if dcfg.mode == "batch_parallel":
        grid, report = decode_batch_parallel(params, mc, layout, dcfg, sink)
    else:
        grid, report = decode_parallel(params, mc, layout, dcfg, sink)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid_path = outdir / "decode_grid.omng"
    write_grid(grid_path, grid)
    audio = grid_audio_local(grid, mc)
    samples = decode_grid(audio, CodecConfig(base=base))
    dump_path = outdir / "decode_signal.txt"
    with open(dump_path, "w") as f:
        for t, v in enumerate(samples):
            f.write(f"{t} {int(v)}\n")
    meta = {
        "text_tokens": grid_text_row(grid, mc),
        "first_text_step": report.first_text_step,
        "first_audio_column_step": report.first_audio_column_step,
        "n_steps": report.n_steps,
        "truncated": report.truncated,
    }
    (outdir / "decode_meta.json").write_text(json.dumps(meta, indent=2))
    print(f"answer: {' '.join(map(str, meta['text_tokens']))}")
    print(f"wrote {grid_path} and {dump_path} (truncated={report.truncated})")
    return 0


def cmd_bench(args) -> int:
    params, mc = load_checkpoint(args.checkpoint)
    rc = _load_run_config(args)
    base = mc.vocab.audio_layer_sizes[0]
    codec = CodecConfig(base=base)
    g = Grammar(mc.vocab, codec)
    rng = np.random.default_rng(args.seed)
    prompts = [g.random_prompt(rng) for _ in range(args.prompts)]
    n = args.text_advance
    report: dict = {"text_advance": n, "modes": {}}
    for mode, fn in (("parallel", decode_parallel), ("batch_parallel", decode_batch_parallel)):
        dcfg = DecodeConfig(mode=mode, max_steps=rc.max_steps, text_advance=n,
                            pattern=mc.pattern, seed=args.seed)
        runs = []
        for prompt in prompts:
            ex = example_for_prompt(TaskKind.AUDIO_QA_FULL, prompt, base)
            layout = build_layout(ex, mc.vocab, mc.pattern, n, codec, inference=True)
            grid, rep = fn(params, mc, layout, dcfg)
            text_len = len(grid_text_row(grid, mc)) + 1  # incl. EOS
            audio_steps = grid_audio_local(grid, mc).n_steps
            runs.append(
                {
                    "first_text_step": rep.first_text_step,
                    "first_audio_column_step": rep.first_audio_column_step,
                    "n_steps": rep.n_steps,
                    "truncated": rep.truncated,
                    "wall_per_step_s": rep.wall_per_step,
                    "delayed_steps_analytic": delayed_total_steps(
                        text_len, audio_steps + 1, mc.pattern, n
                    ),
                    "flattened_steps_analytic": flatten_total_steps(audio_steps + 1, text_len),
                }
            )
        report["modes"][mode] = runs
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2))
    print(f"bench report -> {out}")
    for mode, runs in report["modes"].items():
        avg = sum(r["wall_per_step_s"] for r in runs) / len(runs)
        firsts = sorted(
            {r["first_audio_column_step"] for r in runs} - {None}
        ) or ["none"]
        print(f"  {mode}: avg wall/step {avg * 1e3:.2f} ms, first audio column step(s) {firsts}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise CliError(f"{path} does not exist")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == GRID_MAGIC:
        grid = read_grid(path)
        print(f"token grid: n_layers={grid.n_layers} n_steps={grid.n_steps} "
              f"id_space={grid.id_space}")
        for layer in range(grid.n_layers):
            vals, counts = np.unique(grid.tokens[layer], return_counts=True)
            hist = " ".join(f"{int(v)}:{int(c)}" for v, c in zip(vals, counts))
            print(f"  layer {layer}: {hist}")
        return 0
    if head == CKPT_MAGIC:
        params, mc = load_checkpoint(path)
        print(f"checkpoint: d_model={mc.d_model} trunk={mc.n_trunk_blocks} "
              f"extension={mc.n_extension_blocks} heads={mc.n_attn_heads} "
              f"vocab_total={mc.vocab.total_size} pattern={list(mc.pattern.offsets)}")
        by_group: dict[str, int] = {}
        for name in params.names():
            by_group[group_of(name)] = by_group.get(group_of(name), 0) + params[name].size
        for grp in sorted(by_group):
            print(f"  group {grp}: {by_group[grp]} scalars")
        return 0
    # maybe a JSONL corpus
    try:
        corpus = Corpus.load(path)
        if len(corpus) == 0:
            raise ValueError("no examples")
        counts: dict[str, int] = {}
        for ex in corpus.examples:
            counts[ex.task.value] = counts.get(ex.task.value, 0) + 1
        print(f"corpus: {len(corpus)} examples")
        for task in sorted(counts):
            print(f"  {task}: {counts[task]}")
        return 0
    except CliError:
        raise
    except Exception:
        raise CliError(f"unknown magic {head!r}; not a grid, checkpoint, or corpus")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octostream")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic JSONL corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--corpus", required=True)
    t.add_argument("--outdir", required=True)
    t.add_argument("--stage", default="all", choices=["all", "1", "2", "3"])
    t.add_argument("--config", default=None)
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("decode", help="stream a decode of one prompt")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--task", default="audio_qa_full",
                   choices=[k.value for k in TaskKind])
    d.add_argument("--prompt", required=True, help="space-separated text token IDs")
    d.add_argument("--mode", default="parallel", choices=["parallel", "batch"])
    d.add_argument("--top-k", dest="top_k", type=int, default=None,
                   help="sample from the top k (default: greedy)")
    d.add_argument("--temp", type=float, default=1.0)
    d.add_argument("--text-advance", dest="text_advance", type=int, default=0)
    d.add_argument("--max-steps", dest="max_steps", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--outdir", default=".")
    d.add_argument("--config", default=None)
    d.set_defaults(fn=cmd_decode)

    b = sub.add_parser("bench", help="latency and step-count report")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", default="bench_report.json")
    b.add_argument("--prompts", type=int, default=5)
    b.add_argument("--text-advance", dest="text_advance", type=int, default=0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--config", default=None)
    b.set_defaults(fn=cmd_bench)

    i = sub.add_parser("inspect", help="dump headers and shapes of an artifact file")
    i.add_argument("path")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
