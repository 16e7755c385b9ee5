"""Tiny decoder-only transformer over the 8 fused token streams.

Eight per-stream embedding tables are fused by sum-and-average (an input
adapter projects continuous feature frames in as a ninth summand where
present), a shared causal trunk plus extension blocks produce hidden states,
and eight output heads emit per-stream logits restricted to each stream's
legal IDs. Backprop is hand-rolled over a minimal dense kernel set so the
finite-difference gradient check is a meaningful correctness gate; no
external autodiff is involved. All math is float64 and single-threaded by
contract, so training is bit-reproducible.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .delay import DelayPattern
from .layout import Corpus, InputLayout, TaskKind, TrainingExample, build_layout
from .toycodec import CodecConfig, TokenGrid
from .vocab import N_STREAMS, VocabSpec, build_vocab

CKPT_MAGIC = b"OMNP"
CKPT_VERSION = 1
LN_EPS = 1e-5

PARAM_GROUPS = ("trunk", "input_adapter", "output_extension", "embeddings", "heads")


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: VocabSpec
    pattern: DelayPattern = field(default_factory=DelayPattern)
    d_model: int = 128
    n_trunk_blocks: int = 4
    n_extension_blocks: int = 2
    n_attn_heads: int = 4
    max_seq_len: int = 160
    feature_dim: int = 8
    fusion: str = "mean"  # "mean" | "sum"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_attn_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by {self.n_attn_heads} attention heads"
            )
        if self.fusion not in ("mean", "sum"):
            raise ModelError(f"unknown fusion mode {self.fusion!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_attn_heads

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab.to_dict(),
            "pattern": list(self.pattern.offsets),
            "d_model": self.d_model,
            "n_trunk_blocks": self.n_trunk_blocks,
            "n_extension_blocks": self.n_extension_blocks,
            "n_attn_heads": self.n_attn_heads,
            "max_seq_len": self.max_seq_len,
            "feature_dim": self.feature_dim,
            "fusion": self.fusion,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            vocab=VocabSpec.from_dict(d["vocab"]),
            pattern=DelayPattern(tuple(d["pattern"])),
            d_model=d["d_model"],
            n_trunk_blocks=d["n_trunk_blocks"],
            n_extension_blocks=d["n_extension_blocks"],
            n_attn_heads=d["n_attn_heads"],
            max_seq_len=d["max_seq_len"],
            feature_dim=d["feature_dim"],
            fusion=d["fusion"],
            seed=d["seed"],
        )


def group_of(name: str) -> str:
    """Parameter group membership, derived from the parameter name."""
    if name.startswith(("emb_", "pos_emb")):
        return "embeddings"
    if name.startswith("adapter_"):
        return "input_adapter"
    if name.startswith("trunk_"):
        return "trunk"
    if name.startswith(("ext_", "ln_f")):
        return "output_extension"
    if name.startswith("head_"):
        return "heads"
    raise ModelError(f"parameter {name!r} belongs to no group")


class Parameters:
    """Named dense float64 arrays, partitioned into freezable groups."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def names_in_group(self, group: str) -> list[str]:
        return [n for n in self.names() if group_of(n) == group]

    def copy(self) -> "Parameters":
        return Parameters({n: a.copy() for n, a in self.arrays.items()})

    def n_scalars(self) -> int:
        return sum(a.size for a in self.arrays.values())


def _block_names(prefix: str) -> list[str]:
    return [
        f"{prefix}ln1_g", f"{prefix}ln1_b",
        f"{prefix}wq", f"{prefix}bq", f"{prefix}wk", f"{prefix}bk",
        f"{prefix}wv", f"{prefix}bv", f"{prefix}wo", f"{prefix}bo",
        f"{prefix}ln2_g", f"{prefix}ln2_b",
        f"{prefix}w1", f"{prefix}b1", f"{prefix}w2", f"{prefix}b2",
    ]


def init_parameters(cfg: ModelConfig, rng: np.random.Generator | None = None) -> Parameters:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    d, v = cfg.d_model, cfg.vocab.total_size
    # 1/sqrt(d) keeps attention logits and residual updates O(1) at init;
    # smaller scales leave momentum SGD unable to sharpen attention.
    scale = d**-0.5
    arrays: dict[str, np.ndarray] = {}

    def w(shape):
        return rng.normal(0.0, scale, size=shape).astype(np.float64)

    for s in range(N_STREAMS):
        arrays[f"emb_{s}"] = w((v, d))
    arrays["pos_emb"] = w((cfg.max_seq_len, d))

    arrays["adapter_w1"] = w((cfg.feature_dim, d))
    arrays["adapter_b1"] = np.zeros(d)
    arrays["adapter_w2"] = w((d, d))
    arrays["adapter_b2"] = np.zeros(d)

    def block(prefix):
        arrays[f"{prefix}ln1_g"] = np.ones(d)
        arrays[f"{prefix}ln1_b"] = np.zeros(d)
        for nm in ("wq", "wk", "wv", "wo"):
            arrays[f"{prefix}{nm}"] = w((d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            arrays[f"{prefix}{nm}"] = np.zeros(d)
        arrays[f"{prefix}ln2_g"] = np.ones(d)
        arrays[f"{prefix}ln2_b"] = np.zeros(d)
        arrays[f"{prefix}w1"] = w((d, 4 * d))
        arrays[f"{prefix}b1"] = np.zeros(4 * d)
        arrays[f"{prefix}w2"] = w((4 * d, d))
        arrays[f"{prefix}b2"] = np.zeros(d)

    for i in range(cfg.n_trunk_blocks):
        block(f"trunk_{i}_")
    for i in range(cfg.n_extension_blocks):
        block(f"ext_{i}_")

    arrays["ln_f_g"] = np.ones(d)
    arrays["ln_f_b"] = np.zeros(d)

    for s in range(N_STREAMS):
        arrays[f"head_{s}_w"] = w((d, v))
        arrays[f"head_{s}_b"] = np.zeros(v)
    return Parameters(arrays)


def head_legal_mask(vocab: VocabSpec) -> np.ndarray:
    """(8, V) bool: which global IDs each generation head may emit."""
    mask = np.zeros((N_STREAMS, vocab.total_size), dtype=bool)
    for s in range(N_STREAMS):
        mask[s, vocab.legal_ids_for_stream(s)] = True
    return mask


# -- kernels ------------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu(u):
    return 0.5 * u * (1.0 + erf(u / math.sqrt(2.0)))


def _gelu_grad(u):
    phi = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(u / math.sqrt(2.0))) + u * phi


def _softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _block_fwd(p: Parameters, prefix: str, cfg: ModelConfig, x):
    """One pre-LN transformer block on (B, T, d); returns output and cache."""
    h1, ln1c = _ln_fwd(x, p[f"{prefix}ln1_g"], p[f"{prefix}ln1_b"])
    q = _split_heads(h1 @ p[f"{prefix}wq"] + p[f"{prefix}bq"], cfg.n_attn_heads)
    k = _split_heads(h1 @ p[f"{prefix}wk"] + p[f"{prefix}bk"], cfg.n_attn_heads)
    v = _split_heads(h1 @ p[f"{prefix}wv"] + p[f"{prefix}bv"], cfg.n_attn_heads)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    t = x.shape[1]
    causal = np.triu(np.full((t, t), -np.inf), k=1)
    scores = scores + causal
    attn = _softmax(scores)
    ctx = _merge_heads(attn @ v)
    o = ctx @ p[f"{prefix}wo"] + p[f"{prefix}bo"]
    x1 = x + o
    h2, ln2c = _ln_fwd(x1, p[f"{prefix}ln2_g"], p[f"{prefix}ln2_b"])
    u = h2 @ p[f"{prefix}w1"] + p[f"{prefix}b1"]
    a = _gelu(u)
    m = a @ p[f"{prefix}w2"] + p[f"{prefix}b2"]
    out = x1 + m
    cache = (x, h1, ln1c, q, k, v, attn, ctx, x1, h2, ln2c, u, a, scale)
    return out, cache


def _block_bwd(p: Parameters, prefix: str, cfg: ModelConfig, dout, cache, grads):
    x, h1, ln1c, q, k, v, attn, ctx, x1, h2, ln2c, u, a, scale = cache

    def acc(name, g):
        grads[name] = grads.get(name, 0) + g

    # MLP branch
    dm = dout

    def flat(z):
        return z.reshape(-1, z.shape[-1])

    acc(f"{prefix}w2", flat(a).T @ flat(dm))
    acc(f"{prefix}b2", dm.sum(axis=(0, 1)))
    da = dm @ p[f"{prefix}w2"].T
    du = da * _gelu_grad(u)
    acc(f"{prefix}w1", flat(h2).T @ flat(du))
    acc(f"{prefix}b1", du.sum(axis=(0, 1)))
    dh2 = du @ p[f"{prefix}w1"].T
    dx1_ln, dg2, db2 = _ln_bwd(dh2, p[f"{prefix}ln2_g"], ln2c)
    acc(f"{prefix}ln2_g", dg2)
    acc(f"{prefix}ln2_b", db2)
    dx1 = dout + dx1_ln

    # attention branch
    do = dx1
    acc(f"{prefix}wo", flat(ctx).T @ flat(do))
    acc(f"{prefix}bo", do.sum(axis=(0, 1)))
    dctx = _split_heads(do @ p[f"{prefix}wo"].T, cfg.n_attn_heads)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
    dqf, dkf, dvf = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dh1 = np.zeros_like(h1)
    for nm, dz, z in (("wq", dqf, None), ("wk", dkf, None), ("wv", dvf, None)):
        acc(f"{prefix}{nm}", flat(h1).T @ flat(dz))
        acc(f"{prefix}b{nm[1]}", dz.sum(axis=(0, 1)))
        dh1 += dz @ p[f"{prefix}{nm}"].T
    dx_ln, dg1, db1 = _ln_bwd(dh1, p[f"{prefix}ln1_g"], ln1c)
    acc(f"{prefix}ln1_g", dg1)
    acc(f"{prefix}ln1_b", db1)
    return dx1 + dx_ln


def _block_prefixes(cfg: ModelConfig) -> list[str]:
    return [f"trunk_{i}_" for i in range(cfg.n_trunk_blocks)] + [
        f"ext_{i}_" for i in range(cfg.n_extension_blocks)
    ]


# -- fusion -------------------------------------------------------------------

def embed_fuse(
    params: Parameters,
    cfg: ModelConfig,
    ids_at_step,
    feature=None,
) -> np.ndarray:
    """Fuse one column of 8 token IDs (plus an optional feature frame).

    Mean of the 8 per-stream embedding lookups; a present feature frame is
    projected by the input adapter and joins as a ninth summand before the
    average. With fusion="sum" no division happens.
    """
    ids = np.asarray(ids_at_step, dtype=np.int64)
    if ids.shape != (N_STREAMS,):
        raise ModelError(f"expected {N_STREAMS} token IDs, got shape {ids.shape}")
    for s in range(N_STREAMS):
        if not 0 <= ids[s] < cfg.vocab.total_size:
            raise ModelError(f"token ID {ids[s]} on stream {s} outside the vocabulary")
        if not cfg.vocab.valid_for_stream(s, int(ids[s])):
            raise ModelError(f"token ID {ids[s]} invalid for stream {s}")
    total = np.zeros(cfg.d_model)
    for s in range(N_STREAMS):
        total += params[f"emb_{s}"][ids[s]]
    n = N_STREAMS
    if feature is not None:
        feature = np.asarray(feature, dtype=np.float64)
        h = _gelu(feature @ params["adapter_w1"] + params["adapter_b1"])
        total += h @ params["adapter_w2"] + params["adapter_b2"]
        n += 1
    return total / n if cfg.fusion == "mean" else total


def _fuse_sequence(params, cfg, ids, frames, feat_mask):
    """Vectorized fusion over (8, T) IDs with positional embeddings added.

    Returns (1, T, d) activations plus the cache backward needs.
    """
    t = ids.shape[1]
    if t > cfg.max_seq_len:
        raise ModelError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    total = np.zeros((t, cfg.d_model))
    for s in range(N_STREAMS):
        total += params[f"emb_{s}"][ids[s]]
    denom = np.full(t, float(N_STREAMS))
    adapter_cache = None
    if frames is not None and feat_mask is not None and feat_mask.any():
        fr = frames[feat_mask]
        u1 = fr @ params["adapter_w1"] + params["adapter_b1"]
        a1 = _gelu(u1)
        out = a1 @ params["adapter_w2"] + params["adapter_b2"]
        total[feat_mask] += out
        denom[feat_mask] += 1.0
        adapter_cache = (fr, u1, a1)
    if cfg.fusion == "sum":
        denom = np.ones(t)
    x = total / denom[:, None] + params["pos_emb"][:t]
    return x[None, :, :], (ids, denom, adapter_cache, feat_mask)


def _fuse_backward(params, cfg, dx, fuse_cache, grads):
    """dx: (1, T, d) gradient at the fused+positional activations."""
    ids, denom, adapter_cache, feat_mask = fuse_cache
    dxt = dx[0]
    t = dxt.shape[0]
    grads["pos_emb"] = grads.get("pos_emb", 0) + _pad_rows(dxt, params["pos_emb"].shape[0])
    dtotal = dxt / denom[:, None]
    for s in range(N_STREAMS):
        g = grads.get(f"emb_{s}")
        if g is None or isinstance(g, int):
            g = np.zeros_like(params[f"emb_{s}"])
        np.add.at(g, ids[s], dtotal)
        grads[f"emb_{s}"] = g
    if adapter_cache is not None:
        fr, u1, a1 = adapter_cache
        dout = dtotal[feat_mask]
        grads["adapter_w2"] = grads.get("adapter_w2", 0) + a1.T @ dout
        grads["adapter_b2"] = grads.get("adapter_b2", 0) + dout.sum(axis=0)
        da1 = dout @ params["adapter_w2"].T
        du1 = da1 * _gelu_grad(u1)
        grads["adapter_w1"] = grads.get("adapter_w1", 0) + fr.T @ du1
        grads["adapter_b1"] = grads.get("adapter_b1", 0) + du1.sum(axis=0)


def _pad_rows(dxt, n_rows):
    out = np.zeros((n_rows, dxt.shape[1]))
    out[: dxt.shape[0]] = dxt
    return out


# -- forward / loss -----------------------------------------------------------

def _training_sequence(layout: InputLayout):
    """Teacher-forced full sequence: input region followed by delayed targets."""
    ids = np.concatenate([layout.input_ids.tokens, layout.target_ids.tokens], axis=1)
    t_in = layout.input_ids.n_steps
    t_total = ids.shape[1]
    frames = None
    feat_mask = np.zeros(t_total, dtype=bool)
    if layout.feature_frames is not None:
        frames = np.zeros((t_total, layout.feature_frames.shape[1]))
        frames[:t_in] = layout.feature_frames
        feat_mask[:t_in] = layout.feature_mask
    return ids, frames, feat_mask, t_in


def forward(
    params: Parameters,
    cfg: ModelConfig,
    layout: InputLayout,
    teacher_ids: TokenGrid | None = None,
) -> np.ndarray:
    """Teacher-forced forward pass: (8, T_out, V) masked logits.

    Position T_in-1+t of the fused sequence predicts delayed target step t.
    Logits outside each head's legal ID set are -inf.
    """
    if teacher_ids is not None:
        layout = InputLayout(
            input_ids=layout.input_ids,
            feature_frames=layout.feature_frames,
            feature_mask=layout.feature_mask,
            answer_positions=layout.answer_positions,
            target_ids=teacher_ids,
            loss_mask=layout.loss_mask,
            pattern=layout.pattern,
            text_advance=layout.text_advance,
        )
    h, _, t_in = _hidden_states(params, cfg, layout)
    return _head_logits(params, cfg, h[0], t_in, layout.target_ids.n_steps)


def _hidden_states(params, cfg, layout):
    ids, frames, feat_mask, t_in = _training_sequence(layout)
    x, fuse_cache = _fuse_sequence(params, cfg, ids, frames, feat_mask)
    caches = []
    for prefix in _block_prefixes(cfg):
        x, c = _block_fwd(params, prefix, cfg, x)
        caches.append((prefix, c))
    h, lnfc = _ln_fwd(x, params["ln_f_g"], params["ln_f_b"])
    return h, (fuse_cache, caches, lnfc, x), t_in


def _head_logits(params, cfg, h, t_in, t_out):
    legal = head_legal_mask(cfg.vocab)
    hp = h[t_in - 1 : t_in - 1 + t_out]
    logits = np.empty((N_STREAMS, t_out, cfg.vocab.total_size))
    for s in range(N_STREAMS):
        ls = hp @ params[f"head_{s}_w"] + params[f"head_{s}_b"]
        ls[:, ~legal[s]] = -np.inf
        logits[s] = ls
    return logits


def nll_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean over masked cells of -log softmax-probability of the target ID."""
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ModelError("logits / targets / mask shapes disagree")
    n = int(mask.sum())
    if n == 0:
        raise ModelError("loss is undefined on an empty mask")
    total = 0.0
    for s in range(logits.shape[0]):
        idx = np.nonzero(mask[s])[0]
        if idx.size == 0:
            continue
        ls = logits[s, idx]
        m = ls.max(axis=-1, keepdims=True)
        logz = m[:, 0] + np.log(np.exp(ls - m).sum(axis=-1))
        total += float((logz - ls[np.arange(idx.size), targets[s, idx]]).sum())
    return total / n


def _batch_arrays(cfg: ModelConfig, layouts: list[InputLayout]):
    """Pad a minibatch to a common length.

    Pad tails sit after every real position of their example, so under causal
    attention they receive no gradient and padded batching is exact.
    """
    b = len(layouts)
    pad = cfg.vocab.pad
    seqs = [_training_sequence(lay) for lay in layouts]
    t = max(ids.shape[1] for ids, _, _, _ in seqs)
    if t > cfg.max_seq_len:
        raise ModelError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.full((b, N_STREAMS, t), pad, dtype=np.int64)
    frames = np.zeros((b, t, cfg.feature_dim))
    fmask = np.zeros((b, t), dtype=bool)
    t_ins = []
    for i, (eids, efr, efm, t_in) in enumerate(seqs):
        ti = eids.shape[1]
        ids[i, :, :ti] = eids
        if efr is not None:
            frames[i, :ti] = efr
            fmask[i, :ti] = efm
        t_ins.append(t_in)
    return ids, frames, fmask, t_ins


def _batch_fuse(params, cfg, ids, frames, fmask):
    b, _, t = ids.shape
    total = np.zeros((b, t, cfg.d_model))
    for s in range(N_STREAMS):
        total += params[f"emb_{s}"][ids[:, s, :]]
    denom = np.full((b, t), float(N_STREAMS))
    adapter_cache = None
    if fmask.any():
        fr = frames[fmask]
        u1 = fr @ params["adapter_w1"] + params["adapter_b1"]
        a1 = _gelu(u1)
        total[fmask] += a1 @ params["adapter_w2"] + params["adapter_b2"]
        denom[fmask] += 1.0
        adapter_cache = (fr, u1, a1)
    if cfg.fusion == "sum":
        denom = np.ones((b, t))
    x = total / denom[..., None] + params["pos_emb"][:t]
    return x, (ids, denom, adapter_cache, fmask)


def _batch_fuse_backward(params, cfg, dx, cache, grads):
    ids, denom, adapter_cache, fmask = cache
    t = dx.shape[1]
    gpos = np.zeros_like(params["pos_emb"])
    gpos[:t] = dx.sum(axis=0)
    grads["pos_emb"] = gpos
    dtotal = dx / denom[..., None]
    for s in range(N_STREAMS):
        g = np.zeros_like(params[f"emb_{s}"])
        np.add.at(g, ids[:, s, :].reshape(-1), dtotal.reshape(-1, cfg.d_model))
        grads[f"emb_{s}"] = g
    if adapter_cache is not None:
        fr, u1, a1 = adapter_cache
        dout = dtotal[fmask]
        grads["adapter_w2"] = a1.T @ dout
        grads["adapter_b2"] = dout.sum(axis=0)
        da1 = dout @ params["adapter_w2"].T
        du1 = da1 * _gelu_grad(u1)
        grads["adapter_w1"] = fr.T @ du1
        grads["adapter_b1"] = du1.sum(axis=0)
    else:
        for nm in ("adapter_w1", "adapter_b1", "adapter_w2", "adapter_b2"):
            grads[nm] = np.zeros_like(params[nm])


def batch_loss_and_grads(
    params: Parameters,
    cfg: ModelConfig,
    layouts: list[InputLayout],
    trainable_groups=None,
):
    """Teacher-forced minibatch: (loss, grads, n_correct, n_cells).

    Loss is the mean over every masked target cell in the batch. grads for
    groups outside trainable_groups are exactly zero.
    """
    ids, frames, fmask, t_ins = _batch_arrays(cfg, layouts)
    x, fuse_cache = _batch_fuse(params, cfg, ids, frames, fmask)
    caches = []
    for prefix in _block_prefixes(cfg):
        x, c = _block_fwd(params, prefix, cfg, x)
        caches.append((prefix, c))
    h, lnfc = _ln_fwd(x, params["ln_f_g"], params["ln_f_b"])

    # flat (example, position) index lists per stream for the masked cells
    n_masked = sum(int(lay.loss_mask.sum()) for lay in layouts)
    if n_masked == 0:
        raise ModelError("loss is undefined on an empty mask")
    legal = head_legal_mask(cfg.vocab)
    grads: dict[str, np.ndarray] = {}
    dh = np.zeros_like(h)
    total = 0.0
    n_correct = 0
    for s in range(N_STREAMS):
        bi_list, pos_list, tgt_list = [], [], []
        for i, lay in enumerate(layouts):
            steps = np.nonzero(lay.loss_mask[s])[0]
            if steps.size == 0:
                continue
            bi_list.append(np.full(steps.size, i))
            pos_list.append(t_ins[i] - 1 + steps)
            tgt_list.append(lay.target_ids.tokens[s, steps])
        if not bi_list:
            grads[f"head_{s}_w"] = np.zeros_like(params[f"head_{s}_w"])
            grads[f"head_{s}_b"] = np.zeros_like(params[f"head_{s}_b"])
            continue
        bi = np.concatenate(bi_list)
        pos = np.concatenate(pos_list)
        tgt = np.concatenate(tgt_list)
        hs = h[bi, pos]
        ls = hs @ params[f"head_{s}_w"] + params[f"head_{s}_b"]
        ls[:, ~legal[s]] = -np.inf
        m = ls.max(axis=-1, keepdims=True)
        e = np.exp(ls - m)
        z = e.sum(axis=-1, keepdims=True)
        p = e / z
        rows = np.arange(tgt.size)
        total += float((np.log(z[:, 0]) + m[:, 0] - ls[rows, tgt]).sum())
        n_correct += int((ls.argmax(axis=-1) == tgt).sum())
        dl = p
        dl[rows, tgt] -= 1.0
        dl /= n_masked
        grads[f"head_{s}_w"] = hs.T @ dl
        grads[f"head_{s}_b"] = dl.sum(axis=0)
        np.add.at(dh, (bi, pos), dl @ params[f"head_{s}_w"].T)

    dx, dg, db = _ln_bwd(dh, params["ln_f_g"], lnfc)
    grads["ln_f_g"] = dg
    grads["ln_f_b"] = db
    for prefix, c in reversed(caches):
        dx = _block_bwd(params, prefix, cfg, dx, c, grads)
    _batch_fuse_backward(params, cfg, dx, fuse_cache, grads)

    full = {}
    allowed = set(trainable_groups) if trainable_groups is not None else set(PARAM_GROUPS)
    for name, arr in params.arrays.items():
        if group_of(name) in allowed and name in grads:
            full[name] = np.asarray(grads[name], dtype=np.float64)
        else:
            full[name] = np.zeros_like(arr)
    return total / n_masked, full, n_correct, n_masked


def loss_and_grads(
    params: Parameters,
    cfg: ModelConfig,
    layout: InputLayout,
    trainable_groups=None,
):
    """One teacher-forced example: (loss, grads, n_correct, n_cells)."""
    return batch_loss_and_grads(params, cfg, [layout], trainable_groups)


# -- incremental decoding support ---------------------------------------------

class KVCache:
    """Per-block key/value history for incremental decoding.

    One decode session owns its cache exclusively; the parameters it reads
    are frozen and safe to share across concurrent sessions.
    """

    def __init__(self, cfg: ModelConfig, batch: int):
        dh = cfg.head_dim
        self.k = {p: np.zeros((batch, cfg.n_attn_heads, 0, dh)) for p in _block_prefixes(cfg)}
        self.v = {p: np.zeros((batch, cfg.n_attn_heads, 0, dh)) for p in _block_prefixes(cfg)}
        self.t = 0  # absolute position of the next step


def hidden_from_fused(params: Parameters, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Full causal forward on pre-fused activations (B, T, d) -> (B, T, d)."""
    for prefix in _block_prefixes(cfg):
        x, _ = _block_fwd(params, prefix, cfg, x)
    h, _ = _ln_fwd(x, params["ln_f_g"], params["ln_f_b"])
    return h


def forward_prefill(params, cfg, x: np.ndarray, cache: KVCache) -> np.ndarray:
    """Causal forward over (B, T, d), filling the cache; returns hidden (B, T, d)."""
    t = x.shape[1]
    if cache.t + t > cfg.max_seq_len:
        raise ModelError(f"sequence length {cache.t + t} exceeds max_seq_len {cfg.max_seq_len}")
    for prefix in _block_prefixes(cfg):
        h1, _ = _ln_fwd(x, params[f"{prefix}ln1_g"], params[f"{prefix}ln1_b"])
        q = _split_heads(h1 @ params[f"{prefix}wq"] + params[f"{prefix}bq"], cfg.n_attn_heads)
        k = _split_heads(h1 @ params[f"{prefix}wk"] + params[f"{prefix}bk"], cfg.n_attn_heads)
        v = _split_heads(h1 @ params[f"{prefix}wv"] + params[f"{prefix}bv"], cfg.n_attn_heads)
        cache.k[prefix] = np.concatenate([cache.k[prefix], k], axis=2)
        cache.v[prefix] = np.concatenate([cache.v[prefix], v], axis=2)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        kk, vv = cache.k[prefix], cache.v[prefix]
        scores = (q @ kk.transpose(0, 1, 3, 2)) * scale
        # causal over the combined history: query at local i (absolute cache.t+i)
        # attends key positions <= cache.t + i
        total = kk.shape[2]
        scores = scores + np.triu(np.full((t, total), -np.inf), k=cache.t + 1)
        attn = _softmax(scores)
        ctx = _merge_heads(attn @ vv)
        x1 = x + ctx @ params[f"{prefix}wo"] + params[f"{prefix}bo"]
        h2, _ = _ln_fwd(x1, params[f"{prefix}ln2_g"], params[f"{prefix}ln2_b"])
        m = _gelu(h2 @ params[f"{prefix}w1"] + params[f"{prefix}b1"]) @ params[f"{prefix}w2"]
        x = x1 + m + params[f"{prefix}b2"]
    cache.t += t
    h, _ = _ln_fwd(x, params["ln_f_g"], params["ln_f_b"])
    return h


def forward_step(params, cfg, cache: KVCache, x: np.ndarray) -> np.ndarray:
    """One incremental step on (B, d) given the cached history; returns (B, d)."""
    return forward_prefill(params, cfg, x[:, None, :], cache)[:, 0, :]


def step_logits(params, cfg, h: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Per-head masked logits (B, 8, V) from last hidden states (B, d)."""
    b = h.shape[0]
    logits = np.empty((b, N_STREAMS, cfg.vocab.total_size))
    for s in range(N_STREAMS):
        ls = h @ params[f"head_{s}_w"] + params[f"head_{s}_b"]
        ls[:, ~legal[s]] = -np.inf
        logits[:, s, :] = ls
    return logits


# -- gradient check -----------------------------------------------------------

def _loss_only(params, cfg, layout) -> float:
    logits = forward(params, cfg, layout)
    return nll_loss(logits, layout.target_ids.tokens, layout.loss_mask)


def grad_check(
    params: Parameters,
    cfg: ModelConfig,
    layout: InputLayout,
    epsilon: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
    trainable_groups=None,
) -> float:
    """Central finite differences on randomly sampled scalars; max relative error."""
    if not 1e-6 <= epsilon <= 1e-3:
        raise ModelError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    _, grads, _, _ = loss_and_grads(params, cfg, layout, trainable_groups)
    rng = np.random.default_rng(seed)
    names = (
        [n for n in params.names() if group_of(n) in set(trainable_groups)]
        if trainable_groups is not None
        else params.names()
    )
    sizes = np.array([params[n].size for n in names])
    cum = np.cumsum(sizes)
    max_err = 0.0
    for flat in rng.choice(cum[-1], size=min(n_samples, cum[-1]), replace=False):
        i = int(np.searchsorted(cum, flat, side="right"))
        name = names[i]
        j = int(flat - (cum[i - 1] if i else 0))
        arr = params[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + epsilon
        lp = _loss_only(params, cfg, layout)
        arr[j] = orig - epsilon
        lm = _loss_only(params, cfg, layout)
        arr[j] = orig
        g_fd = (lp - lm) / (2 * epsilon)
        g_an = grads[name].reshape(-1)[j]
        err = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
        max_err = max(max_err, err)
    return max_err


# -- staged training ----------------------------------------------------------

@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable_groups: tuple[str, ...]
    task_filter: tuple[TaskKind, ...]


STAGE_PLANS = {
    1: StagePlan(1, ("input_adapter", "output_extension"),
                 (TaskKind.ASR, TaskKind.TTS)),
    2: StagePlan(2, ("trunk", "embeddings", "heads"),
                 (TaskKind.ASR, TaskKind.TEXT_QA, TaskKind.AUDIO_QA_TEXT_OUT)),
    3: StagePlan(3, PARAM_GROUPS, tuple(TaskKind)),
}


@dataclass
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 16
    lr_max: float = 3e-3
    lr_min: float = 3e-5
    momentum: float = 0.9  # SGD momentum / Adam beta1
    optimizer: str = "sgd"  # "sgd" | "adam"
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    text_advance: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ModelError(f"unknown optimizer {self.optimizer!r}")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 1:
        return lr_max
    t = step / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


def train_stage(
    params: Parameters,
    cfg: ModelConfig,
    plan: StagePlan,
    corpus: Corpus,
    schedule: TrainSchedule,
    codec: CodecConfig | None = None,
) -> tuple[Parameters, list[dict]]:
    """Gradient descent with a cosine-annealed learning rate; frozen groups untouched.

    The optimizer is momentum SGD by default or Adam (momentum doubles as
    beta1). Returns new parameters (frozen entries bit-identical to the input)
    and per-epoch metrics. Single-threaded, deterministic for a fixed seed.
    """
    subset = corpus.filter_tasks(plan.task_filter)
    if len(subset) == 0:
        raise ModelError(f"stage {plan.stage}: no examples left after the task filter")
    layouts = [
        build_layout(ex, cfg.vocab, cfg.pattern, schedule.text_advance, codec)
        for ex in subset.examples
    ]
    params = params.copy()
    trainable = [n for n in params.names() if group_of(n) in set(plan.trainable_groups)]
    velocity = {n: np.zeros_like(params[n]) for n in trainable}
    second = (
        {n: np.zeros_like(params[n]) for n in trainable}
        if schedule.optimizer == "adam"
        else None
    )
    rng = np.random.default_rng(schedule.seed)
    n = len(layouts)
    batches_per_epoch = (n + schedule.batch_size - 1) // schedule.batch_size
    total_updates = schedule.epochs * batches_per_epoch
    metrics = []
    update = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        ep_loss = 0.0
        ep_correct = 0
        ep_cells = 0
        for b in range(batches_per_epoch):
            idx = order[b * schedule.batch_size : (b + 1) * schedule.batch_size]
            loss, grads, ok, cells = batch_loss_and_grads(
                params, cfg, [layouts[i] for i in idx], plan.trainable_groups
            )
            ep_loss += loss * len(idx)
            ep_correct += ok
            ep_cells += cells
            lr = cosine_lr(update, total_updates, schedule.lr_max, schedule.lr_min)
            if second is None:
                for nm in trainable:
                    velocity[nm] = schedule.momentum * velocity[nm] + grads[nm]
                    params.arrays[nm] -= lr * velocity[nm]
            else:
                b1, b2 = schedule.momentum, schedule.adam_beta2
                t = update + 1
                for nm in trainable:
                    velocity[nm] = b1 * velocity[nm] + (1.0 - b1) * grads[nm]
                    second[nm] = b2 * second[nm] + (1.0 - b2) * grads[nm] ** 2
                    m_hat = velocity[nm] / (1.0 - b1**t)
                    v_hat = second[nm] / (1.0 - b2**t)
                    params.arrays[nm] -= lr * m_hat / (np.sqrt(v_hat) + schedule.adam_eps)
            update += 1
        metrics.append(
            {
                "stage": plan.stage,
                "epoch": epoch,
                "loss": ep_loss / n,
                "token_accuracy": ep_correct / max(ep_cells, 1),
            }
        )
    return params, metrics


# -- checkpoint format --------------------------------------------------------
# magic "OMNP", u16 LE version, u32 LE config-JSON length, config JSON (incl.
# vocabulary and delay pattern), then sorted parameter blocks, each:
# u16 LE name length, name bytes, u8 ndim, u32 LE dims, f32 LE data.

def save_checkpoint(path, params: Parameters, cfg: ModelConfig) -> None:
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(cfg_json)))
        f.write(cfg_json)
        for name in params.names():
            arr = params[name]
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> tuple[Parameters, ModelConfig]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}, expected {CKPT_MAGIC!r}")
    version, cfg_len = struct.unpack("<HI", data[4:10])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    try:
        cfg = ModelConfig.from_dict(json.loads(data[pos : pos + cfg_len].decode()))
        pos += cfg_len
        arrays = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            chunk = data[pos : pos + 4 * count]
            if len(chunk) != 4 * count:
                raise CheckpointError(f"truncated data for parameter {name!r}")
            arr = np.frombuffer(chunk, dtype="<f4")
            pos += 4 * count
            arrays[name] = arr.astype(np.float64).reshape(shape)
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    return Parameters(arrays), cfg
