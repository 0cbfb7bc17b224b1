"""Tiny decoder-only autoregressive LM, from scratch on numpy.

Pre-norm transformer with learned positional embeddings and a tanh-GELU FFN.
Parameters live in one flat array with named sections; the two Adam moment
stores are congruent with it. The backward pass is written by hand so the
finite-difference gradient check is a genuinely independent oracle.

All math runs in the single real dtype named by the config (float64 for
numeric fidelity, float32 for the larger desk experiment runs).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import PAD_ID
from .rng import substream

GELU_C1 = 0.7978845608028654  # sqrt(2/pi)
GELU_C2 = 0.044715
LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01

CKPT_MAGIC = b"FTRC"
CKPT_VERSION = 1
_DTYPE_CODES = {"float64": 0, "float32": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 256
    vocab_size: int = 2048
    context_len: int = 128
    max_lr: float = 6e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 0
    total_steps: int = 1000
    init_seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        problems = []
        if self.n_layers < 1:
            problems.append("n_layers must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_ffn < 1:
            problems.append("d_model, n_heads, d_ffn must be positive")
        elif self.d_model % self.n_heads != 0:
            problems.append("d_model not divisible by n_heads")
        if self.vocab_size < 4:
            problems.append("vocab_size must be >= 4")
        if self.context_len < 64:
            problems.append("context_len must be >= 64")
        if not (0 < self.min_lr_ratio <= 1):
            problems.append("min_lr_ratio must be in (0, 1]")
        if self.max_lr <= 0:
            problems.append("max_lr must be positive")
        if self.warmup_steps < 0 or self.total_steps < 1:
            problems.append("warmup_steps >= 0 and total_steps >= 1 required")
        if self.warmup_steps > self.total_steps:
            problems.append("warmup_steps must not exceed total_steps")
        if self.dtype not in _DTYPE_CODES:
            problems.append(f"unsupported dtype {self.dtype!r}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def sections(self) -> list[tuple[str, tuple[int, ...]]]:
        d, dff, v = self.d_model, self.d_ffn, self.vocab_size
        secs: list[tuple[str, tuple[int, ...]]] = [
            ("tok_emb", (v, d)),
            ("pos_emb", (self.context_len, d)),
        ]
        for i in range(self.n_layers):
            p = f"layer{i}."
            secs += [
                (p + "ln1.g", (d,)),
                (p + "ln1.b", (d,)),
                (p + "attn.w_qkv", (d, 3 * d)),
                (p + "attn.b_qkv", (3 * d,)),
                (p + "attn.w_o", (d, d)),
                (p + "attn.b_o", (d,)),
                (p + "ln2.g", (d,)),
                (p + "ln2.b", (d,)),
                (p + "ffn.w1", (d, dff)),
                (p + "ffn.b1", (dff,)),
                (p + "ffn.w2", (dff, d)),
                (p + "ffn.b2", (d,)),
            ]
        secs += [
            ("ln_f.g", (d,)),
            ("ln_f.b", (d,)),
            ("head.w", (d, v)),
            ("head.b", (v,)),
        ]
        return secs

    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.sections())


def make_views(flat: np.ndarray, sections) -> dict[str, np.ndarray]:
    views = {}
    off = 0
    for name, shape in sections:
        n = int(np.prod(shape))
        views[name] = flat[off : off + n].reshape(shape)
        off += n
    assert off == flat.size
    return views


@dataclass
class ModelState:
    config: ModelConfig
    params: np.ndarray  # flat
    adam_m: np.ndarray  # flat, congruent
    adam_v: np.ndarray  # flat, congruent
    step: int = 0
    rng_state: int = 0
    w: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.w:
            self.w = make_views(self.params, self.config.sections())

    def clone(self) -> "ModelState":
        return ModelState(
            config=self.config,
            params=self.params.copy(),
            adam_m=self.adam_m.copy(),
            adam_v=self.adam_v.copy(),
            step=self.step,
            rng_state=self.rng_state,
        )


@dataclass
class Batch:
    tokens: np.ndarray  # (B, seq_len) int32
    mask: np.ndarray  # (B, seq_len) bool; True where position t predicts t+1

    def __post_init__(self):
        if self.tokens.shape != self.mask.shape:
            raise ValueError("tokens and mask shapes differ")
        if self.mask[:, -1].any():
            raise ValueError("last position has no successor to predict")

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[0]


def make_batch(row_tokens: list[np.ndarray], seq_len: int) -> Batch:
    """Pack variable-length rows into a PAD-padded matrix with a loss mask."""
    n = len(row_tokens)
    toks = np.full((n, seq_len), PAD_ID, dtype=np.int32)
    mask = np.zeros((n, seq_len), dtype=bool)
    for i, row in enumerate(row_tokens):
        L = min(len(row), seq_len)
        toks[i, :L] = row[:L]
        if L >= 2:
            mask[i, : L - 1] = True
    return Batch(toks, mask)


def init_model(config: ModelConfig) -> ModelState:
    """Seed-deterministic init: N(0, 0.02) matrices, zero biases, unit LN gains."""
    config.validate()
    dtype = config.np_dtype
    n = config.n_params()
    params = np.zeros(n, dtype=dtype)
    views = make_views(params, config.sections())
    rng = substream(config.init_seed, "init")
    for name, shape in config.sections():
        v = views[name]
        if name.endswith(".g"):
            v[...] = 1.0
        elif name.endswith((".b", ".b_qkv", ".b_o", ".b1", ".b2")):
            pass  # zeros
        else:
            v[...] = (rng.standard_normal(shape) * 0.02).astype(dtype)
    return ModelState(
        config=config,
        params=params,
        adam_m=np.zeros(n, dtype=dtype),
        adam_v=np.zeros(n, dtype=dtype),
        step=0,
        rng_state=config.init_seed,
        w=views,
    )


def lr_at(step: int, config: ModelConfig) -> float:
    """Linear warmup to max_lr, then cosine decay to min_lr_ratio * max_lr.

    Steps past total_steps clamp to the final value.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    step = min(step, config.total_steps)
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.max_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span if span > 0 else 1.0
    min_lr = config.min_lr_ratio * config.max_lr
    return min_lr + 0.5 * (config.max_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    x2 = x * x
    t = np.tanh(GELU_C1 * (x + GELU_C2 * x2 * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    du = GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax_lastaxis_inplace(x):
    m = x.max(axis=-1, keepdims=True)
    np.subtract(x, m, out=x)
    np.exp(x, out=x)
    s = x.sum(axis=-1, keepdims=True)
    np.divide(x, s, out=x)
    return x


def _check_tokens(config: ModelConfig, toks: np.ndarray) -> None:
    if toks.shape[-1] > config.context_len:
        raise ValueError("context overflow")
    if toks.size and (int(toks.max()) >= config.vocab_size or int(toks.min()) < 0):
        raise ValueError("token id out of range")


_CAUSAL_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_add(L: int, dtype: str) -> np.ndarray:
    key = (L, dtype)
    if key not in _CAUSAL_CACHE:
        neg = np.asarray(-1e30, dtype=dtype)
        _CAUSAL_CACHE[key] = np.triu(np.full((L, L), neg), k=1)
    return _CAUSAL_CACHE[key]


def _hidden(state: ModelState, toks: np.ndarray, want_cache: bool):
    """Final-layer-norm hidden states (B, L, d) for int token matrix (B, L)."""
    cfg = state.config
    w = state.w
    B, L = toks.shape
    H = cfg.n_heads
    hd = cfg.d_model // H
    scale = 1.0 / math.sqrt(hd)
    x = w["tok_emb"][toks] + w["pos_emb"][:L]
    causal_add = _causal_add(L, cfg.dtype)
    caches = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h1, ln1c = _layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        qkv = h1 @ w[p + "attn.w_qkv"] + w[p + "attn.b_qkv"]
        q, k, v = np.split(qkv, 3, axis=-1)
        # (B, H, L, hd)
        q = q.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        k = k.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        v = v.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + causal_add
        att = _softmax_lastaxis_inplace(scores)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model)
        attn_out = o @ w[p + "attn.w_o"] + w[p + "attn.b_o"]
        x1 = x + attn_out
        h2, ln2c = _layer_norm(x1, w[p + "ln2.g"], w[p + "ln2.b"])
        f1 = h2 @ w[p + "ffn.w1"] + w[p + "ffn.b1"]
        a, gelu_t = _gelu(f1)
        x = x1 + a @ w[p + "ffn.w2"] + w[p + "ffn.b2"]
        if want_cache:
            caches.append((h1, ln1c, q, k, v, att, o, x1, h2, ln2c, f1, gelu_t, a))
    hf, lnfc = _layer_norm(x, w["ln_f.g"], w["ln_f.b"])
    return (hf, caches, lnfc, toks) if want_cache else (hf, None, lnfc, toks)


def logits_batch(state: ModelState, toks: np.ndarray) -> np.ndarray:
    """Per-position next-token logits (B, L, V)."""
    _check_tokens(state.config, toks)
    hf, _, _, _ = _hidden(state, toks, want_cache=False)
    return hf @ state.w["head.w"] + state.w["head.b"]


def last_logits_batch(state: ModelState, toks: np.ndarray) -> np.ndarray:
    """Logits of the final position only (B, V); avoids the full head matmul."""
    _check_tokens(state.config, toks)
    hf, _, _, _ = _hidden(state, toks, want_cache=False)
    return hf[:, -1, :] @ state.w["head.w"] + state.w["head.b"]


def forward(state: ModelState, tokens: Sequence[int]) -> np.ndarray:
    """Logit rows for one sequence: row t conditions on tokens[0..t]."""
    toks = np.asarray(tokens, dtype=np.int32).reshape(1, -1)
    if toks.shape[1] == 0:
        raise ValueError("empty input")
    return logits_batch(state, toks)[0]


def _loss_and_grads(state: ModelState, batch: Batch):
    """Mean masked next-token NLL, per-row NLL, and the flat analytic gradient."""
    cfg = state.config
    w = state.w
    toks = batch.tokens
    B, L = toks.shape
    H = cfg.n_heads
    hd = cfg.d_model // H
    scale = 1.0 / math.sqrt(hd)
    _check_tokens(cfg, toks)

    hf, caches, lnfc, _ = _hidden(state, toks, want_cache=True)
    logits = hf @ w["head.w"] + w["head.b"]

    mask = batch.mask
    n_mask = int(mask.sum())
    grad = np.zeros_like(state.params)
    if n_mask == 0:
        return 0.0, np.zeros(B), grad
    targets = np.zeros((B, L), dtype=np.int64)
    targets[:, :-1] = toks[:, 1:]

    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    np.exp(z, out=z)
    denom = z.sum(axis=-1, keepdims=True)
    probs = np.divide(z, denom, out=z)  # (B, L, V)
    logz = np.log(denom[..., 0]) + m[..., 0]
    tgt_logit = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    nll = logz - tgt_logit  # (B, L)

    row_masked = mask.sum(axis=1)
    row_loss = np.where(
        row_masked > 0, (nll * mask).sum(axis=1) / np.maximum(row_masked, 1), 0.0
    )
    loss = float((nll * mask).sum() / n_mask)

    g = make_views(grad, cfg.sections())

    dlogits = probs
    np.put_along_axis(
        dlogits,
        targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    dlogits *= (mask / n_mask)[..., None].astype(cfg.np_dtype)

    hf2 = hf.reshape(B * L, cfg.d_model)
    dl2 = dlogits.reshape(B * L, cfg.vocab_size)
    g["head.w"][...] = hf2.T @ dl2
    g["head.b"][...] = dl2.sum(axis=0)
    dhf = (dl2 @ w["head.w"].T).reshape(B, L, cfg.d_model)

    dx, dgf, dbf = _layer_norm_bwd(dhf, w["ln_f.g"], lnfc)
    g["ln_f.g"][...] = dgf
    g["ln_f.b"][...] = dbf

    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        h1, ln1c, q, k, v, att, o, x1, h2, ln2c, f1, gelu_t, a = caches[i]

        # FFN branch
        da = dx @ w[p + "ffn.w2"].T
        g[p + "ffn.w2"][...] = a.reshape(B * L, -1).T @ dx.reshape(B * L, -1)
        g[p + "ffn.b2"][...] = dx.sum(axis=(0, 1))
        df1 = _gelu_bwd(da, f1, gelu_t)
        g[p + "ffn.w1"][...] = h2.reshape(B * L, -1).T @ df1.reshape(B * L, -1)
        g[p + "ffn.b1"][...] = df1.sum(axis=(0, 1))
        dh2 = df1 @ w[p + "ffn.w1"].T
        dx1, dg2, db2 = _layer_norm_bwd(dh2, w[p + "ln2.g"], ln2c)
        g[p + "ln2.g"][...] = dg2
        g[p + "ln2.b"][...] = db2
        dx1 = dx1 + dx  # residual

        # attention branch
        do = dx1 @ w[p + "attn.w_o"].T
        g[p + "attn.w_o"][...] = o.reshape(B * L, -1).T @ dx1.reshape(B * L, -1)
        g[p + "attn.b_o"][...] = dx1.sum(axis=(0, 1))
        do4 = do.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        datt = do4 @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do4
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        dqkv = np.concatenate(
            [
                dq.transpose(0, 2, 1, 3).reshape(B, L, -1),
                dk.transpose(0, 2, 1, 3).reshape(B, L, -1),
                dv.transpose(0, 2, 1, 3).reshape(B, L, -1),
            ],
            axis=-1,
        )
        g[p + "attn.w_qkv"][...] = h1.reshape(B * L, -1).T @ dqkv.reshape(B * L, -1)
        g[p + "attn.b_qkv"][...] = dqkv.sum(axis=(0, 1))
        dh1 = dqkv @ w[p + "attn.w_qkv"].T
        dxa, dg1, db1 = _layer_norm_bwd(dh1, w[p + "ln1.g"], ln1c)
        g[p + "ln1.g"][...] = dg1
        g[p + "ln1.b"][...] = db1
        dx = dx1 + dxa

    # embeddings
    np.add.at(g["tok_emb"], toks.reshape(-1), dx.reshape(B * L, -1))
    g["pos_emb"][:L] += dx.sum(axis=0)

    return loss, row_loss, grad


def analytic_gradient(state: ModelState, batch: Batch) -> tuple[float, np.ndarray]:
    loss, _, grad = _loss_and_grads(state, batch)
    return loss, grad


def batch_loss(state: ModelState, batch: Batch) -> float:
    """Mean masked NLL without gradient work (used by the FD oracle)."""
    logits = logits_batch(state, batch.tokens)
    B, L = batch.tokens.shape
    targets = np.zeros((B, L), dtype=np.int64)
    targets[:, :-1] = batch.tokens[:, 1:]
    m = logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    tgt = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    nll = logz - tgt
    n_mask = int(batch.mask.sum())
    if n_mask == 0:
        return 0.0
    return float((nll * batch.mask).sum() / n_mask)


_DECAY_CACHE: dict[tuple, np.ndarray] = {}


def _decay_mask(config: ModelConfig) -> np.ndarray:
    """Decoupled weight decay applies to matrices only (not biases/LN/vectors)."""
    key = (
        config.dtype,
        config.n_layers,
        config.d_model,
        config.n_heads,
        config.d_ffn,
        config.vocab_size,
        config.context_len,
    )
    cached = _DECAY_CACHE.get(key)
    if cached is not None:
        return cached
    mask = np.zeros(config.n_params(), dtype=config.np_dtype)
    views = make_views(mask, config.sections())
    for name, shape in config.sections():
        if len(shape) >= 2 and name not in ("tok_emb", "pos_emb"):
            views[name][...] = 1.0
    _DECAY_CACHE[key] = mask
    return mask


def train_step(
    state: ModelState,
    batch: Batch,
    lr: float | None = None,
    return_row_losses: bool = False,
):
    """One AdamW update over the batch's masked positions.

    Returns (state, mean_loss) -- the loss is the pre-update NLL. The optional
    lr override lets a scheduler pin replay updates to the surrounding base
    step's learning rate. On non-finite loss the state is left unmodified.
    """
    cfg = state.config
    loss, row_loss, grad = _loss_and_grads(state, batch)
    if not math.isfinite(loss):
        raise ValueError("divergence")
    if lr is None:
        lr = lr_at(state.step, cfg)

    t = state.step + 1
    m, v, p = state.adam_m, state.adam_v, state.params
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    mhat = m / (1.0 - ADAM_BETA1**t)
    vhat = v / (1.0 - ADAM_BETA2**t)
    p -= lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + WEIGHT_DECAY * _decay_mask(cfg) * p)
    state.step = t
    if return_row_losses:
        return state, loss, row_loss
    return state, loss


# ---------------------------------------------------------------------------
# Decoding and scoring
# ---------------------------------------------------------------------------


def greedy_decode(state: ModelState, prefix: Sequence[int], n: int = 32) -> np.ndarray:
    """Deterministic top-1 decode; exact ties resolve to the lowest token id."""
    return greedy_decode_batch(state, np.asarray(prefix, dtype=np.int32)[None], n)[0]


def greedy_decode_batch(state: ModelState, prefixes: np.ndarray, n: int) -> np.ndarray:
    """(N, P) prefixes -> (N, n) decoded ids, n steps of batched greedy decode."""
    cfg = state.config
    N, P = prefixes.shape
    if P + n > cfg.context_len:
        raise ValueError("context overflow")
    if P == 0:
        raise ValueError("empty prefix")
    seq = np.zeros((N, P + n), dtype=np.int32)
    seq[:, :P] = prefixes
    for t in range(n):
        last = last_logits_batch(state, seq[:, : P + t])
        seq[:, P + t] = np.argmax(last, axis=-1)  # argmax takes the lowest id on ties
    return seq[:, P:]


def token_logprobs(state: ModelState, tokens: Sequence[int]) -> np.ndarray:
    """Entry i = log p(tokens[i+1] | tokens[0..i]); length |tokens| - 1."""
    toks = np.asarray(tokens, dtype=np.int32)
    if len(toks) < 2:
        raise ValueError("nothing to predict")
    lp, _ = sequence_scores(state, [toks])
    return lp[0]


def sequence_scores(
    state: ModelState, seqs: list[np.ndarray], chunk: int = 32
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Batched next-token scoring for variable-length sequences.

    For each sequence returns (logprobs, argmax_hits): position i scores the
    prediction of seqs[i+1] given the prefix through i. Shorter rows are
    PAD-padded; causality keeps their valid prefix positions unaffected.
    """
    cfg = state.config
    out_lp: list[np.ndarray] = []
    out_hit: list[np.ndarray] = []
    for lo in range(0, len(seqs), chunk):
        group = seqs[lo : lo + chunk]
        Lmax = max(len(s) for s in group)
        if Lmax > cfg.context_len:
            raise ValueError("context overflow")
        toks = np.full((len(group), Lmax), PAD_ID, dtype=np.int32)
        for i, s in enumerate(group):
            toks[i, : len(s)] = s
        logits = logits_batch(state, toks)
        m = logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
        amax = np.argmax(logits, axis=-1)
        for i, s in enumerate(group):
            L = len(s)
            if L < 2:
                out_lp.append(np.zeros(0))
                out_hit.append(np.zeros(0, dtype=bool))
                continue
            nxt = s[1:].astype(np.int64)
            lp = logits[i, np.arange(L - 1), nxt] - logz[i, : L - 1]
            out_lp.append(np.asarray(lp, dtype=np.float64))
            out_hit.append(amax[i, : L - 1] == nxt)
    return out_lp, out_hit


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def fd_gradient_at(
    state: ModelState, batch: Batch, indices: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """Central finite differences of the mean batch loss at flat param indices."""
    out = np.zeros(len(indices))
    for j, idx in enumerate(indices):
        orig = state.params[idx]
        state.params[idx] = orig + h
        lp = batch_loss(state, batch)
        state.params[idx] = orig - h
        lm = batch_loss(state, batch)
        state.params[idx] = orig
        out[j] = (lp - lm) / (2 * h)
    return out


def gradient_check(
    config: ModelConfig,
    batch: Batch,
    n_samples: int = 200,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and finite-difference gradients
    over n_samples randomly sampled parameters of a freshly initialized model."""
    if config.n_params() > 10_000:
        raise ValueError("gradient_check requires micro dims (<= 1e4 parameters)")
    state = init_model(config)
    _, grad = analytic_gradient(state, batch)
    rng = substream(seed, "gradcheck")
    n_samples = min(n_samples, state.params.size)
    idx = rng.choice(state.params.size, size=n_samples, replace=False)
    fd = fd_gradient_at(state, batch, idx, h)
    ana = grad[idx]
    denom = np.maximum(np.abs(ana) + np.abs(fd), 1e-8)
    return float(np.max(np.abs(ana - fd) / denom))


# ---------------------------------------------------------------------------
# Checkpoints: documented little-endian binary
# ---------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Layout: magic 'FTRC', version u32, dtype u8, config block, named
    parameter sections, then Adam m and v stores, then step and rng_state."""
    cfg = state.config
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<IB", CKPT_VERSION, _DTYPE_CODES[cfg.dtype])
    buf += struct.pack(
        "<6I2q2dQ",
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ffn,
        cfg.vocab_size,
        cfg.context_len,
        cfg.warmup_steps,
        cfg.total_steps,
        cfg.max_lr,
        cfg.min_lr_ratio,
        cfg.init_seed,
    )
    sections = cfg.sections()
    buf += struct.pack("<I", len(sections))
    le = np.dtype(cfg.dtype).newbyteorder("<")
    for name, shape in sections:
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", len(shape))
        for dim in shape:
            buf += struct.pack("<Q", dim)
        buf += state.w[name].astype(le, copy=False).tobytes()
    for store in (state.adam_m, state.adam_v):
        buf += store.astype(le, copy=False).tobytes()
    buf += struct.pack("<QQ", state.step, state.rng_state)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> ModelState:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, dtype_code = r.unpack("<IB")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if dtype_code not in _DTYPE_NAMES:
        raise CheckpointError(f"unknown dtype code {dtype_code}")
    (n_layers, d_model, n_heads, d_ffn, vocab, ctx, warmup, total, max_lr, min_ratio, init_seed) = r.unpack("<6I2q2dQ")
    cfg = ModelConfig(
        n_layers=n_layers,
        d_model=d_model,
        n_heads=n_heads,
        d_ffn=d_ffn,
        vocab_size=vocab,
        context_len=ctx,
        max_lr=max_lr,
        min_lr_ratio=min_ratio,
        warmup_steps=warmup,
        total_steps=total,
        init_seed=init_seed,
        dtype=_DTYPE_NAMES[dtype_code],
    )
    (n_sections,) = r.unpack("<I")
    expected = cfg.sections()
    if n_sections != len(expected):
        raise CheckpointError(f"section count {n_sections} does not match config")
    le = np.dtype(cfg.dtype).newbyteorder("<")
    itemsize = le.itemsize
    params = np.zeros(cfg.n_params(), dtype=cfg.np_dtype)
    views = make_views(params, expected)
    for name, shape in expected:
        (name_len,) = r.unpack("<H")
        got = r.take(name_len).decode()
        if got != name:
            raise CheckpointError(f"unexpected section {got!r} (wanted {name!r})")
        (ndim,) = r.unpack("<B")
        dims = tuple(r.unpack("<" + "Q" * ndim)) if ndim else ()
        if dims != tuple(shape):
            raise CheckpointError(f"section {name}: shape {dims} != {tuple(shape)}")
        n = int(np.prod(shape))
        views[name][...] = np.frombuffer(r.take(n * itemsize), dtype=le).reshape(shape)
    n = cfg.n_params()
    adam_m = np.frombuffer(r.take(n * itemsize), dtype=le).astype(cfg.np_dtype)
    adam_v = np.frombuffer(r.take(n * itemsize), dtype=le).astype(cfg.np_dtype)
    step, rng_state = r.unpack("<QQ")
    if r.off != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return ModelState(
        config=cfg,
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        step=step,
        rng_state=rng_state,
        w=views,
    )


def param_checksum(state: ModelState) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(state.params.tobytes())
    h.update(state.adam_m.tobytes())
    h.update(state.adam_v.tobytes())
    h.update(struct.pack("<QQ", state.step, state.rng_state))
    return h.hexdigest()
