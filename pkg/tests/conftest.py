"""Shared fixtures: micro model configs, rigged script models, tiny corpora."""

from __future__ import annotations

import numpy as np
import pytest

from forgetrace.corpus import Document, EntityDictionary, EntityEntry, Vocab, SPECIAL_TOKENS
from forgetrace.model import LN_EPS, ModelConfig, ModelState, init_model


def micro_config(**kw) -> ModelConfig:
    base = dict(
        n_layers=1,
        d_model=8,
        n_heads=2,
        d_ffn=16,
        vocab_size=32,
        context_len=64,
        max_lr=1e-3,
        warmup_steps=0,
        total_steps=100,
        init_seed=7,
        dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def script_model(
    vocab_size: int,
    script: dict[int, int] | None = None,
    bias: dict[int, float] | None = None,
    ctx: int = 64,
    w_scale: float = 6.0,
) -> ModelState:
    """A real model rigged so the argmax at position p is script[p].

    Token embeddings are zero and every block is zeroed into a residual
    pass-through, so the final hidden state is LayerNorm(pos_emb[p]): a known
    two-valued vector that the head turns into a position-indexed lookup.
    With `bias`, logits get a position-independent offset per token id.
    """
    cfg = ModelConfig(
        n_layers=1,
        d_model=ctx,
        n_heads=1,
        d_ffn=4,
        vocab_size=vocab_size,
        context_len=ctx,
        total_steps=1,
        init_seed=0,
        dtype="float64",
    )
    state = init_model(cfg)
    state.params[:] = 0.0
    for name in ("layer0.ln1.g", "layer0.ln2.g", "ln_f.g"):
        state.w[name][:] = 1.0
    s = 2.0
    state.w["pos_emb"][:] = np.eye(ctx) * s
    # exact post-LayerNorm values of the one-hot row s*e_p
    mu = s / ctx
    var = (s * s) * (ctx - 1) / (ctx * ctx)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    hot = (s - mu) * inv
    cold = (0.0 - mu) * inv
    colsum = np.zeros(vocab_size)
    for p, y in (script or {}).items():
        state.w["head.w"][p, y] = w_scale
        colsum[y] += 1
    # cancel the cold-dimension leakage so non-designated logits sit at 0
    state.w["head.b"][:] = -cold * w_scale * colsum
    for y, b in (bias or {}).items():
        state.w["head.b"][y] += b
    return state


def make_docs(token_lists, source="A", first_id=0) -> list[Document]:
    return [
        Document(doc_id=first_id + i, source=source, tokens=np.asarray(t, dtype=np.int32))
        for i, t in enumerate(token_lists)
    ]


def tiny_vocab(words: list[str]) -> Vocab:
    return Vocab(list(SPECIAL_TOKENS) + words)


def tiny_dictionary(entries: dict[int, tuple[str, tuple[int, ...], str]]) -> EntityDictionary:
    return EntityDictionary(
        {eid: EntityEntry(surface=s, token_ids=ids, entity_type=t) for eid, (s, ids, t) in entries.items()}
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
