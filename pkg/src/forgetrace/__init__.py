"""Desk-scale laboratory for measuring and mitigating forgetting during
language-model pre-training.

Subpackages:
    corpus     -- tokenization, entity tagging, corpus composition, eval sampling
    model      -- tiny decoder-only LM with hand-written backprop
    metrics    -- ppl / mf / m_in / m_ex and eval-set construction
    memory     -- replay memory: storage policies, random + BM25 retrieval, exit
    scheduler  -- experiment orchestration, cost ledger, checkpointing
    cli        -- command-line entry point
"""

__version__ = "0.1.0"
