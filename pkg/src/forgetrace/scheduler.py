"""Experiment orchestration: pre-training with replay strategies, the A-then-B
transition probe, upper-bound fine-tuning, forgetting curves, cost accounting
and checkpointing.

Cost convention: the run ledger counts base updates and replay updates
separately, and tokens_seen counts base-training tokens only, so metric curves
from different strategies share an x-axis of equal data exposure. Replay
updates reuse the learning rate of the surrounding base step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import STRATEGY_WIRING, RunConfig
from .corpus import Document, Vocab, compose_corpus
from .memory import ExitPolicy, ReplayMemory, RetrievalStrategy, StoragePolicy
from .metrics import (
    EvalItem,
    MetricReport,
    append_aborted_row,
    append_metrics_row,
    filter_memorized,
    m_ex,
    per_type_report,
)
from .model import (
    Batch,
    ModelState,
    init_model,
    load_checkpoint,
    lr_at,
    make_batch,
    save_checkpoint,
    train_step,
)
from .rng import substream_seed


class DivergenceAbort(RuntimeError):
    """Training hit a non-finite loss; partial outputs were kept."""


@dataclass
class RunLedger:
    base_updates: int = 0
    replay_updates: int = 0
    replay_events: int = 0
    tokens_seen: int = 0  # base-training tokens only

    @property
    def ratio(self) -> float:
        if self.base_updates == 0:
            raise ValueError("zero base updates")
        return (self.base_updates + self.replay_updates) / self.base_updates


def cost_report(ledger: RunLedger, cfg: RunConfig) -> float:
    """Total/base update ratio, checked against 1 + f/T for replay strategies.

    The bound f/base_updates absorbs the final partial replay interval.
    """
    ratio = ledger.ratio
    if cfg.replays:
        f = cfg.effective_replay_epochs
        expected = 1.0 + f / cfg.replay_interval
        bound = f / ledger.base_updates
        if abs(ratio - expected) > bound + 1e-12:
            raise AssertionError(
                f"cost ratio {ratio:.6f} outside {expected:.6f} +/- {bound:.6f}"
            )
    elif cfg.strategy == "vanilla" and ledger.replay_updates != 0:
        raise AssertionError("vanilla run logged replay updates")
    return ratio


@dataclass
class ExperimentData:
    """Everything a run needs: corpora, vocab, eval items and their documents."""

    a_docs: list[Document]
    b_docs: list[Document]
    vocab: Vocab
    items: list[EvalItem]
    eval_docs: list[Document] = field(default_factory=list)

    def __post_init__(self):
        if not self.eval_docs and self.items:
            by_id = {d.doc_id: d for d in self.a_docs + self.b_docs}
            wanted = sorted({it.doc_id for it in self.items})
            self.eval_docs = [by_id[i] for i in wanted if i in by_id]


class EventLog:
    """Step-stamped logical event log (no wall-clock, so runs stay byte-stable)."""

    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("", encoding="utf-8")

    def write(self, step: int, event: str, **kv) -> None:
        extras = "".join(f" {k}={v}" for k, v in kv.items())
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"step={step} event={event}{extras}\n")


def _build_memory(cfg: RunConfig) -> ReplayMemory | None:
    wiring = STRATEGY_WIRING.get(cfg.strategy)
    if wiring is None:
        return None
    storage_kind, retrieval_kind, _limited = wiring
    return ReplayMemory(
        storage=StoragePolicy(storage_kind, cfg.high_loss_fraction),
        retrieval=RetrievalStrategy(retrieval_kind),
        exit_policy=ExitPolicy(cfg.effective_max_replays),
        capacity=cfg.memory_capacity,
    )


def item_window(item: EvalItem) -> np.ndarray:
    return np.concatenate([item.prefix, item.target]).astype(np.int32)


def _item_batches(items: list[EvalItem], batch_size: int, max_width: int) -> list[Batch]:
    """Dedup the items' prefix+target windows and pack them into batches."""
    windows: list[np.ndarray] = []
    seen: set[bytes] = set()
    for it in items:
        w = item_window(it)
        key = w.tobytes()
        if key not in seen:
            seen.add(key)
            windows.append(w)
    width = min(max_width, max(len(w) for w in windows))
    return [
        make_batch(windows[i : i + batch_size], width)
        for i in range(0, len(windows), batch_size)
    ]


class Runner:
    """Shared machinery for one training run writing into one out_dir."""

    def __init__(self, data: ExperimentData, cfg: RunConfig, seed: int, out_dir: Path):
        self.data = data
        self.cfg = cfg
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out_dir / "metrics.csv"
        if self.metrics_path.exists():
            self.metrics_path.unlink()
        self.events = EventLog(self.out_dir / "events.log")
        self.ledger = RunLedger()
        self.memory = _build_memory(cfg)
        self.base_step = 0
        self.eval_items = data.items
        self.reports: list[MetricReport] = []
        self._last_eval_step = -1

    # -- setup ---------------------------------------------------------------

    def plan_total_steps(self) -> int:
        cfg = self.cfg
        if cfg.total_steps > 0:
            return cfg.total_steps
        if cfg.corpus_mode == "sequential_AB":
            a = self._phase_stream(0, self.data.a_docs).n_batches if self.data.a_docs else 0
            b = self._phase_stream(0, self.data.b_docs).n_batches if self.data.b_docs else 0
            return max(1, cfg.a_epochs * a + cfg.b_epochs * b)
        one = compose_corpus(
            self.data.a_docs,
            self.data.b_docs,
            cfg.corpus_mode,
            substream_seed(self.seed, "epoch0"),
            cfg.batch_size,
            cfg.seq_len,
        )
        return max(1, cfg.epochs * one.n_batches)

    def init_state(self) -> ModelState:
        mc = self.cfg.model_config(
            vocab_size=self.data.vocab.size,
            total_steps=self.plan_total_steps(),
            seed=substream_seed(self.seed, "init"),
        )
        return init_model(mc)

    def _phase_stream(self, epoch: int, docs: list[Document]):
        return compose_corpus(
            docs,
            [],
            "mixed_shuffled",
            substream_seed(self.seed, f"epoch{epoch}"),
            self.cfg.batch_size,
            self.cfg.seq_len,
        )

    # -- the inner loop --------------------------------------------------------

    def train_batch(self, state: ModelState, rows) -> None:
        cfg = self.cfg
        batch = make_batch([r.tokens for r in rows], cfg.seq_len)
        lr = lr_at(self.base_step, state.config)
        try:
            state, loss, row_losses = train_step(
                state, batch, lr=lr, return_row_losses=True
            )
        except ValueError as e:
            if "divergence" in str(e):
                self._abort(state)
            raise
        self.base_step += 1
        self.ledger.base_updates += 1
        self.ledger.tokens_seen += int(sum(len(r.tokens) for r in rows))

        if self.memory is not None and self.cfg.replays:
            if self.base_step % cfg.replay_interval == 0:
                self._replay_event(state, rows)
            # current batch becomes "previously seen" only after the event
            self.memory.store(rows, row_losses, step=self.base_step)

        if self.base_step % cfg.eval_every == 0:
            self.evaluate(state)
            self._maybe_checkpoint(state)

    def _replay_event(self, state: ModelState, query_rows) -> None:
        cfg = self.cfg
        event_seed = substream_seed(self.seed, f"retrieval:{self.base_step}")
        entries = self.memory.retrieve(query_rows, k=cfg.batch_size, seed=event_seed)
        if not entries:
            self.events.write(self.base_step, "replay", retrieved=0, epochs=0)
            return
        f = cfg.effective_replay_epochs
        batch = make_batch([e.tokens for e in entries], cfg.seq_len)
        lr = lr_at(self.base_step, state.config)  # pin to the surrounding base step
        for _ in range(f):
            try:
                train_step(state, batch, lr=lr)
            except ValueError as e:
                if "divergence" in str(e):
                    self._abort(state)
                raise
            self.ledger.replay_updates += 1
        self.ledger.replay_events += 1
        self.memory.mark_replayed(entries)
        self.events.write(self.base_step, "replay", retrieved=len(entries), epochs=f)

    def _abort(self, state: ModelState) -> None:
        append_aborted_row(self.metrics_path, self.base_step)
        self.events.write(self.base_step, "aborted")
        self.write_ledger()
        raise DivergenceAbort(f"divergence at base step {self.base_step}")

    # -- evaluation / outputs ---------------------------------------------------

    def evaluate(self, state: ModelState) -> MetricReport:
        report = per_type_report(
            state,
            self.eval_items,
            self.data.eval_docs,
            step=self.base_step,
            tokens_seen=self.ledger.tokens_seen,
        )
        append_metrics_row(self.metrics_path, report)
        self.reports.append(report)
        self.events.write(self.base_step, "eval", n_items=report.n_items)
        self._last_eval_step = self.base_step
        return report

    def _docs_for(self, items: list[EvalItem]) -> list[Document]:
        by_id = {d.doc_id: d for d in self.data.a_docs + self.data.b_docs}
        by_id.update({d.doc_id: d for d in self.data.eval_docs})
        return [by_id[i] for i in sorted({it.doc_id for it in items}) if i in by_id]

    def _maybe_checkpoint(self, state: ModelState) -> None:
        every = self.cfg.checkpoint_every
        if every == 0:
            every = self.cfg.eval_every
        if every > 0 and self.base_step % every == 0:
            name = f"checkpoint_step{self.base_step}.ftrc"
            save_checkpoint(state, self.out_dir / name)
            self.events.write(self.base_step, "checkpoint", file=name)

    def final_eval(self, state: ModelState) -> None:
        if self._last_eval_step != self.base_step:
            self.evaluate(state)

    def write_ledger(self) -> None:
        led = self.ledger
        ratio = led.ratio if led.base_updates else float("nan")
        text = "base_updates,replay_updates,replay_events,ratio,tokens_seen\n"
        text += f"{led.base_updates},{led.replay_updates},{led.replay_events},%.10g,{led.tokens_seen}\n" % ratio
        (self.out_dir / "ledger.csv").write_text(text, encoding="utf-8")

    def finish(self, state: ModelState) -> None:
        self.final_eval(state)
        save_checkpoint(state, self.out_dir / "checkpoint_final.ftrc")
        if self.memory is not None:
            self.memory.dump(self.out_dir / "memory.jsonl")
        self.write_ledger()
        (self.out_dir / "run.cfg").write_text(
            self.cfg.to_text() + f"run_seed = {self.seed}\n", encoding="utf-8"
        )
        self.events.write(self.base_step, "run_end")


def run_pretraining(
    data: ExperimentData, cfg: RunConfig, seed: int, out_dir: str | Path
) -> tuple[ModelState, RunLedger, list[MetricReport]]:
    """One mixed-corpus pre-training run under the configured strategy.

    For the upper_bound strategy the run first trains vanilla, then fine-tunes
    on the eval items until m_ex stops improving (at most 5 epochs) and
    evaluates once more; the final metrics row is the upper bound.
    """
    runner = Runner(data, cfg, seed, Path(out_dir))
    state = runner.init_state()
    runner.events.write(0, "run_start", strategy=cfg.strategy, seed=seed)
    for epoch in range(cfg.epochs):
        stream = compose_corpus(
            data.a_docs,
            data.b_docs,
            cfg.corpus_mode,
            substream_seed(seed, f"epoch{epoch}"),
            cfg.batch_size,
            cfg.seq_len,
        )
        for rows in stream.iter_row_batches():
            runner.train_batch(state, rows)
    if cfg.strategy == "upper_bound":
        runner.final_eval(state)
        state, epochs_used = upper_bound_finetune(state, runner, data.items)
        runner.events.write(runner.base_step, "upper_bound_eval", epochs_trained=epochs_used)
        runner.evaluate(state)
    runner.finish(state)
    return state, runner.ledger, runner.reports


def upper_bound_finetune(
    state: ModelState, runner: Runner, items: list[EvalItem], max_epochs: int = 5
) -> tuple[ModelState, int]:
    """Train on the eval items' own windows until m_ex plateaus (<= 5 epochs)."""
    if not items:
        raise ValueError("missing eval items for upper bound")
    cfg = runner.cfg
    batches = _item_batches(items, cfg.batch_size, state.config.context_len)
    excl = [it for it in items if it.mode == "exclusive"]
    lr = lr_at(runner.base_step, state.config)
    prev = m_ex(state, excl) if excl else 0.0
    used = 0
    for _ in range(max_epochs):
        for b in batches:
            state, _ = train_step(state, b, lr=lr)
            runner.ledger.replay_updates += 1
        used += 1
        cur = m_ex(state, excl) if excl else 1.0
        if cur <= prev:
            break
        prev = cur
    return state, used


def run_upper_bound(
    checkpoint_path: str | Path,
    data: ExperimentData,
    cfg: RunConfig,
    seed: int,
    out_dir: str | Path,
) -> MetricReport:
    """Fine-tune a saved vanilla checkpoint on the eval set and evaluate once."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    state = load_checkpoint(path)
    runner = Runner(data, cfg, seed, Path(out_dir))
    runner.base_step = state.step
    state, used = upper_bound_finetune(state, runner, data.items)
    runner.events.write(runner.base_step, "upper_bound_eval", epochs_trained=used)
    report = runner.evaluate(state)
    runner.finish(state)
    return report


def run_ab_transition(
    data: ExperimentData, cfg: RunConfig, seed: int, out_dir: str | Path
) -> tuple[ModelState, RunLedger, list[MetricReport], int]:
    """Train A then B; at the boundary keep only item pairs the model fully
    memorized (exclusive score 1) and follow that retained set through B.

    Returns (state, ledger, reports, boundary_step).
    """
    if cfg.corpus_mode != "sequential_AB":
        raise ValueError("run_ab_transition requires corpus_mode sequential_AB")
    runner = Runner(data, cfg, seed, Path(out_dir))
    state = runner.init_state()
    runner.events.write(0, "run_start", strategy=cfg.strategy, seed=seed)

    for epoch in range(cfg.a_epochs):
        stream = runner._phase_stream(epoch, data.a_docs)
        for rows in stream.iter_row_batches():
            runner.train_batch(state, rows)

    boundary = runner.base_step
    retained = filter_memorized(state, data.items)
    if not retained:
        raise ValueError(
            "eval set empty after filtering; adjust the corpus or entity dictionary"
        )
    runner.eval_items = retained
    runner.data.eval_docs = runner._docs_for(retained)
    save_checkpoint(state, runner.out_dir / "checkpoint_boundary.ftrc")
    runner.events.write(boundary, "ab_boundary", retained=len(retained) // 2)
    runner.evaluate(state)

    for epoch in range(cfg.b_epochs):
        stream = runner._phase_stream(cfg.a_epochs + epoch, data.b_docs)
        for rows in stream.iter_row_batches():
            runner.train_batch(state, rows)

    runner.finish(state)
    return state, runner.ledger, runner.reports, boundary


@dataclass
class CurveConfig:
    intensive_epochs: int = 1  # e; 0 = no-intervention control
    periodic: bool = False
    periodic_interval: int = 1000
    periodic_epochs: int = 5
    resume_epochs: int = 1  # base epochs after the intensive phase

    def validate(self) -> None:
        if self.intensive_epochs < 0:
            raise ValueError("intensive_epochs must be >= 0")
        if self.periodic and self.periodic_interval < 1:
            raise ValueError("periodic_interval must be >= 1")
        if self.periodic_epochs < 1 or self.resume_epochs < 1:
            raise ValueError("periodic_epochs and resume_epochs must be >= 1")


def run_forgetting_curve(
    curve: CurveConfig,
    base_checkpoint: str | Path,
    data: ExperimentData,
    cfg: RunConfig,
    target_items: list[EvalItem],
    seed: int,
    out_dir: str | Path,
    base_epoch_offset: int = 1,
    base_tokens_seen: int | None = None,
) -> tuple[ModelState, RunLedger, list[MetricReport]]:
    """Intensive phase on the target items, then resumed base pre-training with
    cadenced evaluation of those items; optional periodic replay sessions."""
    curve.validate()
    if not target_items:
        raise ValueError("empty difficulty bucket")
    state = load_checkpoint(Path(base_checkpoint))
    runner = Runner(data, cfg, seed, Path(out_dir))
    runner.base_step = state.step
    if base_tokens_seen is None:
        base_tokens_seen = state.step * cfg.batch_size * cfg.seq_len
    runner.ledger.tokens_seen = base_tokens_seen
    runner.eval_items = target_items
    runner.data = ExperimentData(
        a_docs=data.a_docs,
        b_docs=data.b_docs,
        vocab=data.vocab,
        items=target_items,
        eval_docs=runner._docs_for(target_items),
    )
    runner.events.write(
        runner.base_step, "run_start", kind="forgetting_curve", e=curve.intensive_epochs
    )

    batches = _item_batches(target_items, cfg.batch_size, state.config.context_len)

    def session(epochs: int, label: str) -> None:
        lr = lr_at(runner.base_step, state.config)
        for _ in range(epochs):
            for b in batches:
                train_step(state, b, lr=lr)
                runner.ledger.replay_updates += 1
        runner.ledger.replay_events += 1
        runner.events.write(
            runner.base_step, label, epochs=epochs, items=len(target_items)
        )

    if curve.intensive_epochs > 0:
        session(curve.intensive_epochs, "intensive")
    runner.evaluate(state)

    for epoch in range(curve.resume_epochs):
        stream = compose_corpus(
            data.a_docs,
            data.b_docs,
            cfg.corpus_mode,
            substream_seed(seed, f"epoch{base_epoch_offset + epoch}"),
            cfg.batch_size,
            cfg.seq_len,
        )
        for rows in stream.iter_row_batches():
            runner.train_batch(state, rows)
            if curve.periodic and runner.base_step % curve.periodic_interval == 0:
                session(curve.periodic_epochs, "periodic_replay")

    runner.finish(state)
    return state, runner.ledger, runner.reports
