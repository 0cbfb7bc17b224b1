"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error (nothing written), 2 runtime
failure (partial outputs flagged in the run directory). All outputs stay
under --out-dir. The data root comes from --data-dir, falling back to the
FORGETRACE_DATA_DIR environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, STRATEGIES, validate_config, with_overrides
from .corpus import (
    Document,
    Vocab,
    build_vocab,
    load_documents,
    load_entity_dictionary,
    load_raw_documents,
    save_documents,
    tag_entities,
    tokenize,
)
from .memory import ExitPolicy, ReplayMemory, RetrievalStrategy, StoragePolicy
from .metrics import (
    build_entity_evalset,
    build_items_from_docs,
    bucket_by_difficulty,
    entity_accuracy,
    load_eval_items,
    save_eval_items,
)
from .scheduler import (
    CurveConfig,
    DivergenceAbort,
    ExperimentData,
    Runner,
    cost_report,
    run_ab_transition,
    run_forgetting_curve,
    run_pretraining,
)
from .rng import substream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep usage errors on exit code 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="forgetrace", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out-dir", required=True, help="all outputs land here")
        sp.add_argument("--seed", type=int, default=None)
        return sp

    sp = common(sub.add_parser("build-corpus", help="tokenize a raw JSONL corpus"))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--max-vocab", type=int, default=2048)

    sp = common(sub.add_parser("tag-entities", help="dictionary entity tagging"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--entities", required=True)

    sp = common(sub.add_parser("build-evalset", help="construct eval item pairs"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--entities", required=True)
    sp.add_argument("--mode", choices=("ab_median", "all"), default="ab_median")
    sp.add_argument("--fraction", type=float, default=1.0)

    sp = common(sub.add_parser("train", help="run one pre-training strategy"))
    sp.add_argument("--strategy", choices=STRATEGIES, required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--data-dir", default=None)

    sp = common(sub.add_parser("curve", help="forgetting-curve experiment"))
    sp.add_argument("--config", required=True)
    sp.add_argument("--data-dir", default=None)
    sp.add_argument("--intensities", default="1,5,100")
    sp.add_argument("--periodic", action="store_true")
    sp.add_argument("--periodic-interval", type=int, default=1000)
    sp.add_argument("--periodic-epochs", type=int, default=5)
    sp.add_argument("--buckets", type=int, default=3)
    sp.add_argument("--bucket", default="hard", help="'hard' or a bucket id")

    sp = common(sub.add_parser("report", help="aggregate run directories"))
    sp.add_argument("--runs", required=True, help="comma-separated run dirs")
    sp.add_argument("--table1", action="store_true")

    sp = common(sub.add_parser("inspect-memory", help="replay-count histogram"))
    sp.add_argument("--dump", required=True)
    sp.add_argument("--max-replays", type=int, default=5)

    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _data_dir(args) -> Path:
    cand = args.data_dir or os.environ.get("FORGETRACE_DATA_DIR")
    if not cand:
        raise UsageError("no data root: pass --data-dir or set FORGETRACE_DATA_DIR")
    p = Path(cand)
    if not p.is_dir():
        raise UsageError(f"data root is not a directory: {cand}")
    return p


def _load_experiment(data_dir: Path, eval_fraction: float) -> ExperimentData:
    vocab = Vocab.load(_require_file(data_dir / "vocab.txt", "vocab file"))
    docs = load_documents(_require_file(data_dir / "corpus_tagged.jsonl", "tagged corpus"))
    items = load_eval_items(_require_file(data_dir / "evalitems.jsonl", "eval items"))
    if eval_fraction < 1.0:
        pairs = sorted({it.pair_id for it in items})
        rng = substream(0, "eval-fraction")
        k = max(1, int(len(pairs) * eval_fraction))
        import numpy as np

        keep = set(rng.choice(np.asarray(pairs, dtype=object), size=k, replace=False))
        items = [it for it in items if it.pair_id in keep]
    a = [d for d in docs if d.source == "A"]
    b = [d for d in docs if d.source == "B"]
    return ExperimentData(a_docs=a, b_docs=b, vocab=vocab, items=items)


# -- commands -----------------------------------------------------------------


def cmd_build_corpus(args) -> int:
    src = _require_file(args.input, "corpus input")
    out = Path(args.out_dir)
    records = load_raw_documents(src)
    if not records:
        raise UsageError("empty corpus")
    vocab = build_vocab((r["text"] for r in records), args.max_vocab)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    docs = [
        Document(
            doc_id=int(r["id"]),
            source=r["source"],
            tokens=tokenize(r["text"], vocab),
            char_text=r["text"],
        )
        for r in records
    ]
    save_documents(docs, out / "corpus.jsonl")
    print(f"wrote {len(docs)} documents, vocab size {vocab.size}")
    return 0


def cmd_tag_entities(args) -> int:
    vocab = Vocab.load(_require_file(args.vocab, "vocab file"))
    docs = load_documents(_require_file(args.corpus, "corpus"))
    dictionary = load_entity_dictionary(_require_file(args.entities, "entity dictionary"), vocab)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tagged = [tag_entities(d, dictionary, vocab) for d in docs]
    save_documents(tagged, out / "corpus_tagged.jsonl")
    n_spans = sum(len(d.entities) for d in tagged)
    print(f"tagged {n_spans} spans across {len(tagged)} documents")
    return 0


def cmd_build_evalset(args) -> int:
    vocab = Vocab.load(_require_file(args.vocab, "vocab file"))
    docs = load_documents(_require_file(args.corpus, "tagged corpus"))
    dictionary = load_entity_dictionary(_require_file(args.entities, "entity dictionary"), vocab)
    out = Path(args.out_dir)
    seed = args.seed if args.seed is not None else 0
    if args.mode == "ab_median":
        a = [d for d in docs if d.source == "A"]
        b = [d for d in docs if d.source == "B"]
        items = build_entity_evalset(a, b, dictionary)
        if args.fraction < 1.0:
            items = _subsample_pairs(items, args.fraction, seed)
    else:
        items = build_items_from_docs(docs, dictionary, fraction=args.fraction, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    save_eval_items(items, out / "evalitems.jsonl")
    print(f"wrote {len(items)} eval items ({len(items) // 2} pairs)")
    return 0


def _subsample_pairs(items, fraction, seed):
    import numpy as np

    pairs = sorted({it.pair_id for it in items})
    k = max(1, int(len(pairs) * fraction))
    keep = set(substream(seed, "evalset-subsample").choice(
        np.asarray(pairs, dtype=object), size=k, replace=False
    ))
    return [it for it in items if it.pair_id in keep]


def _run_dirs(out_dir: Path, seeds: list[int]) -> list[tuple[int, Path]]:
    if len(seeds) == 1:
        return [(seeds[0], out_dir)]
    return [(s, out_dir / f"seed{s}") for s in seeds]


def cmd_train(args) -> int:
    cfg = validate_config(_require_file(args.config, "config file"))
    cfg = with_overrides(cfg, args.strategy, args.seed)
    data = _load_experiment(_data_dir(args), cfg.eval_fraction)
    if not data.items:
        raise UsageError("eval item set is empty")
    out = Path(args.out_dir)
    for seed, run_dir in _run_dirs(out, cfg.seeds):
        if cfg.corpus_mode == "sequential_AB":
            _, ledger, _, boundary = run_ab_transition(data, cfg, seed, run_dir)
            print(f"seed {seed}: boundary step {boundary}, ratio {ledger.ratio:.6g}")
        else:
            _, ledger, _ = run_pretraining(data, cfg, seed, run_dir)
            print(f"seed {seed}: ratio {cost_report(ledger, cfg):.6g}")
    return 0


def cmd_curve(args) -> int:
    cfg = validate_config(_require_file(args.config, "config file"))
    cfg = with_overrides(cfg, None, args.seed)
    data = _load_experiment(_data_dir(args), cfg.eval_fraction)
    intensities = sorted({int(x) for x in args.intensities.split(",") if x.strip()})
    if not intensities:
        raise UsageError("no intensities given")
    out = Path(args.out_dir)
    for seed, run_dir in _run_dirs(out, cfg.seeds):
        base_cfg = replace(cfg, strategy="vanilla", epochs=1)
        planner = Runner(data, base_cfg, seed, run_dir / "base")
        per_epoch = planner.plan_total_steps()
        total = (1 + 1) * per_epoch  # one base epoch + one resumed epoch
        base_cfg = replace(base_cfg, total_steps=total)
        state, base_ledger, _ = run_pretraining(data, base_cfg, seed, run_dir / "base")

        acc = entity_accuracy(state, data.items)
        buckets = bucket_by_difficulty(acc, args.buckets)
        if args.bucket == "hard":
            bucket = buckets[0]
        else:
            bucket = buckets[int(args.bucket)]
        target = [it for it in data.items if it.entity_id in bucket.entity_ids]
        ckpt = run_dir / "base" / "checkpoint_final.ftrc"

        for e in intensities:
            curve = CurveConfig(intensive_epochs=e)
            run_forgetting_curve(
                curve, ckpt, data, base_cfg, target, seed, run_dir / f"e{e}",
                base_tokens_seen=base_ledger.tokens_seen,
            )
            print(f"seed {seed}: curve e={e} done")
        if args.periodic:
            curve = CurveConfig(
                intensive_epochs=max(intensities),
                periodic=True,
                periodic_interval=args.periodic_interval,
                periodic_epochs=args.periodic_epochs,
            )
            run_forgetting_curve(
                curve, ckpt, data, base_cfg, target, seed, run_dir / "periodic",
                base_tokens_seen=base_ledger.tokens_seen,
            )
            print(f"seed {seed}: periodic curve done")
    return 0


def _final_metrics_row(run_dir: Path) -> dict[str, str]:
    path = run_dir / "metrics.csv"
    if not path.is_file():
        raise UsageError(f"no metrics.csv in {run_dir}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln]
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:] if not ln.startswith("aborted")]
    if not rows:
        raise UsageError(f"no metric rows in {path}")
    return dict(zip(header, rows[-1]))


def _run_strategy(run_dir: Path) -> str:
    cfg_path = run_dir / "run.cfg"
    if cfg_path.is_file():
        for line in cfg_path.read_text(encoding="utf-8").splitlines():
            if line.startswith("strategy"):
                return line.split("=", 1)[1].strip()
    return run_dir.name


def cmd_report(args) -> int:
    run_dirs = [Path(r) for r in args.runs.split(",") if r.strip()]
    for rd in run_dirs:
        if not rd.is_dir():
            raise UsageError(f"run directory not found: {rd}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    names_used: set[str] = set()
    table_lines = ["strategy,ppl_ent,mf_ent,m_ex,m_in"]
    for rd in run_dirs:
        row = _final_metrics_row(rd)
        strategy = _run_strategy(rd)
        table_lines.append(
            f"{strategy},{row['ppl']},{row['mf']},{row['m_ex']},{row['m_in']}"
        )
        name = f"{strategy}_{rd.name}"
        k = 2
        while name in names_used:
            name = f"{strategy}_{rd.name}_{k}"
            k += 1
        names_used.add(name)
        (curves / f"{name}.csv").write_text(
            (rd / "metrics.csv").read_text(encoding="utf-8"), encoding="utf-8"
        )
    if args.table1:
        (out / "table1.csv").write_text("\n".join(table_lines) + "\n", encoding="utf-8")
        print(f"wrote {out / 'table1.csv'}")
    print(f"exported {len(run_dirs)} curve CSVs")
    return 0


def cmd_inspect_memory(args) -> int:
    dump = _require_file(args.dump, "memory dump")
    mem = ReplayMemory.restore(
        dump,
        StoragePolicy("all"),
        RetrievalStrategy("random"),
        ExitPolicy(args.max_replays),
    )
    hist = mem.replay_histogram()
    eligible = len(mem.eligible_ids())
    print(f"entries={len(mem.entries)} eligible={eligible}")
    for count, n in hist.items():
        marker = "eligible" if count < args.max_replays else "exited"
        print(f"replay_count={count} entries={n} {marker}")
    return 0


_COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "tag-entities": cmd_tag_entities,
    "build-evalset": cmd_build_evalset,
    "train": cmd_train,
    "curve": cmd_curve,
    "report": cmd_report,
    "inspect-memory": cmd_inspect_memory,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        if isinstance(e, ConfigError):
            for problem in e.problems:
                print(f"config error: {problem}", file=sys.stderr)
        else:
            print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DivergenceAbort as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, AssertionError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
