"""CLI: exit codes, config validation, the full pipeline on a tiny corpus."""

import json
import os

import pytest

from forgetrace.cli import dispatch
from forgetrace.config import ConfigError, validate_config
from forgetrace.synthdata import SynthCorpus, SynthSpec, generate


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    """Raw corpus + entities + tokenized/tagged artifacts + eval items."""
    root = tmp_path_factory.mktemp("data")
    spec = SynthSpec(
        n_a_docs=24,
        n_b_docs=24,
        n_target_entities=4,
        n_distractor_entities=4,
        target_occurrences=4,
        distractor_occurrences=4,
        filler_doc_len=80,
        seed=11,
    )
    corpus_path, entities_path = generate(spec).write(root)
    assert dispatch(
        ["build-corpus", "--in", str(corpus_path), "--out-dir", str(root), "--max-vocab", "1024"]
    ) == 0
    assert dispatch(
        [
            "tag-entities",
            "--corpus", str(root / "corpus.jsonl"),
            "--vocab", str(root / "vocab.txt"),
            "--entities", str(entities_path),
            "--out-dir", str(root),
        ]
    ) == 0
    assert dispatch(
        [
            "build-evalset",
            "--corpus", str(root / "corpus_tagged.jsonl"),
            "--vocab", str(root / "vocab.txt"),
            "--entities", str(entities_path),
            "--mode", "all",
            "--out-dir", str(root),
        ]
    ) == 0
    return root


def micro_cfg_text(**kw) -> str:
    base = {
        "batch_size": 2,
        "seq_len": 64,
        "eval_every": 50,
        "n_layers": 1,
        "d_model": 16,
        "n_heads": 2,
        "d_ffn": 32,
        "context_len": 128,
        "max_lr": 1e-3,
        "warmup_steps": 0,
    }
    base.update(kw)
    return "\n".join(f"{k} = {v}" for k, v in base.items()) + "\n"


# -- dispatch basics --------------------------------------------------------------


def test_unknown_command_exits_one(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "frobnicate" in capsys.readouterr().err


def test_unknown_strategy_named(capsys, tmp_path):
    rc = dispatch(
        ["train", "--strategy", "bogus", "--config", "x", "--out-dir", str(tmp_path)]
    )
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_unknown_flag_named(capsys, tmp_path):
    rc = dispatch(["report", "--runs", "a", "--out-dir", str(tmp_path), "--wat"])
    assert rc == 1
    assert "--wat" in capsys.readouterr().err


def test_missing_data_dir_is_usage_error(capsys, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text())
    env = os.environ.pop("FORGETRACE_DATA_DIR", None)
    try:
        rc = dispatch(
            ["train", "--strategy", "vanilla", "--config", str(cfg),
             "--out-dir", str(tmp_path / "out")]
        )
    finally:
        if env is not None:
            os.environ["FORGETRACE_DATA_DIR"] = env
    assert rc == 1
    assert "FORGETRACE_DATA_DIR" in capsys.readouterr().err


# -- config validation ---------------------------------------------------------------


def test_validate_config_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("# all defaults\n")
    cfg = validate_config(path)
    assert cfg.effective_replay_epochs == 1
    assert cfg.replay_interval == 100
    assert cfg.max_replays == 5
    assert cfg.eval_every == 1000


def test_validate_config_t_zero(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("replay_interval = 0\n")
    with pytest.raises(ConfigError) as err:
        validate_config(path)
    assert any("replay_interval must be >= 1" in p for p in err.value.problems)


def test_validate_config_duplicate_key(tmp_path):
    path = tmp_path / "dup.cfg"
    path.write_text("batch_size = 2\nbatch_size = 4\n")
    with pytest.raises(ConfigError) as err:
        validate_config(path)
    assert any("duplicate key 'batch_size'" in p for p in err.value.problems)


def test_validate_config_unknown_key(tmp_path):
    path = tmp_path / "unk.cfg"
    path.write_text("wibble = 3\n")
    with pytest.raises(ConfigError) as err:
        validate_config(path)
    assert any("unknown key 'wibble'" in p for p in err.value.problems)


def test_validate_config_reports_all_violations(tmp_path):
    path = tmp_path / "multi.cfg"
    path.write_text("replay_interval = 0\neval_every = 0\nwibble = 1\n")
    with pytest.raises(ConfigError) as err:
        validate_config(path)
    assert len(err.value.problems) == 3


def test_intensive_default_replay_epochs(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("")
    cfg = validate_config(path)
    from forgetrace.config import with_overrides

    assert with_overrides(cfg, "intensive_focused", None).effective_replay_epochs == 5
    assert with_overrides(cfg, "focused_stochastic", None).effective_replay_epochs == 1


# -- pipeline -------------------------------------------------------------------------


def test_build_pipeline_artifacts(tiny_dataset):
    assert (tiny_dataset / "vocab.txt").is_file()
    docs = [
        json.loads(ln)
        for ln in (tiny_dataset / "corpus_tagged.jsonl").read_text().splitlines()
    ]
    assert any("entities" in d for d in docs)
    items = (tiny_dataset / "evalitems.jsonl").read_text().splitlines()
    assert len(items) >= 4


def test_train_vanilla_happy_path(tiny_dataset, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text())
    out = tmp_path / "run"
    rc = dispatch(
        ["train", "--strategy", "vanilla", "--config", str(cfg), "--seed", "1",
         "--data-dir", str(tiny_dataset), "--out-dir", str(out)]
    )
    assert rc == 0
    assert (out / "metrics.csv").is_file()
    assert (out / "ledger.csv").is_file()
    assert (out / "checkpoint_final.ftrc").is_file()
    assert (out / "run.cfg").is_file()


def test_train_env_var_data_dir(tiny_dataset, tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text())
    monkeypatch.setenv("FORGETRACE_DATA_DIR", str(tiny_dataset))
    rc = dispatch(
        ["train", "--strategy", "vanilla", "--config", str(cfg), "--seed", "2",
         "--out-dir", str(tmp_path / "envrun")]
    )
    assert rc == 0


def test_train_writes_only_inside_out_dir(tiny_dataset, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text())
    out = tmp_path / "sandboxed"
    before = {p for p in tmp_path.rglob("*")}
    rc = dispatch(
        ["train", "--strategy", "focused_stochastic", "--config", str(cfg),
         "--seed", "3", "--data-dir", str(tiny_dataset), "--out-dir", str(out)]
    )
    assert rc == 0
    created = {p for p in tmp_path.rglob("*")} - before
    assert created
    assert all(out in p.parents or p == out for p in created)


def test_inspect_memory_histogram(tiny_dataset, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text(replay_interval=3))
    out = tmp_path / "memrun"
    rc = dispatch(
        ["train", "--strategy", "focused_stochastic", "--config", str(cfg),
         "--seed", "1", "--data-dir", str(tiny_dataset), "--out-dir", str(out)]
    )
    assert rc == 0
    capsys.readouterr()
    rc = dispatch(["inspect-memory", "--dump", str(out / "memory.jsonl"),
                   "--out-dir", str(tmp_path / "ignored")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "replay_count=" in text
    assert "eligible=" in text


def test_report_table1(tiny_dataset, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text())
    runs = []
    for strat in ("vanilla", "focused_stochastic"):
        out = tmp_path / strat
        assert dispatch(
            ["train", "--strategy", strat, "--config", str(cfg), "--seed", "1",
             "--data-dir", str(tiny_dataset), "--out-dir", str(out)]
        ) == 0
        runs.append(str(out))
    rep = tmp_path / "report"
    rc = dispatch(["report", "--runs", ",".join(runs), "--table1", "--out-dir", str(rep)])
    assert rc == 0
    lines = (rep / "table1.csv").read_text().splitlines()
    assert lines[0] == "strategy,ppl_ent,mf_ent,m_ex,m_in"
    assert lines[1].startswith("vanilla,")
    assert lines[2].startswith("focused_stochastic,")
    names = {p.name for p in (rep / "curves").iterdir()}
    assert len(names) == 2


def test_report_joins_final_rows(tiny_dataset, tmp_path):
    # the table1 values equal the last row of each run's metrics.csv
    cfg = tmp_path / "c.cfg"
    cfg.write_text(micro_cfg_text())
    out = tmp_path / "v"
    dispatch(
        ["train", "--strategy", "vanilla", "--config", str(cfg), "--seed", "1",
         "--data-dir", str(tiny_dataset), "--out-dir", str(out)]
    )
    rep = tmp_path / "rep"
    dispatch(["report", "--runs", str(out), "--table1", "--out-dir", str(rep)])
    metrics = (out / "metrics.csv").read_text().splitlines()
    header = metrics[0].split(",")
    last = metrics[-1].split(",")
    final = dict(zip(header, last))
    got = (rep / "table1.csv").read_text().splitlines()[1].split(",")
    assert got[1] == final["ppl"]
    assert got[2] == final["mf"]
    assert got[3] == final["m_ex"]
    assert got[4] == final["m_in"]
