"""Run configuration: flat key/value config files, normalization, validation.

Unknown keys, duplicate keys and constraint violations are all reported
together so a bad config surfaces every problem in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .memory import NO_EXIT
from .model import ModelConfig

STRATEGIES = (
    "vanilla",
    "upper_bound",
    "bm25_all",
    "bm25_entity",
    "focused_stochastic",
    "intensive_focused",
)
CORPUS_MODES = ("sequential_AB", "mixed_shuffled")

# strategy -> (storage policy, retrieval, exit limited?)
STRATEGY_WIRING = {
    "bm25_all": ("all", "bm25", False),
    "bm25_entity": ("entity_only", "bm25", False),
    "focused_stochastic": ("entity_only", "random", True),
    "intensive_focused": ("entity_only", "random", True),
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    strategy: str = "vanilla"
    replay_interval: int = 100  # T
    replay_epochs: int | None = None  # f; None = 1, or 5 for intensive_focused
    max_replays: int = 5
    eval_every: int = 1000
    checkpoint_every: int = 0  # 0 = follow eval cadence, -1 = final only
    batch_size: int = 16
    seq_len: int = 128
    corpus_mode: str = "mixed_shuffled"
    epochs: int = 1
    a_epochs: int = 1  # sequential_AB: epochs over A before the boundary
    b_epochs: int = 1
    high_loss_fraction: float = 0.5
    memory_capacity: int = 0
    eval_fraction: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [1])
    # model block
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 256
    context_len: int = 128
    max_lr: float = 6e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = -1  # -1 = 1% of total_steps
    total_steps: int = 0  # 0 = derived from the corpus
    dtype: str = "float64"

    @property
    def replays(self) -> bool:
        return self.strategy in STRATEGY_WIRING

    @property
    def effective_replay_epochs(self) -> int:
        if self.replay_epochs is None:
            return 5 if self.strategy == "intensive_focused" else 1
        return self.replay_epochs

    @property
    def effective_max_replays(self) -> int:
        if self.strategy in STRATEGY_WIRING and not STRATEGY_WIRING[self.strategy][2]:
            return NO_EXIT
        return self.max_replays

    def model_config(self, vocab_size: int, total_steps: int, seed: int) -> ModelConfig:
        total = self.total_steps if self.total_steps > 0 else total_steps
        warmup = self.warmup_steps
        if warmup < 0:
            warmup = max(1, round(0.01 * total))
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ffn=self.d_ffn,
            vocab_size=vocab_size,
            context_len=self.context_len,
            max_lr=self.max_lr,
            min_lr_ratio=self.min_lr_ratio,
            warmup_steps=min(warmup, total),
            total_steps=total,
            init_seed=seed,
            dtype=self.dtype,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seeds":
                v = ",".join(str(s) for s in v)
            elif f.name == "replay_epochs":
                v = self.effective_replay_epochs
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {
    "replay_interval",
    "replay_epochs",
    "max_replays",
    "eval_every",
    "checkpoint_every",
    "batch_size",
    "seq_len",
    "epochs",
    "a_epochs",
    "b_epochs",
    "memory_capacity",
    "n_layers",
    "d_model",
    "n_heads",
    "d_ffn",
    "context_len",
    "warmup_steps",
    "total_steps",
}
_FLOAT_KEYS = {"high_loss_fraction", "eval_fraction", "max_lr", "min_lr_ratio"}
_STR_KEYS = {"strategy", "corpus_mode", "dtype"}
_KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | {"seeds"}


def parse_config_text(text: str) -> tuple[dict[str, str], list[str]]:
    """key = value lines; '#' comments; duplicates and malformed lines are errors."""
    raw: dict[str, str] = {}
    problems: list[str] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            problems.append(f"duplicate key {key!r}")
            continue
        raw[key] = value
    return raw, problems


def _normalize(raw: dict[str, str], problems: list[str]) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key not in _KNOWN_KEYS:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            if key in _INT_KEYS:
                setattr(cfg, key, int(value))
            elif key in _FLOAT_KEYS:
                setattr(cfg, key, float(value))
            elif key == "seeds":
                cfg.seeds = [int(s) for s in value.split(",") if s.strip()]
            else:
                setattr(cfg, key, value)
        except ValueError:
            problems.append(f"{key}: cannot parse {value!r}")
    return cfg


def check_constraints(cfg: RunConfig) -> list[str]:
    problems = []
    if cfg.strategy not in STRATEGIES:
        problems.append(f"strategy: unknown strategy {cfg.strategy!r}")
    if cfg.replay_interval < 1:
        problems.append("replay_interval must be >= 1")
    if cfg.replay_epochs is not None and cfg.replay_epochs < 1:
        problems.append("replay_epochs must be >= 1")
    if cfg.max_replays < 1:
        problems.append("max_replays must be >= 1")
    if cfg.eval_every < 1:
        problems.append("eval_every must be >= 1")
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    if cfg.seq_len < 2:
        problems.append("seq_len must be >= 2")
    if cfg.corpus_mode not in CORPUS_MODES:
        problems.append(f"corpus_mode must be one of {CORPUS_MODES}")
    if cfg.epochs < 1 or cfg.a_epochs < 1 or cfg.b_epochs < 1:
        problems.append("epochs, a_epochs, b_epochs must be >= 1")
    if not (0 < cfg.high_loss_fraction <= 1):
        problems.append("high_loss_fraction must be in (0, 1]")
    if not (0 < cfg.eval_fraction <= 1):
        problems.append("eval_fraction must be in (0, 1]")
    if not cfg.seeds:
        problems.append("seeds must be non-empty")
    if cfg.seq_len > cfg.context_len:
        problems.append("seq_len must not exceed context_len")
    try:
        cfg.model_config(vocab_size=8, total_steps=max(cfg.total_steps, 1), seed=0).validate()
    except ValueError as e:
        problems.append(str(e).removeprefix("invalid config: "))
    return problems


def validate_config(path: str | Path) -> RunConfig:
    """Parse + normalize + constraint-check; raises ConfigError listing every
    violation with its key name."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError([f"cannot read config file: {e}"])
    raw, problems = parse_config_text(text)
    cfg = _normalize(raw, problems)
    problems.extend(check_constraints(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def with_overrides(cfg: RunConfig, strategy: str | None, seed: int | None) -> RunConfig:
    out = replace(cfg)
    if strategy is not None:
        out.strategy = strategy
    if seed is not None:
        out.seeds = [seed]
    problems = check_constraints(out)
    if problems:
        raise ConfigError(problems)
    return out
