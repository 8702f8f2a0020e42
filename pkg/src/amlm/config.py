"""Flat ``key = value`` run configuration covering model, masking and run settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .model import ToyModelConfig
from .scheduler import MaskScheduleConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


PATH_KEYS = ("vocab", "corpus", "pretokenized", "nhot", "pos_map")


@dataclass
class TrainConfig:
    # inputs
    vocab: str = ""
    corpus: str = ""  # raw text, one document per line
    pretokenized: str = ""  # alternative to corpus: whitespace-separated ids per line
    nhot: str = ""  # precomputed table; built from the vocab when empty and use_nhot is on
    pos_map: str = ""

    # run
    seed: int = 0
    batch_size: int = 32
    seq_len: int = 64
    seq_len_final: int = 0  # 0: no length staging
    switch_epoch: int = 5
    epochs: int = 10
    total_steps: int = 0  # 0: derived from epochs
    lr: float = 7e-3
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip: float = 1.0
    precision: str = "float32"
    checkpoint_every: int = 0  # in batches; 0: every timestep
    bin_size: int = 1000
    eval_sequences: int = 64  # fixed probe set scored at every timestep; 0 disables
    log_tokens: bool = False
    occurrence_weighted: bool = False

    # masking
    schedule: str = "decay"  # "constant" pins the rate at p_end
    p_start: float = 0.40
    p_end: float = 0.15
    lam: float = 0.2
    timestep_batches: int = 200
    metric: str = "hard"
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    track_schedule: bool = True

    # model
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0
    max_len: int = 512
    dropout: float = 0.1
    use_nhot: bool = False
    tie_embeddings: bool = True
    nhot_normalize: bool = False

    def __post_init__(self) -> None:
        if self.schedule not in ("decay", "constant"):
            raise ConfigError(f"schedule must be 'decay' or 'constant', got {self.schedule!r}", "schedule")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}", "precision")
        for key in ("batch_size", "seq_len", "epochs", "bin_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key)
        # surface bad model/masking settings as config errors early
        try:
            self.schedule_config(1)
            self.model_config(1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule_config(self, total_steps: int) -> MaskScheduleConfig:
        p_start = self.p_end if self.schedule == "constant" else self.p_start
        return MaskScheduleConfig(
            p_start=p_start, p_end=self.p_end, total_steps=max(1, total_steps), lam=self.lam,
            timestep_batches=self.timestep_batches, metric=self.metric, mask_frac=self.mask_frac,
            random_frac=self.random_frac, keep_frac=self.keep_frac, seed=self.seed,
            track_schedule=self.track_schedule,
        )

    def model_config(self, vocab_size: int) -> ToyModelConfig:
        max_len = max(self.max_len, self.seq_len, self.seq_len_final)
        return ToyModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ff=self.d_ff, max_len=max_len, dropout=self.dropout, use_nhot=self.use_nhot,
            tie_embeddings=self.tie_embeddings, nhot_normalize=self.nhot_normalize,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, raw: str) -> Any:
    kind = type(_FIELDS[key].default)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {kind.__name__})", key) from exc


def parse_overrides(pairs: dict[str, str]) -> dict[str, Any]:
    out = {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", key)
        out[key] = _coerce(key, raw)
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Relative input
    paths are resolved against the file's directory."""
    path = Path(path)
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}", key)
        pairs[key] = value
    values = parse_overrides(pairs)
    for key in PATH_KEYS:
        if values.get(key):
            p = Path(values[key])
            if not p.is_absolute():
                values[key] = str((path.parent / p).resolve())
    return values


def load_config(path: str | Path | None = None, **overrides: Any) -> TrainConfig:
    """File values first, then ``overrides`` (command-line flags win)."""
    values = read_config_file(path) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELDS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {key!r}", key)
    try:
        return TrainConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
