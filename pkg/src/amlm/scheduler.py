"""Adaptive masking: per-token mask weights driven by prediction statistics.

Each token type carries a weight ``w[i]`` that starts at the scheduled mask
rate. Masked-position outcomes are accumulated for ``timestep_batches``
batches; at the boundary every observed type is pulled towards
``p * (1 - score)`` with an exponential moving average, where ``score`` is a
smoothed accuracy (``hard``) or a min-max normalised, inverted mean loss
(``soft``). ``regular`` keeps the weights uniform, which reduces to ordinary
MLM. Per sequence the weights are rescaled so that the expected masking rate
equals the scheduled rate.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .binio import FormatError, Reader, Writer

log = logging.getLogger(__name__)

METRICS = ("hard", "soft", "regular")

ACTION_NONE = -1
ACTION_MASK = 0
ACTION_RANDOM = 1
ACTION_KEEP = 2


@dataclass
class MaskScheduleConfig:
    p_start: float = 0.40
    p_end: float = 0.15
    total_steps: int = 1
    lam: float = 0.2
    timestep_batches: int = 200
    metric: str = "hard"
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    seed: int = 0
    # False: the EMA target uses p_end regardless of where the decay is
    track_schedule: bool = True

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not 0 < self.p_end <= self.p_start <= 1:
            raise ValueError(f"need 0 < p_end <= p_start <= 1, got p_start={self.p_start}, p_end={self.p_end}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ValueError(f"mask/random/keep fractions must be non-negative and sum to 1, got {fracs}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.timestep_batches < 1:
            raise ValueError("timestep_batches must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def scheduled_p(step: int, config: MaskScheduleConfig) -> float:
    """Linear decay from ``p_start`` to ``p_end``; clamps past ``total_steps``."""
    if step <= 0:
        return config.p_start
    if step >= config.total_steps:
        return config.p_end
    return config.p_start + (config.p_end - config.p_start) * step / config.total_steps


def target_p(step: int, config: MaskScheduleConfig) -> float:
    return scheduled_p(step, config) if config.track_schedule else config.p_end


@dataclass
class MaskWeightTable:
    w: np.ndarray
    special: np.ndarray  # bool, never masked
    t: int = 0
    p_current: float = 0.0
    p_max: float = 0.0  # largest p_mlm seen so far; upper bound for w

    @property
    def vocab_size(self) -> int:
        return len(self.w)

    def copy(self) -> "MaskWeightTable":
        return MaskWeightTable(self.w.copy(), self.special.copy(), self.t, self.p_current, self.p_max)


def init_weights(config: MaskScheduleConfig, special: np.ndarray) -> MaskWeightTable:
    """Uniform start: every non-special type gets ``p_start``.

    ``special`` is a boolean mask over the vocabulary (``Vocabulary.special_mask``).
    """
    special = np.asarray(special, dtype=bool)
    w = np.where(special, 0.0, config.p_start)
    return MaskWeightTable(w=w, special=special.copy(), t=0, p_current=config.p_start, p_max=config.p_start)


def set_step(table: MaskWeightTable, step: int, config: MaskScheduleConfig) -> None:
    """Move the table's current rate to the scheduled value for ``step``."""
    table.p_current = scheduled_p(step, config)
    table.p_max = max(table.p_max, table.p_current)
    if config.metric == "regular":
        table.w[~table.special] = table.p_current


@dataclass
class TokenStatsAccumulator:
    correct: np.ndarray
    total: np.ndarray
    loss_sum: np.ndarray
    loss_count: np.ndarray

    @classmethod
    def zeros(cls, vocab_size: int) -> "TokenStatsAccumulator":
        return cls(
            np.zeros(vocab_size, dtype=np.int64),
            np.zeros(vocab_size, dtype=np.int64),
            np.zeros(vocab_size, dtype=np.float64),
            np.zeros(vocab_size, dtype=np.int64),
        )

    @property
    def vocab_size(self) -> int:
        return len(self.total)

    def record(self, ids, correct, losses) -> "TokenStatsAccumulator":
        ids = np.asarray(ids, dtype=np.int64).ravel()
        correct = np.asarray(correct, dtype=bool).ravel()
        losses = np.asarray(losses, dtype=np.float64).ravel()
        if not (len(ids) == len(correct) == len(losses)):
            raise ValueError("ids, correct and losses must have equal length")
        ok = np.isfinite(losses)
        if not ok.all():
            log.warning("dropping %d outcome(s) with non-finite loss; training may be diverging", int((~ok).sum()))
        if (losses[ok] < 0).any():
            raise ValueError("cross-entropy losses must be non-negative")
        ids, correct, losses = ids[ok], correct[ok], losses[ok]
        n = self.vocab_size
        self.total += np.bincount(ids, minlength=n)
        self.correct += np.bincount(ids[correct], minlength=n)
        self.loss_sum += np.bincount(ids, weights=losses, minlength=n)
        self.loss_count += np.bincount(ids, minlength=n)
        return self

    def merge(self, other: "TokenStatsAccumulator") -> "TokenStatsAccumulator":
        self.correct += other.correct
        self.total += other.total
        self.loss_sum += other.loss_sum
        self.loss_count += other.loss_count
        return self

    def reset(self) -> None:
        for arr in (self.correct, self.total, self.loss_sum, self.loss_count):
            arr.fill(0)

    def copy(self) -> "TokenStatsAccumulator":
        return TokenStatsAccumulator(self.correct.copy(), self.total.copy(), self.loss_sum.copy(), self.loss_count.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenStatsAccumulator):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.correct, self.total, self.loss_sum, self.loss_count),
                (other.correct, other.total, other.loss_sum, other.loss_count),
            )
        )


def record_batch(acc: TokenStatsAccumulator, outcomes: Iterable[tuple[int, bool, float]]) -> TokenStatsAccumulator:
    """Record ``(token_id, correct, loss)`` triples."""
    rows = list(outcomes)
    if not rows:
        return acc
    ids, correct, losses = zip(*rows)
    return acc.record(ids, correct, losses)


def hard_score(correct, total):
    """Smoothed accuracy ``(correct + 0.5) / (total + 1)``."""
    c = np.asarray(correct)
    t = np.asarray(total)
    if np.any(c > t) or np.any(c < 0):
        raise ValueError("corrupted statistics: need 0 <= correct <= total")
    out = (c + 0.5) / (t + 1.0)
    return float(out) if out.ndim == 0 else out


def _soft_score_array(acc: TokenStatsAccumulator) -> np.ndarray:
    """Scores for observed ids, NaN elsewhere."""
    seen = acc.loss_count > 0
    scores = np.full(acc.vocab_size, np.nan)
    if not seen.any():
        return scores
    mean_loss = acc.loss_sum[seen] / acc.loss_count[seen]
    lo, hi = mean_loss.min(), mean_loss.max()
    if hi == lo:
        scores[seen] = 0.5
    else:
        scores[seen] = 1.0 - (mean_loss - lo) / (hi - lo)
    return scores


def soft_scores(acc: TokenStatsAccumulator) -> dict[int, float]:
    """Inverted, min-max normalised mean loss per observed token id."""
    scores = _soft_score_array(acc)
    return {int(i): float(scores[i]) for i in np.flatnonzero(acc.loss_count > 0)}


def apply_scores(table: MaskWeightTable, ids, scores, p_mlm: float, lam: float) -> None:
    """EMA step ``w <- lam * w + (1 - lam) * p_mlm * (1 - score)`` on ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    keep = ~table.special[ids]
    ids, scores = ids[keep], scores[keep]
    table.w[ids] = lam * table.w[ids] + (1.0 - lam) * p_mlm * (1.0 - scores)


def update_weights(
    table: MaskWeightTable,
    acc: TokenStatsAccumulator,
    config: MaskScheduleConfig,
    step: int,
) -> MaskWeightTable:
    """Close a timestep: fold the accumulated scores into the weights.

    Types that were not predicted during the timestep keep their weight.
    The accumulator is reset and ``table.t`` advanced.
    """
    p_mlm = target_p(step, config)
    table.p_max = max(table.p_max, p_mlm)
    if config.metric == "regular":
        table.w[~table.special] = scheduled_p(step, config)
    else:
        observed = np.flatnonzero((acc.total > 0) & ~table.special)
        if config.metric == "hard":
            scores = hard_score(acc.correct[observed], acc.total[observed])
        else:
            scores = _soft_score_array(acc)[observed]
        apply_scores(table, observed, scores, p_mlm, config.lam)
    acc.reset()
    table.t += 1
    table.p_current = scheduled_p(step, config)
    return table


@dataclass
class MaskDecision:
    """Which positions are predicted and how their inputs are corrupted.

    Arrays share the shape of the token ids they were sampled for (1-D for
    one sequence, 2-D for a batch).
    """

    selected: np.ndarray  # bool
    action: np.ndarray  # int8, ACTION_* (ACTION_NONE where not selected)
    replacement: np.ndarray  # int64 random id where action == ACTION_RANDOM, else -1
    probs: np.ndarray = field(repr=False)  # per-position selection probability

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.selected) if self.selected.ndim == 1 else np.argwhere(self.selected)

    def apply(self, ids: np.ndarray, mask_id: int) -> np.ndarray:
        out = np.array(ids, dtype=np.int64, copy=True)
        out[self.action == ACTION_MASK] = mask_id
        rnd = self.action == ACTION_RANDOM
        out[rnd] = self.replacement[rnd]
        return out


def mask_probabilities(
    ids: np.ndarray,
    table: MaskWeightTable,
    config: MaskScheduleConfig,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Per-position selection probabilities, rescaled so each row averages ``p_current``.

    ``q = min(1, c * w)`` with ``c = p * n / sum(w)`` where ``n`` counts the
    eligible (non-special, non-padding) positions of the row. Rows whose
    weights sum to zero fall back to a flat ``p``.
    """
    ids = np.atleast_2d(ids)
    eligible = ~table.special[ids]
    if valid is not None:
        eligible &= np.atleast_2d(valid)
    p = table.p_current
    if config.metric == "regular":
        return np.where(eligible, p, 0.0)
    w = np.where(eligible, table.w[ids], 0.0)
    wsum = w.sum(axis=1, keepdims=True)
    n = eligible.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(wsum > 0, p * n / wsum, 0.0)
    q = np.minimum(1.0, scale * w)
    return np.where(wsum > 0, q, np.where(eligible, p, 0.0))


def sample_mask(
    ids: np.ndarray,
    table: MaskWeightTable,
    config: MaskScheduleConfig,
    rng: np.random.Generator,
    valid: np.ndarray | None = None,
) -> MaskDecision:
    """Draw positions independently with :func:`mask_probabilities`, then
    assign mask/random/keep actions to the selected ones.

    Random draws are made for every position whether selected or not, so
    the stream advances by a fixed amount per call.
    """
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    ids2 = np.atleast_2d(ids)
    q = mask_probabilities(ids2, table, config, valid)
    shape = ids2.shape
    u_select = rng.random(shape)
    u_action = rng.random(shape)
    normal = np.flatnonzero(~table.special)
    repl = normal[rng.integers(0, len(normal), size=shape)]

    selected = u_select < q
    action = np.full(shape, ACTION_NONE, dtype=np.int8)
    cut_mask = config.mask_frac
    cut_rand = config.mask_frac + config.random_frac
    action[selected & (u_action < cut_mask)] = ACTION_MASK
    action[selected & (u_action >= cut_mask) & (u_action < cut_rand)] = ACTION_RANDOM
    action[selected & (u_action >= cut_rand)] = ACTION_KEEP
    replacement = np.where(action == ACTION_RANDOM, repl, -1)
    if squeeze:
        return MaskDecision(selected[0], action[0], replacement[0], q[0])
    return MaskDecision(selected, action, replacement, q)


# --- checkpoint ---------------------------------------------------------------
#
# offset  field
# 0       magic        8 bytes  b"AMLMSCHD"
# 8       version      u32      (1)
# 12      config_len   u32, then config_len bytes of UTF-8 JSON (config echo)
# ..      vocab_size   u64  (V)
#         t            u64
#         p_current    f64
#         p_max        f64
#         special      u8[V]
#         w            f64[V]
#         correct      i64[V]
#         total        i64[V]
#         loss_sum     f64[V]
#         loss_count   i64[V]
#         rng_state    40 bytes (PCG64: state u128, inc u128, has_uint32 u32, uinteger u32)
# All numbers little-endian; nothing follows the rng state.

SCHED_MAGIC = b"AMLMSCHD"
SCHED_VERSION = 1


def checkpoint_save(
    path: str | Path,
    table: MaskWeightTable,
    acc: TokenStatsAccumulator,
    rng: np.random.Generator,
    config: MaskScheduleConfig,
) -> None:
    out = Writer()
    out.raw(SCHED_MAGIC)
    out.pack("I", SCHED_VERSION)
    out.blob(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8"))
    out.pack("QQdd", table.vocab_size, table.t, table.p_current, table.p_max)
    out.array(table.special, "u1")
    out.array(table.w, "f8")
    out.array(acc.correct, "i8")
    out.array(acc.total, "i8")
    out.array(acc.loss_sum, "f8")
    out.array(acc.loss_count, "i8")
    out.raw(rngmod.pack_state(rng))
    out.write(path)


def checkpoint_load(
    path: str | Path,
) -> tuple[MaskWeightTable, TokenStatsAccumulator, np.random.Generator, MaskScheduleConfig]:
    rd = Reader.open(path)
    rd.expect_magic(SCHED_MAGIC)
    rd.expect_version(SCHED_VERSION)
    try:
        config = MaskScheduleConfig(**json.loads(rd.blob().decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable config echo: {exc}") from exc
    v, t, p_current, p_max = rd.unpack("QQdd")
    special = rd.array("u1", v).astype(bool)
    table = MaskWeightTable(rd.array("f8", v), special, int(t), float(p_current), float(p_max))
    acc = TokenStatsAccumulator(rd.array("i8", v), rd.array("i8", v), rd.array("f8", v), rd.array("i8", v))
    rng = rngmod.unpack_state(rd.raw(rngmod.RNG_STATE_BYTES))
    rd.finish()
    return table, acc, rng, config
