"""The adaptive-masking training loop, its checkpoints and run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import subprocess
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import rng as rngmod
from .analytics import PosMap, TrajectoryLog, export, import_log, load_pos_map, snapshot
from .config import ConfigError, TrainConfig, dump_config
from .model import (
    DivergenceError,
    ToyMLM,
    load_blocks,
    load_state_blocks,
    make_optimizer,
    mlm_forward,
    optimizer_step,
    save_blocks,
    state_blocks,
)
from .nhot import NHotTable, build_nhot, load_nhot
from .scheduler import (
    MaskWeightTable,
    TokenStatsAccumulator,
    checkpoint_load,
    checkpoint_save,
    init_weights,
    sample_mask,
    set_step,
    update_weights,
)
from .vocab import (
    FrequencyRanking,
    Vocabulary,
    chunk_documents,
    compute_frequency_ranking,
    load_vocab,
    read_documents,
    read_pretokenized,
    tokenize_documents,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("timestep", "step", "p_current", "masked", "mean_loss", "accuracy", "eval_loss")


def load_corpus(cfg: TrainConfig, vocab: Vocabulary) -> list[np.ndarray]:
    if cfg.pretokenized:
        return read_pretokenized(cfg.pretokenized, vocab.size)
    if cfg.corpus:
        return tokenize_documents(read_documents(cfg.corpus), vocab)
    raise ConfigError("one of 'corpus' or 'pretokenized' is required", "corpus")


@dataclass
class TrainResult:
    out_dir: Path
    steps: int
    n_updates: int
    trajectory: TrajectoryLog
    metrics: list[dict]
    weights: np.ndarray  # (timesteps + 1, vocab_size)
    ranking: FrequencyRanking = field(repr=False)


class Trainer:
    """Owns model, optimizer, weight table and data order for one run.

    Every source of randomness is a named sub-stream of ``cfg.seed`` (see
    :mod:`amlm.rng`), and all of it is captured in checkpoints, so a resumed
    run reproduces an uninterrupted one exactly.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        out_dir: str | Path,
        *,
        vocab: Vocabulary | None = None,
        docs: Sequence[np.ndarray] | None = None,
        nhot: NHotTable | None = None,
        pos_map: PosMap | None = None,
    ):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.vocab = vocab if vocab is not None else load_vocab(cfg.vocab)
        self.docs = list(docs) if docs is not None else load_corpus(cfg, self.vocab)
        if not any(len(d) for d in self.docs):
            raise ConfigError("training corpus is empty", "corpus")
        v = self.vocab.size
        for d in self.docs:
            if len(d) and (d.min() < 0 or d.max() >= v):
                raise ConfigError(f"corpus contains ids outside the vocabulary of {v}", "corpus")
        self.pos_map = pos_map if pos_map is not None else (load_pos_map(cfg.pos_map) if cfg.pos_map else None)
        self.ranking = compute_frequency_ranking(self.docs, v)
        self._chunks: dict[int, list[np.ndarray]] = {}
        self._perm_cache: tuple[int, np.ndarray] | None = None

        self.total_steps = cfg.total_steps or sum(self.batches_in_epoch(e) for e in range(cfg.epochs))
        self.sched = cfg.schedule_config(self.total_steps)
        self.dtype = torch.float64 if cfg.precision == "float64" else torch.float32

        if cfg.use_nhot and nhot is None:
            nhot = load_nhot(cfg.nhot, v) if cfg.nhot else build_nhot(self.vocab)
        self.nhot = nhot
        self.model = ToyMLM(cfg.model_config(v), nhot).to(self.dtype)
        self.model.init_parameters(torch.Generator().manual_seed(rngmod.child_seed(cfg.seed, "init")))
        self.model.dropout_gen = torch.Generator().manual_seed(rngmod.child_seed(cfg.seed, "dropout"))
        self.optimizer = make_optimizer(
            self.model, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
        )

        self.table: MaskWeightTable = init_weights(self.sched, self.vocab.special_mask)
        self.acc = TokenStatsAccumulator.zeros(v)
        self.mask_rng = rngmod.stream(cfg.seed, "mask")
        self.step = 0
        self.n_updates = 0
        self.metrics: list[dict] = []
        self._ts_stats = {"loss_sum": 0.0, "masked": 0, "correct": 0}
        self.trajectory = TrajectoryLog()
        self.weight_history = [self.table.w.copy()]
        self.trajectory.extend(self._snapshot())
        self._probe = self._make_probe()
        self.metrics.append({
            "timestep": 0, "step": 0, "p_current": self.table.p_current, "masked": 0,
            "mean_loss": float("nan"), "accuracy": float("nan"), "eval_loss": self.eval_loss(),
        })
        self.on_update: list[Callable[[int, MaskWeightTable], None]] = []

    # --- data -----------------------------------------------------------------

    def seq_len_for_epoch(self, epoch: int) -> int:
        cfg = self.cfg
        if cfg.seq_len_final and epoch >= cfg.switch_epoch:
            return cfg.seq_len_final
        return cfg.seq_len

    def chunks(self, seq_len: int) -> list[np.ndarray]:
        if seq_len not in self._chunks:
            self._chunks[seq_len] = [c.ids for c in chunk_documents(self.docs, seq_len)]
        return self._chunks[seq_len]

    def batches_in_epoch(self, epoch: int) -> int:
        return math.ceil(len(self.chunks(self.seq_len_for_epoch(epoch))) / self.cfg.batch_size)

    def locate(self, step: int) -> tuple[int, int]:
        epoch = 0
        while step >= (n := self.batches_in_epoch(epoch)):
            step -= n
            epoch += 1
        return epoch, step

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Padded ids ``(B, L)`` and the non-padding mask for ``step``."""
        epoch, idx = self.locate(step)
        chunks = self.chunks(self.seq_len_for_epoch(epoch))
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            self._perm_cache = (epoch, rngmod.stream(self.cfg.seed, "data", epoch).permutation(len(chunks)))
        perm = self._perm_cache[1]
        b = self.cfg.batch_size
        rows = [chunks[i] for i in perm[idx * b:(idx + 1) * b]]
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), self.vocab.pad_id, dtype=np.int64)
        valid = np.zeros((len(rows), width), dtype=bool)
        for r, seq in enumerate(rows):
            ids[r, :len(seq)] = seq
            valid[r, :len(seq)] = True
        return ids, valid

    def _make_probe(self):
        """A fixed set of chunks with every ``p_end``-sampled position replaced by MASK.

        Scored under uniform masking, so the probe loss is comparable across
        metrics and across the run, unlike the adaptive training loss.
        """
        n = self.cfg.eval_sequences
        if n <= 0:
            return None
        chunks = self.chunks(self.cfg.seq_len)
        g = rngmod.stream(self.cfg.seed, "eval")
        pick = g.choice(len(chunks), size=min(n, len(chunks)), replace=False)
        rows = [chunks[i] for i in np.sort(pick)]
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), self.vocab.pad_id, dtype=np.int64)
        valid = np.zeros_like(ids, dtype=bool)
        for r, seq in enumerate(rows):
            ids[r, :len(seq)] = seq
            valid[r, :len(seq)] = True
        selected = valid & ~self.table.special[ids] & (g.random(ids.shape) < self.sched.p_end)
        inputs = np.where(selected, self.vocab.mask_id, ids)
        return inputs, ids, selected, valid

    def eval_loss(self) -> float:
        if self._probe is None:
            return float("nan")
        inputs, ids, selected, valid = self._probe
        self.model.eval()
        with torch.no_grad():
            _, loss, _ = mlm_forward(self.model, inputs, ids, selected, valid, step=self.step)
        return float(loss)

    # --- loop -----------------------------------------------------------------

    def _snapshot(self):
        return snapshot(
            self.table.t, self.table.w, self.table.special, self.ranking, self.cfg.bin_size,
            self.pos_map, self.cfg.log_tokens, self.cfg.occurrence_weighted,
        )

    def train_step(self) -> float:
        step = self.step
        # a diverging step is rolled back so the saved last-good state is exact
        saved = (self.table.copy(), self.mask_rng.bit_generator.state, self.model.dropout_gen.get_state())
        try:
            ids, valid = self.batch(step)
            set_step(self.table, step, self.sched)
            decision = sample_mask(ids, self.table, self.sched, self.mask_rng, valid)
            inputs = decision.apply(ids, self.vocab.mask_id)
            self.model.train()
            _, loss, outcome = mlm_forward(self.model, inputs, ids, decision.selected, valid, step=step)
            loss.backward()
            for p in self.model.parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise DivergenceError(step, "gradient")
        except DivergenceError:
            self.optimizer.zero_grad(set_to_none=True)
            self.table = saved[0]
            self.mask_rng.bit_generator.state = saved[1]
            self.model.dropout_gen.set_state(saved[2])
            raise
        optimizer_step(
            self.model, self.optimizer, step, self.total_steps, self.cfg.lr, self.cfg.warmup_ratio, self.cfg.clip
        )
        self.acc.record(outcome.ids, outcome.correct, outcome.losses)
        st = self._ts_stats
        st["loss_sum"] += float(outcome.losses.sum())
        st["masked"] += len(outcome)
        st["correct"] += int(outcome.correct.sum())
        self.step += 1
        if self.step % self.sched.timestep_batches == 0:
            self._close_timestep()
        return outcome.mean_loss

    def _close_timestep(self) -> None:
        st = self._ts_stats
        p_used = self.table.p_current
        update_weights(self.table, self.acc, self.sched, self.step)
        self.n_updates += 1
        self.weight_history.append(self.table.w.copy())
        self.trajectory.extend(self._snapshot())
        n = st["masked"]
        self.metrics.append({
            "timestep": self.table.t,
            "step": self.step,
            "p_current": p_used,
            "masked": n,
            "mean_loss": st["loss_sum"] / n if n else float("nan"),
            "accuracy": st["correct"] / n if n else float("nan"),
            "eval_loss": self.eval_loss(),
        })
        m = self.metrics[-1]
        log.info("timestep %d (step %d): masked loss %.4f, acc %.4f, probe loss %.4f",
                 m["timestep"], m["step"], m["mean_loss"], m["accuracy"], m["eval_loss"])
        self._ts_stats = {"loss_sum": 0.0, "masked": 0, "correct": 0}
        for hook in self.on_update:
            hook(self.table.t, self.table)

    def _checkpoint_due(self) -> bool:
        every = self.cfg.checkpoint_every or self.sched.timestep_batches
        return self.step % every == 0

    def run(self, max_steps: int | None = None) -> TrainResult:
        """Train until ``total_steps`` (or until ``step == max_steps``)."""
        stop = self.total_steps if max_steps is None else min(max_steps, self.total_steps)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            while self.step < stop:
                self.train_step()
                if self._checkpoint_due():
                    self.save_checkpoint(self.out_dir / "checkpoints" / f"step_{self.step:08d}")
        except DivergenceError:
            # parameters have not been touched by the failing step
            self.save_checkpoint(self.out_dir / "checkpoints" / "last_good")
            self.write_outputs(self.out_dir)
            raise
        self.write_outputs(self.out_dir)
        return self.result()

    def result(self) -> TrainResult:
        return TrainResult(
            self.out_dir, self.step, self.n_updates, self.trajectory, list(self.metrics),
            np.stack(self.weight_history), self.ranking,
        )

    # --- persistence ----------------------------------------------------------

    def write_outputs(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        export(self.trajectory, out_dir / "trajectory.csv", "csv")
        write_metrics(self.metrics, out_dir / "metrics.csv")
        np.save(out_dir / "weights.npy", np.stack(self.weight_history))
        np.save(out_dir / "token_counts.npy", self.ranking.counts)
        np.save(out_dir / "special.npy", self.table.special)

    def save_checkpoint(self, ckpt_dir: str | Path) -> Path:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_save(ckpt_dir / "scheduler.ckpt", self.table, self.acc, self.mask_rng, self.sched)
        blocks = state_blocks(self.model, self.optimizer)
        blocks["rng/dropout"] = self.model.dropout_gen.get_state().numpy().copy()
        meta = {
            "step": self.step,
            "n_updates": self.n_updates,
            "timestep_stats": self._ts_stats,
            "metrics": self.metrics,
            "model_config": self.model.cfg.__dict__,
        }
        save_blocks(ckpt_dir / "model.ckpt", blocks, json.dumps(meta, sort_keys=True).encode("utf-8"))
        export(self.trajectory, ckpt_dir / "trajectory.csv", "csv")
        np.save(ckpt_dir / "weights.npy", np.stack(self.weight_history))
        return ckpt_dir

    def load_checkpoint(self, ckpt_dir: str | Path) -> None:
        ckpt_dir = Path(ckpt_dir)
        table, acc, mask_rng, sched = checkpoint_load(ckpt_dir / "scheduler.ckpt")
        if sched != self.sched:
            raise ConfigError(f"{ckpt_dir}: checkpoint was written under a different masking config")
        if table.vocab_size != self.vocab.size:
            raise ConfigError(f"{ckpt_dir}: checkpoint vocab size {table.vocab_size} != {self.vocab.size}")
        blocks, raw_meta = load_blocks(ckpt_dir / "model.ckpt")
        meta = json.loads(raw_meta.decode("utf-8"))
        load_state_blocks(self.model, blocks, self.optimizer)
        self.model.dropout_gen.set_state(torch.from_numpy(blocks["rng/dropout"].copy()))
        self.table, self.acc, self.mask_rng = table, acc, mask_rng
        self.step = int(meta["step"])
        self.n_updates = int(meta["n_updates"])
        self._ts_stats = meta["timestep_stats"]
        self.metrics = meta["metrics"]
        self.trajectory = import_log(ckpt_dir / "trajectory.csv")
        self.weight_history = list(np.load(ckpt_dir / "weights.npy"))


def write_metrics(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for r in rows:
            wr.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [
            {k: (int(v) if k in ("timestep", "step", "masked") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if sha.returncode == 0 and sha.stdout.strip():
            return f"{__version__}+g{sha.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def build_manifest(cfg: TrainConfig) -> dict:
    inputs = {}
    for key in ("vocab", "corpus", "pretokenized", "nhot", "pos_map"):
        path = getattr(cfg, key)
        if path:
            inputs[key] = {"path": path, "sha256": file_digest(path)}
    return {
        "version": version_string(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": inputs,
        "artifacts": {
            "config": "config.txt",
            "trajectory": "trajectory.csv",
            "metrics": "metrics.csv",
            "weights": "weights.npy",
            "token_counts": "token_counts.npy",
            "special": "special.npy",
            "checkpoints": "checkpoints/",
        },
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished_at": None,
    }


def write_manifest(out_dir: str | Path, manifest: dict) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(manifest: dict) -> list[str]:
    """Names of inputs whose current digest differs from the recorded one."""
    drift = []
    for key, entry in manifest.get("inputs", {}).items():
        try:
            if file_digest(entry["path"]) != entry["sha256"]:
                drift.append(key)
        except OSError:
            drift.append(key)
    return drift


def train(cfg: TrainConfig, out_dir: str | Path, resume: str | Path | None = None, **kwargs) -> TrainResult:
    """Write config and manifest, then run (optionally from a checkpoint)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg)
    write_manifest(out_dir, manifest)
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    trainer = Trainer(cfg, out_dir, **kwargs)
    if resume is not None:
        trainer.load_checkpoint(resume)
    result = trainer.run()
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    write_manifest(out_dir, manifest)
    return result
