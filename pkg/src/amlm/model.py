"""A desk-scale masked language model.

Input embedding = token embedding + (optionally) a linear projection of the
token's sub-token membership vector + fixed sinusoidal positions. A stack of
pre-LN encoder layers follows, then a final LayerNorm and a softmax head tied
to the token embedding. Loss is cross-entropy at the selected positions only,
against the uncorrupted ids.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .binio import FormatError, Reader, Writer
from .nhot import NHotTable


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class ToyModelConfig:
    vocab_size: int = 0
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0  # 0 -> 4 * d_model
    max_len: int = 512
    dropout: float = 0.1
    use_nhot: bool = False
    tie_embeddings: bool = True
    nhot_normalize: bool = False  # divide the membership vector by its length

    def __post_init__(self) -> None:
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d_model)
    pe = torch.zeros(max_len, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return pe


def _dropout(x: torch.Tensor, p: float, training: bool, gen: torch.Generator | None) -> torch.Tensor:
    # F.dropout cannot take a generator; a private one keeps resumes bit-exact
    if not training or p == 0.0:
        return x
    keep = torch.empty(x.shape, dtype=x.dtype).bernoulli_(1.0 - p, generator=gen)
    return x * keep / (1.0 - p)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.p = cfg.dropout
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor, gen: torch.Generator | None) -> torch.Tensor:
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, h, d // h).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + _dropout(self.proj(y), self.p, self.training, gen)
        y = self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x + _dropout(y, self.p, self.training, gen)


class ToyMLM(nn.Module):
    def __init__(self, cfg: ToyModelConfig, nhot: NHotTable | None = None):
        super().__init__()
        self.cfg = cfg
        v, d = cfg.vocab_size, cfg.d_model
        self.tok_emb = nn.Embedding(v, d)
        if cfg.use_nhot:
            if nhot is None:
                raise ValueError("use_nhot requires an NHotTable")
            if nhot.vocab_size != v:
                raise ValueError(f"n-hot table covers {nhot.vocab_size} ids, model vocab is {v}")
            self.nhot_proj = nn.Parameter(torch.empty(v, d))
            feats = nhot.padded(pad_value=0)
            counts = nhot.counts()
            width = feats.shape[1]
            weight = (np.arange(width)[None, :] < counts[:, None]).astype(np.float64)
            if cfg.nhot_normalize:
                weight /= np.maximum(counts, 1)[:, None]
            self.register_buffer("nhot_feats", torch.from_numpy(feats), persistent=False)
            self.register_buffer("nhot_weight", torch.from_numpy(weight).float(), persistent=False)
        else:
            self.nhot_proj = None
        self.register_buffer("pos", sinusoidal_positions(cfg.max_len, d), persistent=False)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        if cfg.tie_embeddings:
            self.head_bias = nn.Parameter(torch.zeros(v))
            self.head = None
        else:
            self.head = nn.Linear(d, v)
        self.dropout_gen: torch.Generator | None = None

    def init_parameters(self, gen: torch.Generator) -> None:
        """normal(0, 0.02) for matrices, zero biases, unit LayerNorm gains."""
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("ln") or ".ln" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif p.ndim >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.02)
                else:
                    p.zero_()

    def embed(self, input_ids: torch.Tensor) -> torch.Tensor:
        x = self.tok_emb(input_ids)
        if self.nhot_proj is not None:
            flat = input_ids.reshape(-1)
            sub = F.embedding_bag(
                self.nhot_feats[flat],
                self.nhot_proj,
                per_sample_weights=self.nhot_weight[flat].to(self.nhot_proj.dtype),
                mode="sum",
            )
            x = x + sub.view(*input_ids.shape, -1)
        # 0.02-scale embeddings would otherwise be drowned by the unit-scale positions
        x = x * math.sqrt(self.cfg.d_model)
        n = input_ids.shape[1]
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len={self.cfg.max_len}")
        return x + self.pos[:n].to(x.dtype)

    def forward(self, input_ids: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """Hidden states ``(B, L, d_model)``; ``valid`` marks non-padding positions."""
        if valid is None:
            valid = torch.ones_like(input_ids, dtype=torch.bool)
        x = _dropout(self.embed(input_ids), self.cfg.dropout, self.training, self.dropout_gen)
        for layer in self.layers:
            x = layer(x, valid, self.dropout_gen)
        return self.ln_f(x)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            return hidden @ self.tok_emb.weight.T + self.head_bias
        return self.head(hidden)


@dataclass
class BatchOutcome:
    ids: np.ndarray  # original token id per selected position
    correct: np.ndarray  # argmax == original id
    losses: np.ndarray  # per-position cross-entropy
    mean_loss: float

    def __len__(self) -> int:
        return len(self.ids)


def mlm_forward(
    model: ToyMLM,
    inputs: np.ndarray | torch.Tensor,
    targets: np.ndarray | torch.Tensor,
    selected: np.ndarray | torch.Tensor,
    valid: np.ndarray | torch.Tensor | None = None,
    step: int = 0,
) -> tuple[torch.Tensor, torch.Tensor, BatchOutcome]:
    """Run the model and score the selected positions.

    Returns ``(logits, loss, outcome)`` where ``logits`` has one row per
    selected position (row-major order) and ``loss`` is their mean
    cross-entropy (0 when nothing is selected, still attached to the graph).
    """
    inputs = torch.as_tensor(inputs, dtype=torch.long)
    targets = torch.as_tensor(targets, dtype=torch.long)
    selected = torch.as_tensor(selected, dtype=torch.bool)
    if valid is not None:
        valid = torch.as_tensor(valid, dtype=torch.bool)
    hidden = model(inputs, valid)
    logits = model.logits(hidden[selected])
    tgt = targets[selected]
    per_pos = F.cross_entropy(logits, tgt, reduction="none")
    n = per_pos.numel()
    loss = per_pos.sum() / max(n, 1)
    if n == 0:
        loss = loss + 0.0 * hidden.sum()
    if not torch.isfinite(loss):
        raise DivergenceError(step)
    with torch.no_grad():
        correct = logits.argmax(dim=-1) == tgt
    outcome = BatchOutcome(
        ids=tgt.numpy().copy(),
        correct=correct.numpy().copy(),
        losses=per_pos.detach().double().numpy().copy(),
        mean_loss=float(loss.detach()),
    )
    return logits, loss, outcome


def gradients(model: ToyMLM, inputs, targets, selected, valid=None) -> dict[str, torch.Tensor]:
    """Exact gradients of the mean masked cross-entropy for every parameter."""
    model.zero_grad(set_to_none=True)
    _, loss, _ = mlm_forward(model, inputs, targets, selected, valid)
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


# --- optimisation -------------------------------------------------------------


def lr_at(step: int, total_steps: int, peak: float, warmup_ratio: float = 0.01) -> float:
    """Linear warmup from 0 to ``peak`` then cosine decay to 0."""
    warmup = max(1, round(warmup_ratio * total_steps))
    if step < warmup:
        return peak * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(
    model: nn.Module,
    lr: float = 7e-3,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> torch.optim.Optimizer:
    decay = [p for p in model.parameters() if p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.ndim < 2]
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr, betas=betas, eps=eps)


def clip_gradients(model: nn.Module, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    return float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))


def optimizer_step(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    step: int,
    total_steps: int,
    peak_lr: float,
    warmup_ratio: float = 0.01,
    clip: float = 1.0,
) -> dict[str, float]:
    grad_norm = clip_gradients(model, clip)
    lr = lr_at(step, total_steps, peak_lr, warmup_ratio)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return {"lr": lr, "grad_norm": grad_norm}


# --- checkpoint ---------------------------------------------------------------
#
# magic     8 bytes b"AMLMMODL"
# version   u32 (1)
# meta_len  u32, then UTF-8 JSON (model config echo and trainer metadata)
# n_blocks  u32
# per block:
#   name_len u16, name UTF-8
#   dtype    u8   (0 f32, 1 f64, 2 i64, 3 u8)
#   ndim     u8
#   shape    u64[ndim]
#   data     little-endian, C order
# nothing follows the last block

MODEL_MAGIC = b"AMLMMODL"
MODEL_VERSION = 1
_DTYPES = {0: "f4", 1: "f8", 2: "i8", 3: "u1"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


def save_blocks(path: str | Path, blocks: Mapping[str, np.ndarray], meta: bytes = b"{}") -> None:
    out = Writer()
    out.raw(MODEL_MAGIC)
    out.pack("I", MODEL_VERSION)
    out.blob(meta)
    out.pack("I", len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"block {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.pack("H", len(raw_name))
        out.raw(raw_name)
        out.pack("BB", code, arr.ndim)
        out.pack(f"{arr.ndim}Q", *arr.shape)
        out.array(arr, _DTYPES[code])
    out.write(path)


def load_blocks(path: str | Path) -> tuple[dict[str, np.ndarray], bytes]:
    rd = Reader.open(path)
    rd.expect_magic(MODEL_MAGIC)
    rd.expect_version(MODEL_VERSION)
    meta = rd.blob()
    blocks: dict[str, np.ndarray] = {}
    for _ in range(rd.unpack("I")):
        name = rd.raw(rd.unpack("H")).decode("utf-8")
        code, ndim = rd.unpack("BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: block {name!r} has unknown dtype code {code}")
        shape = rd.unpack(f"{ndim}Q") if ndim else ()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        blocks[name] = rd.array(_DTYPES[code], int(np.prod(shape, dtype=np.int64))).reshape(shape)
    rd.finish()
    return blocks, meta


def state_blocks(model: ToyMLM, optimizer: torch.optim.Optimizer | None = None) -> dict[str, np.ndarray]:
    """Flatten parameters (and optimizer moments) into named numpy blocks."""
    blocks = {f"param/{k}": v.detach().numpy().copy() for k, v in model.named_parameters()}
    if optimizer is not None:
        names = {id(p): k for k, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                k = names[id(p)]
                blocks[f"opt/{k}/step"] = np.asarray(st["step"], dtype=np.float32).reshape(())
                blocks[f"opt/{k}/exp_avg"] = st["exp_avg"].numpy().copy()
                blocks[f"opt/{k}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
    return blocks


def load_state_blocks(model: ToyMLM, blocks: Mapping[str, np.ndarray], optimizer: torch.optim.Optimizer | None = None) -> None:
    with torch.no_grad():
        for k, p in model.named_parameters():
            key = f"param/{k}"
            if key not in blocks:
                raise FormatError(f"checkpoint lacks parameter block {k!r}")
            src = blocks[key]
            if tuple(src.shape) != tuple(p.shape):
                raise FormatError(f"parameter {k!r}: checkpoint shape {src.shape} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.ascontiguousarray(src)).to(p.dtype))
    if optimizer is None:
        return
    for k, p in model.named_parameters():
        if f"opt/{k}/step" not in blocks:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(blocks[f"opt/{k}/step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(blocks[f"opt/{k}/exp_avg"])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(blocks[f"opt/{k}/exp_avg_sq"])).to(p.dtype),
        }
