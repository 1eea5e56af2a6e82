"""Bidirectional transformer encoder with a masked-language-model head,
trained from scratch with per-epoch checkpointing and loss logging."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import CLS_ID, MASK_ID, PAD_ID, SEP_ID, CorpusSplit

NUM_SPECIAL = 5
IGNORE_INDEX = -100
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < NUM_SPECIAL:
            raise ValueError(f"vocab_size must be at least {NUM_SPECIAL}")
        if self.max_len < 3:
            raise ValueError("max_len must allow [CLS] + content + [SEP]")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass(frozen=True)
class MaskingPolicy:
    mask_fraction: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must be in [0,1]")
        if abs(self.mask_prob + self.random_prob + self.keep_prob - 1.0) > 1e-9:
            raise ValueError("mask/random/keep probabilities must sum to 1")


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(cfg.hidden_dim, cfg.num_heads,
                                          dropout=cfg.dropout, batch_first=True)
        self.attn_norm = nn.LayerNorm(cfg.hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.hidden_dim),
        )
        self.ffn_norm = nn.LayerNorm(cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask):
        att, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.attn_norm(x + self.dropout(att))
        x = self.ffn_norm(x + self.dropout(self.ffn(x)))
        return x


class MlmEncoder(nn.Module):
    """Token + position embeddings, post-norm encoder stack, tied MLM head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.hidden_dim)
        self.emb_norm = nn.LayerNorm(cfg.hidden_dim)
        self.emb_dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.head_dense = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.head_norm = nn.LayerNorm(cfg.hidden_dim)
        self.decoder_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        # nn.MultiheadAttention keeps packed projection weights
        for module in self.modules():
            if isinstance(module, nn.MultiheadAttention):
                nn.init.normal_(module.in_proj_weight, mean=0.0, std=0.02)
                nn.init.zeros_(module.in_proj_bias)

    def hidden_states(self, input_ids: torch.Tensor) -> torch.Tensor:
        """Final-layer hidden vectors, shape (batch, seq, hidden_dim)."""
        if input_ids.shape[1] > self.cfg.max_len:
            raise ValueError(
                f"sequence length {input_ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        positions = torch.arange(input_ids.shape[1], device=input_ids.device)
        x = self.token_emb(input_ids) + self.pos_emb(positions)[None, :, :]
        x = self.emb_dropout(self.emb_norm(x))
        padding = input_ids.eq(PAD_ID)
        for layer in self.layers:
            x = layer(x, key_padding_mask=padding)
        return x

    def mlm_logits(self, input_ids: torch.Tensor) -> torch.Tensor:
        h = self.hidden_states(input_ids)
        h = self.head_norm(F.gelu(self.head_dense(h)))
        return h @ self.token_emb.weight.t() + self.decoder_bias

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.mlm_logits(input_ids)


@dataclass
class Checkpoint:
    epoch: int
    config: ModelConfig
    parameters: dict[str, np.ndarray]
    train_loss: float
    val_loss: float
    _module: MlmEncoder | None = field(default=None, repr=False, compare=False)

    def checksum(self) -> str:
        """SHA-256 over parameters in canonical (sorted-key, little-endian) order."""
        h = hashlib.sha256()
        for name in sorted(self.parameters):
            arr = np.ascontiguousarray(self.parameters[name])
            h.update(name.encode("utf-8"))
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        return h.hexdigest()


def _snapshot(module: MlmEncoder) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in module.state_dict().items()}


def build_module(checkpoint: Checkpoint, dtype: torch.dtype = torch.float32) -> MlmEncoder:
    torch.manual_seed(checkpoint.config.seed)
    module = MlmEncoder(checkpoint.config)
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in checkpoint.parameters.items()}
    module.load_state_dict(state)
    module.to(dtype)
    module.eval()
    return module


def _cached_module(checkpoint: Checkpoint) -> MlmEncoder:
    if checkpoint._module is None:
        checkpoint._module = build_module(checkpoint)
    return checkpoint._module


def init_model(config: ModelConfig) -> Checkpoint:
    """Epoch-0 snapshot: deterministic under config.seed, before any gradient step."""
    torch.manual_seed(config.seed)
    module = MlmEncoder(config)
    module.eval()
    return Checkpoint(epoch=0, config=config, parameters=_snapshot(module),
                      train_loss=math.nan, val_loss=math.nan, _module=module)


def _as_id_tuple(chunk_like) -> tuple[int, ...]:
    ids = getattr(chunk_like, "token_ids", chunk_like)
    return tuple(int(t) for t in ids)


def mask_batch(chunk_batch, policy: MaskingPolicy, vocab_size: int,
               rng: np.random.Generator | None = None):
    """Wrap chunks as [CLS] ids [SEP] with padding, then apply the masking policy.

    Returns (input_ids, target_ids, mask_positions) as torch tensors; targets
    hold the original token id at masked positions and IGNORE_INDEX elsewhere.
    Special-token positions (id < NUM_SPECIAL) are never selected.
    """
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    seqs = [(CLS_ID,) + _as_id_tuple(c) + (SEP_ID,) for c in chunk_batch]
    width = max(len(s) for s in seqs)
    batch = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        batch[i, :len(s)] = s

    original = batch.copy()
    eligible = batch >= NUM_SPECIAL
    selected = eligible & (rng.random(batch.shape) < policy.mask_fraction)
    action = rng.random(batch.shape)
    replace_mask = selected & (action < policy.mask_prob)
    replace_random = selected & (action >= policy.mask_prob) & (
        action < policy.mask_prob + policy.random_prob)

    batch[replace_mask] = MASK_ID
    if vocab_size > NUM_SPECIAL:
        randoms = rng.integers(NUM_SPECIAL, vocab_size, size=batch.shape)
        batch[replace_random] = randoms[replace_random]

    targets = np.where(selected, original, IGNORE_INDEX)
    return (torch.from_numpy(batch), torch.from_numpy(targets),
            torch.from_numpy(selected))


def _masked_loss(module: MlmEncoder, input_ids, target_ids) -> tuple[torch.Tensor, int]:
    n_masked = int((target_ids != IGNORE_INDEX).sum())
    if n_masked == 0:
        return torch.zeros((), dtype=torch.float32), 0
    logits = module.mlm_logits(input_ids)
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                           target_ids.reshape(-1), ignore_index=IGNORE_INDEX)
    return loss, n_masked


def _epoch_loss(module: MlmEncoder, chunks, policy: MaskingPolicy, vocab_size: int,
                batch_size: int, rng: np.random.Generator) -> float:
    """Average masked cross-entropy over a fixed pass (no gradient)."""
    module.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(chunks), batch_size):
            batch = chunks[lo:lo + batch_size]
            input_ids, target_ids, _ = mask_batch(batch, policy, vocab_size, rng)
            loss, n = _masked_loss(module, input_ids, target_ids)
            total += float(loss) * n
            count += n
    return total / count if count else math.nan


def train(split: CorpusSplit, config: ModelConfig, policy: MaskingPolicy,
          num_epochs: int, checkpoint_every: int = 1, *,
          batch_size: int = 32, learning_rate: float = 1e-3,
          log_path: str | Path | None = None) -> list[Checkpoint]:
    """MLM training loop; returns the epoch-0 snapshot, every cadence epoch,
    and the final epoch. Aborts on divergence, keeping valid checkpoints."""
    if num_epochs < 1:
        raise ValueError("num_epochs must be at least 1")
    train_chunks = [c for c in split.train if len(c) > 0]
    val_chunks = [c for c in split.validation if len(c) > 0]
    if not train_chunks:
        raise ValueError("training partition is empty")
    too_long = max(len(c) for c in train_chunks + val_chunks) + 2
    if too_long > config.max_len:
        raise ValueError(
            f"chunks of length {too_long - 2} leave no room for [CLS]/[SEP] at max_len {config.max_len}")

    torch.manual_seed(config.seed)
    module = MlmEncoder(config)
    optimizer = torch.optim.Adam(module.parameters(), lr=learning_rate)
    steps_per_epoch = math.ceil(len(train_chunks) / batch_size)
    warmup = max(1, math.ceil(0.01 * steps_per_epoch * num_epochs))

    def lr_at(step: int) -> float:
        return learning_rate * min(1.0, step / warmup)

    def evaluate() -> tuple[float, float]:
        tl = _epoch_loss(module, train_chunks, policy, config.vocab_size, batch_size,
                         np.random.default_rng([policy.seed, 0xE]))
        vl = _epoch_loss(module, val_chunks, policy, config.vocab_size, batch_size,
                         np.random.default_rng([policy.seed, 0xF])) if val_chunks else math.nan
        return tl, vl

    log_rows = []
    train_loss, val_loss = evaluate()
    checkpoints = [Checkpoint(0, config, _snapshot(module), train_loss, val_loss)]
    log_rows.append((0, train_loss, val_loss))

    step = 0
    diverged = False
    for epoch in range(1, num_epochs + 1):
        order_rng = np.random.default_rng([config.seed, epoch, 0xA])
        mask_rng = np.random.default_rng([policy.seed, epoch, 0xB])
        order = order_rng.permutation(len(train_chunks))
        module.train()
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = [train_chunks[i] for i in order[lo:lo + batch_size]]
            input_ids, target_ids, _ = mask_batch(batch, policy, config.vocab_size, mask_rng)
            loss, n = _masked_loss(module, input_ids, target_ids)
            if n == 0:
                continue
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                diverged = True
                break
            step += 1
            for group in optimizer.param_groups:
                group["lr"] = lr_at(step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss_value * n
            count += n
        if diverged:
            warnings.warn(f"loss diverged during epoch {epoch}; aborting with "
                          f"{len(checkpoints)} valid checkpoints", stacklevel=2)
            break
        train_loss = total / count if count else math.nan
        _, val_loss = evaluate()
        log_rows.append((epoch, train_loss, val_loss))
        if epoch % checkpoint_every == 0 or epoch == num_epochs:
            checkpoints.append(Checkpoint(epoch, config, _snapshot(module),
                                          train_loss, val_loss))

    if log_path is not None:
        path = Path(log_path)
        header_needed = not path.exists()
        with path.open("a", encoding="utf-8") as fh:
            if header_needed:
                fh.write("epoch,train_loss,val_loss\n")
            for epoch, tl, vl in log_rows:
                fh.write(f"{epoch},{tl!r},{vl!r}\n")
    return checkpoints


def forward_hidden_states(checkpoint: Checkpoint, token_ids) -> np.ndarray:
    """Final-layer hidden vectors for one sequence, one row per input position."""
    ids = [int(t) for t in token_ids]
    cfg = checkpoint.config
    if len(ids) > cfg.max_len:
        raise ValueError(f"input length {len(ids)} exceeds max_len {cfg.max_len}")
    if len(ids) == 0:
        return np.zeros((0, cfg.hidden_dim), dtype=np.float64)
    module = _cached_module(checkpoint)
    with torch.no_grad():
        h = module.hidden_states(torch.tensor([ids], dtype=torch.int64))
    return h[0].numpy().astype(np.float64)


def forward_hidden_states_batch(checkpoint: Checkpoint, sequences) -> list[np.ndarray]:
    """Batched variant; pads internally and trims each result to its true length."""
    seqs = [[int(t) for t in s] for s in sequences]
    if not seqs:
        return []
    cfg = checkpoint.config
    width = max(len(s) for s in seqs)
    if width > cfg.max_len:
        raise ValueError(f"input length {width} exceeds max_len {cfg.max_len}")
    batch = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        batch[i, :len(s)] = s
    module = _cached_module(checkpoint)
    with torch.no_grad():
        h = module.hidden_states(torch.from_numpy(batch)).numpy().astype(np.float64)
    return [h[i, :len(s)] for i, s in enumerate(seqs)]


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Versioned container: JSON header line, then raw little-endian arrays."""
    names = sorted(checkpoint.parameters)
    arrays = []
    manifest = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(checkpoint.parameters[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        arrays.append(raw)
        offset += len(raw)
    cfg = checkpoint.config
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": checkpoint.epoch,
        "train_loss": None if math.isnan(checkpoint.train_loss) else checkpoint.train_loss,
        "val_loss": None if math.isnan(checkpoint.val_loss) else checkpoint.val_loss,
        "config": {
            "vocab_size": cfg.vocab_size, "num_layers": cfg.num_layers,
            "hidden_dim": cfg.hidden_dim, "num_heads": cfg.num_heads,
            "ffn_dim": cfg.ffn_dim, "max_len": cfg.max_len,
            "dropout": cfg.dropout, "seed": cfg.seed,
        },
        "parameters": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in arrays:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with Path(path).open("rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header['format_version']}")
        body = fh.read()
    params = {}
    for entry in header["parameters"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        params[entry["name"]] = arr
    cfg = ModelConfig(**header["config"])
    tl = header["train_loss"] if header["train_loss"] is not None else math.nan
    vl = header["val_loss"] if header["val_loss"] is not None else math.nan
    return Checkpoint(header["epoch"], cfg, params, tl, vl)
