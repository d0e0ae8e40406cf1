"""Transformer encoder over phoneme+grapheme sequences and its MLM
pretraining loop.

Architecture notes that differ from stock BERT, chosen for stable
desk-scale training: pre-norm residual blocks with a final layer norm,
sinusoidal token positions (interleaved sin/cos) indexed through an
explicit position channel, learned segment embeddings, and an MLM output
projection tied to the token embedding table.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass

import numpy as np

from . import engine, masking
from .checkpoint import save_checkpoint
from .codec import MASK, TokenSequence
from .engine import Tensor
from .errors import ConfigError, DivergenceError
from .masking import MaskedSequence, MaskingPolicy

NEG_INF = -1e30

ENCODER_PRESETS = {
    "desk": (4, 64, 4),
    "paper-small": (6, 512, 8),
    "paper-base": (12, 768, 12),
}


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 0                    # 0 = default 4 * hidden
    max_len: int = 256
    use_word_positions: bool = False
    dropout: float = 0.1

    def __post_init__(self):
        if self.ffn == 0:
            object.__setattr__(self, "ffn", 4 * self.hidden)
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.layers < 1 or self.vocab_size < 5:
            raise ConfigError("encoder needs at least one layer and a nonempty vocabulary")

    @classmethod
    def preset(cls, name: str, vocab_size: int, **kw) -> "EncoderConfig":
        try:
            layers, hidden, heads = ENCODER_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown encoder preset {name!r}") from None
        return cls(vocab_size=vocab_size, layers=layers, hidden=hidden, heads=heads, **kw)


@functools.lru_cache(maxsize=4)
def _position_table(max_len: int, dim: int) -> np.ndarray:
    table = np.zeros((max_len, dim))
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : table[:, 1::2].shape[1]])
    return table


def positional_encoding(position: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos at wavelengths 10000^(2i/d)."""
    if position < 0:
        raise ValueError("position must be nonnegative")
    return _position_table(position + 1, dim)[position].copy()


# Embeddings are summed with the unit-amplitude sinusoidal position table,
# so they are initialized at a commensurate scale; tiny BERT-style inits
# (0.02) bury token identity under the position carrier and stall learning.
EMBED_INIT_SCALE = 0.5


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, f, v = cfg.hidden, cfg.ffn, cfg.vocab_size
    p: dict[str, Tensor] = {}
    p["emb/token"] = engine.param(rng, (v, d), EMBED_INIT_SCALE)
    p["emb/segment"] = engine.param(rng, (2, d), EMBED_INIT_SCALE)
    if cfg.use_word_positions:
        p["emb/wordpos"] = engine.param(rng, (cfg.max_len, d), EMBED_INIT_SCALE)
    p["mlm/bias"] = Tensor(np.zeros(v), requires_grad=True)
    for i in range(cfg.layers):
        pre = f"enc{i}/"
        for name in ("attn_wq", "attn_wk", "attn_wv", "attn_wo"):
            p[pre + name] = engine.param(rng, (d, d))
            p[pre + name.replace("w", "b")] = Tensor(np.zeros(d), requires_grad=True)
        p[pre + "ln1_g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln1_b"] = Tensor(np.zeros(d), requires_grad=True)
        p[pre + "ffn_w1"] = engine.param(rng, (d, f))
        p[pre + "ffn_b1"] = Tensor(np.zeros(f), requires_grad=True)
        p[pre + "ffn_w2"] = engine.param(rng, (f, d))
        p[pre + "ffn_b2"] = Tensor(np.zeros(d), requires_grad=True)
        p[pre + "ln2_g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln2_b"] = Tensor(np.zeros(d), requires_grad=True)
    p["ln_f/g"] = Tensor(np.ones(d), requires_grad=True)
    p["ln_f/b"] = Tensor(np.zeros(d), requires_grad=True)
    return p


@dataclass
class Batch:
    ids: np.ndarray                     # (B, T) int64, PAD-padded
    segment_ids: np.ndarray
    positions: np.ndarray
    word_positions: np.ndarray | None
    pad_mask: np.ndarray                # (B, T) bool, True on real tokens
    loss_mask: np.ndarray | None = None
    target_ids: np.ndarray | None = None
    word_ids: np.ndarray | None = None  # (B, T), -1 on specials and padding

    @property
    def size(self) -> tuple[int, int]:
        return self.ids.shape


def collate(seqs: list[TokenSequence], masked: list[MaskedSequence] | None = None) -> Batch:
    """Pad a list of sequences (optionally with masking overlays) into one
    batch; PAD id 0, channels 0, word ids -1 on padding."""
    b = len(seqs)
    t = max(len(s) for s in seqs)
    ids = np.zeros((b, t), dtype=np.int64)
    segs = np.zeros((b, t), dtype=np.int64)
    pos = np.zeros((b, t), dtype=np.int64)
    wpos = np.zeros((b, t), dtype=np.int64)
    wids = np.full((b, t), -1, dtype=np.int64)
    pad = np.zeros((b, t), dtype=bool)
    loss = np.zeros((b, t), dtype=bool) if masked is not None else None
    targets = np.zeros((b, t), dtype=np.int64) if masked is not None else None
    has_wpos = seqs[0].word_positions is not None
    for i, s in enumerate(seqs):
        n = len(s)
        ids[i, :n] = masked[i].input_ids if masked is not None else s.ids
        segs[i, :n] = s.segment_ids
        pos[i, :n] = s.token_positions
        wids[i, :n] = s.word_ids
        pad[i, :n] = True
        if has_wpos:
            wpos[i, :n] = s.word_positions
        if masked is not None:
            loss[i, :n] = masked[i].loss_mask
            targets[i, :n] = masked[i].target_ids
    return Batch(ids, segs, pos, wpos if has_wpos else None, pad, loss, targets, wids)


def encode(
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[list[Tensor], Tensor]:
    """Run the encoder; returns (per-block hidden states, final normalized
    output).  PAD columns are excluded from attention via an additive mask."""
    b, t = batch.size
    if t > cfg.max_len:
        raise ConfigError(f"batch length {t} exceeds max_len {cfg.max_len}")
    drop = functools.partial(engine.dropout, p=cfg.dropout, rng=rng, training=training)

    pe = Tensor(_position_table(cfg.max_len, cfg.hidden)[batch.positions])
    x = engine.embedding(params["emb/token"], batch.ids) + pe
    x = x + engine.embedding(params["emb/segment"], batch.segment_ids)
    if cfg.use_word_positions:
        if batch.word_positions is None:
            raise ConfigError("encoder expects word positions but batch has none")
        x = x + engine.embedding(params["emb/wordpos"], batch.word_positions)
    x = drop(x)

    attn_mask = np.where(batch.pad_mask, 0.0, NEG_INF)[:, None, None, :]
    hiddens: list[Tensor] = []
    for i in range(cfg.layers):
        pre = f"enc{i}/"
        a = engine.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        q = engine.linear(a, params[pre + "attn_wq"], params[pre + "attn_bq"])
        k = engine.linear(a, params[pre + "attn_wk"], params[pre + "attn_bk"])
        v = engine.linear(a, params[pre + "attn_wv"], params[pre + "attn_bv"])
        ctx = engine.attention_core(q, k, v, attn_mask, cfg.heads, cfg.dropout, rng, training)
        x = x + drop(engine.linear(ctx, params[pre + "attn_wo"], params[pre + "attn_bo"]))
        f = engine.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        f = engine.relu(engine.linear(f, params[pre + "ffn_w1"], params[pre + "ffn_b1"]))
        x = x + drop(engine.linear(f, params[pre + "ffn_w2"], params[pre + "ffn_b2"]))
        hiddens.append(x)
    final = engine.layer_norm(x, params["ln_f/g"], params["ln_f/b"])
    return hiddens, final


def mlm_logits(params: dict[str, Tensor], final_hidden_rows: Tensor) -> Tensor:
    """Tied-projection logits over the vocabulary for selected rows (N, d).

    The projection is scaled by 1/sqrt(d) so the wide embedding init keeps
    initial logits near zero (loss starts near ln |V|).
    """
    emb = params["emb/token"]
    scores = engine.matmul(final_hidden_rows, engine.transpose(emb, (1, 0)))
    return scores * (1.0 / np.sqrt(emb.data.shape[1])) + params["mlm/bias"]


def mlm_loss(params: dict[str, Tensor], cfg: EncoderConfig, batch: Batch, training: bool, rng=None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Cross-entropy at loss positions; returns (loss, logits, flat targets)."""
    if batch.loss_mask is None:
        raise ValueError("batch carries no loss mask")
    _, final = encode(params, cfg, batch, training=training, rng=rng)
    b, t = batch.size
    flat = final.reshape(b * t, cfg.hidden)
    positions = np.nonzero((batch.loss_mask & batch.pad_mask).reshape(-1))[0]
    if len(positions) == 0:
        raise ValueError("no loss positions in batch")
    logits = mlm_logits(params, engine.gather_rows(flat, positions))
    targets = batch.target_ids.reshape(-1)[positions]
    return engine.cross_entropy(logits, targets), logits, targets


def predict_masked(params: dict[str, Tensor], cfg: EncoderConfig, seqs: list[TokenSequence], masked: list[MaskedSequence], batch_size: int = 64):
    """Argmax MLM predictions at loss positions, inference mode.

    Yields (predicted ids, target ids, sequence index arrays) per batch;
    the single code path shared by validation and the eval command.
    """
    with engine.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            mchunk = masked[start : start + batch_size]
            batch = collate(chunk, mchunk)
            _, final = encode(params, cfg, batch, training=False)
            b, t = batch.size
            flat = final.reshape(b * t, cfg.hidden)
            positions = np.nonzero((batch.loss_mask & batch.pad_mask).reshape(-1))[0]
            logits = mlm_logits(params, engine.gather_rows(flat, positions))
            pred = np.argmax(logits.data, axis=1)
            targets = batch.target_ids.reshape(-1)[positions]
            yield pred, targets, positions // t + start, positions % t


@dataclass
class PretrainSchedule:
    steps: int = 20000
    batch_size: int = 32
    base_lr: float = 5e-5
    l2: float = 0.01
    eval_interval: int = 1000
    eval_subset: int = 200
    pb_mode: bool = False
    seed: int = 0


def _apply_pb_mode(seq: TokenSequence, ms: MaskedSequence) -> MaskedSequence:
    """Phoneme-only pretraining: every grapheme token is masked in the
    input and grapheme targets are dropped (they carry no signal)."""
    graphemes = (seq.segment_ids == 1) & (seq.word_ids >= 0)
    ms.input_ids = ms.input_ids.copy()
    ms.input_ids[graphemes] = MASK
    ms.loss_mask = ms.loss_mask & ~graphemes
    return ms


def pretrain(
    cfg: EncoderConfig,
    schedule: PretrainSchedule,
    train_seqs: list[TokenSequence],
    valid_seqs: list[TokenSequence],
    policy: MaskingPolicy,
    vocab_ranges: tuple[tuple[int, int], tuple[int, int]],
    out_dir,
    metadata: dict | None = None,
    log_name: str = "pretrain_log.jsonl",
) -> tuple[dict, dict]:
    """MLM pretraining: Adam with coupled L2, linearly decayed lr,
    periodic validation (MLM/G2P/P2G accuracy), best+last checkpoints.
    Returns (trained parameters, final summary row)."""
    from . import metrics  # local import; metrics also consumes this module's predict fn

    if not train_seqs:
        raise ConfigError("pretraining needs a nonempty corpus")
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence([schedule.seed, 17])
    init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in root.spawn(3))
    params = init_encoder_params(cfg, init_rng)
    # decoupled decay: with coupled L2 the regularizer dominates Adam's
    # second moment wherever task gradients start small (attention Q/K at
    # near-uniform attention) and drags those weights to exactly zero
    state = engine.AdamState(params, l2=schedule.l2, decoupled=True)
    metadata = dict(metadata or {})
    metadata.update(kind="pretrain", pb_mode=schedule.pb_mode)

    n = len(train_seqs)
    lengths = [len(s) for s in train_seqs]

    def epoch_batches() -> list[list[int]]:
        # shuffle, then sort by length inside windows of 16 batches so
        # padding stays tight without freezing batch composition
        order = order_rng.permutation(n).tolist()
        span = 16 * schedule.batch_size
        out = []
        for start in range(0, n, span):
            chunk = sorted(order[start : start + span], key=lengths.__getitem__)
            out.extend(chunk[b : b + schedule.batch_size] for b in range(0, len(chunk), schedule.batch_size))
        return out

    batches = epoch_batches()
    bcursor = 0
    epoch = 0
    best_metric = -1.0
    log_path = os.path.join(out_dir, log_name)
    log_f = open(log_path, "w", encoding="utf-8")
    summary: dict = {}
    try:
        for step in range(1, schedule.steps + 1):
            if bcursor >= len(batches):
                batches = epoch_batches()
                bcursor = 0
                epoch += 1
            idxs = batches[bcursor]
            bcursor += 1
            seqs = [train_seqs[i] for i in idxs]
            masked = []
            for i, s in zip(idxs, seqs):
                ms = masking.mask_for_mlm(s, policy, masking.sentence_rng(policy.seed, i, epoch), vocab_ranges)
                if schedule.pb_mode:
                    ms = _apply_pb_mode(s, ms)
                masked.append(ms)
            batch = collate(seqs, masked)
            try:
                loss, _, _ = mlm_loss(params, cfg, batch, training=True, rng=drop_rng)
                loss.backward()
                lr = engine.linear_decay_lr(step - 1, schedule.steps, schedule.base_lr)
                engine.adam_step(params, state, lr)
            except DivergenceError as exc:
                raise DivergenceError(step, f"pretraining diverged at step {step}: {exc}") from exc
            engine.zero_grads(params)

            if step % schedule.eval_interval == 0 or step == schedule.steps:
                accs = metrics.validation_accuracies(params, cfg, valid_seqs[: schedule.eval_subset], policy, vocab_ranges, pb_mode=schedule.pb_mode)
                row = {"step": step, "loss": round(float(loss.data), 6), "lr": lr, **{k: round(v, 6) for k, v in accs.items()}}
                log_f.write(json.dumps(row, sort_keys=True) + "\n")
                log_f.flush()
                save_checkpoint(os.path.join(out_dir, "ckpt_last.pngb"), params, {**metadata, "step": step})
                score = accs["mlm_acc"]
                if score > best_metric:
                    best_metric = score
                    save_checkpoint(os.path.join(out_dir, "ckpt_best.pngb"), params, {**metadata, "step": step, "mlm_acc": score})
                summary = {"step": step, "loss": float(loss.data), **accs, "best_mlm_acc": best_metric}
            else:
                log_f.write(json.dumps({"step": step, "loss": round(float(loss.data), 6), "lr": lr}, sort_keys=True) + "\n")
    finally:
        log_f.close()
    return params, summary
