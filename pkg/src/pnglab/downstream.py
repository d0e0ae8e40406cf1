"""Fine-tuning on top of frozen or partially tuned encoders: a
forward-attention acoustic decoder, a per-token tone classifier, layer
freezing with bit-identity guarantees, and a convolutional baseline
encoder that can consume tone labels as an input channel.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import engine, masking
from .checkpoint import save_checkpoint
from .codec import TokenSequence, Vocabulary, assemble_sequence, phoneme_span
from .corpus import TONES, Sentence, render_frames, sentence_tones
from .encoder import NEG_INF, EncoderConfig, collate, encode, init_encoder_params
from .engine import Tensor
from .errors import ConfigError, DataError, DivergenceError

# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class FinetunePreset:
    """One row of the system table: what is tuned, what is fed, what is
    masked.  tuned_layers=None means every parameter trains."""

    name: str
    tuned_layers: int | None
    tone_task: bool = False
    tone_input: bool = False
    grapheme_mask: bool = False
    pretrained: bool = True
    encoder_kind: str = "png_bert"


PRESETS: dict[str, FinetunePreset] = {
    p.name: p
    for p in (
        FinetunePreset("PGB0", 0),
        FinetunePreset("PGB2", 2),
        FinetunePreset("PGB4", 4),
        FinetunePreset("PGB6", 6),
        FinetunePreset("PGBN", None, pretrained=False),
        FinetunePreset("PGB2T", 2, tone_task=True),
        FinetunePreset("PGB2MC", 2, grapheme_mask=True),
        FinetunePreset("PB2MC", 2, grapheme_mask=True),
        FinetunePreset("TAC", None, pretrained=False, encoder_kind="conv_bilstm"),
        FinetunePreset("TACT", None, tone_input=True, pretrained=False, encoder_kind="conv_bilstm"),
    )
}


def get_preset(name: str) -> FinetunePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class DecoderConfig:
    enc_dim: int = 64
    prenet_dim: int = 32
    attn_dim: int = 32
    lstm_dim: int = 64
    frame_dim: int = 10
    prenet_dropout: float = 0.5
    stop_threshold: float = 0.5
    max_steps_factor: int = 10


@dataclass(frozen=True)
class BaselineConfig:
    """Phoneme-only encoder: embedding, three same-padded width-5 conv
    layers (relu + layer norm), one bidirectional recurrent layer."""

    vocab_size: int
    emb_dim: int = 64
    tone_emb_dim: int = 16
    channels: int = 64
    kernel: int = 5
    convs: int = 3
    lstm_dim: int = 32  # per direction; 2x must equal the decoder enc_dim
    tone_input: bool = False


@dataclass(frozen=True)
class FinetuneSchedule:
    steps: int = 2500
    batch_size: int = 16
    base_lr: float = 1e-3
    l2: float = 0.0
    tone_weight: float = 1.0
    eval_interval: int = 250
    eval_subset: int = 100
    seed: int = 0


# ---------------------------------------------------------------------------
# parameter initialization


def init_decoder_params(dcfg: DecoderConfig, rng: np.random.Generator, tone_task: bool = False) -> dict[str, Tensor]:
    d, p, a, e, f = dcfg.lstm_dim, dcfg.prenet_dim, dcfg.attn_dim, dcfg.enc_dim, dcfg.frame_dim
    pr = {}
    pr["dec/prenet_w1"] = engine.param(rng, (f, p))
    pr["dec/prenet_b1"] = Tensor(np.zeros(p), requires_grad=True)
    pr["dec/prenet_w2"] = engine.param(rng, (p, p))
    pr["dec/prenet_b2"] = Tensor(np.zeros(p), requires_grad=True)
    pr["dec/lstm1_w"] = engine.param(rng, (p + e + d, 4 * d))
    pr["dec/lstm1_b"] = Tensor(np.zeros(4 * d), requires_grad=True)
    pr["dec/lstm2_w"] = engine.param(rng, (d + e + d, 4 * d))
    pr["dec/lstm2_b"] = Tensor(np.zeros(4 * d), requires_grad=True)
    pr["dec/attn_key_w"] = engine.param(rng, (e, a))
    pr["dec/attn_key_b"] = Tensor(np.zeros(a), requires_grad=True)
    pr["dec/attn_query_w"] = engine.param(rng, (d, a))
    pr["dec/attn_v"] = engine.param(rng, (a, 1))
    pr["dec/frame_w"] = engine.param(rng, (d + e, f))
    pr["dec/frame_b"] = Tensor(np.zeros(f), requires_grad=True)
    pr["dec/stop_w"] = engine.param(rng, (d + e, 1))
    pr["dec/stop_b"] = Tensor(np.zeros(1), requires_grad=True)
    if tone_task:
        pr["tone/w"] = engine.param(rng, (e, len(TONES)))
        pr["tone/b"] = Tensor(np.zeros(len(TONES)), requires_grad=True)
    return pr


def init_baseline_params(bcfg: BaselineConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    if 2 * bcfg.lstm_dim != bcfg.channels:
        raise ConfigError("baseline BiLSTM output (2 x lstm_dim) must equal the conv channel count")
    pr = {}
    pr["tac/emb"] = Tensor(rng.normal(0.0, 0.02, size=(bcfg.vocab_size, bcfg.emb_dim)), requires_grad=True)
    in_dim = bcfg.emb_dim
    if bcfg.tone_input:
        pr["tac/tone_emb"] = Tensor(rng.normal(0.0, 0.02, size=(len(TONES), bcfg.tone_emb_dim)), requires_grad=True)
        in_dim += bcfg.tone_emb_dim
    for i in range(bcfg.convs):
        for k in range(bcfg.kernel):
            pr[f"tac/conv{i}_w{k}"] = engine.param(rng, (in_dim, bcfg.channels), scale=1.0 / np.sqrt(bcfg.kernel * in_dim))
        pr[f"tac/conv{i}_b"] = Tensor(np.zeros(bcfg.channels), requires_grad=True)
        pr[f"tac/conv{i}_ln_g"] = Tensor(np.ones(bcfg.channels), requires_grad=True)
        pr[f"tac/conv{i}_ln_b"] = Tensor(np.zeros(bcfg.channels), requires_grad=True)
        in_dim = bcfg.channels
    for direction in ("fwd", "bwd"):
        pr[f"tac/{direction}_w"] = engine.param(rng, (bcfg.channels + bcfg.lstm_dim, 4 * bcfg.lstm_dim))
        pr[f"tac/{direction}_b"] = Tensor(np.zeros(4 * bcfg.lstm_dim), requires_grad=True)
    return pr


# ---------------------------------------------------------------------------
# forward attention


def forward_attention_step(prev_alpha: Tensor, energies: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """One recurrence step: alpha ∝ (prev + prev shifted right) · softmax(e).

    Mass can stay put or advance one encoder position, never jump.  An
    epsilon floor is applied only to rows whose unnormalized mass
    vanishes, so the one-step-support invariant holds in all sane cases.
    """
    e = energies if valid is None else energies + Tensor(np.where(valid, 0.0, NEG_INF))
    sm = engine.softmax(e)
    un = (prev_alpha + engine.shift_right(prev_alpha)) * sm
    total = engine.tensor_sum(un, axis=-1, keepdims=True)
    degenerate = total.data < 1e-30
    if degenerate.any():
        ok = np.ones(un.data.shape, dtype=bool) if valid is None else valid
        un = un + Tensor(np.where(degenerate & ok, 1e-8, 0.0))
        total = engine.tensor_sum(un, axis=-1, keepdims=True)
    return engine.div(un, total)


# ---------------------------------------------------------------------------
# decoder


def prenet(params: dict[str, Tensor], x: Tensor, dcfg: DecoderConfig, rng: np.random.Generator | None, dropout_on: bool = True) -> Tensor:
    """Two-layer bottleneck; dropout stays on at inference by default so
    the decoder cannot lean fully on autoregressive feedback."""
    h = engine.relu(engine.linear(x, params["dec/prenet_w1"], params["dec/prenet_b1"]))
    h = engine.dropout(h, dcfg.prenet_dropout, rng, training=dropout_on)
    h = engine.relu(engine.linear(h, params["dec/prenet_w2"], params["dec/prenet_b2"]))
    return engine.dropout(h, dcfg.prenet_dropout, rng, training=dropout_on)


@dataclass
class _DecoderState:
    memory: Tensor
    key: Tensor
    valid: np.ndarray
    alpha: Tensor
    ctx: Tensor
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor


def _init_state(params: dict[str, Tensor], dcfg: DecoderConfig, memory: Tensor, valid: np.ndarray) -> _DecoderState:
    b, s, e = memory.data.shape
    key = engine.linear(memory, params["dec/attn_key_w"], params["dec/attn_key_b"])
    alpha0 = np.zeros((b, s))
    alpha0[:, 0] = 1.0
    alpha = Tensor(alpha0)
    ctx = engine.matmul(engine.reshape(alpha, (b, 1, s)), memory).reshape(b, e)
    zeros = lambda: Tensor(np.zeros((b, dcfg.lstm_dim)))
    return _DecoderState(memory, key, valid, alpha, ctx, zeros(), zeros(), zeros(), zeros())


def _decoder_step(params: dict[str, Tensor], dcfg: DecoderConfig, st: _DecoderState, p_t: Tensor) -> Tensor:
    """Advance one frame; mutates st, returns the (B, lstm+enc) readout."""
    b, s, e = st.memory.data.shape
    st.h1, st.c1 = engine.lstm_cell(
        engine.concat([p_t, st.ctx], axis=1), st.h1, st.c1, params["dec/lstm1_w"], params["dec/lstm1_b"]
    )
    q = engine.matmul(st.h1, params["dec/attn_query_w"])
    feat = engine.tanh(st.key + engine.reshape(q, (b, 1, dcfg.attn_dim)))
    energies = engine.matmul(feat, params["dec/attn_v"]).reshape(b, s)
    st.alpha = forward_attention_step(st.alpha, energies, st.valid)
    st.ctx = engine.matmul(engine.reshape(st.alpha, (b, 1, s)), st.memory).reshape(b, e)
    st.h2, st.c2 = engine.lstm_cell(
        engine.concat([st.h1, st.ctx], axis=1), st.h2, st.c2, params["dec/lstm2_w"], params["dec/lstm2_b"]
    )
    return engine.concat([st.h2, st.ctx], axis=1)


def decode_teacher_forced(
    params: dict[str, Tensor],
    dcfg: DecoderConfig,
    memory: Tensor,
    valid: np.ndarray,
    ref_frames: np.ndarray,
    rng: np.random.Generator | None,
    prenet_dropout: bool = True,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Run the decoder conditioned on reference frames.

    Returns (frames (B,T,F) Tensor, stop logits (B,T) Tensor, attention
    weights (B,T,S) array); output length equals the reference length.
    """
    b, t, f = ref_frames.shape
    if t == 0:
        raise DataError("teacher forcing needs at least one reference frame")
    go = np.zeros_like(ref_frames)
    go[:, 1:] = ref_frames[:, :-1]
    p = prenet(params, Tensor(go), dcfg, rng, prenet_dropout)
    st = _init_state(params, dcfg, memory, valid)
    outs = []
    alphas = np.empty((b, t, memory.data.shape[1]))
    for step in range(t):
        out = _decoder_step(params, dcfg, st, engine.take(p, (slice(None), step)))
        alphas[:, step] = st.alpha.data
        outs.append(engine.reshape(out, (b, 1, out.data.shape[1])))
    readout = engine.concat(outs, axis=1)
    frames = engine.linear(readout, params["dec/frame_w"], params["dec/frame_b"])
    stops = engine.linear(readout, params["dec/stop_w"], params["dec/stop_b"]).reshape(b, t)
    return frames, stops, alphas


def decode_free_running(
    params: dict[str, Tensor],
    dcfg: DecoderConfig,
    memory: Tensor,
    valid: np.ndarray,
    rng: np.random.Generator | None,
    max_steps: int | None = None,
    prenet_dropout: bool = True,
) -> tuple[np.ndarray, np.ndarray, bool, int | None]:
    """Autoregressive synthesis for a single utterance (B=1).

    Returns (frames (T,F), attention (T,S), exhausted, stop_step).  The
    loop ends when the stop probability crosses the threshold or at
    max_steps (default 10 x encoder span), which flags the utterance.
    """
    b, s, e = memory.data.shape
    if b != 1:
        raise DataError("free-running decode handles one utterance at a time")
    span = int(valid[0].sum())
    if max_steps is None:
        max_steps = dcfg.max_steps_factor * max(1, span)
    st = _init_state(params, dcfg, memory, valid)
    prev = np.zeros((1, dcfg.frame_dim))
    frames, alphas = [], []
    with engine.no_grad():
        for _ in range(max_steps):
            p_t = prenet(params, Tensor(prev), dcfg, rng, prenet_dropout)
            out = _decoder_step(params, dcfg, st, p_t)
            frame = engine.linear(out, params["dec/frame_w"], params["dec/frame_b"])
            stop_logit = engine.linear(out, params["dec/stop_w"], params["dec/stop_b"])
            frames.append(frame.data[0].copy())
            alphas.append(st.alpha.data[0].copy())
            if engine.sigmoid_array(stop_logit.data)[0, 0] > dcfg.stop_threshold:
                return np.stack(frames), np.stack(alphas), False, len(frames)
            prev = frame.data
    return np.stack(frames), np.stack(alphas), True, None


# ---------------------------------------------------------------------------
# losses and heads


def tts_loss(frames: Tensor, stops: Tensor, ref_frames: np.ndarray, frame_mask: np.ndarray) -> Tensor:
    """Masked frame MSE plus stop-flag BCE; the stop target is 1 exactly
    on each utterance's final valid frame."""
    stop_targets = np.zeros(frame_mask.shape)
    lengths = frame_mask.sum(axis=1).astype(int)
    stop_targets[np.arange(len(lengths)), lengths - 1] = 1.0
    mse = engine.masked_mse(frames, ref_frames, frame_mask[:, :, None])
    bce = engine.binary_cross_entropy_with_logits(stops, stop_targets, frame_mask)
    return mse + bce


def tone_logits(params: dict[str, Tensor], features: Tensor) -> Tensor:
    return engine.linear(features, params["tone/w"], params["tone/b"])


def tone_loss(params: dict[str, Tensor], memory: Tensor, valid: np.ndarray, labels: np.ndarray) -> Tensor:
    logits = tone_logits(params, memory)
    flat = engine.reshape(logits, (-1, len(TONES)))
    return engine.cross_entropy(flat, labels.reshape(-1), mask=valid.reshape(-1))


def predict_tones(params: dict[str, Tensor], features: np.ndarray) -> np.ndarray:
    with engine.no_grad():
        logits = features @ params["tone/w"].data + params["tone/b"].data
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# baseline encoder


def baseline_features(
    params: dict[str, Tensor],
    bcfg: BaselineConfig,
    ids: np.ndarray,
    tone_ids: np.ndarray | None,
    valid: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Conv stack plus BiLSTM over padded (B, S) phoneme ids; padding is
    zeroed between stages so convolutions cannot smear it inward."""
    x = engine.embedding(params["tac/emb"], ids)
    if bcfg.tone_input:
        if tone_ids is None:
            raise ConfigError("this baseline expects tone ids as input")
        x = engine.concat([x, engine.embedding(params["tac/tone_emb"], tone_ids)], axis=2)
    b, s, _ = x.data.shape
    vm = Tensor(valid[:, :, None].astype(np.float64))
    x = x * vm
    half = bcfg.kernel // 2
    for i in range(bcfg.convs):
        pad = Tensor(np.zeros((b, half, x.data.shape[2])))
        xp = engine.concat([pad, x, pad], axis=1)
        y = None
        for k in range(bcfg.kernel):
            tap = engine.matmul(engine.take(xp, (slice(None), slice(k, k + s))), params[f"tac/conv{i}_w{k}"])
            y = tap if y is None else y + tap
        y = engine.relu(y + params[f"tac/conv{i}_b"])
        y = engine.layer_norm(y, params[f"tac/conv{i}_ln_g"], params[f"tac/conv{i}_ln_b"])
        x = y * vm
    h = Tensor(np.zeros((b, bcfg.lstm_dim)))
    c = Tensor(np.zeros((b, bcfg.lstm_dim)))
    fwd = []
    for t in range(s):
        h, c = engine.lstm_cell(engine.take(x, (slice(None), t)), h, c, params["tac/fwd_w"], params["tac/fwd_b"])
        fwd.append(h)
    h = Tensor(np.zeros((b, bcfg.lstm_dim)))
    c = Tensor(np.zeros((b, bcfg.lstm_dim)))
    bwd = [None] * s
    for t in reversed(range(s)):
        h, c = engine.lstm_cell(engine.take(x, (slice(None), t)), h, c, params["tac/bwd_w"], params["tac/bwd_b"])
        bwd[t] = h
    rows = [
        engine.reshape(engine.concat([fwd[t], bwd[t]], axis=1), (b, 1, 2 * bcfg.lstm_dim))
        for t in range(s)
    ]
    return engine.concat(rows, axis=1) * vm


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class TtsExample:
    seq: TokenSequence
    span: np.ndarray          # indices of phoneme tokens within seq
    frames: np.ndarray        # (F, frame_dim) oracle acoustics
    tones: np.ndarray         # (S,) tone label indices
    sentence: Sentence


def prepare_examples(
    sentences: list[Sentence],
    vocab: Vocabulary,
    embeddings: dict[str, np.ndarray],
    grapheme_mask: bool = False,
) -> list[TtsExample]:
    out = []
    for s in sentences:
        seq = assemble_sequence(s, vocab)
        if grapheme_mask:
            seq = masking.mask_graphemes_for_inference(seq)
        span = phoneme_span(seq)
        frames, _ = render_frames(s, embeddings)
        tones = np.array([TONES.index(t) for t in sentence_tones(s)], dtype=np.int64)
        if len(tones) != len(span):
            raise DataError("tone labels and phoneme span disagree in length")
        out.append(TtsExample(seq, span, frames, tones, s))
    return out


def encoder_memory(
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    examples: list[TtsExample],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Final-layer features gathered over each phoneme span, padded to
    (B, S, d) with a validity mask."""
    seqs = [ex.seq for ex in examples]
    batch = collate(seqs)
    _, final = encode(params, enc_cfg, batch, training=training, rng=rng)
    b, t = batch.size
    s = max(len(ex.span) for ex in examples)
    flat_idx = np.zeros((b, s), dtype=np.int64)
    valid = np.zeros((b, s), dtype=bool)
    for i, ex in enumerate(examples):
        flat_idx[i, : len(ex.span)] = i * t + ex.span
        valid[i, : len(ex.span)] = True
    mem = engine.gather_rows(final.reshape(b * t, enc_cfg.hidden), flat_idx.reshape(-1))
    return engine.reshape(mem, (b, s, enc_cfg.hidden)), valid


def baseline_memory(
    params: dict[str, Tensor],
    bcfg: BaselineConfig,
    examples: list[TtsExample],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    b = len(examples)
    s = max(len(ex.span) for ex in examples)
    ids = np.zeros((b, s), dtype=np.int64)
    tone_ids = np.zeros((b, s), dtype=np.int64)
    valid = np.zeros((b, s), dtype=bool)
    for i, ex in enumerate(examples):
        n = len(ex.span)
        ids[i, :n] = ex.seq.ids[ex.span]
        tone_ids[i, :n] = ex.tones
        valid[i, :n] = True
    feats = baseline_features(params, bcfg, ids, tone_ids if bcfg.tone_input else None, valid, training, rng)
    return feats, valid


def padded_targets(examples: list[TtsExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ref_frames (B,T,F), frame_mask (B,T), tone_labels (B,S))."""
    b = len(examples)
    t = max(ex.frames.shape[0] for ex in examples)
    s = max(len(ex.span) for ex in examples)
    f = examples[0].frames.shape[1]
    ref = np.zeros((b, t, f))
    mask = np.zeros((b, t), dtype=bool)
    tones = np.zeros((b, s), dtype=np.int64)
    for i, ex in enumerate(examples):
        n = ex.frames.shape[0]
        ref[i, :n] = ex.frames
        mask[i, :n] = True
        tones[i, : len(ex.tones)] = ex.tones
    return ref, mask, tones


# ---------------------------------------------------------------------------
# freezing


def trainable_names(preset: FinetunePreset, params: dict[str, Tensor], enc_cfg: EncoderConfig | None) -> set[str]:
    """Decoder and heads always train; encoder blocks per the preset.

    Tuning the top k blocks also tunes the final norm; embeddings train
    only when no block is frozen.  The MLM bias never trains downstream.
    """
    if preset.encoder_kind == "conv_bilstm" or preset.tuned_layers is None:
        return {n for n in params if not n.startswith("mlm/")}
    k = min(preset.tuned_layers, enc_cfg.layers)
    names = {n for n in params if n.startswith(("dec/", "tone/"))}
    if k > 0:
        tuned = {f"enc{i}/" for i in range(enc_cfg.layers - k, enc_cfg.layers)}
        names |= {n for n in params if n.startswith(tuple(tuned)) or n.startswith("ln_f/")}
    if k == enc_cfg.layers:
        names |= {n for n in params if n.startswith("emb/")}
    return names


def params_digest(params: dict[str, Tensor], names) -> str:
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# fine-tuning driver


def finetune(
    preset: FinetunePreset,
    enc_cfg: EncoderConfig | None,
    dcfg: DecoderConfig,
    schedule: FinetuneSchedule,
    train_examples: list[TtsExample],
    valid_examples: list[TtsExample],
    out_dir,
    init_arrays: dict[str, np.ndarray] | None = None,
    bcfg: BaselineConfig | None = None,
    metadata: dict | None = None,
    log_name: str = "finetune_log.jsonl",
) -> tuple[dict[str, Tensor], dict]:
    """Train decoder (+ optional tone head) with the preset's freezing
    scheme; frozen parameters are digest-verified bit-identical.

    init_arrays carries a pretrained or warm-start checkpoint; required
    for pretrained presets, rejected for scratch ones.  Returns (params,
    final summary row).
    """
    if preset.pretrained and init_arrays is None:
        raise ConfigError(f"preset {preset.name} requires a pretrained checkpoint")
    if not preset.pretrained and init_arrays is not None:
        raise ConfigError(f"preset {preset.name} trains from scratch; drop the checkpoint")
    if preset.tone_input and preset.encoder_kind != "conv_bilstm":
        raise ConfigError("tone inputs are a baseline-encoder feature")
    if not train_examples:
        raise ConfigError("fine-tuning needs a nonempty corpus")

    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence([schedule.seed, 29])
    enc_rng, dec_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in root.spawn(4))

    if preset.encoder_kind == "conv_bilstm":
        if bcfg is None:
            raise ConfigError("baseline presets need a BaselineConfig")
        if 2 * bcfg.lstm_dim != dcfg.enc_dim:
            raise ConfigError("baseline output width must match the decoder memory width")
        if bcfg.tone_input != preset.tone_input:
            raise ConfigError("BaselineConfig.tone_input must match the preset")
        params = init_baseline_params(bcfg, enc_rng)
    else:
        if enc_cfg is None:
            raise ConfigError("png_bert presets need an EncoderConfig")
        if enc_cfg.hidden != dcfg.enc_dim:
            raise ConfigError("encoder hidden size must match the decoder memory width")
        params = init_encoder_params(enc_cfg, enc_rng)
    params.update(init_decoder_params(dcfg, dec_rng, tone_task=preset.tone_task))

    if init_arrays is not None:
        for name, arr in init_arrays.items():
            if name not in params:
                continue  # warm checkpoints may carry heads this preset lacks
            if params[name].data.shape != arr.shape:
                raise DataError(f"checkpoint parameter {name} has shape {arr.shape}, expected {params[name].data.shape}")
            params[name].data[...] = arr

    trainable = trainable_names(preset, params, enc_cfg)
    frozen = sorted(set(params) - trainable)
    for name in frozen:
        params[name].requires_grad = False
    frozen_digest = params_digest(params, frozen)
    subset = {n: params[n] for n in sorted(trainable)}
    state = engine.AdamState(subset, l2=schedule.l2, decoupled=True)

    encoder_is_static = preset.encoder_kind == "png_bert" and not any(
        n.startswith(("enc", "emb/", "ln_f/")) for n in trainable
    )
    static_memory: dict[int, np.ndarray] = {}  # keyed by example identity

    def memory_for(examples: list[TtsExample], idxs, training: bool, rng) -> tuple[Tensor, np.ndarray]:
        batch = [examples[i] for i in idxs]
        if encoder_is_static:
            # frozen encoder: features never change, compute each once
            missing = [ex for ex in batch if id(ex) not in static_memory]
            if missing:
                with engine.no_grad():
                    mem, val = encoder_memory(params, enc_cfg, missing, training=False)
                for j, ex in enumerate(missing):
                    static_memory[id(ex)] = mem.data[j, : int(val[j].sum())].copy()
            s = max(static_memory[id(ex)].shape[0] for ex in batch)
            out = np.zeros((len(batch), s, dcfg.enc_dim))
            val = np.zeros((len(batch), s), dtype=bool)
            for j, ex in enumerate(batch):
                feats = static_memory[id(ex)]
                out[j, : feats.shape[0]] = feats
                val[j, : feats.shape[0]] = True
            return Tensor(out), val
        if preset.encoder_kind == "conv_bilstm":
            return baseline_memory(params, bcfg, batch, training=training, rng=rng)
        return encoder_memory(params, enc_cfg, batch, training=training, rng=rng)

    def batch_loss(examples, idxs, training, rng) -> tuple[Tensor, dict]:
        chosen = [examples[i] for i in idxs]
        ref, fmask, tlabels = padded_targets(chosen)
        mem, valid = memory_for(examples, idxs, training, rng)
        frames, stops, _ = decode_teacher_forced(params, dcfg, mem, valid, ref, rng, prenet_dropout=True)
        loss = tts_loss(frames, stops, ref, fmask)
        parts = {"tts": float(loss.data)}
        if preset.tone_task:
            tl = tone_loss(params, mem, valid, tlabels)
            parts["tone"] = float(tl.data)
            loss = loss + tl * schedule.tone_weight
        return loss, parts

    n = len(train_examples)
    lengths = [ex.frames.shape[0] for ex in train_examples]

    def epoch_batches() -> list[list[int]]:
        order = order_rng.permutation(n).tolist()
        span = 16 * schedule.batch_size
        out = []
        for start in range(0, n, span):
            chunk = sorted(order[start : start + span], key=lengths.__getitem__)
            out.extend(chunk[b : b + schedule.batch_size] for b in range(0, len(chunk), schedule.batch_size))
        return out

    metadata = dict(metadata or {})
    metadata.update(kind="finetune", preset=preset.name, frozen_digest=frozen_digest)
    batches = epoch_batches()
    bcursor = 0
    best_metric = np.inf
    summary: dict = {}
    log_f = open(os.path.join(out_dir, log_name), "w", encoding="utf-8")
    try:
        for step in range(1, schedule.steps + 1):
            if bcursor >= len(batches):
                batches = epoch_batches()
                bcursor = 0
            idxs = batches[bcursor]
            bcursor += 1
            try:
                loss, parts = batch_loss(train_examples, idxs, True, drop_rng)
                loss.backward()
                lr = engine.linear_decay_lr(step - 1, schedule.steps, schedule.base_lr)
                engine.adam_step(subset, state, lr)
            except DivergenceError as exc:
                raise DivergenceError(step, f"fine-tuning diverged at step {step}: {exc}") from exc
            engine.zero_grads(params)
            row = {"step": step, "loss": round(float(loss.data), 6), "lr": lr, **{k: round(v, 6) for k, v in parts.items()}}

            if step % schedule.eval_interval == 0 or step == schedule.steps:
                val = validation_loss(preset, params, enc_cfg, dcfg, schedule, valid_examples, bcfg, memory_for)
                row.update({k: round(v, 6) for k, v in val.items()})
                save_checkpoint(os.path.join(out_dir, "ckpt_last.pngb"), params, {**metadata, "step": step})
                if val["val_loss"] < best_metric:
                    best_metric = val["val_loss"]
                    save_checkpoint(os.path.join(out_dir, "ckpt_best.pngb"), params, {**metadata, "step": step, **val})
                summary = {"step": step, "loss": float(loss.data), **val, "best_val_loss": float(best_metric)}
            log_f.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        log_f.close()

    if params_digest(params, frozen) != frozen_digest:
        raise RuntimeError("frozen parameters changed during fine-tuning")
    return params, summary


def validation_loss(preset, params, enc_cfg, dcfg, schedule, valid_examples, bcfg, memory_for) -> dict[str, float]:
    """Teacher-forced loss (and tone accuracy) on a held-out subset; the
    prenet keeps its dropout, driven by a step-independent rng."""
    subset = valid_examples[: schedule.eval_subset]
    rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, 31]))
    total = 0.0
    tone_correct = 0
    tone_total = 0
    out: dict[str, float] = {}
    with engine.no_grad():
        bs = schedule.batch_size
        weights = 0
        for start in range(0, len(subset), bs):
            chosen = subset[start : start + bs]
            idxs = list(range(start, min(start + bs, len(subset))))
            ref, fmask, tlabels = padded_targets(chosen)
            mem, valid = memory_for(subset, idxs, False, rng)
            frames, stops, _ = decode_teacher_forced(params, dcfg, mem, valid, ref, rng, prenet_dropout=True)
            loss = tts_loss(frames, stops, ref, fmask)
            total += float(loss.data) * len(chosen)
            weights += len(chosen)
            if preset.tone_task:
                pred = predict_tones(params, mem.data)
                tone_correct += int((pred[valid] == tlabels[valid]).sum())
                tone_total += int(valid.sum())
    out["val_loss"] = total / max(1, weights)
    if preset.tone_task:
        out["val_tone_acc"] = tone_correct / max(1, tone_total)
    return out


# ---------------------------------------------------------------------------
# synthesis and feature extraction


@dataclass
class SynthesisRecord:
    index: int
    frames: np.ndarray
    attention: np.ndarray      # (T, S) over the true span
    exhausted: bool
    stop_step: int | None
    decoded: list[str]
    reference: list[str]
    predicted_tones: list[str] | None = None


def synthesize(
    preset: FinetunePreset,
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig | None,
    dcfg: DecoderConfig,
    examples: list[TtsExample],
    embeddings: dict[str, np.ndarray],
    bcfg: BaselineConfig | None = None,
    seed: int = 0,
    prenet_dropout: bool = True,
) -> list[SynthesisRecord]:
    """Free-running synthesis per utterance with per-index rng seeding,
    decoded back to phonemes through the acoustic oracle."""
    from .metrics import oracle_decode

    records = []
    with engine.no_grad():
        for idx, ex in enumerate(examples):
            if preset.encoder_kind == "conv_bilstm":
                mem, valid = baseline_memory(params, bcfg, [ex], training=False)
            else:
                mem, valid = encoder_memory(params, enc_cfg, [ex], training=False)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 37, idx]))
            frames, alphas, exhausted, stop_step = decode_free_running(
                params, dcfg, mem, valid, rng, prenet_dropout=prenet_dropout
            )
            span = int(valid[0].sum())
            reference = [p for w in ex.sentence.words for p in w.phonemes]
            tones = None
            if "tone/w" in params:
                pred = predict_tones(params, mem.data[0, :span])
                tones = [TONES[i] for i in pred]
            records.append(
                SynthesisRecord(
                    index=idx,
                    frames=frames,
                    attention=alphas[:, :span],
                    exhausted=exhausted,
                    stop_step=stop_step,
                    decoded=oracle_decode(frames, embeddings),
                    reference=reference,
                    predicted_tones=tones,
                )
            )
    return records


def extract_phoneme_features(
    preset: FinetunePreset,
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig | None,
    examples: list[TtsExample],
    bcfg: BaselineConfig | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen final-layer features and tone labels over every phoneme
    token, for linear probing."""
    feats, labels = [], []
    with engine.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            if preset.encoder_kind == "conv_bilstm":
                mem, valid = baseline_memory(params, bcfg, chunk, training=False)
            else:
                mem, valid = encoder_memory(params, enc_cfg, chunk, training=False)
            for i, ex in enumerate(chunk):
                n = len(ex.span)
                feats.append(mem.data[i, :n])
                labels.append(ex.tones)
    return np.concatenate(feats), np.concatenate(labels)
