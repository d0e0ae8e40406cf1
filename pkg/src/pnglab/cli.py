"""Command-line entry points: corpus generation, pretraining,
fine-tuning, evaluation, probing, and report aggregation.

Exit codes: 0 success, 2 configuration errors, 3 data or provenance
errors, 4 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from . import downstream, encoder, metrics
from .checkpoint import load_checkpoint
from .codec import assemble_sequence, build_vocabulary
from .config import Config, load_config
from .errors import ConfigError, DataError, DivergenceError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

CORPUS_FILES = ("lexicon.tsv", "embeddings.tsv", "train.jsonl", "valid.jsonl", "test.jsonl")


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _section_digest(cfg: Config, section: str) -> str:
    lines = [f"[{section}]"]
    lines += [f"{k} = {cfg.get(section, k)}" for k in sorted(cfg._values[section])]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


@contextlib.contextmanager
def _run_lock(out_dir):
    """One writer per run directory; a stale lock from a crashed run
    must be removed by hand."""
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {out_dir} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        os.unlink(lock)


def _echo_config(cfg: Config) -> None:
    sys.stdout.write(cfg.canonical_text())
    print(f"# config {cfg.digest()}")


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


class _CorpusBundle:
    def __init__(self, lexicon, embeddings, splits, digest):
        self.lexicon = lexicon
        self.embeddings = embeddings
        self.train, self.valid, self.test = splits
        self.digest = digest

    def split(self, name: str):
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}") from None


def _load_corpus(cfg: Config, corpus_dir) -> _CorpusBundle:
    manifest_path = os.path.join(corpus_dir, "corpus.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"{corpus_dir} has no corpus.json manifest; run gen-corpus first")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    want = _section_digest(cfg, "corpus")
    if manifest.get("corpus_digest") != want:
        raise DataError("corpus directory was generated under a different [corpus] configuration")
    for name, digest in manifest["files"].items():
        path = os.path.join(corpus_dir, name)
        if not os.path.exists(path) or _file_digest(path) != digest:
            raise DataError(f"corpus file {name} is missing or modified")
    lexicon = corpus_mod.read_lexicon(os.path.join(corpus_dir, "lexicon.tsv"))
    embeddings = corpus_mod.read_embedding_table(os.path.join(corpus_dir, "embeddings.tsv"))
    splits = [
        corpus_mod.read_dataset(os.path.join(corpus_dir, f"{s}.jsonl"), lexicon)
        for s in ("train", "valid", "test")
    ]
    return _CorpusBundle(lexicon, embeddings, splits, want)


def _vocab_ranges(vocab):
    return (
        (vocab.phoneme_offset, vocab.grapheme_offset),
        (vocab.grapheme_offset, vocab.size),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(cfg: Config, args) -> int:
    with _run_lock(args.out):
        spec = cfg.corpus_spec()
        lexicon, embeddings, splits = corpus_mod.generate_corpus(spec)
        corpus_mod.write_lexicon(os.path.join(args.out, "lexicon.tsv"), lexicon)
        corpus_mod.write_embedding_table(os.path.join(args.out, "embeddings.tsv"), embeddings)
        for name, sentences in zip(("train", "valid", "test"), splits):
            corpus_mod.write_dataset(os.path.join(args.out, f"{name}.jsonl"), sentences)
        manifest = {
            "config": cfg.digest(),
            "corpus_digest": _section_digest(cfg, "corpus"),
            "files": {name: _file_digest(os.path.join(args.out, name)) for name in CORPUS_FILES},
            "counts": {
                "lexicon": len(lexicon.entries),
                "train": len(splits[0]),
                "valid": len(splits[1]),
                "test": len(splits[2]),
            },
        }
        _write_json(os.path.join(args.out, "corpus.json"), manifest)
    print(f"corpus written to {args.out} ({manifest['counts']})")
    return 0


def cmd_pretrain(cfg: Config, args) -> int:
    bundle = _load_corpus(cfg, args.corpus)
    vocab = build_vocabulary(bundle.lexicon)
    enc_cfg = cfg.encoder_config(vocab.size)
    schedule = cfg.pretrain_schedule()
    policy = cfg.masking_policy()
    train_seqs = [assemble_sequence(s, vocab) for s in bundle.train]
    valid_seqs = [assemble_sequence(s, vocab) for s in bundle.valid]
    metadata = {"config": cfg.digest(), "corpus": bundle.digest}
    with _run_lock(args.out):
        params, summary = encoder.pretrain(
            enc_cfg, schedule, train_seqs, valid_seqs, policy, _vocab_ranges(vocab), args.out, metadata=metadata
        )
        _write_json(os.path.join(args.out, "summary.json"), {**summary, **metadata})
    print(f"pretrain done: {json.dumps(summary, sort_keys=True)}")
    return 0


def _rebuild_finetune_params(cfg: Config, preset, vocab, arrays) -> tuple[dict, object, object, object]:
    """Reconstruct the parameter tree for a fine-tuned checkpoint."""
    enc_cfg = cfg.encoder_config(vocab.size)
    dcfg = cfg.decoder_config()
    rng = np.random.default_rng(0)
    bcfg = None
    if preset.encoder_kind == "conv_bilstm":
        bcfg = cfg.baseline_config(vocab.size, preset.tone_input)
        params = downstream.init_baseline_params(bcfg, rng)
    else:
        params = downstream.init_encoder_params(enc_cfg, rng)
    params.update(downstream.init_decoder_params(dcfg, rng, tone_task=preset.tone_task))
    for name, arr in arrays.items():
        if name not in params:
            raise DataError(f"checkpoint carries unexpected parameter {name}")
        if params[name].data.shape != arr.shape:
            raise DataError(f"checkpoint parameter {name} has the wrong shape")
        params[name].data[...] = arr
    return params, enc_cfg, dcfg, bcfg


def cmd_finetune(cfg: Config, args) -> int:
    preset = downstream.get_preset(args.preset or cfg.get("finetune", "preset"))
    bundle = _load_corpus(cfg, args.corpus)
    vocab = build_vocabulary(bundle.lexicon)
    enc_cfg = cfg.encoder_config(vocab.size)
    dcfg = cfg.decoder_config()
    schedule = cfg.finetune_schedule()
    init_arrays = None
    init_meta = {}
    if args.init is not None:
        if not preset.pretrained:
            raise ConfigError(f"preset {preset.name} trains from scratch and rejects --init")
        init_arrays, init_meta = load_checkpoint(args.init)
        if init_meta.get("corpus") not in (None, bundle.digest):
            raise DataError("--init checkpoint was trained on a different corpus")
    bcfg = cfg.baseline_config(vocab.size, preset.tone_input) if preset.encoder_kind == "conv_bilstm" else None
    train_ex = downstream.prepare_examples(bundle.train, vocab, bundle.embeddings, preset.grapheme_mask)
    valid_ex = downstream.prepare_examples(bundle.valid, vocab, bundle.embeddings, preset.grapheme_mask)
    metadata = {
        "config": cfg.digest(),
        "corpus": bundle.digest,
        "init_config": init_meta.get("config"),
    }
    with _run_lock(args.out):
        params, summary = downstream.finetune(
            preset,
            enc_cfg,
            dcfg,
            schedule,
            train_ex,
            valid_ex,
            args.out,
            init_arrays=init_arrays,
            bcfg=bcfg,
            metadata=metadata,
        )
        _write_json(os.path.join(args.out, "summary.json"), {**summary, **metadata, "preset": preset.name})
    print(f"finetune {preset.name} done: {json.dumps(summary, sort_keys=True)}")
    return 0


def _check_ckpt_config(cfg: Config, meta: dict) -> None:
    if meta.get("config") != cfg.digest():
        raise DataError(
            "checkpoint was produced under a different configuration "
            f"({meta.get('config', 'missing')[:12]} vs {cfg.digest()[:12]}); "
            "rerun with the matching config file and overrides"
        )


def cmd_eval(cfg: Config, args) -> int:
    bundle = _load_corpus(cfg, args.corpus)
    vocab = build_vocabulary(bundle.lexicon)
    arrays, meta = load_checkpoint(args.ckpt)
    _check_ckpt_config(cfg, meta)
    sentences = bundle.split(args.split)
    if args.limit is not None:
        sentences = sentences[: args.limit]
    seed = cfg.getint("experiment", "seed")
    with _run_lock(args.out):
        if meta.get("kind") == "pretrain":
            report = _eval_pretrain(cfg, vocab, arrays, meta, sentences, seed)
        elif meta.get("kind") == "finetune":
            report = _eval_finetune(cfg, vocab, bundle, arrays, meta, sentences, seed, args.out)
        else:
            raise DataError(f"checkpoint kind {meta.get('kind')!r} is not evaluable")
        report.validate()
        with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as f:
            f.write(report.to_json())
    print(report.to_json())
    return 0


def _eval_pretrain(cfg, vocab, arrays, meta, sentences, seed) -> metrics.MetricsReport:
    enc_cfg = cfg.encoder_config(vocab.size)
    params = encoder.init_encoder_params(enc_cfg, np.random.default_rng(0))
    for name, arr in arrays.items():
        if name not in params or params[name].data.shape != arr.shape:
            raise DataError(f"checkpoint parameter {name} does not fit this encoder configuration")
        params[name].data[...] = arr
    policy = cfg.masking_policy()
    seqs = [assemble_sequence(s, vocab) for s in sentences]
    ranges = _vocab_ranges(vocab)
    pb = bool(meta.get("pb_mode"))
    values, counts = {}, {}
    for mode in ("mlm", "g2p", "p2g"):
        acc, n = metrics.masked_accuracy(params, enc_cfg, seqs, mode, policy, ranges, pb_mode=pb)
        values[f"{mode}_acc"] = acc
        counts[f"{mode}_acc"] = n
    return metrics.MetricsReport(
        system="pretrain", config_hash=cfg.digest(), seed=seed, values=values, counts=counts,
        extra={"step": meta.get("step"), "pb_mode": pb},
    )


def _eval_finetune(cfg, vocab, bundle, arrays, meta, sentences, seed, out_dir) -> metrics.MetricsReport:
    preset = downstream.get_preset(meta["preset"])
    params, enc_cfg, dcfg, bcfg = _rebuild_finetune_params(cfg, preset, vocab, arrays)
    examples = downstream.prepare_examples(sentences, vocab, bundle.embeddings, preset.grapheme_mask)
    records = downstream.synthesize(
        preset, params, enc_cfg, dcfg, examples, bundle.embeddings, bcfg=bcfg, seed=seed
    )
    attn = [metrics.AttentionRecord(r.attention, str(r.index), r.exhausted) for r in records]
    refs = [r.reference for r in records]
    hyps = [r.decoded for r in records]
    values = {
        "aer": metrics.attention_error_rate(attn),
        "cer": metrics.cer(refs, hyps),
    }
    counts = {"aer": len(records), "cer": len(records)}
    extra: dict = {
        "preset": preset.name,
        "nondecreasing_paths": metrics.nondecreasing_path_fraction(attn),
        "exhausted": int(sum(r.exhausted for r in records)),
    }
    if preset.tone_task:
        correct = total = 0
        for r, ex in zip(records, examples):
            want = [corpus_mod.TONES[i] for i in ex.tones]
            correct += sum(a == b for a, b in zip(r.predicted_tones, want))
            total += len(want)
        extra["tone_head_acc"] = correct / max(1, total)
    with open(os.path.join(out_dir, "synthesis.jsonl"), "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "sentence_id": r.index,
                        "stop_step": r.stop_step,
                        "exhausted": r.exhausted,
                        "attention_path": np.argmax(r.attention, axis=1).tolist() if r.attention.size else [],
                        "decoded_phonemes": r.decoded,
                        "reference_phonemes": r.reference,
                        "predicted_tones": r.predicted_tones,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return metrics.MetricsReport(
        system=preset.name, config_hash=cfg.digest(), seed=seed, values=values, counts=counts, extra=extra
    )


def cmd_probe(cfg: Config, args) -> int:
    bundle = _load_corpus(cfg, args.corpus)
    vocab = build_vocabulary(bundle.lexicon)
    arrays, meta = load_checkpoint(args.ckpt)
    _check_ckpt_config(cfg, meta)
    if meta.get("kind") != "finetune":
        raise DataError("probing expects a fine-tuned checkpoint")
    preset = downstream.get_preset(meta["preset"])
    params, enc_cfg, dcfg, bcfg = _rebuild_finetune_params(cfg, preset, vocab, arrays)
    fit_sentences = bundle.train if args.fit_limit is None else bundle.train[: args.fit_limit]
    eval_sentences = bundle.split(args.split)
    fit_ex = downstream.prepare_examples(fit_sentences, vocab, bundle.embeddings, preset.grapheme_mask)
    eval_ex = downstream.prepare_examples(eval_sentences, vocab, bundle.embeddings, preset.grapheme_mask)
    f_fit, l_fit = downstream.extract_phoneme_features(preset, params, enc_cfg, fit_ex, bcfg=bcfg)
    f_eval, l_eval = downstream.extract_phoneme_features(preset, params, enc_cfg, eval_ex, bcfg=bcfg)
    result = metrics.linear_probe(
        f_fit, l_fit, f_eval, l_eval,
        lr=cfg.getfloat("probe", "lr"), steps=cfg.getint("probe", "steps"), seed=cfg.getint("probe", "seed"),
    )
    report = metrics.MetricsReport(
        system=preset.name,
        config_hash=cfg.digest(),
        seed=cfg.getint("experiment", "seed"),
        values={"ta": result.ta, "pa": result.pa, "aa": result.aa},
        counts=result.counts,
        extra={"fit_tokens": int(len(l_fit)), "eval_tokens": int(len(l_eval))},
    )
    report.validate()
    with _run_lock(args.out):
        with open(os.path.join(args.out, "probe.json"), "w", encoding="utf-8") as f:
            f.write(report.to_json())
    print(report.to_json())
    return 0


def cmd_report(cfg: Config, args) -> int:
    rows = []
    for path in args.inputs:
        if not os.path.exists(path):
            raise DataError(f"report input {path} does not exist")
        with open(path, encoding="utf-8") as f:
            rows.append(metrics.MetricsReport.from_json(f.read()))
    merged: dict[tuple[str, int], metrics.MetricsReport] = {}
    for row in rows:
        key = (row.system, row.seed)
        if key in merged:
            base = merged[key]
            overlap = set(base.values) & set(row.values)
            if overlap:
                raise DataError(f"duplicate metrics {sorted(overlap)} for system {row.system} seed {row.seed}")
            base.values.update(row.values)
            base.counts.update(row.counts)
        else:
            merged[key] = row
    lines = [metrics.MetricsReport.csv_header()]
    for key in sorted(merged):
        lines.append(merged[key].csv_row())
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnglab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=False, ckpt=False, out=True):
        p.add_argument("--config", default=None, help="INI configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if corpus:
            p.add_argument("--corpus", required=True, help="directory produced by gen-corpus")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint file")
        if out:
            p.add_argument("--out", required=True, help="run directory for outputs")

    p = sub.add_parser("gen-corpus", help="generate the synthetic language corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on text and phonemes")
    common(p, corpus=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a synthesis system preset")
    common(p, corpus=True)
    p.add_argument("--preset", default=None, help="system preset (defaults to finetune.preset)")
    p.add_argument("--init", default=None, help="pretrained or warm-start checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    common(p, corpus=True, ckpt=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--limit", type=int, default=None, help="evaluate only the first N sentences")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="linear tone probes over encoder features")
    common(p, corpus=True, ckpt=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--fit-limit", type=int, default=None, help="fit the probe on the first N train sentences")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="merge eval/probe outputs into one CSV table")
    p.add_argument("inputs", nargs="+", help="eval.json / probe.json files")
    p.add_argument("--out", default=None, help="CSV output path (stdout otherwise)")
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command != "report":
            _echo_config(cfg)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
