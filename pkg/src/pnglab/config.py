"""Layered run configuration: defaults, an INI file, then command-line
overrides.  The resolved result serializes to a canonical text whose
SHA-256 digest stamps every artifact, so mixing outputs of different
configurations is detectable.
"""

from __future__ import annotations

import configparser
import copy
import hashlib

from .corpus import CorpusSpec
from .downstream import BaselineConfig, DecoderConfig, FinetuneSchedule
from .encoder import EncoderConfig
from .errors import ConfigError
from .masking import MaskingPolicy

DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {
        "name": "toyja",
        "seed": "0",
    },
    "corpus": {
        "seed": "0",
        "lexicon_size": "60",
        "homograph_fraction": "0.2",
        "word_classes": "4",
        "sentence_min": "2",
        "sentence_max": "6",
        "join_probability": "0.35",
        "train_size": "5000",
        "valid_size": "500",
        "test_size": "500",
    },
    "encoder": {
        "layers": "4",
        "hidden": "64",
        "heads": "4",
        "ffn": "256",
        "max_len": "256",
        "dropout": "0.1",
        "use_word_positions": "false",
    },
    "masking": {
        "select_fraction": "0.25",
        "weights": "48,8,8,10,10",
        "seed": "0",
    },
    "pretrain": {
        "steps": "20000",
        "batch_size": "32",
        "base_lr": "1e-3",
        "l2": "0.01",
        "eval_interval": "1000",
        "eval_subset": "200",
        "pb_mode": "false",
        "seed": "0",
    },
    "finetune": {
        "preset": "PGB2",
        "steps": "2500",
        "batch_size": "16",
        "base_lr": "1e-3",
        "l2": "0.0",
        "tone_weight": "1.0",
        "eval_interval": "250",
        "eval_subset": "100",
        "seed": "0",
        "prenet_dim": "32",
        "attn_dim": "32",
        "lstm_dim": "64",
        "prenet_dropout": "0.5",
        "stop_threshold": "0.5",
        "max_steps_factor": "10",
        "baseline_emb_dim": "64",
        "baseline_tone_emb_dim": "16",
        "baseline_channels": "64",
        "baseline_lstm_dim": "32",
    },
    "probe": {
        "lr": "1e-3",
        "steps": "2000",
        "seed": "0",
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class Config:
    """Resolved configuration; values stay strings until typed access."""

    def __init__(self, values: dict[str, dict[str, str]]):
        self._values = values

    def get(self, section: str, key: str) -> str:
        try:
            return self._values[section][key]
        except KeyError:
            raise ConfigError(f"missing configuration value {section}.{key}") from None

    def getint(self, section: str, key: str) -> int:
        raw = self.get(section, key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be an integer, got {raw!r}") from None

    def getfloat(self, section: str, key: str) -> float:
        raw = self.get(section, key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number, got {raw!r}") from None

    def getbool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).lower()
        if raw in _TRUE:
            return True
        if raw in _FALSE:
            return False
        raise ConfigError(f"{section}.{key} must be a boolean, got {raw!r}")

    def set(self, section: str, key: str, value: str) -> None:
        if section not in self._values or key not in self._values[section]:
            raise ConfigError(f"unknown configuration key {section}.{key}")
        self._values[section][key] = value

    def canonical_text(self) -> str:
        """Deterministic rendering: sorted sections, sorted keys."""
        lines = []
        for section in sorted(self._values):
            lines.append(f"[{section}]")
            for key in sorted(self._values[section]):
                lines.append(f"{key} = {self._values[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    # -- factories for the typed objects the library consumes ----------

    def corpus_spec(self) -> CorpusSpec:
        c = "corpus"
        return CorpusSpec(
            seed=self.getint(c, "seed"),
            lexicon_size=self.getint(c, "lexicon_size"),
            homograph_fraction=self.getfloat(c, "homograph_fraction"),
            word_classes=self.getint(c, "word_classes"),
            sentence_length=(self.getint(c, "sentence_min"), self.getint(c, "sentence_max")),
            join_probability=self.getfloat(c, "join_probability"),
            split_sizes=(
                self.getint(c, "train_size"),
                self.getint(c, "valid_size"),
                self.getint(c, "test_size"),
            ),
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        e = "encoder"
        return EncoderConfig(
            vocab_size=vocab_size,
            layers=self.getint(e, "layers"),
            hidden=self.getint(e, "hidden"),
            heads=self.getint(e, "heads"),
            ffn=self.getint(e, "ffn"),
            max_len=self.getint(e, "max_len"),
            use_word_positions=self.getbool(e, "use_word_positions"),
            dropout=self.getfloat(e, "dropout"),
        )

    def masking_policy(self) -> MaskingPolicy:
        raw = self.get("masking", "weights")
        try:
            weights = tuple(float(w) for w in raw.split(","))
        except ValueError:
            raise ConfigError(f"masking.weights must be comma-separated numbers, got {raw!r}") from None
        return MaskingPolicy(
            select_fraction=self.getfloat("masking", "select_fraction"),
            weights=weights,
            seed=self.getint("masking", "seed"),
        )

    def pretrain_schedule(self, seed: int | None = None, pb_mode: bool | None = None):
        from .encoder import PretrainSchedule

        p = "pretrain"
        return PretrainSchedule(
            steps=self.getint(p, "steps"),
            batch_size=self.getint(p, "batch_size"),
            base_lr=self.getfloat(p, "base_lr"),
            l2=self.getfloat(p, "l2"),
            eval_interval=self.getint(p, "eval_interval"),
            eval_subset=self.getint(p, "eval_subset"),
            pb_mode=self.getbool(p, "pb_mode") if pb_mode is None else pb_mode,
            seed=self.getint(p, "seed") if seed is None else seed,
        )

    def finetune_schedule(self, seed: int | None = None) -> FinetuneSchedule:
        f = "finetune"
        return FinetuneSchedule(
            steps=self.getint(f, "steps"),
            batch_size=self.getint(f, "batch_size"),
            base_lr=self.getfloat(f, "base_lr"),
            l2=self.getfloat(f, "l2"),
            tone_weight=self.getfloat(f, "tone_weight"),
            eval_interval=self.getint(f, "eval_interval"),
            eval_subset=self.getint(f, "eval_subset"),
            seed=self.getint(f, "seed") if seed is None else seed,
        )

    def decoder_config(self) -> DecoderConfig:
        f = "finetune"
        return DecoderConfig(
            enc_dim=self.getint("encoder", "hidden"),
            prenet_dim=self.getint(f, "prenet_dim"),
            attn_dim=self.getint(f, "attn_dim"),
            lstm_dim=self.getint(f, "lstm_dim"),
            prenet_dropout=self.getfloat(f, "prenet_dropout"),
            stop_threshold=self.getfloat(f, "stop_threshold"),
            max_steps_factor=self.getint(f, "max_steps_factor"),
        )

    def baseline_config(self, vocab_size: int, tone_input: bool) -> BaselineConfig:
        f = "finetune"
        return BaselineConfig(
            vocab_size=vocab_size,
            emb_dim=self.getint(f, "baseline_emb_dim"),
            tone_emb_dim=self.getint(f, "baseline_tone_emb_dim"),
            channels=self.getint(f, "baseline_channels"),
            lstm_dim=self.getint(f, "baseline_lstm_dim"),
            tone_input=tone_input,
        )


def load_config(path: str | None = None, overrides: list[str] | None = None) -> Config:
    """Defaults, optionally updated from an INI file, then from
    section.key=value override strings.  Unknown keys are errors."""
    values = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read configuration file {path!r}")
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"unknown configuration section [{section}]")
            for key, value in parser.items(section):
                if key not in values[section]:
                    raise ConfigError(f"unknown configuration key {section}.{key}")
                values[section][key] = value.strip()
    cfg = Config(values)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        cfg.set(section.strip(), key.strip(), value.strip())
    return cfg
