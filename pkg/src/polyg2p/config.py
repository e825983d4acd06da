"""Run configuration: INI-style sectioned key=value files over named presets.

Preset defaults ("desk" or "paper") are overlaid by the config file and then
by command-line overrides, so a preset name plus a short diff fully describes
a run.  The "paper" preset carries the published hyperparameters; "desk"
carries the toy sizes this package trains in minutes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .baseline import BaselineConfig, BaselineTrainConfig, NOT_POLYPHONE
from .corpus import SyntheticSpec
from .encoder import EncoderConfig, PretrainConfig
from .heads import HeadConfig, HeadTrainConfig


class ConfigError(ValueError):
    pass


# section -> key -> value; every key listed here is recognized
PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "desk": {
        "run": {"seed": 42, "outdir": "out"},
        "synth": {
            "n_polyphones": 5,
            "candidates_per_char": "2,3,4,2,3",
            "samples_per_char": 2000,
            "filler_alphabet": 100,
            "doc_charset": 4,
            "doc_sentences": 10,
            "chain_prob": 0.98,
            "marker_window": 3,
            "sentence_len": "6,10",
        },
        "encoder": {"d_model": 64, "n_blocks": 2, "n_heads": 4,
                     "ff_width": 256, "max_len": 64, "dropout": 0.1},
        "pretrain": {"epochs": 16, "batch_size": 32, "lr": 2e-3,
                      "mask_rate": 0.15, "eval_fraction": 0.1, "max_pairs": 0},
        "head": {"arch": "transformer", "trunk_width": 128, "dropout": 0.2,
                  "lstm_layers": 2, "tf_blocks": 2, "tf_heads": 4,
                  "lr": 3e-3, "batch_size": 32, "max_epochs": 60,
                  "patience": 8, "warmup": 400},
        "baseline": {"char_width": 64, "pos_width": 64, "context": 1,
                      "hidden": 128, "layers": 2, "lr": 3e-3,
                      "batch_size": 32, "max_epochs": 20, "patience": 5},
        "eval": {"k": 10, "min_count": 0, "method": "all",
                  "attention_context": 5},
    },
    "paper": {
        "run": {"seed": 42, "outdir": "out"},
        "synth": {
            "n_polyphones": 5,
            "candidates_per_char": "2,3,4,2,3",
            "samples_per_char": 2000,
            "filler_alphabet": 100,
            "doc_charset": 4,
            "doc_sentences": 10,
            "chain_prob": 0.98,
            "marker_window": 3,
            "sentence_len": "6,10",
        },
        # BERT-base geometry: published output width 768
        "encoder": {"d_model": 768, "n_blocks": 12, "n_heads": 12,
                     "ff_width": 3072, "max_len": 512, "dropout": 0.1},
        "pretrain": {"epochs": 16, "batch_size": 32, "lr": 2e-3,
                      "mask_rate": 0.15, "eval_fraction": 0.1, "max_pairs": 0},
        # published classifier settings: 512 units, dropout 0.5, lr 5e-4,
        # 512-dim 8-head transformer blocks
        "head": {"arch": "transformer", "trunk_width": 512, "dropout": 0.5,
                  "lstm_layers": 2, "tf_blocks": 2, "tf_heads": 8,
                  "lr": 5e-4, "batch_size": 32, "max_epochs": 60,
                  "patience": 8, "warmup": 4000},
        "baseline": {"char_width": 64, "pos_width": 64, "context": 1,
                      "hidden": 512, "layers": 2, "lr": 5e-4,
                      "batch_size": 32, "max_epochs": 20, "patience": 5},
        "eval": {"k": 10, "min_count": 2000, "method": "all",
                  "attention_context": 5},
    },
}

_PATH_KEYS = ("corpus", "dictionary", "lexicon", "vocab", "encoder",
              "head", "baseline", "folds", "pairs")


@dataclass
class RunConfig:
    preset: str
    seed: int
    outdir: Path
    paths: dict[str, Path]
    sections: dict[str, dict[str, object]]

    def synth_spec(self) -> SyntheticSpec:
        s = self.sections["synth"]
        return SyntheticSpec(
            n_polyphones=s["n_polyphones"],
            candidates_per_char=tuple(s["candidates_per_char"]),
            samples_per_char=s["samples_per_char"],
            filler_alphabet=s["filler_alphabet"],
            doc_charset=s["doc_charset"],
            doc_sentences=s["doc_sentences"],
            chain_prob=s["chain_prob"],
            marker_window=s["marker_window"],
            sentence_len=tuple(s["sentence_len"]),
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        e = self.sections["encoder"]
        return EncoderConfig(vocab_size=vocab_size, d_model=e["d_model"],
                             n_blocks=e["n_blocks"], n_heads=e["n_heads"],
                             ff_width=e["ff_width"], max_len=e["max_len"],
                             dropout=e["dropout"])

    def pretrain_config(self) -> PretrainConfig:
        p = self.sections["pretrain"]
        return PretrainConfig(epochs=p["epochs"], batch_size=p["batch_size"],
                              lr=p["lr"], mask_rate=p["mask_rate"],
                              eval_fraction=p["eval_fraction"],
                              max_pairs=p["max_pairs"] or None)

    def head_config(self, feature_dim: int, arch: str | None = None) -> HeadConfig:
        h = self.sections["head"]
        return HeadConfig(arch=arch or h["arch"], feature_dim=feature_dim,
                          trunk_width=h["trunk_width"], dropout=h["dropout"],
                          lstm_layers=h["lstm_layers"], tf_blocks=h["tf_blocks"],
                          tf_heads=h["tf_heads"])

    def head_train_config(self) -> HeadTrainConfig:
        h = self.sections["head"]
        return HeadTrainConfig(lr=h["lr"], batch_size=h["batch_size"],
                               max_epochs=h["max_epochs"], patience=h["patience"],
                               warmup=h["warmup"])

    def baseline_config(self, labels: list[str]) -> BaselineConfig:
        b = self.sections["baseline"]
        return BaselineConfig(labels=labels, char_width=b["char_width"],
                              pos_width=b["pos_width"], context=b["context"],
                              hidden=b["hidden"], layers=b["layers"])

    def baseline_train_config(self) -> BaselineTrainConfig:
        b = self.sections["baseline"]
        return BaselineTrainConfig(lr=b["lr"], batch_size=b["batch_size"],
                                   max_epochs=b["max_epochs"], patience=b["patience"])

    def path(self, key: str, default_name: str | None = None) -> Path:
        if key in self.paths:
            return self.paths[key]
        if default_name is not None:
            return self.outdir / default_name
        raise ConfigError(f"missing required path {key!r} (set [paths] {key} = ...)")

    def snapshot(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "outdir": str(self.outdir),
            "paths": {k: str(v) for k, v in sorted(self.paths.items())},
            "sections": {name: {k: (list(v) if isinstance(v, tuple) else v)
                                for k, v in sorted(sec.items())}
                         for name, sec in sorted(self.sections.items())},
        }


def _convert(section: str, key: str, raw: str, template) -> object:
    """Parse a raw string according to the preset template value's type."""
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"[{section}] {key}: expected boolean, got {raw!r}")
    try:
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}")
    return raw


def _parse_int_list(section: str, key: str, value: object) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(v) for v in str(value).split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected comma-separated integers, got {value!r}")


_LIST_KEYS = {("synth", "candidates_per_char"), ("synth", "sentence_len")}


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from preset defaults, an optional INI file, and
    ``section.key=value`` override strings (highest precedence)."""
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}")

    preset = parser.get("run", "preset", fallback="desk")
    file_pairs: list[tuple[str, str, str]] = []
    for section in parser.sections():
        for key, value in parser.items(section):
            if (section, key) != ("run", "preset"):
                file_pairs.append((section, key, value))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if (section.strip(), key.strip()) == ("run", "preset"):
            preset = value.strip()
        else:
            file_pairs.append((section.strip(), key.strip(), value.strip()))

    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    sections = {name: dict(defaults) for name, defaults in PRESETS[preset].items()}
    paths: dict[str, Path] = {}

    for section, key, value in file_pairs:
        if section == "paths":
            if key not in _PATH_KEYS:
                raise ConfigError(f"[paths] {key}: unknown path key; valid: {_PATH_KEYS}")
            paths[key] = Path(value)
            continue
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in sections[section]:
            raise ConfigError(f"[{section}] {key}: unknown key")
        sections[section][key] = _convert(section, key, value, sections[section][key])

    for section, key in _LIST_KEYS:
        sections[section][key] = _parse_int_list(section, key, sections[section][key])

    run = sections.pop("run")
    outdir = Path(run["outdir"])
    return RunConfig(preset=preset, seed=int(run["seed"]), outdir=outdir,
                     paths=paths, sections=sections)


# global-seed fan-out: one documented offset per consumer
SEED_STREAMS = {
    "synth": 101,
    "pretrain": 211,
    "folds": 307,
    "head": 401,
    "baseline": 503,
    "eval": 601,
}


def module_seed(config: RunConfig, stream: str) -> int:
    return config.seed + SEED_STREAMS[stream]
