"""Layered run configuration: command-line flags over a JSON config file over defaults.

Config file schema (every section and key optional)::

    {
      "corpus":   {"grid": 16, "window": 32, "keep_highest": false, "transpose": true,
                   "songs_per_style": 300, "song_length": 48, "phrase_length": 0, "seed": 7},
      "model":    {"hidden_size": 128, "style_dim": 32, "content_dim": 96, "encoder_layers": 2,
                   "decoder_layers": 2, "embed_dim": 64, "one_hot": false, "autoregressive": false,
                   "init_seed": 0},
      "train":    {"epochs": 30, "batch_size": 50, "vae_lr": 0.01, "classifier_lr": 0.005,
                   "beta_start": 0.0, "beta_end": 0.15, "ablation": "total", "seed": 0,
                   "val_fraction": 0.1, "adversary_steps": 1, "grad_clip": 5.0,
                   "reduction": "mean", "recon_weights": [1, 1, 1]},
      "generate": {"n": 5, "temperature": 1.0, "seed": 7, "style_jitter": 0.0},
      "eval":     {"seed": 0, "recognizer_epochs": 2, "recognizer_hidden": 64, "subset": "all"}
    }

The environment variable ``FOLK_SEED`` overrides every seed.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS: dict[str, dict] = {
    "corpus": {"grid": 16, "window": 32, "keep_highest": False, "transpose": True,
               "songs_per_style": 300, "song_length": 48, "phrase_length": 0, "seed": 7},
    "model": {"hidden_size": 128, "style_dim": 32, "content_dim": 96, "encoder_layers": 2,
              "decoder_layers": 2, "embed_dim": 64, "one_hot": False, "autoregressive": False,
              "init_seed": 0},
    "train": {"epochs": 30, "batch_size": 50, "vae_lr": 0.01, "classifier_lr": 0.005,
              "beta_start": 0.0, "beta_end": 0.15, "ablation": "total", "seed": 0,
              "val_fraction": 0.1, "adversary_steps": 1, "grad_clip": 5.0,
              "reduction": "mean", "recon_weights": [1.0, 1.0, 1.0]},
    "generate": {"n": 5, "temperature": 1.0, "seed": 7, "style_jitter": 0.0},
    "eval": {"seed": 0, "recognizer_epochs": 2, "recognizer_hidden": 64, "subset": "all"},
}

SEED_KEYS = [("corpus", "seed"), ("model", "init_seed"), ("train", "seed"), ("generate", "seed"), ("eval", "seed")]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    sources: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def to_dict(self) -> dict:
        return {"config": self.sections, "sources": self.sources}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["config"], data.get("sources", {}))


def _merge(base: dict, section: str, values: dict, origin: str, sources: dict) -> None:
    for key, value in values.items():
        if key not in base[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        base[section][key] = value
        sources[f"{section}.{key}"] = origin


def resolve(flags: dict[tuple[str, str], object] | None = None, config_file: str | Path | None = None,
            env: dict | None = None) -> RunConfig:
    """Merge defaults, then the config file, then flags, then ``FOLK_SEED``."""
    sections = copy.deepcopy(DEFAULTS)
    sources: dict[str, str] = {}
    if config_file is not None:
        try:
            data = json.loads(Path(config_file).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_file}: invalid JSON ({exc})") from None
        for section, values in data.items():
            if section not in sections or not isinstance(values, dict):
                raise ConfigError(f"unknown config section {section!r}")
            _merge(sections, section, values, f"file:{config_file}", sources)
    for (section, key), value in (flags or {}).items():
        _merge(sections, section, {key: value}, "flag", sources)
    env = os.environ if env is None else env
    if env.get("FOLK_SEED"):
        try:
            seed = int(env["FOLK_SEED"])
        except ValueError:
            raise ConfigError(f"FOLK_SEED must be an integer, got {env['FOLK_SEED']!r}") from None
        for section, key in SEED_KEYS:
            _merge(sections, section, {key: seed}, "env:FOLK_SEED", sources)
    return RunConfig(sections, sources)
