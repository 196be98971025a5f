"""Run configuration: one JSON file drives every CLI command."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .classifier import GruConfig
from .errors import DomainError
from .fader import FaderArch, FaderTrainConfig
from .fcbaseline import FcGrid
from .synthgen import SynthConfig

ENCODER_MODELS = ("ae", "fader_slight", "fader_strong")
EVAL_MODELS = ("convgru", "ae_gru", "fader_slight", "fader_strong", "fc_svm")
# eval model name -> encoder checkpoint it consumes
LATENT_SOURCE = {"ae_gru": "ae", "fader_slight": "fader_slight", "fader_strong": "fader_strong"}

DEFAULTS: dict = {
    "experiment": "default",
    "output_dir": "runs",
    "synth": {
        "n_sites": 4,
        "subjects_per_site": 20,
        "T": 32,
        "S": 16,
        "site_gain": [1.0, 1.15, 1.3, 1.45],
        "site_bias_scale": 0.2,
        "noise_sigma": [0.3, 0.3, 0.3, 0.3],
        "signal_amplitude": 0.5,
        "signal_region": [4, 8, 4, 8, 4, 8],
        "seed": 1,
        "tr_seconds": 2.0,
        "positive_fraction": None,
    },
    # optional user-supplied phenotype CSV; null means the generated dataset
    "phenotype": None,
    "arch": {"base_channels": 16, "disc_widths": [1024, 256, 64], "disc_dropout": 0.3, "leaky_slope": 0.2},
    "fader": {
        "lambda_ramp_fraction": 0.25,
        "lr": 2e-4,
        "adam_betas": [0.5, 0.999],
        "batch_size": 32,
        "steps": 2000,
        "mode": "fader_alternating",
        "seed": 0,
        "disc_steps": 5,
        "disc_lr": 1e-3,
    },
    "lambdas": {"ae": 0.0, "fader_slight": 0.01, "fader_strong": 0.3},
    "gru": {"hidden": 64, "n_layers": 2, "lr": 1e-3, "batch_size": 16, "epochs": 40, "weight_decay": 0.0},
    "convgru": {"hidden": 64, "n_layers": 2, "lr": 1e-3, "batch_size": 4, "epochs": 10, "weight_decay": 0.0},
    "fc": {"regions_per_axis": 4, "C": [0.1, 1.0, 10.0], "gamma_scale": [1.0, 10.0, 0.1], "k_features": 200, "inner_folds": 3},
    "eval": {"k": 10, "split_seed": 0, "base_seed": 0},
    "probe": {"seed": 0, "vectors": "frame"},
    "embed": {"method": "tsne", "perplexity": 15.0, "n_iter": 500, "seed": 0},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise DomainError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str | None = None

    @classmethod
    def from_dict(cls, d: dict, source: str | None = None) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, d), source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DomainError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d, str(path))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    # -- typed sections ----------------------------------------------------

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig.from_dict(self.raw["synth"])

    @property
    def arch(self) -> FaderArch:
        s = self.raw["synth"]
        return FaderArch.from_dict({**self.raw["arch"], "S": s["S"], "n_blocks": int(round(math.log2(s["S"]))),
                                    "n_sites": s["n_sites"]})

    def fader_train(self, model: str, seed: int | None = None) -> FaderTrainConfig:
        if model not in ENCODER_MODELS:
            raise DomainError(f"unknown encoder model {model!r}; choose from {', '.join(ENCODER_MODELS)}")
        f = dict(self.raw["fader"])
        ramp = f.pop("lambda_ramp_fraction")
        f["adversarial_weight"] = float(self.raw["lambdas"][model])
        f["lambda_ramp_steps"] = int(round(ramp * f["steps"]))
        if seed is not None:
            f["seed"] = seed
        return FaderTrainConfig.from_dict(f)

    @property
    def gru(self) -> GruConfig:
        return GruConfig.from_dict({**self.raw["gru"], "input_dim": self.arch.latent_dim})

    @property
    def convgru(self) -> GruConfig:
        return GruConfig.from_dict({**self.raw["convgru"], "input_dim": self.arch.latent_dim})

    @property
    def fc_grid(self) -> FcGrid:
        return FcGrid.from_dict(self.raw["fc"])

    # -- paths -----------------------------------------------------------------

    def run_dir(self, out: str | None = None) -> Path:
        return Path(out or self.raw["output_dir"]) / self.raw["experiment"]

    def validate(self) -> None:
        self.synth.validate()
        S = self.raw["synth"]["S"]
        if 2 ** int(round(math.log2(S))) != S:
            raise DomainError(f"synth.S = {S} must be a power of two")
        self.arch.validate()
        for m in ENCODER_MODELS:
            self.fader_train(m).validate()
        self.gru.validate()
        self.convgru.validate()
        if self.raw["eval"]["k"] < 2:
            raise DomainError("eval.k must be >= 2")
        if self.raw["probe"]["vectors"] not in ("frame", "mean"):
            raise DomainError("probe.vectors must be 'frame' or 'mean'")
        per = self.raw["fc"]["regions_per_axis"]
        if per < 1 or S % per:
            raise DomainError(f"fc.regions_per_axis = {per} must divide synth.S = {S}")


def default_config_text() -> str:
    return json.dumps(DEFAULTS, indent=2) + "\n"



