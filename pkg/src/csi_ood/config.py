"""Run configuration: flat ``section.key = value`` text with typo rejection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .objectives import LOSS_MODES, LossConfig
from .scoring import SCORE_KINDS, SCORE_MODES
from .transforms import SHIFT_NAMES, AugmentationPolicy, compose_shift_families, make_shift_family

DEFAULTS = {
    "seed": 0,
    "data.source": "photos",
    "data.protocol": "one_class",
    "data.target_class": 0,
    "data.size": 32,
    "data.per_class": 300,
    "data.test_fraction": 1.0 / 6.0,
    "data.split_seed": 0,
    "data.ood_dirs": "",
    "shift.family": "rotate",
    "shift.sigma": -1.0,
    "shift.grid": 2,
    "shift.k": 4,
    "shift.fraction": 0.25,
    "aug.crop_min": 0.08,
    "aug.crop_max": 1.0,
    "aug.flip_prob": 0.5,
    "aug.jitter_prob": 0.8,
    "aug.grayscale_prob": 0.2,
    "aug.hue": 0.1,
    "aug.saturation": 0.4,
    "aug.value": 0.4,
    "loss.mode": "csi",
    "loss.temperature": 0.5,
    "loss.lambda_cls": 1.0,
    "loss.align_shift_as_positive": False,
    "model.arch": "small",
    "model.width": 32,
    "model.proj_dim": 128,
    "optim.epochs": 100,
    "optim.batch_size": 128,
    "optim.lr": 0.1,
    "optim.momentum": 0.9,
    "optim.weight_decay": 1e-6,
    "optim.warmup_epochs": 10,
    "score.kind": "s_csi",
    "score.mode": "sim_norm",
    "score.ensemble_n": 0,
    "score.augment": True,
    "score.coreset_ratio": 1.0,
    "score.controlled": False,
    "score.balance": True,
    "calib.ece_bins": 15,
    "output.dir": "runs/default",
}

PRESETS = {
    "desk": {"model.arch": "small", "data.size": 32, "optim.epochs": 100,
             "optim.batch_size": 128, "optim.lr": 0.1},
    # recorded for parity; not feasible at desk scale
    "paper": {"model.arch": "resnet18", "data.size": 32, "optim.epochs": 1000,
              "optim.batch_size": 512, "optim.lr": 1.0, "optim.weight_decay": 1e-6,
              "optim.warmup_epochs": 10, "loss.temperature": 0.5, "loss.lambda_cls": 1.0},
}

_CHOICES = {
    "data.protocol": ("one_class", "multi_class", "labeled"),
    "loss.mode": LOSS_MODES,
    "model.arch": ("small", "toy", "resnet18"),
    "score.kind": SCORE_KINDS + ("s_sup", "s_sup_ens"),
    "score.mode": SCORE_MODES,
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
        if isinstance(default, float):
            try:
                return float(text)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
        return text
    if isinstance(default, bool) and not isinstance(raw, bool):
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, float) and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    if not isinstance(raw, type(default)):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}")
    return raw


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(DEFAULTS)
        merged.update({k: _coerce(k, v) for k, v in self.values.items()})
        self.values = merged
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        v = self.values
        for key, choices in _CHOICES.items():
            if v[key] not in choices:
                raise ConfigError(f"{key}: {v[key]!r} is not one of {', '.join(choices)}")
        for part in v["shift.family"].split("*"):
            if part not in SHIFT_NAMES + ("identity",):
                raise ConfigError(f"shift.family: unknown family {part!r}; options: "
                                  f"{', '.join(('identity',) + SHIFT_NAMES)} (join with '*')")
        checks = [
            ("loss.temperature", v["loss.temperature"] > 0, "must be positive"),
            ("loss.lambda_cls", v["loss.lambda_cls"] >= 0, "must be non-negative"),
            ("optim.epochs", v["optim.epochs"] >= 0, "must be non-negative"),
            ("optim.batch_size", v["optim.batch_size"] >= 1, "must be >= 1"),
            ("optim.lr", v["optim.lr"] > 0, "must be positive"),
            ("data.size", v["data.size"] >= 2, "must be >= 2"),
            ("data.per_class", v["data.per_class"] >= 1, "must be >= 1"),
            ("data.test_fraction", 0 < v["data.test_fraction"] < 1, "must lie in (0, 1)"),
            ("score.ensemble_n", v["score.ensemble_n"] >= 0, "must be >= 0 (0 = 4 per shift)"),
            ("score.coreset_ratio", 0 < v["score.coreset_ratio"] <= 1, "must lie in (0, 1]"),
            ("calib.ece_bins", v["calib.ece_bins"] >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg} (got {v[key]!r})")
        try:
            self.policy()
        except ValueError as err:
            raise ConfigError(f"aug.*: {err}") from None

    @classmethod
    def from_text(cls, text, preset=None):
        values = dict(PRESETS[preset]) if preset else {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"line {n}: unknown config key {key!r}")
            values[key] = val
        return cls(values)

    @classmethod
    def from_file(cls, path, preset=None):
        return cls.from_text(Path(path).read_text(), preset)

    @classmethod
    def from_preset(cls, preset):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; options: {', '.join(PRESETS)}")
        return cls(dict(PRESETS[preset]))

    def with_overrides(self, overrides):
        values = dict(self.values)
        for key, val in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
        return RunConfig(values)

    def to_text(self):
        return "".join(f"{k} = {self._fmt(v)}\n" for k, v in sorted(self.values.items()))

    @staticmethod
    def _fmt(v):
        return json.dumps(v) if isinstance(v, bool) else str(v)

    def to_dict(self):
        return dict(self.values)

    # -- typed views -------------------------------------------------------

    def policy(self):
        v = self.values
        return AugmentationPolicy(
            crop_area_range=(v["aug.crop_min"], v["aug.crop_max"]),
            flip_prob=v["aug.flip_prob"], jitter_prob=v["aug.jitter_prob"],
            grayscale_prob=v["aug.grayscale_prob"],
            jitter_strengths={"hue": v["aug.hue"], "saturation": v["aug.saturation"],
                              "value": v["aug.value"]})

    def loss(self):
        v = self.values
        return LossConfig(temperature=v["loss.temperature"], lambda_cls=v["loss.lambda_cls"],
                          mode=v["loss.mode"],
                          align_shift_as_positive=v["loss.align_shift_as_positive"])

    def family(self):
        v = self.values
        parts = []
        for name in v["shift.family"].split("*"):
            params = {}
            if name in ("noise", "blur") and v["shift.sigma"] > 0:
                params["sigma"] = v["shift.sigma"]
            if name == "perm":
                params = {"grid": v["shift.grid"], "k": v["shift.k"]}
            if name == "cutout":
                params["fraction"] = v["shift.fraction"]
            parts.append(make_shift_family(name, **params))
        fam = parts[0]
        for nxt in parts[1:]:
            fam = compose_shift_families(fam, nxt)
        return fam


def parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out
