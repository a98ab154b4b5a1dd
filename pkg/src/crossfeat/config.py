"""Flat, typed run configuration.

A config file is a YAML mapping of dotted keys to scalars or lists, e.g.

    seed: 3
    augment.epochs: 4
    detector.detA.private_fraction: 0.25
    include: base.yaml

Included files are applied first; the including file wins.  Unknown keys are
rejected so that typos never silently fall back to defaults.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .augment import AugmentTrainConfig
from .synth import DescriptorProfile, DetectorProfile, HomographyFamily, SceneSpec
from .translate import TranslateTrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default, description)
SCHEMA: dict[str, tuple[str, Any, str]] = {
    "seed": ("int", 0, "master seed for data generation and training"),
    "paths.data": ("str", "data", "dataset directory, relative to --out"),
    "paths.models": ("str", "models", "checkpoint directory, relative to --out"),
    "paths.eval": ("str", "eval", "evaluation output directory, relative to --out"),
    "scene.num_landmarks": ("int", 250, "landmarks shared by all detectors"),
    "scene.latent_dim": ("int", 32, "landmark latent dimension"),
    "scene.width": ("int", 640, "image width in pixels"),
    "scene.height": ("int", 480, "image height in pixels"),
    "dataset.scenes": ("int", 50, "number of scenes, each rendered as one image pair"),
    "dataset.val_fraction": ("float", 0.2, "fraction of scenes held out for validation and evaluation"),
    "dataset.gt_threshold_px": ("float", 3.0, "reprojection threshold for ground-truth correspondences"),
    "homography.max_rotation_deg": ("float", 10.0, "rotation range of the second view"),
    "homography.scale_min": ("float", 0.85, "lower zoom factor"),
    "homography.scale_max": ("float", 1.15, "upper zoom factor"),
    "homography.max_perspective": ("float", 1e-4, "range of the projective terms"),
    "homography.max_translation_px": ("float", 20.0, "translation range"),
    "detectors": ("list", ["detA", "detB"], "detector profile ids"),
    "descriptors": ("list", ["descA", "descB"], "descriptor profile ids"),
    "augment.epochs": ("int", 4, "augmentation training epochs"),
    "augment.batch_size": ("int", 1, "image pairs per step"),
    "augment.lam": ("float", 10.0, "boost loss weight"),
    "augment.bins": ("int", 10, "FastAP histogram bins"),
    "augment.peak_lr": ("float", 1e-3, "peak learning rate of the warmup-cosine schedule"),
    "augment.warmup_steps": ("int", 20, "linear warmup steps, clamped below the total"),
    "augment.weight_decay": ("float", 0.01, "AdamW decoupled weight decay"),
    "augment.aft_layers.sift": ("int", 4, "attention-free layers for sift-style descriptors"),
    "augment.aft_layers.superpoint": ("int", 9, "attention-free layers for superpoint-style descriptors"),
    "translate.epochs": ("int", 4, "translation training epochs"),
    "translate.batch_size": ("int", 1024, "keypoints per step"),
    "translate.lr": ("float", 1e-3, "Adam learning rate"),
    "translate.gamma": ("float", 0.1, "weight of the embedding triplet loss"),
    "translate.margin": ("float", 1.0, "triplet margin"),
    "translate.emb_dim": ("int", 256, "shared embedding dimension"),
    "translate.train_plain": ("bool", True, "also train codecs on raw descriptors (C-D baseline)"),
    "match.mutual_check": ("bool", True, "keep only mutual nearest neighbours"),
    "match.ratio": ("optfloat", None, "ratio-test threshold, null disables it"),
    "match.mode": ("str", "embedded", "mode for the match subcommand"),
    "match.query": ("str", "detA/descA", "query algorithm detector/descriptor for the match subcommand"),
    "match.map": ("str", "detB/descB", "map algorithm detector/descriptor for the match subcommand"),
    "eval.split": ("str", "val", "dataset split to evaluate"),
    "eval.modes": ("list", ["Direct", "Ours^A-", "Ours", "Ours^EMB", "C-D", "C-D^EMB"], "evaluation modes"),
    "eval.dump_matches": ("bool", True, "write per-match CSV files next to the report"),
    "bench.images": ("int", 1000, "timed images per model"),
    "bench.features": ("int", 2048, "features per timed image"),
    "bench.warmup": ("int", 5, "untimed warmup runs"),
}

PATTERNS: dict[str, dict[str, tuple[str, Any]]] = {
    "detector": {
        "detect_prob": ("float", 0.85),
        "jitter_px": ("float", 0.7),
        "scale_noise": ("float", 0.1),
        "orientation_noise": ("float", 0.1),
        "private_fraction": ("float", 0.5),
    },
    "descriptor": {
        "dim": ("int", 128),
        "style": ("str", "sift"),
        "seed": ("int", None),
        "noise": ("float", 0.3),
        "detector_bias": ("float", 1.25),
    },
}

DEFAULT_PATTERN_VALUES = {
    "descriptor.descB.dim": 256,
    "descriptor.descB.style": "superpoint",
}

_PATTERN_RE = re.compile(r"^(detector|descriptor)\.([A-Za-z0-9_\-]+)\.([a-z_]+)$")


def _coerce(key: str, kind: str, value):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind in ("float", "optfloat"):
        if value is None and kind == "optfloat":
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if kind == "list":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key}: expected a list of strings, got {value!r}")
        return list(value)
    raise AssertionError(kind)


def _kind(key: str) -> str:
    if key in SCHEMA:
        return SCHEMA[key][0]
    m = _PATTERN_RE.match(key)
    if m and m.group(3) in PATTERNS[m.group(1)]:
        return PATTERNS[m.group(1)][m.group(3)][0]
    raise ConfigError(f"unknown config key {key!r}")


def _flatten(doc: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _read(path: Path, seen: tuple = ()) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    doc = _flatten(doc)
    includes = doc.pop("include", [])
    merged = {}
    for inc in [includes] if isinstance(includes, str) else includes:
        merged.update(_read(path.parent / inc, seen + (path,)))
    merged.update(doc)
    return merged


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key in self.values:
            return self.values[key]
        if key in SCHEMA:
            return SCHEMA[key][1]
        m = _PATTERN_RE.match(key)
        if m and m.group(3) in PATTERNS[m.group(1)]:
            return DEFAULT_PATTERN_VALUES.get(key, PATTERNS[m.group(1)][m.group(3)][1])
        raise KeyError(key)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k] = _coerce(k, _kind(k), v)
        return RunConfig(vals)

    def resolved(self) -> dict:
        """Every key with its effective value, including the per-profile ones."""
        out = {k: self[k] for k in SCHEMA}
        for kind, ids in (("detector", self["detectors"]), ("descriptor", self["descriptors"])):
            for pid in ids:
                for name in PATTERNS[kind]:
                    out[f"{kind}.{pid}.{name}"] = self[f"{kind}.{pid}.{name}"]
        for i, pid in enumerate(self["descriptors"]):
            if out[f"descriptor.{pid}.seed"] is None:
                out[f"descriptor.{pid}.seed"] = i + 1
        return dict(sorted(out.items()))

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True)

    # builders

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(self["scene.num_landmarks"], self["scene.latent_dim"], self["scene.width"],
                         self["scene.height"], self["seed"])

    def detector_profiles(self) -> list[DetectorProfile]:
        return [DetectorProfile(d, **{k: self[f"detector.{d}.{k}"] for k in PATTERNS["detector"]})
                for d in self["detectors"]]

    def descriptor_profiles(self) -> list[DescriptorProfile]:
        r = self.resolved()
        return [DescriptorProfile(d, r[f"descriptor.{d}.dim"], r[f"descriptor.{d}.style"], r[f"descriptor.{d}.seed"],
                                  r[f"descriptor.{d}.noise"], r[f"descriptor.{d}.detector_bias"])
                for d in self["descriptors"]]

    def homography_family(self) -> HomographyFamily:
        return HomographyFamily(self["homography.max_rotation_deg"],
                                (self["homography.scale_min"], self["homography.scale_max"]),
                                self["homography.max_perspective"], self["homography.max_translation_px"])

    def augment_config(self) -> AugmentTrainConfig:
        return AugmentTrainConfig(self["augment.epochs"], self["augment.batch_size"], self["augment.lam"],
                                  self["augment.bins"], self["seed"], self["augment.peak_lr"],
                                  self["augment.warmup_steps"], self["augment.weight_decay"])

    def translate_config(self) -> TranslateTrainConfig:
        return TranslateTrainConfig(self["translate.epochs"], self["translate.batch_size"], self["translate.lr"],
                                    self["translate.gamma"], self["translate.margin"], self["seed"])

    def aft_layers(self) -> dict[str, int]:
        return {"sift": self["augment.aft_layers.sift"], "superpoint": self["augment.aft_layers.superpoint"]}


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    raw = _read(Path(path)) if path else {}
    values = {k: _coerce(k, _kind(k), v) for k, v in raw.items()}
    cfg = RunConfig(values)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    dets, descs = cfg["detectors"], cfg["descriptors"]
    for key in cfg.values:
        m = _PATTERN_RE.match(key)
        if m:
            pool = dets if m.group(1) == "detector" else descs
            if m.group(2) not in pool:
                raise ConfigError(f"{key}: {m.group(1)} {m.group(2)!r} is not listed in {m.group(1)}s")
    if len(set(dets)) != len(dets) or len(set(descs)) != len(descs) or not dets or not descs:
        raise ConfigError("detector and descriptor ids must be non-empty and unique")
    for d in descs:
        if cfg[f"descriptor.{d}.style"] not in ("sift", "superpoint"):
            raise ConfigError(f"descriptor.{d}.style must be sift or superpoint")
    try:
        cfg.scene_spec()
        cfg.detector_profiles()
        cfg.descriptor_profiles()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
