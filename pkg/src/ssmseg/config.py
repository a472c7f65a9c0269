"""Run configuration: one YAML file with nested sections, overridable by
command-line flags. Unknown keys are rejected up front so typos cannot
silently change a run.

Precedence, lowest to highest: built-in defaults, config file, flags.
Every command writes the fully resolved configuration next to its
outputs as ``run_config_resolved.yaml``; re-running from that snapshot
reproduces the run in deterministic mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .nets import NetworkSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Schema violation in a config file or flag set."""


_TRAIN_KEYS = {"iterations", "batch_size", "labelled_batch", "learning_rate",
               "momentum", "weight_decay", "validate_every", "seed",
               "deterministic", "use_semi", "use_contra", "projector_grid",
               "projector_channels"}
_NETWORK_KEYS = {"variant", "classes", "in_channels", "input_size", "base_width",
                 "patch_size", "embed_dim", "depths", "state_size", "expand", "seed"}
_DATA_KEYS = {"root", "manifest", "classes", "input_size"}
_OUTPUT_KEYS = {"dir"}
_SECTIONS = {"data": _DATA_KEYS, "train": _TRAIN_KEYS, "network1": _NETWORK_KEYS,
             "network2": _NETWORK_KEYS, "output": _OUTPUT_KEYS}


@dataclass
class RunConfig:
    """Merged view of data paths, training settings, and network specs."""

    data_root: str | None = None
    manifest_path: str | None = None
    classes: int | None = None          # resolved from the manifest when unset
    input_size: int = 224
    out_dir: str = "runs/out"
    train: dict = field(default_factory=dict)
    network1: dict = field(default_factory=dict)
    network2: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        classes = self.classes if self.classes is not None else 4
        n1 = {"variant": "mamba-unet", "classes": classes,
              "input_size": self.input_size}
        n2 = {"variant": "cnn-unet", "classes": classes,
              "input_size": self.input_size}
        n1.update({k: v for k, v in self.network1.items() if k != "seed"})
        n2.update({k: v for k, v in self.network2.items() if k != "seed"})
        try:
            return TrainConfig(network1=NetworkSpec(**n1), network2=NetworkSpec(**n2),
                               network1_seed=self.network1.get("seed"),
                               network2_seed=self.network2.get("seed"),
                               **self.train)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict:
        cfg = self.train_config()
        return {
            "data": {"root": self.data_root, "manifest": self.manifest_path,
                     "classes": self.classes, "input_size": self.input_size},
            "train": {k: getattr(cfg, k) for k in sorted(_TRAIN_KEYS)},
            "network1": dict(cfg.network1.to_dict(), seed=cfg.network1_seed),
            "network2": dict(cfg.network2.to_dict(), seed=cfg.network2_seed),
            "output": {"dir": self.out_dir},
        }

    def write_resolved(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_config_resolved.yaml"
        d = self.to_dict()
        for section in ("network1", "network2"):
            d[section]["depths"] = list(d[section]["depths"])
        path.write_text(yaml.safe_dump(d, sort_keys=True))
        return path


def _check_keys(section: str, payload: dict, allowed: set):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")


def load_config_file(path) -> RunConfig:
    """Parse and schema-check a YAML config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        payload = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {p}: {err}") from err
    if not isinstance(payload, dict):
        raise ConfigError(f"config root of {p} must be a mapping")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    for section, keys in _SECTIONS.items():
        if section in payload:
            _check_keys(section, payload[section], keys)

    data = payload.get("data", {})
    out = payload.get("output", {})
    rc = RunConfig(
        data_root=data.get("root"),
        manifest_path=data.get("manifest"),
        classes=data.get("classes", 4),
        input_size=data.get("input_size", 224),
        out_dir=out.get("dir", "runs/out"),
        train=dict(payload.get("train", {})),
        network1=dict(payload.get("network1", {})),
        network2=dict(payload.get("network2", {})),
    )
    return rc


def apply_overrides(rc: RunConfig, args) -> RunConfig:
    """Fold parsed CLI flags into a RunConfig (flags win)."""
    if getattr(args, "data", None):
        rc.data_root = args.data
    if getattr(args, "manifest", None):
        rc.manifest_path = args.manifest
    if getattr(args, "out", None):
        rc.out_dir = args.out
    if getattr(args, "classes", None):
        rc.classes = args.classes
    if getattr(args, "input_size", None):
        rc.input_size = args.input_size
    for flag, key in (("iterations", "iterations"), ("batch_size", "batch_size"),
                      ("labelled_batch", "labelled_batch"), ("lr", "learning_rate"),
                      ("validate_every", "validate_every"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            rc.train[key] = val
    if getattr(args, "deterministic", None) is not None:
        rc.train["deterministic"] = args.deterministic
    if getattr(args, "no_semi", False):
        rc.train["use_semi"] = False
    if getattr(args, "no_contra", False):
        rc.train["use_contra"] = False
    return rc
