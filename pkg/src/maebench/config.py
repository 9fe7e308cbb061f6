"""Experiment configuration files.

One INI file with the sections ``[run]``, ``[model]``, ``[decoder]``,
``[pretrain]``, ``[finetune]``, ``[augment]`` and ``[data]``. A ``profile``
(``desk`` or ``full``) in ``[run]`` selects the defaults; ``preset`` in
``[model]``/``[decoder]`` selects an architecture which individual keys may
then override. Unknown sections and keys are rejected, and every problem
found is reported at once.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import os
import platform
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernels
from .adapters import FinetuneConfig, desk_finetune_config
from .data import AugmentConfig
from .errors import ConfigError
from .mae import PretrainConfig, desk_pretrain_config
from .vit import DECODER_FOR, PRESETS, ViTConfig

THREADS_ENV = "MAEBENCH_THREADS"


@dataclass
class RunSection:
    profile: str = "desk"
    seed: int = 0
    threads: int = 1
    out: str = ""


@dataclass
class AugmentSection:
    enabled: bool = True
    resize_side: int = 64
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    mean: Optional[float] = None  # None: take the manifest's value
    std: Optional[float] = None

    def resolve(self, out_side: int, mean: float, std: float) -> AugmentConfig:
        return AugmentConfig(
            resize_side=self.resize_side, out_side=out_side, crop_scale=tuple(self.crop_scale),
            crop_ratio=tuple(self.crop_ratio), hflip_prob=self.hflip_prob,
            mean=mean if self.mean is None else self.mean,
            std=std if self.std is None else self.std,
        )


@dataclass
class DataSection:
    manifest: str = ""
    train: str = ""
    val: str = ""
    test: str = ""


_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ViTConfig))
# seeds always come from [run] so a single --seed controls a whole run
_SEEDLESS = {"pretrain", "finetune"}


def _profile_defaults(profile: str) -> dict:
    if profile == "full":
        return {"model": "paper-encoder", "pretrain": PretrainConfig(), "finetune": FinetuneConfig(),
                "augment": AugmentSection(resize_side=512)}
    return {"model": "desk-tiny", "pretrain": desk_pretrain_config(), "finetune": desk_finetune_config(),
            "augment": AugmentSection()}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    model_preset: str = "desk-tiny"
    decoder_preset: str = "desk-tiny-decoder"
    encoder: ViTConfig = field(default_factory=lambda: PRESETS["desk-tiny"])
    decoder: ViTConfig = field(default_factory=lambda: PRESETS["desk-tiny-decoder"])
    pretrain: PretrainConfig = field(default_factory=desk_pretrain_config)
    finetune: FinetuneConfig = field(default_factory=desk_finetune_config)
    augment: AugmentSection = field(default_factory=AugmentSection)
    data: DataSection = field(default_factory=DataSection)

    def augment_config(self, mean: float, std: float) -> AugmentConfig:
        return self.augment.resolve(self.encoder.image_side, mean, std)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.run.seed = seed
        self.pretrain.seed = seed
        self.finetune.seed = seed
        return self

    def to_ini(self) -> str:
        """Fully resolved configuration, defaults included."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.run).items()}
        cp["model"] = {"preset": self.model_preset, **{k: _fmt(v) for k, v in self.encoder.to_dict().items()}}
        cp["decoder"] = {"preset": self.decoder_preset,
                         **{k: _fmt(v) for k, v in self.decoder.to_dict().items()}}
        for name in ("pretrain", "finetune", "augment", "data"):
            values = dataclasses.asdict(getattr(self, name))
            if name in _SEEDLESS:
                values.pop("seed")
            cp[name] = {k: _fmt(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def sha256(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_BOOLS = {"1": True, "true": True, "yes": True, "on": True,
          "0": False, "false": False, "no": False, "off": False}


def _convert(raw: str, hint):
    text = raw.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:  # Optional[X]
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        try:
            return _BOOLS[text.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {raw!r}") from None
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    return text


def _apply(obj, section: str, items: dict, problems: list, skip=()):
    """Set dataclass fields from raw strings; returns a dict of converted values."""
    hints = typing.get_type_hints(type(obj))
    values = {}
    for key, raw in items.items():
        if key in skip or key not in hints:
            problems.append(f"{section}.{key}: unknown key")
            continue
        try:
            values[key] = _convert(raw, hints[key])
        except ValueError as exc:
            problems.append(f"{section}.{key}: {exc}")
    return dataclasses.replace(obj, **values) if values else obj


def _vit(section: str, preset_name: str, items: dict, problems: list) -> Optional[ViTConfig]:
    if preset_name not in PRESETS:
        problems.append(f"{section}.preset: unknown preset {preset_name!r} (known: {', '.join(sorted(PRESETS))})")
        return None
    base = PRESETS[preset_name].to_dict()
    hints = typing.get_type_hints(ViTConfig)
    for key, raw in items.items():
        if key not in _MODEL_KEYS:
            problems.append(f"{section}.{key}: unknown key")
            continue
        try:
            base[key] = _convert(raw, hints[key])
        except ValueError as exc:
            problems.append(f"{section}.{key}: {exc}")
    try:
        return ViTConfig(**base)
    except ConfigError as exc:
        problems.extend(f"{section}: {d}" for d in exc.details)
        return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    problems = []
    known = {"run", "model", "decoder", "pretrain", "finetune", "augment", "data"}
    for name in cp.sections():
        if name not in known:
            problems.append(f"[{name}]: unknown section")
    sec = {name: dict(cp[name]) if cp.has_section(name) else {} for name in known}

    run = _apply(RunSection(), "run", sec["run"], problems)
    if run.profile not in ("desk", "full"):
        problems.append(f"run.profile: must be 'desk' or 'full', got {run.profile!r}")
        run.profile = "desk"
    defaults = _profile_defaults(run.profile)

    model_items = dict(sec["model"])
    model_preset = model_items.pop("preset", defaults["model"])
    dec_items = dict(sec["decoder"])
    decoder_preset = dec_items.pop("preset", DECODER_FOR.get(model_preset, "desk-tiny-decoder"))
    encoder = _vit("model", model_preset, model_items, problems)
    decoder = _vit("decoder", decoder_preset, dec_items, problems)

    pretrain = _apply(defaults["pretrain"], "pretrain", sec["pretrain"], problems, skip={"seed"})
    finetune = _apply(defaults["finetune"], "finetune", sec["finetune"], problems, skip={"seed"})
    augment = _apply(defaults["augment"], "augment", sec["augment"], problems)
    data = _apply(DataSection(), "data", sec["data"], problems)

    problems += [f"pretrain: {p}" for p in pretrain.problems()]
    problems += [f"finetune: {p}" for p in finetune.problems()]
    if run.threads < 1:
        problems.append("run.threads: must be >= 1")
    if encoder is not None and decoder is not None and (
            (decoder.image_side, decoder.patch_side, decoder.in_channels)
            != (encoder.image_side, encoder.patch_side, encoder.in_channels)):
        problems.append("decoder: image_side, patch_side and in_channels must match [model]")
    if encoder is not None:
        aug = augment.resolve(encoder.image_side, 0.5, 0.25)
        problems += [f"augment: {p}" for p in aug.problems()]
        if augment.mean is not None and augment.std is not None and augment.std <= 0:
            problems.append("augment.std: must be > 0")
    if problems:
        raise ConfigError(f"invalid configuration in {source}", details=problems)
    cfg = ExperimentConfig(run, model_preset, decoder_preset, encoder, decoder, pretrain, finetune,
                           augment, data)
    return cfg.with_seed(run.seed)


def load_config(path=None) -> ExperimentConfig:
    """Parse ``path`` (or return defaults when ``path`` is None)."""
    if path is None:
        return parse_config("", "<defaults>")
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", details=["--config"]) from None
    return parse_config(text, str(path))


def resolve_threads(flag: Optional[int], config_value: int = 1) -> int:
    """``--threads`` wins, then ``$MAEBENCH_THREADS``, then the config file."""
    if flag is not None:
        value, origin = flag, "--threads"
    elif os.environ.get(THREADS_ENV, "").strip():
        raw = os.environ[THREADS_ENV].strip()
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}",
                              details=[THREADS_ENV]) from None
        origin = THREADS_ENV
    else:
        value, origin = config_value, "run.threads"
    if value < 1:
        raise ConfigError(f"{origin} must be >= 1, got {value}", details=[origin])
    return value


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir, command: str, config: ExperimentConfig, inputs: dict,
                     threads: int) -> Path:
    """Write ``config.ini`` (resolved) and ``run.json`` (version stamp, input hashes)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config.to_ini())
    record = {
        "command": command,
        "version": __version__,
        "seed": config.run.seed,
        "threads": threads,
        "config_sha256": config.sha256(),
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in sorted(inputs.items())},
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path
