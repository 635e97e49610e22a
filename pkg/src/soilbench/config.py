"""INI run configuration shared by all commands.

Every section and key is declared in :data:`SCHEMA`; anything else is an
error, so a typo never silently falls back to a default. Relative paths are
resolved against the directory of the config file.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .dataset import DEFAULT_RATIOS, Category
from .errors import ConfigError
from .evaluation import RegimeSettings, parse_cameras
from .nn.layers import HEAD_NAMES, EncoderConfig, ModelConfig
from .nn.train import TrainConfig
from .synth import BlobParams, SynthConfig


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _str(s: str) -> str:
    return s.strip()


def _heads(s: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _grid(s: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_float_list(row) for row in s.split(";") if row.strip())


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "data": {"dir": _str, "manifest": _str},
    "synth": {"seed": int, "width": int, "height": int, "n_frames": int, "clean": int,
              "transparent": int, "opaque": int, "both": int, "opaque_count": _int_list,
              "opaque_radius": _float_list, "transparent_count": _int_list,
              "transparent_radius": _float_list, "blur_radius": int, "desaturation": float,
              "cameras": _str},
    "split": {"seed": int, "ratios": _float_list, "min_area_frac": float},
    "geometry": {"tile_size": int, "tau": float, "samples_per_side": int},
    "model": {"heads": _heads, "stem_channels": int, "stem_stride": int, "widths": _int_list,
              "strides": _int_list, "soiling_hidden": int, "image_stride": int,
              "seg_hidden": int},
    "train": {"lr": float, "steps": int, "epochs": int, "batch_size": int, "seed": int,
              "weights": _float_list, "grid": _grid, "cameras": _str},
    "gan": {"seed": int, "epochs": int, "crop_size": int, "crops": int, "lr": float,
            "beta1": float, "cycle_weight": float, "batch_size": int, "fraction": float,
            "label": _str, "output_manifest": _str},
    "eval": {"train_cameras": _str, "test_cameras": _str, "threshold": float,
             "positive": _str, "seed": int},
}


@dataclass
class RunConfig:
    """Parsed sections; ``values[section][key]`` holds converted values."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)
    text: str = ""

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def set(self, section: str, key: str, raw: str) -> None:
        self.values.setdefault(section, {})[key] = _convert(section, key, raw)

    def path(self, section: str, key: str, default: str | None = None) -> Path | None:
        raw = self.get(section, key, default)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def digest(self) -> str:
        """sha256 over the canonical (sorted, converted) configuration."""
        parts = []
        for sec in sorted(self.values):
            for key in sorted(self.values[sec]):
                parts.append(f"{sec}.{key}={self.values[sec][key]!r}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()

    # -- typed views ----------------------------------------------------------

    def data_dir(self) -> Path:
        d = self.path("data", "dir")
        if d is None:
            raise ConfigError("[data] dir is required")
        return d

    def manifest_path(self) -> Path:
        return self.data_dir() / self.get("data", "manifest", "manifest.jsonl")

    def synth(self) -> SynthConfig:
        s = self.values.get("synth", {})
        quotas = {c: s.get(c.name.lower(), 0) for c in Category}
        n = s.get("n_frames", sum(quotas.values()))
        kw = dict(seed=s.get("seed", 0), width=s.get("width", 128), height=s.get("height", 80),
                  n_frames=n, category_quotas=quotas)
        if "opaque_count" in s or "opaque_radius" in s:
            d = BlobParams()
            kw["opaque"] = BlobParams(s.get("opaque_count", d.count), s.get("opaque_radius", d.radius))
        if "transparent_count" in s or "transparent_radius" in s:
            d = SynthConfig().transparent
            kw["transparent"] = BlobParams(s.get("transparent_count", d.count),
                                           s.get("transparent_radius", d.radius))
        for key in ("blur_radius", "desaturation"):
            if key in s:
                kw[key] = s[key]
        if "cameras" in s:
            kw["cameras"] = parse_cameras(s["cameras"])
        for name in ("opaque", "transparent"):
            if name in kw and (len(kw[name].count) != 2 or len(kw[name].radius) != 2):
                raise ConfigError(f"[synth] {name} count and radius take two values (min,max)")
        try:
            return SynthConfig(**kw).validate()
        except ValueError as exc:
            raise ConfigError(f"[synth] {exc}") from exc

    def split_ratios(self) -> tuple[float, ...]:
        return self.get("split", "ratios", DEFAULT_RATIOS)

    def regime(self) -> RegimeSettings:
        g = self.values.get("geometry", {})
        return RegimeSettings(tile_size=g.get("tile_size", 8), tau=g.get("tau", 0.25),
                              samples_per_side=g.get("samples_per_side", 16),
                              min_area_frac=self.get("split", "min_area_frac", 0.0),
                              threshold=self.get("eval", "threshold", 0.5),
                              positive=self.get("eval", "positive", "any"))

    def model(self, image_hw: tuple[int, int] | None = None) -> ModelConfig:
        """Model config; ``image_hw`` (h, w) defaults to the [synth] frame size."""
        m = self.values.get("model", {})
        h, w = image_hw or (self.get("synth", "height", 80), self.get("synth", "width", 128))
        enc_kw = {k: m[k] for k in ("stem_channels", "stem_stride", "widths", "strides") if k in m}
        enc = EncoderConfig(input_height=h, input_width=w, **enc_kw)
        kw = {k: m[k] for k in ("soiling_hidden", "image_stride", "seg_hidden") if k in m}
        cfg = ModelConfig(encoder=enc, heads=m.get("heads", ("tile", "image")),
                          seed=self.get("train", "seed", 0), **kw)
        tile = self.regime().tile_size
        if "tile" in cfg.heads and enc.downsample != tile:
            raise ConfigError(f"encoder downsamples by {enc.downsample} but tile_size is {tile}; "
                              f"the tile head grid must match the tile grid")
        return cfg

    def train(self, heads: tuple[str, ...]) -> TrainConfig:
        t = self.values.get("train", {})
        if "steps" in t and "epochs" in t:
            raise ConfigError("[train] takes either steps or epochs, not both")
        weights = {}
        if "weights" in t:
            if len(t["weights"]) != len(heads):
                raise ConfigError(f"[train] weights has {len(t['weights'])} entries for "
                                  f"{len(heads)} heads {heads}")
            weights = dict(zip(heads, t["weights"]))
        return TrainConfig(lr=t.get("lr", 0.0005), steps=t.get("steps", 200),
                           batch_size=t.get("batch_size", 16), seed=t.get("seed", 0),
                           weights=weights)


def _convert(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    conv = SCHEMA[section].get(key)
    if conv is None:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}".replace("\n", " ")) from exc
    cfg = RunConfig(base_dir=Path(base_dir), text=text)
    for section in cp.sections():
        for key, raw in cp.items(section):
            cfg.set(section, key, raw)
    heads = cfg.get("model", "heads")
    if heads is not None:
        bad = [h for h in heads if h not in HEAD_NAMES]
        if bad:
            raise ConfigError(f"[model] heads: unknown head(s) {bad}; choose from {HEAD_NAMES}")
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {p} does not exist") from None
    return parse_config(text, p.resolve().parent)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> None:
    """``section.key=value`` strings, as given with ``--set``."""
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.set(section.strip(), key.strip(), value)
