"""Run configuration: presets, config-file parsing, and hashing.

The config file format is line-based ``key = value`` with ``#`` comments.
Unknown keys are rejected so a typo cannot silently change a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class RunConfig:
    # scale preset this config was derived from
    scale: str = "toy"

    # video geometry (channel, time, height, width volumes everywhere)
    frames: int = 8
    height: int = 16
    width: int = 16

    # synthetic corpus render geometry (pre-augmentation)
    canvas_size: int = 19
    canvas_frames: int = 10
    corpus_speed: float = 1.0

    # caption pipeline
    word_dim: int = 16
    mixture_centers: int = 5
    embed_dim: int = 32
    cond_dim: int = 16
    noise_dim: int = 16
    caption_channels: int = 16
    scale_floor: float = 1e-4
    em_tol: float = 1e-6
    em_max_iter: int = 200

    # network geometry, deepest block first
    widths: tuple[int, ...] = (32, 16, 8, 8)
    flow_cap: float = 8.0

    # training
    total_iters: int = 2000
    batch_size: int = 4
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_halving_period: int = 10000
    lambda_mask: float = 0.1
    mask_l1: bool = True
    ca_kl_weight: float = 0.0
    log_clamp_eps: float = 1e-7
    non_saturating: bool = False
    checkpoint_every: int = 500

    # evaluation / ablation protocol
    n_captions: int = 50
    n_repeats: int = 5
    ablation_budget: int = 1200

    # misc
    seed: int = 0
    deterministic: bool = False

    def validate(self) -> "RunConfig":
        if self.scale not in ("toy", "paper"):
            raise ConfigError(f"unknown scale preset {self.scale!r}")
        for name in ("frames", "height", "width"):
            v = getattr(self, name)
            if not _is_pow2(v):
                raise ConfigError(f"{name} must be a power of two, got {v}")
        if self.height < 4 or self.width < 4:
            raise ConfigError("height/width must be at least 4")
        if self.height != self.width:
            raise ConfigError("video must be square (crop/augment assume it)")
        if self.canvas_size < self.width or self.canvas_size < self.height:
            raise ConfigError("canvas_size must cover the crop size")
        if self.canvas_frames < self.frames:
            raise ConfigError("canvas_frames must cover the clip length")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be four positive channel counts")
        if self.total_iters <= 0:
            raise ConfigError("total_iters must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.lr_halving_period <= 0:
            raise ConfigError("lr_halving_period must be positive")
        if not (0 < self.log_clamp_eps < 0.5):
            raise ConfigError("log_clamp_eps must lie in (0, 0.5)")
        return self

    def arch_hash(self) -> str:
        """Hash of the fields a checkpoint depends on.

        The seed is excluded: a checkpoint carries its parameters and rng
        state, so loading it under a different seed is well-defined.
        """
        keys = (
            "frames height width word_dim mixture_centers embed_dim cond_dim "
            "noise_dim caption_channels widths flow_cap batch_size lr0 beta1 "
            "beta2 lr_halving_period lambda_mask mask_l1 ca_kl_weight "
            "log_clamp_eps non_saturating total_iters"
        ).split()
        blob = ";".join(f"{k}={getattr(self, k)}" for k in keys)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS = {
    "toy": RunConfig(),
    "paper": RunConfig(
        scale="paper",
        frames=32,
        height=64,
        width=64,
        canvas_size=76,
        canvas_frames=40,
        word_dim=300,
        mixture_centers=30,
        embed_dim=256,
        cond_dim=128,
        noise_dim=100,
        caption_channels=64,
        widths=(512, 256, 128, 64),
        total_iters=60000,
        batch_size=32,
        checkpoint_every=1000,
    ),
}


def preset(name: str) -> RunConfig:
    try:
        return dataclasses.replace(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown scale preset {name!r}") from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: cannot parse {raw!r} as bool")
    if f.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r} as int") from None
    if f.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r} as float") from None
    if name == "widths":
        try:
            return tuple(int(p) for p in raw.split(","))
        except ValueError:
            raise ConfigError(f"widths: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    overrides: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key == "scale":
            # a scale key rebases onto that preset before other overrides
            cfg = preset(raw)
            continue
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        overrides[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **overrides).validate()


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name == "widths":
            value = ",".join(str(w) for w in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_effective_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.txt"
    path.write_text(config_to_text(cfg), encoding="utf-8")
    return path
