"""Run configuration: one flat key=value namespace for every tunable.

Precedence: built-in desk defaults < profile overrides < config file
(in file order) < CLI flag overrides. Unknown keys and unparseable values
are rejected with the offending line number. The fully resolved config is
echoed to ``config.resolved`` in the run directory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_ON_OFF = ("on", "off")


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 7
    out: str = "run"

    # dataset
    data_ids: int = 32
    data_imgs_per_id: int = 10
    data_cameras: int = 4
    data_occlusion_rate: float = 0.5
    data_height: int = 64
    data_width: int = 32
    data_query_frac: float = 0.3
    dataset_dir: str = ""          # empty -> <out>/dataset

    # masking / reconstruction
    mask_ratio: float = 0.75
    mask_patch: int = 8

    # model toggles
    attention: str = "sparsemax"   # softmax | sparsemax
    mae: str = "on"                # on | off
    verifier: str = "on"           # on | off

    # DEM1
    dem1_channels: int = 32
    dem1_epochs: int = 40
    dem1_lr: float = 2e-3
    dem1_schedule: str = "step"    # step | cosine
    dem1_milestones: str = "30,90"
    dem1_factors: str = "0.1,0.01"
    dem1_batch_ids: int = 4
    dem1_batch_imgs: int = 4
    dem1_eval_samples: int = 3   # eval-time reconstruction draws averaged

    # DEM2
    dem2_depth: int = 3
    dem2_dim: int = 64
    dem2_heads: int = 4
    dem2_m: int = 2
    dem2_patch: int = 8
    dem2_epochs: int = 90
    dem2_lr: float = 3e-3
    dem2_schedule: str = "cosine"
    dem2_max_shift: int = 3
    dem2_batch_ids: int = 4
    dem2_batch_imgs: int = 4
    dem2_eval_samples: int = 3   # eval-time candidate draws averaged per image

    # losses
    lambda_id: float = 1.0
    alpha_margin: float = 0.3
    lambda_div: float = 0.01
    div_dem1: str = "on"
    div_dem2: str = "on"
    div_stack: str = "on"

    # classifier heads emit scaled-cosine logits; this is the scale
    head_scale: float = 4.0

    # optimizer
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    # stacking
    stack_epochs: int = 150
    stack_lr: float = 1e-2

    # evaluation
    cosine: str = "off"            # L2-normalize descriptors before distances
    cmc_k: int = 10

    def resolved_dataset_dir(self) -> Path:
        return Path(self.dataset_dir) if self.dataset_dir else Path(self.out) / "dataset"


# documented paper-scale settings; not a tested training path because it
# presumes pretrained backbones this repository does not ship
PAPER_PROFILE = {
    "data_height": 256,
    "data_width": 128,
    "dem1_epochs": 150,
    "dem1_lr": 2.5e-4,
    "dem1_schedule": "step",
    "dem1_milestones": "30,90",
    "dem1_factors": "0.1,0.01",
    "dem1_batch_ids": 16,
    "dem1_batch_imgs": 4,
    "dem2_depth": 9,
    "dem2_dim": 199,
    "dem2_heads": 1,     # 199 is indivisible by any multi-head count
    "dem2_epochs": 350,
    "dem2_lr": 0.008,
    "dem2_schedule": "cosine",
    "dem2_batch_ids": 16,
    "dem2_batch_imgs": 4,
}

_ALLOWED = {
    "profile": ("desk", "paper"),
    "attention": ("softmax", "sparsemax"),
    "mae": _ON_OFF,
    "verifier": _ON_OFF,
    "div_dem1": _ON_OFF,
    "div_dem2": _ON_OFF,
    "div_stack": _ON_OFF,
    "cosine": _ON_OFF,
    "dem1_schedule": ("step", "cosine"),
    "dem2_schedule": ("step", "cosine"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, where: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
        else:
            value = raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key}={raw!r} as {kind}")
    allowed = _ALLOWED.get(key)
    if allowed and value not in allowed:
        raise ConfigError(
            f"{where}: {key}={value!r} not allowed; choose one of "
            f"{', '.join(allowed)}"
        )
    return value


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults, optional key=value file, and flag overrides."""
    file_items: list[tuple[str, str, str]] = []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            file_items.append((key, raw.strip(), f"{path}:{lineno}"))

    overrides = dict(overrides or {})
    for key in overrides:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"flag override: unknown key {key!r}")

    cfg = RunConfig()
    profile = overrides.get("profile")
    if profile is None:
        for key, raw, where in file_items:
            if key == "profile":
                profile = _parse_value("profile", raw, where)
    if profile == "paper":
        cfg.profile = "paper"
        for k, v in PAPER_PROFILE.items():
            setattr(cfg, k, v)
    for key, raw, where in file_items:
        if key == "profile":
            continue
        setattr(cfg, key, _parse_value(key, raw, where))
    for key, value in overrides.items():
        if key == "profile":
            continue
        setattr(cfg, key, _parse_value(key, str(value), f"flag --{key}"))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if not 0.0 <= cfg.data_occlusion_rate <= 1.0:
        raise ConfigError("data_occlusion_rate must lie in [0, 1]")
    if not 0.0 < cfg.data_query_frac < 1.0:
        raise ConfigError("data_query_frac must lie in (0, 1)")
    if cfg.lambda_id <= 0:
        raise ConfigError("lambda_id must be positive")
    if cfg.alpha_margin < 0 or cfg.lambda_div < 0:
        raise ConfigError("alpha_margin and lambda_div must be >= 0")
    if cfg.dem2_dim % cfg.dem2_heads:
        raise ConfigError(
            f"dem2_heads={cfg.dem2_heads} must divide dem2_dim={cfg.dem2_dim}"
        )
    for key in ("dem1_lr", "dem2_lr", "stack_lr"):
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key} must be positive")
    try:
        milestones = [int(v) for v in cfg.dem1_milestones.split(",") if v]
        factors = [float(v) for v in cfg.dem1_factors.split(",") if v]
    except ValueError as e:
        raise ConfigError(f"bad milestone/factor list: {e}") from e
    if len(milestones) != len(factors):
        raise ConfigError("dem1_milestones and dem1_factors must pair up")


def resolved_text(cfg: RunConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def milestone_lists(cfg: RunConfig) -> tuple[list[int], list[float]]:
    return ([int(v) for v in cfg.dem1_milestones.split(",") if v],
            [float(v) for v in cfg.dem1_factors.split(",") if v])
