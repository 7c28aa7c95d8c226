"""Plain-text ``key = value`` run configuration.

Lines starting with ``#`` are comments. Defaults follow the published
hyperparameter table; the ``recon_*`` keys control the desk-scale
reconstruction runs, whose optimizer settings differ from the detector
training schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .harness.recon import ReconstructionConfig


@dataclass
class RunConfig:
    # encoder
    table_size: int = 2**16
    levels: int = 4
    feature_dim: int = 8
    s_min: float = 1.0
    s_max: float = 25.0
    mlp: tuple[int, ...] = (32, 32, 128)
    # detector-scale optimization
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 24
    mask_ratio: float = 0.25
    mask_patch: int = 8
    warmup_steps: int = 500
    proximity_m: float = 50.0
    # desk-scale reconstruction
    binarized: bool = True
    seed: int = 0
    probe_hidden: int = 64
    recon_epochs: int = 8
    recon_steps_per_epoch: int = 250
    recon_batch_points: int = 4096
    recon_lr: float = 5e-3
    recon_table_lr: float = 1e-2
    recon_warmup_steps: int = 100

    def to_reconstruction(self) -> ReconstructionConfig:
        return ReconstructionConfig(
            table_size=self.table_size,
            n_levels=self.levels,
            feature_dim=self.feature_dim,
            s_min=self.s_min,
            s_max=self.s_max,
            mlp_widths=tuple(self.mlp),
            probe_hidden=self.probe_hidden,
            binarized=self.binarized,
            epochs=self.recon_epochs,
            steps_per_epoch=self.recon_steps_per_epoch,
            batch_size=self.recon_batch_points,
            lr=self.recon_lr,
            table_lr=self.recon_table_lr,
            warmup_steps=self.recon_warmup_steps,
            betas=(self.beta1, self.beta2),
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            # allow 2^16 style powers
            if "^" in raw:
                base, exp = raw.split("^")
                return int(base) ** int(exp)
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key!r}")


def parse_assignments(lines, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values.update(parse_assignments(fh, str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(parse_assignments(overrides, "--set"))
    cfg = dataclasses.replace(RunConfig(), **values)
    for name in ("table_size", "levels", "feature_dim", "batch_size", "epochs", "recon_epochs",
                 "recon_steps_per_epoch", "recon_batch_points", "probe_hidden", "mask_patch"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if not 0 <= cfg.mask_ratio <= 1:
        raise ConfigError("mask_ratio must lie in [0, 1]")
    if cfg.table_size & (cfg.table_size - 1):
        raise ConfigError("table_size must be a power of two")
    return cfg
