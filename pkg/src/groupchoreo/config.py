"""Run configuration: one flat key=value file drives generation, training, sampling and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .dbn import DbnConfig, DbnLossWeights, OptimConfig
from .diffusion import TcdiffConfig, TcdiffLossWeights
from .synthetic import FORMATIONS, MANEUVERS, SyntheticSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data
    fps: float = 30.0
    dancers: int = 2
    frames: int = 30
    n_train: int = 200
    n_test: int = 20
    formation: str = "circle"
    maneuver: str = "rotate"
    # DBN
    dbn_hidden: int = 32
    dbn_layers: int = 2
    dbn_heads: int = 4
    dbn_lstm_layers: int = 3
    dbn_music_layers: int = 3
    dbn_decoder_layers: int = 4
    dbn_max_dancers: int = 5
    lambda_velocity: float = 2.0
    lambda_distcon: float = 2.0
    dbn_lr: float = 1e-3
    dbn_epochs: int = 200
    dbn_batch_size: int = 50
    smooth: bool = True
    # TCDiff
    tc_width: int = 64
    tc_layers: int = 2
    tc_heads: int = 4
    tc_ff_mult: int = 2
    tc_csl_layers: int = 3
    tc_d_csl: int = 32
    tc_d_ctx: int = 64
    use_fa: bool = True
    use_fp: bool = True
    schedule: str = "cosine"
    T: int = 50
    lambda_simple: float = 1.0
    lambda_rfk: float = 1.0
    lambda_vel: float = 1.0
    lambda_contact: float = 1.0
    tc_lr: float = 1e-3
    tc_epochs: int = 300
    tc_batch_size: int = 50
    # evaluation
    tif_radius: float = 0.2
    mmc_sigma: float = 3.0

    def validate(self) -> "RunConfig":
        if self.formation not in FORMATIONS or self.maneuver not in MANEUVERS:
            raise ConfigError(f"formation must be in {FORMATIONS}, maneuver in {MANEUVERS}")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError("schedule must be 'cosine' or 'linear'")
        positive = [
            "fps", "dancers", "frames", "n_train", "dbn_hidden", "dbn_layers", "dbn_heads", "dbn_epochs",
            "dbn_batch_size", "tc_width", "tc_layers", "tc_heads", "tc_epochs", "tc_batch_size", "T",
            "dbn_lr", "tc_lr", "tif_radius", "mmc_sigma",
        ]
        bad = [k for k in positive if not getattr(self, k) > 0]
        if bad:
            raise ConfigError(f"must be positive: {', '.join(bad)}")
        if self.n_test < 0 or self.seed < 0:
            raise ConfigError("n_test and seed must be non-negative")
        if self.dbn_hidden % self.dbn_heads or self.tc_width % self.tc_heads:
            raise ConfigError("head count must divide model width")
        if self.dancers > self.dbn_max_dancers:
            raise ConfigError("dancers exceeds dbn_max_dancers")
        return self

    # derived configs -------------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            dancers=self.dancers, frames=self.frames, fps=self.fps, formation=self.formation, maneuver=self.maneuver
        )

    def dbn_config(self) -> DbnConfig:
        return DbnConfig(
            hidden=self.dbn_hidden,
            layers=self.dbn_layers,
            heads=self.dbn_heads,
            lstm_layers=self.dbn_lstm_layers,
            music_layers=self.dbn_music_layers,
            decoder_layers=self.dbn_decoder_layers,
            max_dancers=self.dbn_max_dancers,
            max_len=self.frames,
        )

    def dbn_weights(self) -> DbnLossWeights:
        return DbnLossWeights(velocity=self.lambda_velocity, distcon=self.lambda_distcon)

    def dbn_optim(self) -> OptimConfig:
        return OptimConfig(lr=self.dbn_lr, batch_size=self.dbn_batch_size, epochs=self.dbn_epochs)

    def tcdiff_config(self) -> TcdiffConfig:
        return TcdiffConfig(
            dancers=self.dancers,
            width=self.tc_width,
            layers=self.tc_layers,
            heads=self.tc_heads,
            ff_mult=self.tc_ff_mult,
            seq_len=self.frames,
            csl_layers=self.tc_csl_layers,
            d_csl=self.tc_d_csl,
            d_ctx=self.tc_d_ctx,
            use_fa=self.use_fa,
            use_fp=self.use_fp,
        )

    def tcdiff_weights(self) -> TcdiffLossWeights:
        return TcdiffLossWeights(self.lambda_simple, self.lambda_rfk, self.lambda_vel, self.lambda_contact)

    def tcdiff_optim(self) -> OptimConfig:
        return OptimConfig(lr=self.tc_lr, batch_size=self.tc_batch_size, epochs=self.tc_epochs)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


PRESETS = {
    "desk": RunConfig(),
    # full-scale module sizes; sequence length 120 with up to 5 dancers
    "full": RunConfig(
        frames=120,
        dbn_hidden=64,
        dbn_layers=6,
        dbn_heads=8,
        tc_width=512,
        tc_layers=8,
        tc_heads=8,
        tc_d_csl=128,
        tc_d_ctx=512,
    ),
}


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse_value(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` lines (``#`` comments, blank lines allowed) on top of ``base``."""
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
    return replace(base or RunConfig(), **updates)


def load_config(path=None, preset: str = "desk", seed: int | None = None) -> RunConfig:
    """Preset, then the config file, then an explicit seed; validated."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()
