"""Flat ``key = value`` run configuration shared by every CLI command.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Command-line ``--key value`` pairs override the file. Unknown keys
are rejected, and every key has a default (see ``RunConfig``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .errors import CCMTADError


class ConfigError(CCMTADError, ValueError):
    pass


@dataclass
class RunConfig:
    # data
    train_csv: str = "train.csv"
    test_csv: str = "test.csv"
    label_column: str = "label"
    output_dir: str = "run"
    # preprocessing
    downsample: int = 1
    moving_average: int = 1
    clip: str = ""  # "lo,hi" applied to normalized test data, e.g. "-4,4"
    zero_channels: str = ""  # comma-separated channel names
    drop_channels: str = ""
    val_fraction: float = 0.2
    # clustering
    strategy: str = "profile-spectral"
    M: str = "2"  # a count, or a range "lo..hi" for silhouette selection
    # model
    L: int = 24
    d: int = 128
    d_f: int = 1
    n_blocks: int = 2
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 512
    seed: int = 0
    temporal_mixer: str = "causal"
    # detector
    alpha: float = 0.01
    h: float = 5.0
    delta: int = 5
    epsilon: float = 1e-8
    # sweep
    alpha_max: str = "auto"  # "auto" (GMM heuristic on validation losses) or a number
    n_alpha: int = 20
    alpha_floor: float = 1e-6
    gmm_components: int = 2
    # synthetic fixture
    synth_blocks: str = "3,3"
    synth_train_length: int = 2000
    synth_test_length: int = 1000
    synth_anomalies: str = ""  # "start:end:kind:magnitude;..." in test-relative steps
    synth_n_constant: int = 0
    synth_noise: float = 0.3

    # -- derived views -------------------------------------------------

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def clip_range(self) -> Optional[tuple]:
        if not self.clip.strip():
            return None
        parts = _split_list(self.clip)
        if len(parts) != 2:
            raise ConfigError(f"clip must be 'lo,hi', got {self.clip!r}")
        lo, hi = (float(v) for v in parts)
        if lo > hi:
            raise ConfigError(f"clip lower bound {lo} exceeds upper bound {hi}")
        return lo, hi

    @property
    def zero_list(self) -> list:
        return _split_list(self.zero_channels)

    @property
    def drop_list(self) -> list:
        return _split_list(self.drop_channels)

    @property
    def m_values(self) -> list:
        """Candidate cluster counts; a single element unless ``M`` is a range."""
        text = self.M.strip()
        try:
            if ".." in text:
                lo, hi = (int(v) for v in text.split("..", 1))
                if lo > hi:
                    raise ConfigError(f"empty M range {text!r}")
                return list(range(lo, hi + 1))
            return [int(text)]
        except ValueError as exc:
            raise ConfigError(f"M must be an integer or 'lo..hi', got {self.M!r}") from exc

    def model_kwargs(self) -> dict:
        names = ("L", "d", "d_f", "n_blocks", "learning_rate", "epochs", "batch_size", "seed", "temporal_mixer")
        return {k: getattr(self, k) for k in names}

    def detector_kwargs(self) -> dict:
        return {"alpha": self.alpha, "h": self.h, "delta": self.delta, "epsilon": self.epsilon}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _split_list(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} expects {kind}, got {raw!r}") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a dict of raw strings."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def parse_overrides(args: Sequence[str]) -> dict:
    """Turn ``["--key", "value", ...]`` into a dict; ``--key=value`` also works."""
    values = {}
    i = 0
    args = list(args)
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for --{key}")
            value = args[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return values


def build_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the optional config file, then command-line overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
        raw.update(parse_config_text(text, str(path)))
    raw.update(parse_overrides(overrides))
    return RunConfig(**{k: _convert(k, v) for k, v in raw.items()})


def write_config(cfg: RunConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
