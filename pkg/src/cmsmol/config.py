"""Run configuration: ``key = value`` lines, ``#`` comments, and
``include = other.cfg`` directives resolved relative to the including file.
Later assignments override earlier ones."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_lines(path: Path, seen: tuple[Path, ...]) -> dict[str, str]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "include":
            out.update(_parse_lines(path.parent / value, seen + (path,)))
        else:
            out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    return _parse_lines(Path(path), ())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    out: str = "runs"
    # paths ("" means bundled corpus / derived from ``out``)
    corpus: str = ""
    vocab: str = ""
    checkpoints: str = ""
    external_scores: str = ""
    # tokenizer
    vocab_size: int = 1024
    # model
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    context_length: int = 160
    dropout: float = 0.0
    precision: int = 64
    # training
    epochs: tuple[int, ...] = (10, 50, 20)
    single_mask_epochs: int = 10
    phase3_mix: tuple[float, ...] = (0.1, 0.1, 0.4, 0.4)
    lr: float = 5e-5
    batch_size: int = 24
    mask_fraction: float = 0.15
    grad_clip: float = 1.0
    cosine_decay: bool = False
    train_limit: int = 0  # use only the first N corpus strings (0 = all)
    # generation
    n_samples: int = 10000
    top_k: tuple[int, ...] = (10, 15, 20)
    top_p: tuple[float, ...] = (0.85, 0.9, 0.95)
    temperature: float = 1.0
    max_masked: int = 12
    max_generated: int = 32
    # scoring
    top_n: int = 10
    weights: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    docking_bounds: tuple[float, ...] = (-14.0, -6.0)
    solubility_bounds: tuple[float, ...] = (-5.0, 5.0)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunConfig":
        cfg = cls()
        names = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(getattr(cfg, key), raw, key))
        cfg.validate()
        return cfg

    def override(self, **kwargs) -> "RunConfig":
        for k, v in kwargs.items():
            if v is not None:
                setattr(self, k, v)
        self.validate()
        return self

    def validate(self) -> None:
        if len(self.epochs) != 3 or min(self.epochs) < 1:
            raise ConfigError("epochs needs three positive counts")
        if len(self.phase3_mix) != 4 or abs(sum(self.phase3_mix) - 1) > 1e-9:
            raise ConfigError("phase3_mix needs four probabilities summing to 1")
        if len(self.weights) != 5 or abs(sum(self.weights) - 1) > 1e-9:
            raise ConfigError("weights needs five values summing to 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def snapshot(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    # derived paths
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def vocab_path(self) -> Path:
        return Path(self.vocab) if self.vocab else self.out_dir / "vocab.txt"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.checkpoints) if self.checkpoints else self.out_dir / "checkpoints"


def _coerce(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _ints(raw) if all(isinstance(x, int) for x in default) else _floats(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path=None) -> RunConfig:
    return RunConfig.from_mapping(read_config_file(path)) if path else RunConfig()
