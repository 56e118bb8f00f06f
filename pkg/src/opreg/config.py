"""Plain-text run configuration: one ``key = value`` per line, ``#`` comments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .models import MODEL_KINDS


def _opt_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


def _opt_float(text: str) -> float | None:
    return None if text.lower() == "none" else float(text)


def _opt_str(text: str) -> str | None:
    return None if text.lower() == "none" else text


@dataclass(frozen=True)
class Config:
    problem: str = "darcy"
    resolution: int = 29
    samples: int = 1200
    mode: str = "unaligned"
    grf_modes: int = 32
    model: str = "decoder"
    lr: float = 1e-5
    epochs: int = 2000
    batch: int | None = None
    seed: int = 0
    dropout: float | None = None
    pod_modes: int = 32
    data: str | None = None
    ckpt: str | None = None
    out: str | None = None

    def validate(self) -> "Config":
        checks = [
            (self.problem == "darcy", f"problem must be 'darcy', got {self.problem!r}"),
            (self.resolution >= 13, f"resolution must be >= 13, got {self.resolution}"),
            (self.samples >= 1, f"samples must be >= 1, got {self.samples}"),
            (self.mode in ("aligned", "unaligned"), f"mode must be aligned or unaligned, got {self.mode!r}"),
            (self.grf_modes >= 1, f"grf_modes must be >= 1, got {self.grf_modes}"),
            (self.model in MODEL_KINDS, f"model must be one of {', '.join(MODEL_KINDS)}, got {self.model!r}"),
            (self.lr >= 0, f"lr must be non-negative, got {self.lr}"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.batch is None or self.batch >= 1, f"batch must be >= 1, got {self.batch}"),
            (self.dropout is None or 0 <= self.dropout < 1, f"dropout must lie in [0, 1), got {self.dropout}"),
            (self.pod_modes >= 1, f"pod_modes must be >= 1, got {self.pod_modes}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def merged(self, overrides: dict) -> "Config":
        """Apply non-None overrides (command-line flags) on top of this config."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None}).validate()

    def as_dict(self) -> dict:
        return asdict(self)


_PARSERS = {
    "problem": str,
    "resolution": int,
    "samples": int,
    "mode": str,
    "grf_modes": int,
    "model": str,
    "lr": float,
    "epochs": int,
    "batch": _opt_int,
    "seed": int,
    "dropout": _opt_float,
    "pod_modes": int,
    "data": _opt_str,
    "ckpt": _opt_str,
    "out": _opt_str,
}
assert set(_PARSERS) == {f.name for f in fields(Config)}


def parse_config_text(text: str, source: str = "<config>") -> Config:
    values: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            values[key] = _PARSERS[key](value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: cannot parse {value!r} for key {key!r}") from None
    try:
        return Config(**values).validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path: str | Path) -> Config:
    """Read and validate a config file; an empty file gives all defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    return parse_config_text(text, str(path))
