"""Run configuration: ``key=value`` text with typed fields and defaults."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .lle import LleOptions


DEFAULT_R = 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    method: str = "lle"
    r: int = 0  # 0 defers to the manifest, then to DEFAULT_R
    d_grid: tuple = ()
    n_points: int = 12
    xi: float = 0.0
    alpha_rule: str = "norm"
    eig_order: str = "ascending"
    s_rule: str = "ratio"
    tol: float = 1e-8
    maxiter: int = 0
    seed: int = 0
    threads: int = 1
    alpha: float = 0.05
    welch: bool = False
    # synthetic cohort generation
    synth_dims: tuple = (7, 7, 7, 20)
    n_patients: int = 15
    n_controls: int = 15
    n_holdout: int = 10
    effect: float = 2.0
    sigma: float = 1.0
    block_size: int = 3
    planted_volumes: tuple = (2, 5, 8, 11, 14)

    def lle_options(self) -> LleOptions:
        return LleOptions(xi=self.xi, alpha_rule=self.alpha_rule, eig_order=self.eig_order,
                          s_rule=self.s_rule, tol=self.tol,
                          maxiter=self.maxiter or None, seed=self.seed)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    def validate(self) -> "RunConfig":
        if self.method not in ("lle", "pca", "original"):
            raise ConfigError(f"method must be lle, pca or original, got {self.method!r}")
        if self.r < 0:
            raise ConfigError(f"r must be >= 1 (or 0 for the default), got {self.r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.alpha_rule not in ("norm", "squared"):
            raise ConfigError(f"alpha_rule must be norm or squared, got {self.alpha_rule!r}")
        if self.eig_order not in ("ascending", "descending"):
            raise ConfigError(f"eig_order must be ascending or descending, got {self.eig_order!r}")
        if self.s_rule not in ("ratio", "widest"):
            raise ConfigError(f"s_rule must be ratio or widest, got {self.s_rule!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(name: str, value: str, lineno=None):
    kind = _FIELD_TYPES[name]
    where = f"line {lineno}: " if lineno else ""
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in value.replace(",", " ").split())
        return kind(value)
    except ValueError:
        raise ConfigError(f"{where}{name}: cannot read {value!r} as {kind.__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` lines on top of ``base`` (defaults if omitted)."""
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        if "=" not in raw:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in raw.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, value, lineno)
    return replace(base or RunConfig(), **updates).validate()


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)
