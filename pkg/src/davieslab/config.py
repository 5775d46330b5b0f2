"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ConfigurationError

BUILDERS = ("sierpinski", "lattice", "vicsek")
MEASURES = ("degree", "counting")
BASES = ("harmonic", "linear")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigurationError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigurationError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


@dataclass
class ExperimentConfig:
    """Everything a pipeline run depends on.

    Grids left empty are filled from the graph at run time; ``df``/``dw``
    default to the known dimensions of the builder family.
    """

    builder: str = "sierpinski"
    level: int = 4
    dim: int = 2
    side: int = 16
    measure: str = "degree"
    cutoff_base: str = "harmonic"
    c1_grid: tuple = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0)
    lambda_grid: tuple = (1.0, 2.0, 4.0, 8.0)
    iterate_lambda: float = 2.0
    c1hat: float = 1.0
    t_per_decade: int = 9
    pair_distances: tuple = ()
    centers: tuple = ()
    exit_radii: tuple = ()
    ahlfors_radii: tuple = ()
    annulus_radius: float | None = None
    K: int = 6
    csa_validate: int = 100
    df: float | None = None
    dw: float | None = None
    out: str = "report"
    seed: int = 0
    threads: int = 1

    _parsers = {
        "level": int, "dim": int, "side": int, "K": int, "t_per_decade": int,
        "csa_validate": int, "seed": int, "threads": int,
        "iterate_lambda": float, "c1hat": float,
        "c1_grid": _floats, "lambda_grid": _floats, "exit_radii": _floats, "ahlfors_radii": _floats,
        "pair_distances": _ints, "centers": _ints,
        "annulus_radius": _optional_float, "df": _optional_float, "dw": _optional_float,
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        if self.builder not in BUILDERS:
            raise ConfigurationError(f"builder: unknown kind {self.builder!r}; expected one of {BUILDERS}")
        if self.measure not in MEASURES:
            raise ConfigurationError(f"measure: expected one of {MEASURES}, got {self.measure!r}")
        if self.cutoff_base not in BASES:
            raise ConfigurationError(f"cutoff_base: expected one of {BASES}, got {self.cutoff_base!r}")
        if not self.c1_grid or min(self.c1_grid) <= 0:
            raise ConfigurationError("c1_grid: must be a nonempty list of positive values")
        if not self.lambda_grid or min(self.lambda_grid) < 1:
            raise ConfigurationError("lambda_grid: must be nonempty with entries >= 1")
        if self.iterate_lambda != 0 and self.iterate_lambda < 1:
            raise ConfigurationError("iterate_lambda: must be 0 or >= 1")
        if not 0 <= self.K <= 12:
            raise ConfigurationError("K: must lie in [0, 12]")
        if self.t_per_decade < 2:
            raise ConfigurationError("t_per_decade: must be >= 2")
        if self.threads < 1:
            raise ConfigurationError("threads: must be >= 1")
        if self.c1hat <= 0:
            raise ConfigurationError("c1hat: must be positive")
        return self

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigurationError(f"{key}: unknown configuration key")
            if not isinstance(value, str):
                kwargs[key] = value
                continue
            parse = cls._parsers.get(key, str)
            try:
                kwargs[key] = parse(value)
            except ValueError as exc:
                raise ConfigurationError(f"{key}: cannot parse {value!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, **overrides)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif v is None:
                v = "auto"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple)
                         else getattr(self, f.name)) for f in fields(self)}

    def dimensions(self) -> tuple[float, float]:
        """Target ``(df, dw)``: configured values or the builder family's."""
        if self.builder == "sierpinski":
            df, dw = math.log(3) / math.log(2), math.log(5) / math.log(2)
        elif self.builder == "vicsek":
            df = math.log(5) / math.log(3)
            dw = df + 1
        else:
            df, dw = float(self.dim), 2.0
        return (self.df if self.df is not None else df, self.dw if self.dw is not None else dw)
