"""INI run configuration with lossless round trip and a stable hash.

Example::

    [run]
    domain = square
    h = 0.0625
    dt = 0.02
    samples = 100

    [model]
    kind = lognormal
    tau = 1.0
    epsilon = 0.05
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .fields import ModelConfig
from .uq import EnsembleConfig


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    """All options of a CLI run; sections ``run``, ``model``, ``mms``, ``moments``, ``stokes``."""

    domain: str = "square"
    h: float = 1 / 16
    dt: float = 0.02
    theta: float = 1.0
    form: str = "standard"
    samples: int = 10
    seed: int = 0
    p_moments: tuple = (1, 2, 4, 8)
    source: float = 1.0
    u0: str = "mode"
    snapshot_stride: int = 0
    C_M: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)
    # mms
    mms_tau: float = 0.25
    mms_spatial: tuple = (8, 16, 32, 64)
    mms_temporal: tuple = (40, 80, 160, 320)
    mms_fine: int = 64
    # moments
    moments_samples: int = 10000
    moments_repetitions: int = 100
    moments_flow_dt: float = 0.01
    # stokes
    stokes_pairs: int = 50
    stokes_quadrature: int = 16

    def __post_init__(self):
        positive = ("h", "dt", "samples", "mms_tau", "mms_fine", "moments_samples", "moments_repetitions",
                    "moments_flow_dt", "stokes_pairs", "stokes_quadrature")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.domain not in ("square", "disk"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.form not in ("standard", "weighted"):
            raise ConfigError(f"unknown form {self.form!r}")
        if self.u0 not in ("mode", "zero"):
            raise ConfigError(f"unknown initial value {self.u0!r}")
        if self.C_M < 0:
            raise ConfigError("C_M must be non-negative")

    def ensemble(self) -> EnsembleConfig:
        return EnsembleConfig(self.model, self.domain, self.h, self.dt, self.theta, self.form, self.source,
                              self.u0, self.snapshot_stride, self.C_M)

    def with_seed(self, seed):
        return self if seed is None else replace(self, seed=int(seed))

    # --- serialization ---

    _SECTIONS = {
        "run": ("domain", "h", "dt", "theta", "form", "samples", "seed", "p_moments", "source", "u0",
                "snapshot_stride", "C_M"),
        "mms": ("mms_tau", "mms_spatial", "mms_temporal", "mms_fine"),
        "moments": ("moments_samples", "moments_repetitions", "moments_flow_dt"),
        "stokes": ("stokes_pairs", "stokes_quadrature"),
    }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, names in self._SECTIONS.items():
            cp[section] = {_key(section, n): _dump(getattr(self, n)) for n in names}
        cp["model"] = {k: _dump(v) for k, v in self.model.to_dict().items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse configuration: {exc}") from exc
        known = {"run", "model", "mms", "moments", "stokes"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"unknown configuration sections {sorted(unknown)}")
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for section, names in cls._SECTIONS.items():
            if section not in cp:
                continue
            lookup = {_key(section, n): n for n in names}
            for key, raw in cp[section].items():
                if key not in lookup:
                    raise ConfigError(f"unknown option {key!r} in [{section}]")
                name = lookup[key]
                kwargs[name] = _parse(raw, types[name], name)
        model = {}
        if "model" in cp:
            mtypes = {f.name: f.type for f in fields(ModelConfig)}
            for key, raw in cp["model"].items():
                if key not in mtypes:
                    raise ConfigError(f"unknown option {key!r} in [model]")
                model[key] = _parse(raw, mtypes[key], key)
        kwargs["model"] = ModelConfig(**model)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc


def _key(section, name):
    return name[len(section) + 1:] if name.startswith(section + "_") else name


def _dump(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw, typ, name):
    typ = str(typ)
    try:
        if "tuple" in typ:
            return _ints(raw)
        if typ.startswith("int"):
            return int(raw)
        if "float" in typ:
            return None if raw.strip().lower() == "none" else float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {name}") from exc
