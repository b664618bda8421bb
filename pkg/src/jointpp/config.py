"""Run configuration stored as sectioned ``key = value`` text (INI).

Each section maps onto a dataclass; values are converted according to the
type of the field's default. Tuples are written comma separated and ``None``
as ``none``.
"""

import configparser
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .sampler import PriorSpec, SamplerConfig


@dataclass
class DataSection:
    plots: str = "plots.csv"
    signals: str = "signals.csv"
    y_formula: str = "1"
    z_formula: str = "height"
    max_height: float = None
    smooth: bool = False
    standardize: bool = False
    holdout_fraction: float = 0.25
    holdout_seed: int = 7


@dataclass
class KnotSection:
    n_u: int = None
    n_v: int = None
    n_x: int = 5
    heights: tuple = None
    theta: tuple = None
    candidates_per_axis: int = 20
    select: bool = False


@dataclass
class SimulateSection:
    scale: float = 2.0
    seed: int = 0


@dataclass
class PredictSection:
    max_draws: int = None
    batch_size: int = 2000
    tau2_mode: str = "nearest"
    level: float = 0.95
    targets: str = None
    dic_draws: int = 500


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    knots: KnotSection = field(default_factory=KnotSection)
    priors: PriorSpec = field(default_factory=PriorSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    predict: PredictSection = field(default_factory=PredictSection)
    base_dir: str = "."

    SECTIONS = ("data", "knots", "priors", "sampler", "simulate", "predict")

    @property
    def seed(self):
        return self.sampler.seed

    def with_seed(self, seed):
        return replace(self, sampler=replace(self.sampler, seed=int(seed)))

    def with_chains(self, n):
        return replace(self, sampler=replace(self.sampler, n_chains=int(n)))

    def path(self, name):
        p = Path(name)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_ini(self):
        cp = configparser.ConfigParser()
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: _emit(getattr(obj, f.name)) for f in fields(obj)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text, base_dir="."):
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        unknown = set(cp.sections()) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(base_dir=str(base_dir))
        for sec in cls.SECTIONS:
            if sec not in cp:
                continue
            obj = getattr(cfg, sec)
            defaults = {f.name: f for f in fields(obj)}
            kw = {}
            for key, raw in cp[sec].items():
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                kw[key] = _parse(raw, defaults[key], f"{sec}.{key}")
            try:
                setattr(cfg, sec, replace(obj, **kw))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{sec}] settings: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        """Read an INI file, or the config echoed inside a run manifest."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        if path.suffix == ".json":
            try:
                man = json.loads(text)
                text = man["config"]
                base = man.get("base_dir", str(path.parent))
            except (ValueError, KeyError):
                raise ConfigError(f"{path} is not a run manifest") from None
            return cls.from_ini(text, base)
        return cls.from_ini(text, path.parent)

    def check_files(self):
        """Raise :class:`ConfigError` when a referenced input file is missing."""
        names = [self.data.plots, self.data.signals]
        if self.predict.targets:
            names.append(self.predict.targets)
        for name in names:
            if not self.path(name).is_file():
                raise ConfigError(f"referenced file not found: {self.path(name)}")

    def validate(self):
        k = self.knots
        for name in ("n_u", "n_v", "n_x"):
            v = getattr(k, name)
            if v is not None and v < 1:
                raise ConfigError(f"knots.{name} must be >= 1")
        if k.theta is not None and len(k.theta) != 6:
            raise ConfigError("knots.theta needs sigma2_u, a, gamma, c, sigma2_v, phi_v")
        s = self.sampler
        if not 0 <= s.n_burn < s.n_iter:
            raise ConfigError("sampler.n_burn must lie in [0, n_iter)")
        if s.n_chains < 1 or s.thin < 1:
            raise ConfigError("sampler.n_chains and sampler.thin must be >= 1")
        if not 0.0 < self.data.holdout_fraction < 1.0 and self.data.holdout_fraction != 0:
            raise ConfigError("data.holdout_fraction must be 0 or lie in (0, 1)")
        if self.predict.tau2_mode not in ("nearest", "interp"):
            raise ConfigError("predict.tau2_mode must be 'nearest' or 'interp'")


def _emit(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_emit(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _kind(f):
    """Scalar type for a field, from its annotation or default."""
    ann = f.type if isinstance(f.type, type) else None
    if ann is None and isinstance(f.type, str):
        ann = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(f.type)
    return ann or type(f.default)


def _parse(raw, f, where):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    kind = _kind(f)
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None
