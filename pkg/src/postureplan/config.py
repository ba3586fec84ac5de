"""YAML run configuration with strict keys and line-numbered errors."""
import enum
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .geometry import RobotModel
from .mapping import MappingParams
from .planner import PlannerParams
from .sim import PARAM_RANGES, FollowerGains, SensorModel, Task, TrialSpec


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (1e-5)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_yaml(text):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# section name -> parameter dataclass
SECTIONS = {
    "robot": RobotModel,
    "mapping": MappingParams,
    "planner": PlannerParams,
    "sensor": SensorModel,
    "follower": FollowerGains,
}

# TrialSpec fields configurable under "trial"
TRIAL_KEYS = ("replan_distance", "scan_interval", "sdf_z_range", "max_replans",
              "reach_margin", "placement_jitter", "start_jitter", "waypoints")

TOP_KEYS = ("task", "param", "seeds", "out", "sweep", "trial") + tuple(SECTIONS)

@dataclass(frozen=True)
class SweepRange:
    start: float = 0.0
    stop: float = 0.0
    step: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("sweep step must be positive")
        if self.workers < 1:
            raise ValueError("sweep workers must be >= 1")

    def levels(self) -> list[float]:
        """Levels from start toward stop, inclusive; a zero-length range is empty."""
        span = self.stop - self.start
        if abs(span) < 1e-12:
            return []
        n = int(math.floor(abs(span) / self.step + 1e-9))
        sign = 1.0 if span > 0 else -1.0
        return [round(self.start + sign * k * self.step, 10) for k in range(n + 1)]


@dataclass(frozen=True)
class RunConfig:
    task: Task = Task.THIN_GAP
    param: float = 0.70
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    robot: RobotModel = RobotModel()
    mapping: MappingParams = MappingParams()
    planner: PlannerParams = PlannerParams()
    sensor: SensorModel = SensorModel()
    follower: FollowerGains = FollowerGains()
    trial: dict = field(default_factory=dict)
    sweep: SweepRange = SweepRange()

    def __post_init__(self):
        lo, hi = PARAM_RANGES[Task(self.task)]
        if not lo <= self.param <= hi:
            raise ValueError(f"param {self.param} outside [{lo}, {hi}] for {Task(self.task).value}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        unknown = set(self.trial) - set(TRIAL_KEYS)
        if unknown:
            raise ValueError(f"unknown trial keys: {sorted(unknown)}")
        # TrialSpec validation of the extras happens here rather than at run time
        self.trial_spec()

    def trial_spec(self, seed: int | None = None, task=None, param=None) -> TrialSpec:
        return TrialSpec(Task(task or self.task), self.param if param is None else param,
                         seed=self.seeds[0] if seed is None else seed,
                         gains=self.follower, model=self.robot, mapping=self.mapping,
                         planner=self.planner, sensor=self.sensor, **self.trial)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "task" in kw:
            kw["task"] = Task(kw["task"])
        if "seeds" in kw:
            kw["seeds"] = tuple(int(s) for s in kw["seeds"])
        return replace(self, **kw)

    def to_dict(self) -> dict:
        data = {"task": Task(self.task).value, "param": float(self.param),
                "seeds": list(self.seeds), "out": self.out}
        for name in SECTIONS:
            data[name] = {f.name: _plain(getattr(getattr(self, name), f.name))
                          for f in fields(getattr(self, name))}
        data["trial"] = {k: _plain(v) for k, v in self.trial.items()}
        data["sweep"] = {f.name: getattr(self.sweep, f.name) for f in fields(self.sweep)}
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(v):
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _key_lines(node, prefix=()) -> dict:
    """Map dotted key paths to 1-based source lines."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            lines[".".join(path)] = k.start_mark.line + 1
            lines.update(_key_lines(v, path))
    return lines


def _coerce(value, default, key):
    """Convert a YAML value to the type of a field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple) or default is None:
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"{key}: expected a list, got {value!r}")
        return tuple(tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else float(v)
                     for v in value)
    return value


def _section(cls, data, name, lines, source):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping", lines.get(name), source)
    defaults = {f.name: f.default for f in fields(cls)}
    kw = {}
    for key, value in data.items():
        if key not in defaults:
            raise ConfigError(f"unknown key '{name}.{key}'", lines.get(f"{name}.{key}"), source)
        try:
            kw[key] = _coerce(value, defaults[key], f"{name}.{key}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), lines.get(f"{name}.{key}"), source) from None
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}", lines.get(name), source) from None


def _trial_extras(data, lines, source) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("section 'trial' must be a mapping", lines.get("trial"), source)
    defaults = {f.name: f.default for f in fields(TrialSpec)}
    out = {}
    for key, value in data.items():
        if key not in TRIAL_KEYS:
            raise ConfigError(f"unknown key 'trial.{key}'", lines.get(f"trial.{key}"), source)
        try:
            out[key] = _coerce(value, defaults[key], f"trial.{key}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), lines.get(f"trial.{key}"), source) from None
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate YAML text; every problem is reported with its line."""
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = load_yaml(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    lines = _key_lines(node) if node is not None else {}
    for key in data:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'", lines.get(str(key)), source)
    kw = {name: _section(cls, data.get(name), name, lines, source) for name, cls in SECTIONS.items()}
    kw["trial"] = _trial_extras(data.get("trial"), lines, source)
    kw["sweep"] = _section(SweepRange, data.get("sweep"), "sweep", lines, source)
    for key in ("task", "param", "seeds", "out"):
        if key not in data:
            continue
        value = data[key]
        try:
            if key == "task":
                kw[key] = Task(value)
            elif key == "param":
                kw[key] = _coerce(value, 0.0, key)
            elif key == "seeds":
                seeds = [value] if isinstance(value, int) else value
                if not isinstance(seeds, list):
                    raise TypeError(f"seeds: expected an integer or a list, got {value!r}")
                kw[key] = tuple(_coerce(v, 0, key) for v in seeds)
            else:
                kw[key] = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), lines.get(key), source) from None
    try:
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        bad = "trial" if "trial" in str(exc) else "param"
        raise ConfigError(str(exc), lines.get(bad), source) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())


def round_trip(cfg: RunConfig) -> RunConfig:
    return parse_config(cfg.to_yaml())


__all__ = ["ConfigError", "RunConfig", "SweepRange", "parse_config", "load_config",
           "dump_config", "round_trip", "SECTIONS"]
