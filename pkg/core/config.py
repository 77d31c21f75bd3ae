"""
Run Configuration

RunConfig is a tree of dataclasses loaded from JSON. Keys carry their units
(t1_s, t2_s, omega_hz, tr_ms, ...); values are converted to the internal
ms / Hz representation when the config is turned into library objects.

Example:
    from core.config import resolve_config

    config = resolve_config(preset="desk")
    schedule = config.optimizer.c2f_schedule()
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from .bloch_model import FlipSchedule, TissueParams, synth_flip_schedule
from .errors import ConfigError, DomainError
from .experiment import METHODS, PHANTOM_KINDS
from .blip_init import RHO_MODES
from .optimizer import EXHAUSTION_POLICIES, BacktrackConfig, C2FSchedule, StepSizes

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PRESETS_DIR = os.path.join(PROJECT_ROOT, "presets")

S_TO_MS = 1000.0
# A step on a channel in ms sees a gradient 1000x smaller than in s, and the
# variable itself is 1000x larger, hence 1e6.
TAU_S_TO_MS = S_TO_MS * S_TO_MS


@dataclass
class PhantomSpec:
    size: int = 64
    kind: str = "ellipses"
    seed: int = 1


@dataclass
class ScheduleSpec:
    """Synthetic schedule (length, seed) unless csv_path is given."""
    length: int = 500
    tr_ms: float = 10.0
    seed: int = 1
    csv_path: Optional[str] = None

    def build(self, base_dir: str = PROJECT_ROOT) -> FlipSchedule:
        if self.csv_path:
            path = self.csv_path if os.path.isabs(self.csv_path) else os.path.join(base_dir, self.csv_path)
            if not os.path.exists(path):
                raise ConfigError(f"schedule file not found: {path}", "schedule.csv_path")
            return FlipSchedule.load(path, tr=self.tr_ms)
        return synth_flip_schedule(self.length, self.seed, tr=self.tr_ms)


@dataclass
class AcquisitionSpec:
    rate: float = 0.125
    noise_sigma: float = 0.0
    seed: int = 1


@dataclass
class InitSpec:
    """Constant initial guess in seconds-based units (a.u., s, s, Hz)."""
    rho: float = 0.42
    t1_s: float = 2.0
    t2_s: float = 0.2
    omega_hz: float = 0.0

    def tissue(self) -> TissueParams:
        return TissueParams(rho=self.rho, t1=self.t1_s * S_TO_MS,
                            t2=self.t2_s * S_TO_MS, omega=self.omega_hz)


@dataclass
class StepSpec:
    """Initial step sizes tau0, T1/T2 entries in s-units."""
    rho: float = 0.1
    t1_s: float = 1.0
    t2_s: float = 0.1
    omega_hz: float = 1e-8

    def step_sizes(self) -> StepSizes:
        return StepSizes([self.rho, self.t1_s * TAU_S_TO_MS, self.t2_s * TAU_S_TO_MS, self.omega_hz])


@dataclass
class FloorSpec:
    """Projection floors; null disables the floor for that channel."""
    rho: Optional[float] = 0.0
    t1_ms: Optional[float] = 1.0
    t2_ms: Optional[float] = 1.0
    omega_hz: Optional[float] = None

    def as_tuple(self):
        return tuple(-math.inf if v is None else float(v)
                     for v in (self.rho, self.t1_ms, self.t2_ms, self.omega_hz))


@dataclass
class OptimizerSpec:
    tau0: StepSpec = field(default_factory=StepSpec)
    floors: FloorSpec = field(default_factory=FloorSpec)
    max_trials: int = 50
    grow: float = 1.2
    shrink: float = 0.75
    on_exhaustion: str = "revert"
    c2f_increments: List[int] = field(default_factory=lambda: [16, 8, 4, 2, 1])
    c2f_iterations: List[int] = field(default_factory=lambda: [32, 32, 16, 10, 85])
    fine_iterations: int = 100
    seed: int = 1
    true_objective_every: int = 5

    def backtrack(self) -> BacktrackConfig:
        return BacktrackConfig(max_trials=self.max_trials, grow=self.grow, shrink=self.shrink,
                               floors=self.floors.as_tuple(), on_exhaustion=self.on_exhaustion)

    def c2f_schedule(self) -> C2FSchedule:
        return C2FSchedule(tuple(self.c2f_increments), tuple(self.c2f_iterations))


@dataclass
class BlipSpec:
    iterations: int = 50
    mu: float = 1.0
    rho_mode: str = "real"
    t1_grid_s: List[float] = field(default_factory=lambda: [0.5 * k for k in range(1, 13)])
    t2_grid_s: List[float] = field(default_factory=lambda: [0.05 * k for k in range(1, 13)])
    omega_grid_hz: List[float] = field(default_factory=lambda: [10.0 * k for k in range(-5, 6)])

    def grids_ms(self):
        return ([v * S_TO_MS for v in self.t1_grid_s],
                [v * S_TO_MS for v in self.t2_grid_s],
                list(self.omega_grid_hz))


@dataclass
class RunConfig:
    """
    Complete description of one simulate -> reconstruct -> evaluate run.

    Attributes:
        name: Label written into reports.
        method: One of BLIP, FINE, C2F, BLIP+FINE, BLIP+C2F.
        output_dir: Run directory (relative paths resolve against the project root).
        chunk_size: Voxels per worker chunk.
    """
    name: str = "desk"
    method: str = "BLIP+C2F"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    init: InitSpec = field(default_factory=InitSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    blip: BlipSpec = field(default_factory=BlipSpec)
    output_dir: str = "runs/desk"
    chunk_size: int = 2048

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RunConfig":
        config = _build(cls, payload, "")
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(payload)

    def resolved_output_dir(self) -> str:
        if os.path.isabs(self.output_dir):
            return self.output_dir
        return os.path.join(PROJECT_ROOT, self.output_dir)

    def validate(self) -> None:
        """
        Check cross-field constraints.

        Raises:
            ConfigError: Naming the offending field.
        """
        if self.method not in METHODS:
            raise ConfigError(f"must be one of {METHODS}, got {self.method!r}", "method")
        if self.phantom.kind not in PHANTOM_KINDS:
            raise ConfigError(f"must be one of {PHANTOM_KINDS}", "phantom.kind")
        if self.phantom.size < 16:
            raise ConfigError("must be >= 16", "phantom.size")
        if self.schedule.length < 1 and not self.schedule.csv_path:
            raise ConfigError("must be >= 1", "schedule.length")
        if not self.schedule.tr_ms > 0:
            raise ConfigError("must be positive", "schedule.tr_ms")
        if not 0 < self.acquisition.rate <= 1:
            raise ConfigError("must lie in (0, 1]", "acquisition.rate")
        shots = round(1.0 / self.acquisition.rate)
        if abs(1.0 / self.acquisition.rate - shots) > 1e-9 or self.phantom.size % shots:
            raise ConfigError(f"1/rate must be an integer dividing phantom.size={self.phantom.size}",
                              "acquisition.rate")
        if self.acquisition.noise_sigma < 0:
            raise ConfigError("must be >= 0", "acquisition.noise_sigma")
        if self.chunk_size < 1:
            raise ConfigError("must be >= 1", "chunk_size")

        try:
            self.init.tissue()
        except DomainError as e:
            raise ConfigError(str(e), "init") from e

        opt = self.optimizer
        for name in ("rho", "t1_s", "t2_s", "omega_hz"):
            value = getattr(opt.tau0, name)
            if not (isinstance(value, (int, float)) and value > 0 and math.isfinite(value)):
                raise ConfigError("must be a positive number", f"optimizer.tau0.{name}")
        try:
            opt.backtrack()
        except DomainError as e:
            raise ConfigError(str(e), "optimizer") from e
        if opt.on_exhaustion not in EXHAUSTION_POLICIES:
            raise ConfigError(f"must be one of {EXHAUSTION_POLICIES}", "optimizer.on_exhaustion")
        if self.method.endswith("C2F"):
            if len(opt.c2f_increments) != len(opt.c2f_iterations):
                raise ConfigError("c2f_increments and c2f_iterations must have equal length",
                                  "optimizer.c2f_iterations")
            try:
                opt.c2f_schedule()
            except DomainError as e:
                raise ConfigError(str(e), "optimizer.c2f_increments") from e
            if max(opt.c2f_increments) > self.schedule.length:
                raise ConfigError("increments cannot exceed schedule.length", "optimizer.c2f_increments")
        if self.method.endswith("FINE") and opt.fine_iterations < 1:
            raise ConfigError("must be >= 1", "optimizer.fine_iterations")
        if opt.true_objective_every < 0:
            raise ConfigError("must be >= 0", "optimizer.true_objective_every")

        blip = self.blip
        if self.method.startswith("BLIP"):
            if blip.iterations < 1:
                raise ConfigError("must be >= 1", "blip.iterations")
            if not blip.mu > 0:
                raise ConfigError("must be positive", "blip.mu")
            for name in ("t1_grid_s", "t2_grid_s", "omega_grid_hz"):
                if not getattr(blip, name):
                    raise ConfigError("must be non-empty", f"blip.{name}")
            if min(blip.t1_grid_s) <= 0 or min(blip.t2_grid_s) <= 0:
                raise ConfigError("relaxation grids must be positive", "blip.t1_grid_s")
        if blip.rho_mode not in RHO_MODES:
            raise ConfigError(f"must be one of {RHO_MODES}", "blip.rho_mode")


def _build(cls, payload: Any, path: str):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError("expected a JSON object", path or None)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}", f"{prefix}{unknown[0]}")

    defaults = cls()
    kwargs = {}
    for name, f in known.items():
        dotted = f"{path}.{name}" if path else name
        if name not in payload:
            continue
        value = payload[name]
        nested = getattr(defaults, name)
        if hasattr(nested, "__dataclass_fields__"):
            kwargs[name] = _build(type(nested), value, dotted)
        else:
            kwargs[name] = _coerce(value, getattr(defaults, name), dotted)
    return cls(**kwargs)


def _coerce(value: Any, default: Any, path: str) -> Any:
    """Type-check a leaf value against the type of its default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("expected true/false", path)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float) or default is None and isinstance(value, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError("expected a list", path)
        element = default[0] if default else 0.0
        return [_coerce(v, element, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(default, str) or default is None:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def list_presets() -> List[str]:
    if not os.path.isdir(PRESETS_DIR):
        return []
    return sorted(os.path.splitext(f)[0] for f in os.listdir(PRESETS_DIR) if f.endswith(".json"))


def preset_path(name: str) -> str:
    path = os.path.join(PRESETS_DIR, f"{name}.json")
    if not os.path.exists(path):
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}", "preset")
    return path


def load_preset(name: str) -> RunConfig:
    return RunConfig.load(preset_path(name))


def resolve_config(config_path: Optional[str] = None, preset: Optional[str] = None) -> RunConfig:
    """
    Pick the run configuration.

    Order: explicit config path, then a named preset, then config.json in
    the project root, then the built-in desk defaults.
    """
    if config_path:
        return RunConfig.load(config_path)
    if preset:
        return load_preset(preset)
    default_path = os.path.join(PROJECT_ROOT, "config.json")
    if os.path.exists(default_path):
        return RunConfig.load(default_path)
    return RunConfig()


def add_config_arguments(parser) -> None:
    """--config / --preset / --output shared by the pipeline subcommands."""
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", help="RunConfig JSON file")
    source.add_argument("--preset", help="Preset name from presets/ (see 'presets list')")
    parser.add_argument("--output", help="Override the run's output_dir")


def config_from_args(args) -> RunConfig:
    config = resolve_config(getattr(args, "config", None), getattr(args, "preset", None))
    if getattr(args, "output", None):
        config.output_dir = args.output
    return config
