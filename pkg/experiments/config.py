"""
Run Configuration
Loads a JSON run configuration, validates it completely and materializes
every default, so the resolved document is the whole truth about a run.
"""

import hashlib
import json
import os
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np

# Add simulation and optimization directories to path
root_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
for sub in ('simulation', 'optimization'):
    sub_path = os.path.join(root_path, sub)
    if sub_path not in sys.path:
        sys.path.insert(0, sub_path)

from coefficients import CoefficientField, make_field
from flow import ControlPath, NormSpec, Scheme
from measure import DistributionKind, Ensemble, ensemble_from_spec, load_ensemble_csv
from noise import SEED_LIMIT, TimeGrid
from rate_function import DEFAULT_PENALTY_SCHEDULE, DEFAULT_TOLERANCE, RateOptions, TargetKind, TargetSpec

VERSION = "0.1.0"

COMMANDS = ("simulate", "skeleton", "rate", "ldp1", "ldp2", "scaling", "weakcheck", "moments")

# command -> blocks that must be present in the file
REQUIRED_BLOCKS = {
    "rate": ("target",),
    "ldp1": ("sweep",),
    "ldp2": ("ldp2",),
    "scaling": ("event", "scaling"),
    "weakcheck": ("weakcheck",),
    "moments": ("moments",),
}

TOP_LEVEL_KEYS = {"field", "initial", "grid", "norm", "noise", "epsilon", "eval_points",
                  "control", "skeleton", "target", "rate", "sweep", "ldp2", "event",
                  "scaling", "weakcheck", "moments"}


class ConfigError(ValueError):
    """Invalid run configuration, with the offending key path or line"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


# -- typed readers --------------------------------------------------------------------

def _section(raw: Dict, name: str, required: bool = False) -> Dict:
    if name not in raw or raw[name] is None:
        if required:
            raise ConfigError(f"Missing required block '{name}'", key=name)
        return {}
    value = raw[name]
    if not isinstance(value, dict):
        raise ConfigError("Expected an object", key=name)
    return value


def _no_extra(section: Dict, allowed: set, path: str):
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"Unknown key(s) {', '.join(extra)}", key=path)


def _number(section: Dict, key: str, default: Any, path: str, minimum: Optional[float] = None,
            exclusive: bool = False) -> float:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigError(f"Expected a finite number, got {value!r}", key=f"{path}.{key}")
    if minimum is not None and (value < minimum or (exclusive and value == minimum)):
        bound = ">" if exclusive else ">="
        raise ConfigError(f"Must be {bound} {minimum}, got {value}", key=f"{path}.{key}")
    return float(value)


def _integer(section: Dict, key: str, default: Any, path: str, minimum: Optional[int] = None,
             maximum: Optional[int] = None) -> int:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"Expected an integer, got {value!r}", key=f"{path}.{key}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"Must be >= {minimum}, got {value}", key=f"{path}.{key}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"Must be <= {maximum}, got {value}", key=f"{path}.{key}")
    return value


def _vector(section: Dict, key: str, default: Any, path: str, dim: Optional[int] = None) -> List[float]:
    value = section.get(key, default)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v) for v in value):
        raise ConfigError(f"Expected a list of finite numbers, got {value!r}", key=f"{path}.{key}")
    if dim is not None and len(value) != dim:
        raise ConfigError(f"Expected {dim} components, got {len(value)}", key=f"{path}.{key}")
    return [float(v) for v in value]


def _boolean(section: Dict, key: str, default: bool, path: str) -> bool:
    value = section.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"Expected true or false, got {value!r}", key=f"{path}.{key}")
    return value


def _choice(section: Dict, key: str, default: Any, path: str, choices) -> str:
    value = section.get(key, default)
    if value not in choices:
        raise ConfigError(f"Expected one of {', '.join(map(str, choices))}, got {value!r}", key=f"{path}.{key}")
    return value


# -- resolved configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    """A fully resolved run: every default materialized in `resolved`"""
    command: str
    resolved: Dict
    field: CoefficientField
    initial: Ensemble
    grid: TimeGrid
    norm: NormSpec

    @property
    def seed(self) -> int:
        return self.resolved["noise"]["seed"]

    @property
    def epsilon(self) -> float:
        return self.resolved["epsilon"]

    @property
    def eval_points(self) -> Optional[np.ndarray]:
        points = self.resolved["eval_points"]
        if not points:
            return None
        return np.asarray(points, dtype=float).reshape(-1, self.field.dim)

    def block(self, name: str) -> Dict:
        return self.resolved[name]

    def config_hash(self) -> str:
        text = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def control(self) -> ControlPath:
        spec = self.resolved["control"]
        times = self.grid.nodes[:-1]
        value = np.asarray(spec["value"], dtype=float)
        slope = np.asarray(spec["slope"], dtype=float)
        if spec["kind"] == "zero":
            values = np.zeros((self.grid.steps, self.field.modes))
        else:
            values = value[None, :] + slope[None, :] * times[:, None]
        return ControlPath(values, self.grid, spec["budget"])

    def target(self) -> TargetSpec:
        spec = self.resolved["target"]
        kind = TargetKind(spec["kind"])
        if kind == TargetKind.TERMINAL_POINT:
            return TargetSpec.terminal_point(spec["x0"], spec["value"], spec["tolerance"])
        if kind == TargetKind.TERMINAL_MEAN:
            return TargetSpec.terminal_mean(spec["value"], spec["tolerance"])
        goal = _build_ensemble(spec["goal"], "target.goal")
        return TargetSpec.terminal_measure(goal, spec["tolerance"])

    def rate_options(self, workers: int = 1) -> RateOptions:
        spec = self.resolved["rate"]
        return RateOptions(
            grid=self.grid,
            max_iter=spec["max_iter"],
            penalty_schedule=tuple(spec["penalty_schedule"]),
            scheme=Scheme(spec["scheme"]),
            energy_rtol=spec["energy_rtol"],
            multistart=spec["multistart"],
            multistart_scale=spec["multistart_scale"],
            seed=self.seed,
            workers=workers,
        )


def _resolve_initial(raw: Dict) -> Dict:
    path = "initial"
    spec = _section(raw, path)
    if "csv" in spec:
        _no_extra(spec, {"csv"}, path)
        if not isinstance(spec["csv"], str):
            raise ConfigError("Expected a file path", key=f"{path}.csv")
        return {"csv": spec["csv"]}
    kind = _choice(spec, "kind", "point_mass", path, [k.value for k in DistributionKind])
    out: Dict[str, Any] = {"kind": kind}
    if kind == "point_mass":
        _no_extra(spec, {"kind", "x0", "n"}, path)
        out["x0"] = _vector(spec, "x0", [0.0], path)
        out["n"] = _integer(spec, "n", 1, path, minimum=1)
    elif kind == "grid":
        _no_extra(spec, {"kind", "low", "high", "n"}, path)
        out["low"] = _vector(spec, "low", [-1.0], path)
        out["high"] = _vector(spec, "high", [1.0], path, dim=len(out["low"]))
        out["n"] = _integer(spec, "n", 5, path, minimum=1)
    elif kind == "gaussian":
        _no_extra(spec, {"kind", "mean", "std", "n", "seed"}, path)
        out["mean"] = _vector(spec, "mean", [0.0], path)
        out["std"] = _number(spec, "std", 1.0, path, minimum=0.0)
        out["n"] = _integer(spec, "n", 16, path, minimum=1)
        out["seed"] = _integer(spec, "seed", 0, path, minimum=0, maximum=SEED_LIMIT - 1)
    else:
        _no_extra(spec, {"kind", "points", "weights"}, path)
        points = spec.get("points")
        if not isinstance(points, list) or not points:
            raise ConfigError("Explicit ensembles need a nonempty point list", key=f"{path}.points")
        out["points"] = [_vector({"p": p}, "p", None, f"{path}.points") for p in points]
        out["weights"] = (None if spec.get("weights") is None
                          else _vector(spec, "weights", None, path, dim=len(points)))
    return out


def _build_ensemble(spec: Dict, path: str) -> Ensemble:
    try:
        if "csv" in spec:
            return load_ensemble_csv(spec["csv"])
        kind = spec["kind"]
        if kind == "explicit":
            return ensemble_from_spec(spec, len(spec["points"]))
        return ensemble_from_spec(spec, spec["n"], spec.get("seed", 0))
    except (OSError, ValueError) as e:
        raise ConfigError(str(e), key=path)


def _resolve_field(raw: Dict):
    path = "field"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"name", "params"}, path)
    name = spec.get("name")
    params = spec.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("Expected an object", key=f"{path}.params")
    try:
        built = make_field(name, params)
    except ValueError as e:
        raise ConfigError(str(e), key=path)
    return {"name": name, "params": dict(built.params)}, built


def _resolve_grid(raw: Dict) -> Dict:
    spec = _section(raw, "grid")
    _no_extra(spec, {"horizon", "steps"}, "grid")
    return {
        "horizon": _number(spec, "horizon", 1.0, "grid", minimum=0.0, exclusive=True),
        "steps": _integer(spec, "steps", 100, "grid", minimum=1),
    }


def _resolve_norm(raw: Dict, dim: int) -> Dict:
    spec = _section(raw, "norm")
    _no_extra(spec, {"delta", "m"}, "norm")
    delta = _number(spec, "delta", 0.25, "norm")
    default_m = NormSpec.for_dimension(dim, delta).m if 0 < delta < 1 / 3 else 6
    m = _integer(spec, "m", default_m, "norm")
    try:
        NormSpec(delta, m).check_dimension(dim)
    except ValueError as e:
        raise ConfigError(str(e), key="norm")
    return {"delta": delta, "m": m}


def _resolve_noise(raw: Dict, modes: int, seed_override: Optional[int]) -> Dict:
    spec = _section(raw, "noise")
    _no_extra(spec, {"modes", "seed"}, "noise")
    K = _integer(spec, "modes", modes, "noise", minimum=1)
    if K != modes:
        raise ConfigError(f"Field needs {modes} noise modes, config declares {K}", key="noise.modes")
    seed = _integer(spec, "seed", 0, "noise", minimum=0, maximum=SEED_LIMIT - 1)
    if seed_override is not None:
        if not 0 <= seed_override < SEED_LIMIT:
            raise ConfigError(f"Seed override must be an unsigned 64-bit integer, got {seed_override}")
        seed = seed_override
    return {"modes": K, "seed": seed}


def _resolve_control(raw: Dict, K: int) -> Dict:
    path = "control"
    spec = _section(raw, path)
    _no_extra(spec, {"kind", "value", "slope", "budget"}, path)
    kind = _choice(spec, "kind", "zero", path, ["zero", "constant", "affine"])
    value = _vector(spec, "value", [0.0] * K, path, dim=K)
    slope = _vector(spec, "slope", [0.0] * K, path, dim=K)
    if kind == "constant" and any(slope):
        raise ConfigError("Constant controls take no slope", key=f"{path}.slope")
    budget = spec.get("budget")
    if budget is not None:
        budget = _number(spec, "budget", None, path, minimum=0.0, exclusive=True)
    return {"kind": kind, "value": value, "slope": slope, "budget": budget}


def _resolve_target(raw: Dict, dim: int) -> Dict:
    path = "target"
    spec = _section(raw, path, required=True)
    kind = _choice(spec, "kind", None, path, [k.value for k in TargetKind])
    tolerance = _number(spec, "tolerance", DEFAULT_TOLERANCE, path, minimum=0.0, exclusive=True)
    if kind == "terminal_measure":
        _no_extra(spec, {"kind", "goal", "tolerance"}, path)
        goal = spec.get("goal")
        if not isinstance(goal, dict):
            raise ConfigError("terminal_measure needs a goal ensemble", key=f"{path}.goal")
        return {"kind": kind, "goal": _resolve_initial({"initial": goal}), "tolerance": tolerance}
    out = {"kind": kind, "value": _vector(spec, "value", None, path, dim=dim), "tolerance": tolerance}
    if kind == "terminal_point":
        _no_extra(spec, {"kind", "x0", "value", "tolerance"}, path)
        out["x0"] = _vector(spec, "x0", [0.0] * dim, path, dim=dim)
    else:
        _no_extra(spec, {"kind", "value", "tolerance"}, path)
    return out


def _resolve_rate(raw: Dict) -> Dict:
    path = "rate"
    spec = _section(raw, path)
    _no_extra(spec, {"max_iter", "penalty_schedule", "scheme", "energy_rtol", "multistart",
                     "multistart_scale", "oracle", "scan"}, path)
    schedule = _vector(spec, "penalty_schedule", list(DEFAULT_PENALTY_SCHEDULE), path)
    if not schedule or any(p <= 0 for p in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigError("Penalty schedule must be positive and increasing", key=f"{path}.penalty_schedule")
    oracle = spec.get("oracle")
    if oracle is not None:
        oracle = _number(spec, "oracle", None, path, minimum=0.0)
    scan = spec.get("scan")
    if scan is not None:
        if not isinstance(scan, dict):
            raise ConfigError("Expected an object", key=f"{path}.scan")
        _no_extra(scan, {"low", "high", "count", "slopes"}, f"{path}.scan")
        scan = {
            "low": _number(scan, "low", -3.0, f"{path}.scan"),
            "high": _number(scan, "high", 3.0, f"{path}.scan"),
            "count": _integer(scan, "count", 601, f"{path}.scan", minimum=2),
            "slopes": _vector(scan, "slopes", [0.0], f"{path}.scan"),
        }
    return {
        "max_iter": _integer(spec, "max_iter", 200, path, minimum=1),
        "penalty_schedule": schedule,
        "scheme": _choice(spec, "scheme", "heun", path, [s.value for s in Scheme]),
        "energy_rtol": _number(spec, "energy_rtol", 1e-8, path, minimum=0.0, exclusive=True),
        "multistart": _integer(spec, "multistart", 0, path, minimum=0),
        "multistart_scale": _number(spec, "multistart_scale", 1.0, path, minimum=0.0),
        "oracle": oracle,
        "scan": scan,
    }


def _resolve_sweep(raw: Dict) -> Dict:
    path = "sweep"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"epsilons", "replicas", "budget", "block_size", "slope_band", "track_measures"}, path)
    epsilons = _vector(spec, "epsilons", None, path)
    if not epsilons or any(e <= 0 for e in epsilons) or any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ConfigError("Epsilons must be positive and strictly decreasing", key=f"{path}.epsilons")
    return {
        "epsilons": epsilons,
        "replicas": _integer(spec, "replicas", 200, path, minimum=30),
        "budget": _number(spec, "budget", 10.0, path, minimum=0.0, exclusive=True),
        "block_size": _integer(spec, "block_size", 256, path, minimum=1),
        "slope_band": _vector(spec, "slope_band", [0.4, 0.6], path, dim=2),
        "track_measures": _boolean(spec, "track_measures", True, path),
    }


def _resolve_ldp2(raw: Dict, K: int) -> Dict:
    path = "ldp2"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"amplitude", "mode", "n_list", "tolerance"}, path)
    n_list = spec.get("n_list", [1, 2, 4, 8, 16, 32, 64])
    if not isinstance(n_list, list) or not n_list or not all(
            isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in n_list):
        raise ConfigError("Expected a nonempty list of positive integers", key=f"{path}.n_list")
    return {
        "amplitude": _number(spec, "amplitude", 1.0, path),
        "mode": _integer(spec, "mode", 0, path, minimum=0, maximum=K - 1),
        "n_list": n_list,
        "tolerance": _number(spec, "tolerance", 1e-2, path, minimum=0.0, exclusive=True),
    }


def _resolve_event(raw: Dict, dim: int) -> Dict:
    path = "event"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"kind", "target", "x0", "normal", "level", "center", "radius"}, path)
    kind = _choice(spec, "kind", None, path, ["half_space", "ball", "whole_space"])
    target = _choice(spec, "target", "point", path, ["point", "mean"])
    out: Dict[str, Any] = {"kind": kind, "target": target}
    if target == "point":
        out["x0"] = _vector(spec, "x0", [0.0] * dim, path, dim=dim)
    if kind == "half_space":
        out["normal"] = _vector(spec, "normal", [1.0] + [0.0] * (dim - 1), path, dim=dim)
        out["level"] = _number(spec, "level", None, path)
    elif kind == "ball":
        out["center"] = _vector(spec, "center", None, path, dim=dim)
        out["radius"] = _number(spec, "radius", None, path, minimum=0.0)
    return out


def _resolve_scaling(raw: Dict) -> Dict:
    path = "scaling"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"epsilons", "n_mc", "use_tilt", "band"}, path)
    epsilons = _vector(spec, "epsilons", [0.2, 0.1, 0.05, 0.02], path)
    if not epsilons or any(e <= 0 for e in epsilons):
        raise ConfigError("Epsilons must be positive", key=f"{path}.epsilons")
    return {
        "epsilons": epsilons,
        "n_mc": _integer(spec, "n_mc", 100000, path, minimum=100),
        "use_tilt": _boolean(spec, "use_tilt", True, path),
        "band": _number(spec, "band", 0.15, path, minimum=0.0),
    }


def _resolve_weakcheck(raw: Dict, dim: int) -> Dict:
    path = "weakcheck"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"alpha", "radius", "flat_radius", "scale", "replicas", "qv_replicas", "levels"}, path)
    alpha = spec.get("alpha", [2] + [0] * (dim - 1))
    if not isinstance(alpha, list) or len(alpha) != dim or not all(
            isinstance(a, int) and not isinstance(a, bool) and a >= 0 for a in alpha):
        raise ConfigError(f"Expected {dim} nonnegative integer exponents", key=f"{path}.alpha")
    radius = spec.get("radius")
    if radius is not None:
        radius = _number(spec, "radius", None, path, minimum=0.0, exclusive=True)
    flat = spec.get("flat_radius")
    if flat is not None:
        flat = _number(spec, "flat_radius", None, path, minimum=0.0, exclusive=True)
        if radius is not None and flat >= radius:
            raise ConfigError("flat_radius must be below radius", key=f"{path}.flat_radius")
    return {
        "alpha": alpha,
        "radius": radius,
        "flat_radius": flat,
        "scale": _number(spec, "scale", 1.0, path),
        "replicas": _integer(spec, "replicas", 100, path, minimum=30),
        "qv_replicas": _integer(spec, "qv_replicas", 1000, path, minimum=30),
        "levels": _integer(spec, "levels", 4, path, minimum=0),
    }


def _resolve_moments(raw: Dict, m: int) -> Dict:
    path = "moments"
    spec = _section(raw, path, required=True)
    _no_extra(spec, {"x", "p", "replicas", "epsilon", "separations", "lipschitz_x", "spread_limit"}, path)
    p = _integer(spec, "p", 2, path, minimum=2, maximum=m)
    if p % 2:
        raise ConfigError(f"p must be even, got {p}", key=f"{path}.p")
    separations = _vector(spec, "separations", [1e-2, 1e-1, 1.0], path)
    if not separations or any(s <= 0 for s in separations):
        raise ConfigError("Separations must be positive", key=f"{path}.separations")
    return {
        "x": _vector(spec, "x", [0.0, 1.0, 4.0, 16.0], path),
        "p": p,
        "replicas": _integer(spec, "replicas", 100, path, minimum=30),
        "epsilon": _number(spec, "epsilon", 1.0, path, minimum=0.0),
        "separations": separations,
        "lipschitz_x": _number(spec, "lipschitz_x", 0.0, path),
        "spread_limit": _number(spec, "spread_limit", 10.0, path, minimum=1.0),
    }


def load_config(path: str) -> Dict:
    """Parse a JSON configuration file"""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e.strerror}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON: {e.msg}", line=e.lineno)
    if not isinstance(raw, dict):
        raise ConfigError("Top level of the configuration must be an object", line=1)
    return raw


def resolve_config(raw: Dict, command: str, seed_override: Optional[int] = None) -> RunConfig:
    """Validate raw against command and return the run with all defaults materialized"""
    if command not in COMMANDS:
        raise ConfigError(f"Unknown command {command!r}")
    _no_extra(raw, TOP_LEVEL_KEYS, "<root>")
    for block in REQUIRED_BLOCKS.get(command, ()):
        _section(raw, block, required=True)

    field_spec, field = _resolve_field(raw)
    d, K = field.dim, field.modes
    initial_spec = _resolve_initial(raw)
    initial = _build_ensemble(initial_spec, "initial")
    if initial.dim != d:
        raise ConfigError(f"Initial ensemble lives in R^{initial.dim}, field in R^{d}", key="initial")

    grid_spec = _resolve_grid(raw)
    norm_spec = _resolve_norm(raw, d)
    resolved: Dict[str, Any] = {
        "field": field_spec,
        "initial": initial_spec,
        "grid": grid_spec,
        "norm": norm_spec,
        "noise": _resolve_noise(raw, K, seed_override),
        "epsilon": _number(raw, "epsilon", 0.1, "<root>", minimum=0.0),
        "control": _resolve_control(raw, K),
    }
    eval_points = raw.get("eval_points", [])
    if not isinstance(eval_points, list):
        raise ConfigError("Expected a list of points", key="eval_points")
    resolved["eval_points"] = [_vector({"p": p}, "p", None, "eval_points", dim=d) for p in eval_points]

    skeleton = _section(raw, "skeleton")
    _no_extra(skeleton, {"scheme"}, "skeleton")
    resolved["skeleton"] = {"scheme": _choice(skeleton, "scheme", "heun", "skeleton", [s.value for s in Scheme])}

    if command in ("rate", "scaling"):
        resolved["rate"] = _resolve_rate(raw)
    if command == "rate":
        resolved["target"] = _resolve_target(raw, d)
    if command == "ldp1":
        resolved["sweep"] = _resolve_sweep(raw)
    if command == "ldp2":
        resolved["ldp2"] = _resolve_ldp2(raw, K)
    if command == "scaling":
        resolved["event"] = _resolve_event(raw, d)
        resolved["scaling"] = _resolve_scaling(raw)
    if command == "weakcheck":
        resolved["weakcheck"] = _resolve_weakcheck(raw, d)
    if command == "moments":
        resolved["moments"] = _resolve_moments(raw, norm_spec["m"])

    config = RunConfig(
        command=command,
        resolved=resolved,
        field=field,
        initial=initial,
        grid=TimeGrid(grid_spec["horizon"], grid_spec["steps"]),
        norm=NormSpec(norm_spec["delta"], norm_spec["m"]),
    )
    try:
        config.control()
        if command == "rate":
            config.target().point_index(initial)
    except ValueError as e:
        raise ConfigError(str(e), key="control" if command != "rate" else "target")
    return config
