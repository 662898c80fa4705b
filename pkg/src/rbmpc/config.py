"""Experiment configuration: JSON files, shipped presets and the scale knob."""

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .problem import Coefficients, DefinitionError, validate_definition

PRESET_FILES = {"reaction-diffusion-1d": "reaction_diffusion_1d.json",
                "welding-2d": "welding_2d.json"}

TOP_KEYS = {"preset", "problem", "scale", "greedy", "test", "mpc", "timing", "suboptimality",
            "solve", "output_dir", "seed"}
GREEDY_KEYS = {"bases", "N_max", "K_train", "indicator", "tol", "seed_initial", "first_mu"}
BASIS_KEYS = {"name", "training"}
TEST_KEYS = {"grid", "N_values", "K", "constrained"}
MPC_KEYS = {"cases", "N_values", "n", "K_max", "omega_min", "loops", "constrained", "fe_reference",
            "warm_start"}
TIMING_KEYS = {"mu", "N_values", "K_values", "n", "constrained", "repeats"}
SUBOPT_KEYS = {"cases", "K_values", "N_values", "n", "closed_loop_loops"}
SOLVE_KEYS = {"mu", "K", "constrained", "N"}


class ConfigError(ValueError):
    pass


def load_preset_definition(name):
    if name not in PRESET_FILES:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_FILES)}")
    text = resources.files("rbmpc.presets").joinpath(PRESET_FILES[name]).read_text()
    return json.loads(text)


def _line_of(text, key):
    """1-based line of the first occurrence of a JSON key, or None."""
    if text is None:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _check_keys(section, allowed, where, text):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in section:
        if key not in allowed:
            line = _line_of(text, key)
            at = f" (line {line})" if line else ""
            raise ConfigError(f"{where}: unknown key {key!r}{at}; allowed: {sorted(allowed)}")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def expand_axis(spec, scale=1.0, where="grid"):
    """One grid axis: a list of values, or {"linspace"|"geomspace": [a, b, count]}."""
    if isinstance(spec, (int, float)):
        return np.array([float(spec)])
    if isinstance(spec, list):
        return np.array(spec, dtype=float)
    if isinstance(spec, dict) and len(spec) == 1:
        (kind, args), = spec.items()
        if kind in ("linspace", "geomspace") and len(args) == 3:
            a, b, count = args
            count = scaled_count(int(count), scale)
            fn = np.linspace if kind == "linspace" else np.geomspace
            return fn(float(a), float(b), count)
    raise ConfigError(f"{where}: axis must be a number, a list, or "
                      "{'linspace'|'geomspace': [a, b, count]}")


def scaled_count(count, scale):
    if count <= 1:
        return count
    return max(2, int(round(count * scale)))


def expand_grid(grid, names, scale=1.0, where="grid"):
    """Cartesian product over parameter axes given by name; rows follow ``names`` order."""
    if not isinstance(grid, dict):
        raise ConfigError(f"{where}: expected an object mapping parameter names to axes")
    for k in grid:
        if k not in names:
            raise ConfigError(f"{where}: unknown parameter {k!r}; parameters are {list(names)}")
    missing = [n for n in names if n not in grid]
    if missing:
        raise ConfigError(f"{where}: no axis for parameter(s) {missing}")
    axes = [expand_axis(grid[n], scale, f"{where}.{n}") for n in names]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    if pts.shape[0] == 0:
        raise ConfigError(f"{where}: empty grid")
    return pts


def scale_mesh(mesh_def, scale):
    """Mesh with roughly ``scale`` times the number of unknowns."""
    m = dict(mesh_def)
    if scale == 1.0:
        return m
    if m["dim"] == 1:
        m["n_elems"] = max(1, int(round(m["n_elems"] * scale)))
    else:
        f = math.sqrt(scale)
        m["nx"] = max(1, int(round(m["nx"] * f)))
        m["ny"] = max(1, int(round(m["ny"] * f)))
    return m


PRESET_EXPERIMENTS = {
    "reaction-diffusion-1d": {
        "greedy": {
            "bases": [{"name": f"lambda{i}", "training": {"mu1": {"linspace": [1, 15, 20]},
                                                         "lambda": [10.0 ** -i]}}
                      for i in range(1, 5)],
            "N_max": 9, "K_train": 20, "indicator": "cost", "tol": 1e-14, "seed_initial": True,
        },
        "test": {"grid": {"mu1": {"linspace": [1, 15, 30]}, "lambda": [0.1, 0.01, 0.001, 0.0001]},
                 "N_values": [1, 3, 5, 7, 9], "K": 20, "constrained": False},
        "mpc": {"cases": [[m, 10.0 ** -i] for i in range(1, 5) for m in (2, 5, 8, 11, 14)],
                "N_values": [5, 7, 9], "n": 1, "K_max": 20, "omega_min": [0.0], "loops": 100,
                "constrained": [False], "fe_reference": True, "warm_start": False},
        "timing": {"mu": [8.0, 0.01], "N_values": [5, 7, 9], "K_values": [5, 10, 20], "n": 1,
                   "constrained": False, "repeats": 3},
        "suboptimality": {"cases": [[14.0, 0.01], [8.0, 0.0001]], "K_values": list(range(1, 21)),
                          "N_values": [5, 7, 9], "n": 1, "closed_loop_loops": 10},
        "solve": {"mu": [8.0, 0.01], "K": 20, "constrained": False},
    },
    "welding-2d": {
        "greedy": {
            "bases": [{"name": "welding", "training": {"mu1": {"geomspace": [0.5, 2.0, 10]},
                                                      "lambda": {"geomspace": [1e-6, 1e-4, 20]}}}],
            "N_max": 82, "K_train": 75, "indicator": "control", "tol": 1e-14,
            "seed_initial": False, "first_mu": [0.5, 1e-6],
        },
        "test": {"grid": {"mu1": {"geomspace": [0.5, 2.0, 6]}, "lambda": {"geomspace": [1e-6, 1e-4, 10]}},
                 "N_values": [2, 10, 18, 34, 50, 66, 82], "K": 75, "constrained": False},
        "mpc": {"cases": [[m, l] for m in (0.75, 1.75) for l in (2e-6, 5e-6, 8e-6, 5e-5)],
                "N_values": [34, 50, 66, 82], "n": 5, "K_max": 75, "omega_min": [0.0, 0.2],
                "loops": 30, "constrained": [False, True], "fe_reference": True, "warm_start": False},
        "timing": {"mu": [1.75, 2e-6], "N_values": [34, 50, 66, 82], "K_values": [5, 10, 20, 40, 75],
                   "n": 5, "constrained": False, "repeats": 3},
        "suboptimality": {"cases": [[1.75, 2e-6]], "K_values": list(range(5, 76, 5)),
                          "N_values": [34, 50, 66, 82], "n": 5, "closed_loop_loops": 2},
        "solve": {"mu": [1.75, 2e-6], "K": 75, "constrained": True},
    },
}


@dataclass
class ExperimentConfig:
    """Validated configuration; ``raw`` keeps the (unscaled) input for round-tripping."""

    raw: dict
    definition: dict
    scale: float
    greedy: dict
    test: dict
    mpc: dict
    timing: dict
    suboptimality: dict
    solve: dict
    output_dir: str
    seed: int

    @property
    def parameter_names(self):
        return tuple(self.definition["parameters"]["names"])

    # derived quantities honoring the scale knob --------------------------------
    def training_sets(self):
        out = []
        for b in self.greedy["bases"]:
            out.append((b["name"], expand_grid(b["training"], self.parameter_names, self.scale,
                                               f"greedy.bases[{b['name']}].training")))
        return out

    def test_set(self):
        return expand_grid(self.test["grid"], self.parameter_names, self.scale, "test.grid")

    def loops(self):
        return max(1, int(round(self.mpc["loops"] * self.scale)))

    def N_values(self, section):
        """Shipped basis sizes, capped at the maximum basis size."""
        cap = self.N_max()
        vals = sorted({min(int(n), cap) for n in getattr(self, section)["N_values"]})
        return vals

    def N_max(self):
        return int(self.greedy["N_max"])

    def to_json(self):
        return json.dumps(self.raw, indent=2, sort_keys=True)


def parse_config(data, text=None, scale=None):
    """Validate a config dict (``text`` is the source, used for line numbers)."""
    _check_keys(data, TOP_KEYS, "config", text)
    preset = data.get("preset", "custom")
    if preset == "custom":
        if "problem" not in data:
            raise ConfigError("config: a custom preset needs a full 'problem' definition")
        definition = copy.deepcopy(data["problem"])
        defaults = {}
    else:
        definition = load_preset_definition(preset)
        if "problem" in data:
            definition = _merge(definition, data["problem"])
        defaults = PRESET_EXPERIMENTS[preset]
    s = float(data.get("scale", 1.0) if scale is None else scale)
    if not 0 < s <= 1:
        raise ConfigError(f"config: scale must lie in (0, 1], got {s}")
    definition["mesh"] = scale_mesh(definition["mesh"], s)
    try:
        validate_definition(definition)
    except DefinitionError as exc:
        raise ConfigError(f"problem: {exc}") from exc

    sections = {}
    for name, keys in (("greedy", GREEDY_KEYS), ("test", TEST_KEYS), ("mpc", MPC_KEYS),
                       ("timing", TIMING_KEYS), ("suboptimality", SUBOPT_KEYS), ("solve", SOLVE_KEYS)):
        sec = data.get(name, {})
        _check_keys(sec, keys, name, text)
        sections[name] = _merge(defaults.get(name, {}), sec)
    g = sections["greedy"]
    if not g.get("bases"):
        raise ConfigError("greedy: at least one basis with a training set is required")
    for b in g["bases"]:
        _check_keys(b, BASIS_KEYS, "greedy.bases[]", text)
        if "name" not in b or "training" not in b:
            raise ConfigError("greedy.bases[]: every basis needs 'name' and 'training'")
    names = tuple(definition["parameters"]["names"])
    cfg = ExperimentConfig(raw=copy.deepcopy(data), definition=definition, scale=s,
                           output_dir=str(data.get("output_dir", "out")), seed=int(data.get("seed", 0)),
                           **sections)
    domain = Coefficients(definition).domain
    for bname, pts in cfg.training_sets():
        if pts.shape[0] == 0:
            raise ConfigError("greedy: empty training set")
        outside = [p.tolist() for p in pts if not domain.contains(p)]
        if outside:
            raise ConfigError(f"greedy.bases[{bname}].training: {len(outside)} point(s) outside the "
                              f"parameter domain, first {outside[0]}")
    if "grid" in cfg.test:
        cfg.test_set()
    for case in cfg.mpc.get("cases", []):
        if len(case) != len(names):
            raise ConfigError(f"mpc.cases: parameter {case} needs {len(names)} components")
    return cfg


def load_config(path, scale=None):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(data, text, scale)


def preset_config(name, scale=1.0, **overrides):
    data = {"preset": name, "scale": scale}
    data.update(overrides)
    return parse_config(data)
