"""
Strict YAML experiment configuration.

Blocks: model, noise, learner (with an init sub-block), sweep, diagnostics, output.
Unknown keys are rejected with the file line they sit on. Presets are embedded below so the
mass-spring experiment runs without a config file.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from config import OUT_DIR, TARGET_RHO, WORKERS
from errors import ConfigError, KalgradError
from learner import InitStrategy, Safeguard, SgdConfig
from system_model import NoiseConfig, NoiseFamily, SystemModel, mass_spring_model

logger = logging.getLogger(__name__)

SCHEMA = {
    "model": {"preset", "A", "H", "Q", "R", "P0", "m0", "omega", "dt", "process_variance",
              "measurement_variance", "initial_variance"},
    "noise": {"family", "kappa_xi", "kappa_omega", "sigmas"},
    "learner": {"method", "step_size", "batch_size", "horizon", "max_iters", "seed",
                "safeguard", "target_rho", "max_rejections", "workers", "tol", "init"},
    "learner.init": {"strategy", "gain", "surrogate_q", "surrogate_r"},
    "sweep": {"batch_sizes", "horizons", "seeds", "seed_count", "base_seed"},
    "diagnostics": {"checks", "horizons", "batch_sizes", "reps", "k_max", "duality_samples",
                    "duality_horizon", "seed"},
    "output": {"directory", "formats", "record_timing"},
}
MASS_SPRING_KEYS = {"omega", "dt", "process_variance", "measurement_variance",
                    "initial_variance", "A", "H"}
CHECKS = ("epsilon", "truncation", "concentration", "power_bound", "duality", "landscape")
FORMATS = ("csv", "json")

MASS_SPRING_YAML = """\
model:
  preset: mass_spring
  omega: 1.0
  dt: 0.1
  process_variance: 0.1
  measurement_variance: 0.1
  initial_variance: 0.05
noise:
  family: truncated_gaussian
  sigmas: 6.0
learner:
  method: sgd
  step_size: 0.2
  batch_size: 100
  horizon: 50
  max_iters: 500
  seed: 0
  safeguard: reject_and_shrink
  target_rho: 0.995
  max_rejections: 50
  tol: 1.0e-10
  init:
    strategy: surrogate_dare
    surrogate_q: 1.0
    surrogate_r: 25.0
sweep:
  batch_sizes: [1, 10, 100]
  horizons: [50]
  seed_count: 20
  base_seed: 0
diagnostics:
  checks: [epsilon, truncation, concentration, power_bound, duality, landscape]
  horizons: [2, 4, 6, 8, 10, 12]
  batch_sizes: [16, 64, 256]
  reps: 50
  k_max: 50
  duality_samples: 100000
  duality_horizon: 50
  seed: 0
output:
  directory: runs/mass_spring
  formats: [csv, json]
  record_timing: false
"""

PRESETS = {"mass_spring": MASS_SPRING_YAML}


@dataclass(frozen=True)
class InitConfig:
    strategy: InitStrategy = InitStrategy.SURROGATE_DARE
    gain: np.ndarray = None
    surrogate_q: float = 1.0
    surrogate_r: float = 1.0


@dataclass(frozen=True)
class SweepConfig:
    batch_sizes: tuple = (100,)
    horizons: tuple = (50,)
    seeds: tuple = (0,)


@dataclass(frozen=True)
class DiagnosticsConfig:
    checks: tuple = CHECKS
    horizons: tuple = (2, 4, 6, 8, 10, 12)
    batch_sizes: tuple = (16, 64, 256)
    reps: int = 50
    k_max: int = 50
    duality_samples: int = 100000
    duality_horizon: int = 50
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    directory: str = OUT_DIR
    formats: tuple = FORMATS
    record_timing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    model: SystemModel
    noise: NoiseConfig
    sgd: SgdConfig
    method: str = "sgd"
    tol: float = 1e-10
    init: InitConfig = field(default_factory=InitConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    raw: dict = field(default_factory=dict, compare=False)
    source: str = None

    @property
    def config_hash(self):
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, seed=None, out_dir=None, record_timing=None):
        """CLI overrides; they enter `raw` so the hash reflects what actually ran."""
        cfg, raw = self, json.loads(json.dumps(self.raw))
        if seed is not None:
            cfg = replace(cfg, sgd=replace(cfg.sgd, seed=seed),
                          sweep=replace(cfg.sweep, seeds=(seed,)))
            raw.setdefault("learner", {})["seed"] = seed
            raw.setdefault("sweep", {})["seeds"] = [seed]
            raw["sweep"].pop("seed_count", None)
            raw["sweep"].pop("base_seed", None)
        if out_dir is not None:
            cfg = replace(cfg, output=replace(cfg.output, directory=out_dir))
            raw.setdefault("output", {})["directory"] = out_dir
        if record_timing is not None:
            cfg = replace(cfg, output=replace(cfg.output, record_timing=record_timing))
            raw.setdefault("output", {})["record_timing"] = record_timing
        return replace(cfg, raw=raw)


# ==========================================
# 🔍 PARSING HELPERS
# ==========================================

def _key_lines(node, path=(), out=None):
    """Map every key path to its 1-based line in the source."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key_path = path + (str(key_node.value),)
            out[key_path] = key_node.start_mark.line + 1
            _key_lines(value_node, key_path, out)
    return out


class _Reader:
    def __init__(self, source, lines):
        self.source = source
        self.lines = lines

    def fail(self, message, path=()):
        line = None
        while path and line is None:
            line = self.lines.get(tuple(path))
            path = path[:-1]
        raise ConfigError(message, self.source, line)

    def block(self, data, name, path=()):
        full = path + (name,)
        value = data.get(name) if data else None
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(f"'{'.'.join(full)}' must be a mapping", full)
        allowed = SCHEMA[".".join(full)]
        for key in value:
            if key not in allowed:
                self.fail(f"unknown key '{key}' in '{'.'.join(full)}'", full + (str(key),))
        return value

    def get(self, data, key, kind, default, path):
        if key not in data or data[key] is None:
            return default
        value = data[key]
        try:
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError(value)
                return value
            if kind is int and (isinstance(value, bool) or float(value) != int(value)):
                raise TypeError(value)
            return kind(value)
        except (TypeError, ValueError):
            self.fail(f"'{'.'.join(path + (key,))}' must be {kind.__name__}, got {value!r}",
                      path + (key,))

    def get_list(self, data, key, kind, default, path):
        if key not in data or data[key] is None:
            return default
        value = data[key]
        if not isinstance(value, list) or not value:
            self.fail(f"'{'.'.join(path + (key,))}' must be a non-empty list", path + (key,))
        return tuple(self.get({key: v}, key, kind, None, path) for v in value)

    def choice(self, data, key, options, default, path):
        value = self.get(data, key, str, default, path)
        if value is not None and value not in options:
            self.fail(f"'{'.'.join(path + (key,))}' must be one of {sorted(options)}, got {value!r}",
                      path + (key,))
        return value


# ==========================================
# 🧩 BLOCKS
# ==========================================

def _parse_model(reader, data):
    block = reader.block(data, "model")
    path = ("model",)
    if not block:
        reader.fail("missing 'model' block", path)
    preset = reader.choice(block, "preset", {"mass_spring"}, None, path)
    try:
        if preset == "mass_spring":
            stray = set(block) - MASS_SPRING_KEYS - {"preset"}
            if stray:
                key = sorted(stray)[0]
                reader.fail(f"'{key}' is not a mass_spring parameter", path + (key,))
            return mass_spring_model(
                omega=reader.get(block, "omega", float, 1.0, path),
                dt=reader.get(block, "dt", float, 0.1, path),
                process_variance=reader.get(block, "process_variance", float, 0.1, path),
                measurement_variance=reader.get(block, "measurement_variance", float, 0.1, path),
                initial_variance=reader.get(block, "initial_variance", float, 0.05, path),
                A=block.get("A"),
                H=block.get("H"),
            )
        missing = [k for k in ("A", "H", "Q", "R", "P0") if k not in block]
        if missing:
            reader.fail(f"model needs {missing} (or preset: mass_spring)", path)
        return SystemModel(block["A"], block["H"], block["Q"], block["R"], block["P0"],
                           block.get("m0"))
    except ConfigError:
        raise
    except (KalgradError, ValueError, TypeError) as exc:
        reader.fail(f"invalid model: {exc}", path)


def _parse_noise(reader, data, model):
    block = reader.block(data, "noise")
    path = ("noise",)
    family = reader.choice(block, "family", {f.value for f in NoiseFamily},
                           NoiseFamily.TRUNCATED_GAUSSIAN.value, path)
    sigmas = reader.get(block, "sigmas", float, None, path)
    kappa_xi = reader.get(block, "kappa_xi", float, None, path)
    kappa_omega = reader.get(block, "kappa_omega", float, None, path)
    try:
        defaults = NoiseConfig.for_model(model, family, sigmas if sigmas is not None else 6.0)
        return NoiseConfig(
            kappa_xi=kappa_xi if kappa_xi is not None else defaults.kappa_xi,
            kappa_omega=kappa_omega if kappa_omega is not None else defaults.kappa_omega,
            family=family,
        )
    except KalgradError as exc:
        reader.fail(f"invalid noise: {exc}", path)


def _parse_learner(reader, data):
    block = reader.block(data, "learner")
    path = ("learner",)
    method = reader.choice(block, "method", {"sgd", "gd"}, "sgd", path)
    tol = reader.get(block, "tol", float, 1e-10, path)
    try:
        sgd = SgdConfig(
            step_size=reader.get(block, "step_size", float, 1e-3, path),
            batch_size=reader.get(block, "batch_size", int, 100, path),
            horizon=reader.get(block, "horizon", int, 50, path),
            max_iters=reader.get(block, "max_iters", int, 500, path),
            seed=reader.get(block, "seed", int, 0, path),
            safeguard=reader.choice(block, "safeguard", {s.value for s in Safeguard},
                                    Safeguard.REJECT_AND_SHRINK.value, path),
            target_rho=reader.get(block, "target_rho", float, TARGET_RHO, path),
            max_rejections=reader.get(block, "max_rejections", int, 50, path),
            workers=reader.get(block, "workers", int, WORKERS, path),
        )
    except KalgradError as exc:
        reader.fail(f"invalid learner: {exc}", path)

    init_block = reader.block(block, "init", path)
    init_path = path + ("init",)
    gain = init_block.get("gain")
    if gain is not None:
        try:
            gain = np.atleast_2d(np.asarray(gain, dtype=float))
        except (TypeError, ValueError) as exc:
            reader.fail(f"init gain must be a numeric matrix: {exc}", init_path + ("gain",))
        if gain.ndim != 2:
            reader.fail(f"init gain must be a matrix, got {gain.ndim} dimensions",
                        init_path + ("gain",))
    init = InitConfig(
        strategy=InitStrategy(reader.choice(init_block, "strategy", {s.value for s in InitStrategy},
                                            InitStrategy.SURROGATE_DARE.value, init_path)),
        gain=gain,
        surrogate_q=reader.get(init_block, "surrogate_q", float, 1.0, init_path),
        surrogate_r=reader.get(init_block, "surrogate_r", float, 1.0, init_path),
    )
    if init.strategy is InitStrategy.USER and init.gain is None:
        reader.fail("init strategy 'user' needs 'gain'", init_path)
    return method, tol, sgd, init


def _parse_sweep(reader, data, sgd):
    block = reader.block(data, "sweep")
    path = ("sweep",)
    seeds = reader.get_list(block, "seeds", int, None, path)
    if seeds is not None and ("seed_count" in block or "base_seed" in block):
        reader.fail("give either 'seeds' or 'seed_count'/'base_seed', not both", path)
    if seeds is None:
        count = reader.get(block, "seed_count", int, 1, path)
        base = reader.get(block, "base_seed", int, sgd.seed, path)
        if count < 1:
            reader.fail("'sweep.seed_count' must be >= 1", path + ("seed_count",))
        seeds = tuple(range(base, base + count))
    sweep = SweepConfig(
        batch_sizes=reader.get_list(block, "batch_sizes", int, (sgd.batch_size,), path),
        horizons=reader.get_list(block, "horizons", int, (sgd.horizon,), path),
        seeds=seeds,
    )
    for key in ("batch_sizes", "horizons"):
        if min(getattr(sweep, key)) < 1:
            reader.fail(f"'sweep.{key}' entries must be >= 1", path + (key,))
    return sweep


def _parse_diagnostics(reader, data):
    block = reader.block(data, "diagnostics")
    path = ("diagnostics",)
    checks = reader.get_list(block, "checks", str, CHECKS, path)
    for check in checks:
        if check not in CHECKS:
            reader.fail(f"unknown check {check!r}; choose from {list(CHECKS)}", path + ("checks",))
    d = DiagnosticsConfig()
    return DiagnosticsConfig(
        checks=checks,
        horizons=reader.get_list(block, "horizons", int, d.horizons, path),
        batch_sizes=reader.get_list(block, "batch_sizes", int, d.batch_sizes, path),
        reps=reader.get(block, "reps", int, d.reps, path),
        k_max=reader.get(block, "k_max", int, d.k_max, path),
        duality_samples=reader.get(block, "duality_samples", int, d.duality_samples, path),
        duality_horizon=reader.get(block, "duality_horizon", int, d.duality_horizon, path),
        seed=reader.get(block, "seed", int, d.seed, path),
    )


def _parse_output(reader, data):
    block = reader.block(data, "output")
    path = ("output",)
    formats = reader.get_list(block, "formats", str, FORMATS, path)
    for fmt in formats:
        if fmt not in FORMATS:
            reader.fail(f"unknown format {fmt!r}; choose from {list(FORMATS)}", path + ("formats",))
    return OutputConfig(
        directory=reader.get(block, "directory", str, OUT_DIR, path),
        formats=formats,
        record_timing=reader.get(block, "record_timing", bool, False, path),
    )


# ==========================================
# 📂 ENTRY POINTS
# ==========================================

def parse_config(text, source="<string>"):
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None)

    reader = _Reader(source, _key_lines(root))
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source, 1)
    for key in data:
        if key not in SCHEMA:
            reader.fail(f"unknown block '{key}'", (str(key),))

    model = _parse_model(reader, data)
    noise = _parse_noise(reader, data, model)
    method, tol, sgd, init = _parse_learner(reader, data)
    cfg = ExperimentConfig(
        model=model,
        noise=noise,
        sgd=sgd,
        method=method,
        tol=tol,
        init=init,
        sweep=_parse_sweep(reader, data, sgd),
        diagnostics=_parse_diagnostics(reader, data),
        output=_parse_output(reader, data),
        raw=data,
        source=source,
    )
    logger.debug("parsed %s (hash %s)", source, cfg.config_hash[:12])
    return cfg


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return parse_config(PRESETS[name], source=f"preset:{name}")


def load_config(path):
    """A YAML file, or a preset referred to by name (e.g. `mass_spring` or `mass_spring.yml`)."""
    if not os.path.isfile(path):
        stem = os.path.splitext(os.path.basename(path))[0]
        if path.startswith("preset:"):
            return load_preset(path.split(":", 1)[1])
        if stem in PRESETS:
            return load_preset(stem)
        raise ConfigError("config file not found", path)
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), source=path)
