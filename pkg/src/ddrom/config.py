"""Pipeline configuration: one YAML file per run, with built-in benchmark defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .dictionary import DictionarySpec
from .experiment import ExperimentConfig
from .plant import BENCHMARKS, PlantModel, benchmark, benchmark_dictionary, linear_in_dictionary
from .reduction import ReductionConfig
from .synthesis import ReachAvoidProblem

__all__ = ["PipelineConfig", "ConfigError", "default_mapping", "load_config"]


class ConfigError(ValueError):
    pass


_CT10_SCENARIO = {
    "state_box": [[0, 10], [0, 10]], "target_box": [[9, 10], [9, 10]],
    "initial_box": [[0, 1], [0, 1]],
    "obstacle_boxes": [[[4.5, 5.5], [4.5, 5.5]], [[7.5, 10], [0, 1]]],
    "input_box": [[-6, 6], [-6, 6]], "state_cells": [100, 100], "input_cells": [7, 7],
    "horizon": 1000, "sample_time": 0.5, "steps_per_transition": 1,
    "runs": 10, "run_seed": 0, "run_steps": 200,
}

_DT10_SCENARIO = {
    "state_box": [[-10, 10], [-10, 10]], "target_box": [[3.5, 4.5], [-0.5, 0.5]],
    "initial_box": [[-9, -8], [9, 10]],
    "obstacle_boxes": [[[-4, -2], [2, 6]], [[0, 2], [-6, 0]]],
    "input_box": [[-6, 6], [-6, 6]], "state_cells": [100, 100], "input_cells": [7, 7],
    "horizon": 1000, "steps_per_transition": 5,
    "runs": 10, "run_seed": 0, "run_steps": 400,
}

# Hyperparameters reported for the four case studies.
_DEFAULTS = {
    "ct10": {
        "experiment": {"T": 59, "tau": 0.01, "oracle_derivatives": True},
        "reduction": {"nhat": 2, "kappa_hat": 1.0, "mu": 0.5, "gamma": 0.1,
                      "fixed": [[-1e-4, 0], [0, -1e-4]]},
        "verification": {"x_box": [-1, 10], "xhat_box": [0, 10], "uhat_box": [-6, 6]},
        "bound": {"horizon": 20.0},
        "scenario": _CT10_SCENARIO,
    },
    "dt10": {
        "experiment": {"T": 40},
        "reduction": {"nhat": 2, "kappa": 0.5, "mu": 1.0, "eta": 0.99, "gamma": 0.015,
                      "fixed": [[1, -1.5e-5], [-1.5e-5, 1]]},
        "verification": {"x_box": [-10, 10], "xhat_box": [-10, 10], "uhat_box": [-6, 6]},
        "scenario": _DT10_SCENARIO,
    },
    "pendulum_ct": {
        "experiment": {"T": 15, "tau": 0.05, "oracle_derivatives": True},
        "reduction": {"nhat": 2, "kappa_hat": 1.5, "mu": 0.5, "gamma": 0.1,
                      "fixed": [[0.0005, 0.0003], [0.0044, 0.0046]], "anchor_rows": [1, 3]},
        "verification": {"x_box": [-1, 1], "xhat_box": [-1, 1], "uhat_box": [-1, 1]},
        "bound": {"uhat_inf": 1.0, "horizon": 20.0},
    },
    "pendulum_dt": {
        "experiment": {"T": 15},
        "reduction": {"nhat": 2, "kappa": 0.45, "mu": 0.9, "eta": 0.99, "nu": 1.0, "gamma": 0.1,
                      "fixed": [[0.0018, 0.0003], [0.0018, 0.0004]], "anchor_rows": [1, 3],
                      "anchor_scale": 0.1},
        "verification": {"x_box": [-1, 1], "xhat_box": [-1, 1], "uhat_box": [-1, 1]},
    },
}

_SECTIONS = ("benchmark", "plant", "dictionary", "experiment", "reduction", "verification",
             "bound", "scenario", "output")


def default_mapping(benchmark_id: str) -> dict:
    if benchmark_id not in _DEFAULTS:
        raise ConfigError(f"unknown benchmark {benchmark_id!r}; choose from {', '.join(BENCHMARKS)}")
    out = {"benchmark": benchmark_id, "output": f"out/{benchmark_id}"}
    out.update(copy.deepcopy(_DEFAULTS[benchmark_id]))
    out["experiment"].setdefault("seed", 1)
    return out


@dataclass(frozen=True)
class VerificationSettings:
    samples: int = 10_000
    seed: int = 0
    x_box: tuple = (-1.0, 1.0)
    xhat_box: tuple = (-1.0, 1.0)
    uhat_box: tuple = (-1.0, 1.0)


@dataclass(frozen=True)
class BoundSettings:
    uhat_inf: Optional[float] = None    # None: largest input norm of the scenario or verification box
    s0: float = 0.0
    horizon: float = 20.0


@dataclass(frozen=True)
class ScenarioSettings:
    problem: ReachAvoidProblem
    runs: int = 10
    run_seed: int = 0
    run_steps: int = 200


def _pair(v, name):
    if v is None:
        return None
    a = np.asarray(v, float)
    if a.shape != (2,):
        raise ConfigError(f"{name} must be a [lo, hi] pair")
    return tuple(float(x) for x in a)


def _check_keys(section, mapping, allowed):
    extra = set(mapping) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {section}: {', '.join(sorted(extra))}")


@dataclass(frozen=True)
class PipelineConfig:
    mapping: dict = field(repr=False)
    plant: PlantModel = field(repr=False)
    spec: DictionarySpec = field(repr=False)
    experiment: ExperimentConfig = None
    reduction: ReductionConfig = None
    verification: VerificationSettings = VerificationSettings()
    bound: BoundSettings = BoundSettings()
    scenario: Optional[ScenarioSettings] = None
    output: str = "out"
    base_dir: Path = field(default=Path("."), repr=False)

    @property
    def name(self) -> str:
        return self.mapping.get("benchmark") or "custom"

    @property
    def time_kind(self) -> str:
        return self.plant.time_kind

    def _portable(self) -> dict:
        # the output directory does not affect any numeric artifact
        return {k: v for k, v in self.mapping.items() if k != "output"}

    def digest(self) -> str:
        blob = json.dumps(self._portable(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self._portable(), fh, sort_keys=True)

    def nu(self):
        """(nu, inferred): declared in the reduction section, else from the input box."""
        if self.reduction.nu is not None:
            return float(self.reduction.nu), False
        if self.scenario is not None:
            box = self.scenario.problem.input_box
            lo, hi = box[:, 0], box[:, 1]
        else:
            lo, hi = (np.full(self.reduction.nhat, v) for v in self.verification.uhat_box)
        return float(np.sum(np.maximum(lo ** 2, hi ** 2))), True

    def uhat_inf(self):
        """(sup |uhat|, inferred) for the continuous-time bound."""
        if self.bound.uhat_inf is not None:
            return float(self.bound.uhat_inf), False
        return float(np.sqrt(self.nu()[0])), True

    @classmethod
    def from_mapping(cls, mapping: dict, base_dir=".") -> "PipelineConfig":
        mapping = copy.deepcopy(mapping)
        _check_keys("config", mapping, _SECTIONS)
        name = mapping.get("benchmark")
        if name is not None:
            merged = default_mapping(name)
            for key, val in mapping.items():
                if isinstance(val, dict) and isinstance(merged.get(key), dict):
                    merged[key].update(val)
                else:
                    merged[key] = val
            mapping = merged
        plant, spec = _resolve_plant(mapping)
        ex = dict(mapping.get("experiment") or {})
        _check_keys("experiment", ex, ExperimentConfig.__dataclass_fields__)
        if "T" not in ex:
            raise ConfigError("experiment.T is required")
        for k in ("input_bounds", "x0_box"):
            if k in ex:
                ex[k] = _pair(ex[k], k)
        if ex.get("x0") is not None:
            ex["x0"] = tuple(float(v) for v in ex["x0"])
        experiment = ExperimentConfig(**ex)
        rd = dict(mapping.get("reduction") or {})
        _check_keys("reduction", rd, ReductionConfig.__dataclass_fields__)
        if rd.get("anchor_rows") is not None:
            rd["anchor_rows"] = tuple(rd["anchor_rows"])
        reduction = ReductionConfig(**rd)
        if reduction.nhat > spec.state_dim:
            raise ConfigError("reduction.nhat exceeds the state dimension")
        if plant.continuous and reduction.kappa_hat is None:
            raise ConfigError("continuous-time plants need reduction.kappa_hat")
        if not plant.continuous and reduction.kappa is None:
            raise ConfigError("discrete-time plants need reduction.kappa")
        if reduction.fixed is not None:
            want = (reduction.nhat, reduction.nhat) if reduction.equality_mode == "fix_Ahat" \
                else (spec.state_dim, reduction.nhat)
            if reduction.fixed.shape != want:
                raise ConfigError(f"reduction.fixed must be {want[0]}x{want[1]}")
        vf = dict(mapping.get("verification") or {})
        _check_keys("verification", vf, VerificationSettings.__dataclass_fields__)
        for k in ("x_box", "xhat_box", "uhat_box"):
            if k in vf:
                vf[k] = _pair(vf[k], k)
        verification = VerificationSettings(**vf)
        bd = dict(mapping.get("bound") or {})
        _check_keys("bound", bd, BoundSettings.__dataclass_fields__)
        bound = BoundSettings(**bd)
        scenario = None
        sc = mapping.get("scenario")
        if sc:
            sc = dict(sc)
            extras = {k: sc.pop(k) for k in ("runs", "run_seed", "run_steps") if k in sc}
            _check_keys("scenario", sc, ReachAvoidProblem.__dataclass_fields__)
            for k in ("state_cells", "input_cells"):
                if k in sc:
                    sc[k] = tuple(int(v) for v in sc[k])
            if reduction.nhat != 2:
                raise ConfigError("reach-avoid scenarios need a two-dimensional ROM")
            if plant.continuous and sc.get("sample_time") is None:
                raise ConfigError("continuous-time scenarios need scenario.sample_time")
            try:
                problem = ReachAvoidProblem(**sc)
            except ValueError as exc:
                raise ConfigError(f"scenario: {exc}") from exc
            scenario = ScenarioSettings(problem, **extras)
        return cls(mapping, plant, spec, experiment, reduction, verification, bound, scenario,
                   str(mapping.get("output") or "out"), Path(base_dir))

    def with_overrides(self, seed=None, oracle_derivatives=None, output=None, **sections):
        """Flags override config keys; ``sections`` maps section -> {key: value}."""
        m = copy.deepcopy(self.mapping)
        if seed is not None:
            m.setdefault("experiment", {})["seed"] = int(seed)
        if oracle_derivatives:
            m.setdefault("experiment", {})["oracle_derivatives"] = True
        if output is not None:
            m["output"] = str(output)
        for sec, vals in sections.items():
            vals = {k: v for k, v in (vals or {}).items() if v is not None}
            if vals:
                m.setdefault(sec, {}).update(vals)
        return PipelineConfig.from_mapping(m, self.base_dir)


def _resolve_plant(mapping):
    name = mapping.get("benchmark")
    pl = mapping.get("plant")
    if name is not None and pl is not None:
        raise ConfigError("give either benchmark or plant, not both")
    if name is not None:
        plant, spec = benchmark(name), benchmark_dictionary(name)
        if mapping.get("dictionary") is not None:
            raise ConfigError("benchmark configs use the built-in dictionary")
        return plant, spec
    if pl is None:
        raise ConfigError("config needs a benchmark id or a plant section")
    _check_keys("plant", pl, ("time_kind", "A", "B"))
    dic = mapping.get("dictionary")
    if not dic or "state_dim" not in dic:
        raise ConfigError("a custom plant needs dictionary.state_dim (and dictionary.nonlinear)")
    _check_keys("dictionary", dic, ("state_dim", "nonlinear"))
    spec = DictionarySpec.build(int(dic["state_dim"]),
                                [(r["kind"], r["args"]) for r in dic.get("nonlinear") or []])
    A, B = np.atleast_2d(np.asarray(pl["A"], float)), np.atleast_2d(np.asarray(pl["B"], float))
    if A.shape != (spec.state_dim, spec.size) or B.shape[0] != spec.state_dim:
        raise ConfigError(f"plant.A must be {spec.state_dim}x{spec.size} and plant.B must have "
                          f"{spec.state_dim} rows")
    return linear_in_dictionary(pl.get("time_kind", "continuous"), A, B, spec), spec


def load_config(path=None, benchmark_id=None) -> PipelineConfig:
    if path is None:
        if benchmark_id is None:
            raise ConfigError("give --config or a benchmark id")
        return PipelineConfig.from_mapping(default_mapping(benchmark_id))
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    with open(path) as fh:
        mapping = yaml.safe_load(fh) or {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    if benchmark_id is not None:
        mapping.setdefault("benchmark", benchmark_id)
    return PipelineConfig.from_mapping(mapping, path.parent)
