"""Experiment configuration: YAML sections mapped onto typed dataclasses.

The file format is YAML restricted to scalars, flat arrays, and one level of
nested sections per the grammar documented in the README. Unknown keys are
rejected so typos fail loudly; every validation error carries the dotted path
of the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import SPLIT_MODES, TASKS
from .errors import ConfigError, ParseError
from .problems import MODEL_KINDS
from .hypergrad import METHOD_KINDS
from .strategies import OPTIMIZER_KINDS, STRATEGY_KINDS


@dataclass(frozen=True)
class SyntheticSection:
    n: int = 100
    d: int = 5
    noise_sigma: float = 0.1
    beta_seed: int = 0
    seed: int = 0
    classes: int = 0


@dataclass(frozen=True)
class CorruptSection:
    p: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # "synthetic" or a libsvm file path
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    task: str | None = None  # optional libsvm task override
    corrupt: CorruptSection | None = None
    test_fraction: float = 0.0
    test_seed: int = 0


@dataclass(frozen=True)
class SplitSection:
    U: int = 5
    gamma: float = 0.25
    mode: str = "without_replacement"
    master_seed: int = 0


@dataclass(frozen=True)
class ProblemSection:
    kind: str = "ridge"
    smoothing_delta: float = 1e-6
    num_classes: int = 0


@dataclass(frozen=True)
class MethodSection:
    kind: str = "ITD"
    K: int = 50
    alpha_in: float = 0.1
    Z: int = 0
    h: int = 0
    fp_step: float = 0.0


@dataclass(frozen=True)
class OuterSection:
    kind: str = "gd"
    alpha_out: float = 0.1


@dataclass(frozen=True)
class StrategySection:
    kind: str = "single"
    T: int = 50
    outer: OuterSection = field(default_factory=OuterSection)
    alpha_deploy: float = 0.0
    lambda0: Any = None  # scalar broadcast or list of raw coordinates
    theta0: Any = 0.0
    warm_start: bool = False


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"
    formats: tuple[str, ...] = ("csv", "json")


@dataclass(frozen=True)
class BiasvarSection:
    grid: Any = "0.3:3:50"  # "lo:hi:count" or explicit list (effective scale)
    R: int = 100
    U: int = 1
    ref_K: int = 2000
    estimator: str = "method"  # "method" or "oracle"


@dataclass(frozen=True)
class CleanSection:
    threshold: float = 0.5
    retrain_K: int = 500
    retrain_alpha: float = 0.5
    baseline_raw_lambda: float = -12.0


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    method: MethodSection = field(default_factory=MethodSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    output: OutputSection = field(default_factory=OutputSection)
    biasvar: BiasvarSection = field(default_factory=BiasvarSection)
    clean: CleanSection = field(default_factory=CleanSection)


_SECTION_TYPES = {
    "synthetic": SyntheticSection,
    "corrupt": CorruptSection,
    "data": DataSection,
    "split": SplitSection,
    "problem": ProblemSection,
    "method": MethodSection,
    "outer": OuterSection,
    "strategy": StrategySection,
    "output": OutputSection,
    "biasvar": BiasvarSection,
    "clean": CleanSection,
}


def _coerce(cls, raw: dict, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section must be a mapping, got {type(raw).__name__}", field_path=path)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", field_path=f"{path}.{key}" if path else key)
        sub = f"{path}.{key}" if path else key
        target = known[key].type
        if key in _SECTION_TYPES and isinstance(value, dict):
            kwargs[key] = _coerce(_SECTION_TYPES[key], value, sub)
        elif key in _SECTION_TYPES and value is None:
            kwargs[key] = None
        elif isinstance(value, list):
            kwargs[key] = tuple(value) if key == "formats" else list(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), field_path=path) from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping", field_path="")
    return _coerce(ExperimentConfig, raw, "")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", field_path="") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ParseError(f"invalid YAML: {exc}", line=line) from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg) -> dict:
    """Plain-scalar dict echo of a config (tuples as lists), reparseable."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        elif isinstance(v, np.generic):
            out[f.name] = v.item()
        else:
            out[f.name] = v
    return out


def parse_grid(spec: Any) -> list[float]:
    """Either an explicit list or 'lo:hi:count' (inclusive linear spacing)."""
    if isinstance(spec, (list, tuple)):
        grid = [float(x) for x in spec]
    elif isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(
                f"grid must be 'lo:hi:count' or a list, got {spec!r}",
                field_path="biasvar.grid",
            )
        try:
            lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ConfigError(f"bad grid spec {spec!r}", field_path="biasvar.grid") from exc
        if count < 1 or hi < lo:
            raise ConfigError(f"bad grid range {spec!r}", field_path="biasvar.grid")
        grid = [float(x) for x in np.linspace(lo, hi, count)]
    else:
        raise ConfigError("grid must be a string or list", field_path="biasvar.grid")
    if not grid:
        raise ConfigError("grid is empty", field_path="biasvar.grid")
    return grid


def _require(cond: bool, message: str, path: str) -> None:
    if not cond:
        raise ConfigError(message, field_path=path)


def validate_config(cfg: ExperimentConfig, command: str = "tune") -> None:
    """Range/consistency validation; raises ConfigError naming the field path."""
    d = cfg.data
    _require(isinstance(d.source, str) and d.source != "", "source must be a non-empty string", "data.source")
    if d.source == "synthetic":
        s = d.synthetic
        _require(int(s.n) >= 2, "synthetic.n must be >= 2", "data.synthetic.n")
        _require(int(s.d) >= 1, "synthetic.d must be >= 1", "data.synthetic.d")
        _require(float(s.noise_sigma) >= 0, "noise_sigma must be >= 0", "data.synthetic.noise_sigma")
        _require(int(s.classes) >= 0, "classes must be >= 0", "data.synthetic.classes")
    if d.task is not None:
        _require(d.task in TASKS, f"task must be one of {TASKS}", "data.task")
    if d.corrupt is not None:
        _require(0.0 <= float(d.corrupt.p) <= 1.0, "corrupt.p must be in [0, 1]", "data.corrupt.p")
    _require(0.0 <= float(d.test_fraction) < 1.0, "test_fraction must be in [0, 1)", "data.test_fraction")

    sp = cfg.split
    _require(int(sp.U) >= 1, "U must be >= 1", "split.U")
    _require(float(sp.gamma) > 0, "gamma must be > 0", "split.gamma")
    _require(sp.mode in SPLIT_MODES, f"mode must be one of {SPLIT_MODES}", "split.mode")
    _require(int(sp.master_seed) >= 0, "master_seed must be a u64", "split.master_seed")

    pr = cfg.problem
    _require(pr.kind in MODEL_KINDS, f"kind must be one of {MODEL_KINDS}", "problem.kind")
    if pr.kind in ("lasso_smooth", "elastic_net"):
        _require(float(pr.smoothing_delta) > 0, "smoothing_delta must be > 0", "problem.smoothing_delta")
    if pr.kind in ("softmax_l2", "hyperclean_softmax"):
        _require(int(pr.num_classes) >= 2, "num_classes must be >= 2", "problem.num_classes")

    me = cfg.method
    _require(me.kind in METHOD_KINDS, f"kind must be one of {METHOD_KINDS}", "method.kind")
    _require(int(me.K) >= 0, "K must be >= 0", "method.K")
    _require(float(me.alpha_in) > 0, "alpha_in must be > 0", "method.alpha_in")
    if me.kind == "TRHG":
        _require(1 <= int(me.h) <= int(me.K), "TRHG requires 1 <= h <= K", "method.h")
    if me.kind in ("AID_FP", "AID_CG"):
        _require(int(me.Z) >= 1, "AID requires Z >= 1", "method.Z")
        _require(
            pr.kind != "svm_sqhinge",
            "AID is not offered for svm_sqhinge (discontinuous Hessian)",
            "method.kind",
        )
    if me.kind == "AID_FP" and me.fp_step:
        _require(float(me.fp_step) > 0, "fp_step must be > 0 when set", "method.fp_step")

    st = cfg.strategy
    _require(st.kind in STRATEGY_KINDS, f"kind must be one of {STRATEGY_KINDS}", "strategy.kind")
    _require(int(st.T) >= 1, "T must be >= 1", "strategy.T")
    _require(st.outer.kind in OPTIMIZER_KINDS, f"kind must be one of {OPTIMIZER_KINDS}", "strategy.outer.kind")
    _require(float(st.outer.alpha_out) > 0, "alpha_out must be > 0", "strategy.outer.alpha_out")
    if st.kind == "oehg":
        _require(float(st.alpha_deploy) > 0, "oehg requires alpha_deploy > 0", "strategy.alpha_deploy")
    if st.lambda0 is not None and not isinstance(st.lambda0, (int, float, list)):
        raise ConfigError("lambda0 must be a number or list", field_path="strategy.lambda0")
    if not isinstance(st.theta0, (int, float, list)):
        raise ConfigError("theta0 must be a number or list", field_path="strategy.theta0")

    ou = cfg.output
    _require(isinstance(ou.dir, str) and ou.dir != "", "dir must be a non-empty string", "output.dir")
    for f in ou.formats:
        _require(f in ("csv", "json"), "formats entries must be 'csv' or 'json'", "output.formats")

    if command == "biasvar":
        bv = cfg.biasvar
        _require(int(bv.R) >= 2, "R must be >= 2", "biasvar.R")
        _require(int(bv.U) >= 1, "U must be >= 1", "biasvar.U")
        _require(int(bv.ref_K) >= 1, "ref_K must be >= 1", "biasvar.ref_K")
        _require(bv.estimator in ("method", "oracle"), "estimator must be 'method' or 'oracle'", "biasvar.estimator")
        parse_grid(bv.grid)
        _require(
            cfg.data.source == "synthetic",
            "biasvar needs the synthetic generator (replicated datasets)",
            "data.source",
        )
        _require(
            pr.kind in ("ridge", "lasso_smooth", "elastic_net", "ridge_per_param"),
            "biasvar supports the regression models (ridge has the exact oracle)",
            "problem.kind",
        )
    if command == "clean":
        _require(pr.kind == "hyperclean_softmax", "clean requires problem.kind = hyperclean_softmax", "problem.kind")
        _require(int(sp.U) == 1, "clean uses a single fixed split (U = 1)", "split.U")
        cl = cfg.clean
        _require(0.0 < float(cl.threshold) < 1.0, "threshold must be in (0, 1)", "clean.threshold")
        _require(int(cl.retrain_K) >= 1, "retrain_K must be >= 1", "clean.retrain_K")
        _require(float(cl.retrain_alpha) > 0, "retrain_alpha must be > 0", "clean.retrain_alpha")
        if d.source == "synthetic":
            _require(int(d.synthetic.classes) >= 2, "clean needs synthetic.classes >= 2", "data.synthetic.classes")
