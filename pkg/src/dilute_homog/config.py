"""Strict JSON run configuration.

Four blocks (``domain``, ``discretization``, ``study``, ``output``); unknown
keys anywhere are rejected with the dotted path of the offending field.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .domain import FOUR_PI_3, DomainSpec


class ConfigError(ValueError):
    pass


def _check_keys(d, cls, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        where = ", ".join(f"{path}.{k}" if path else k for k in extra)
        raise ConfigError(f"unknown field(s): {where}")


def _build(cls, d, path):
    _check_keys(d, cls, path)
    try:
        obj = cls(**d)
    except TypeError as err:
        raise ConfigError(f"{path}: {err}") from err
    obj.validate(path)
    return obj


def _positive(value, name, path, allow_none=False):
    if value is None and allow_none:
        return
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        raise ConfigError(f"{path}.{name}: must be a positive number (got {value!r})")


@dataclass
class DomainBlock:
    shape: str = "ball"
    radius: float = 1.0
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    lower: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    upper: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    boundary_data: str = "x"
    conductivity: str = "1"
    lambda_bound: float = 0.1
    Lambda_bound: float = 10.0

    def validate(self, path):
        if self.shape not in ("ball", "box"):
            raise ConfigError(f"{path}.shape: must be 'ball' or 'box' (got {self.shape!r})")
        _positive(self.radius, "radius", path)
        for name in ("center", "lower", "upper"):
            v = getattr(self, name)
            if not (isinstance(v, list) and len(v) == 3):
                raise ConfigError(f"{path}.{name}: must be a list of three numbers")
        try:
            self.spec()
        except ValueError as err:
            raise ConfigError(f"{path}: {err}") from err

    def spec(self) -> DomainSpec:
        return DomainSpec(self.shape, self.boundary_data, self.conductivity, float(self.radius),
                          tuple(self.center), tuple(self.lower), tuple(self.upper),
                          float(self.lambda_bound), float(self.Lambda_bound))


@dataclass
class DiscretizationBlock:
    h: float | None = None
    h_over_epsilon: float = 4.0
    tol: float = 1e-10

    def validate(self, path):
        _positive(self.h, "h", path, allow_none=True)
        _positive(self.h_over_epsilon, "h_over_epsilon", path)
        _positive(self.tol, "tol", path)

    def h_for(self, epsilon: float | None) -> float:
        if self.h is not None:
            return float(self.h)
        if epsilon is None:
            raise ConfigError("discretization.h is required for this command")
        return float(epsilon) / float(self.h_over_epsilon)


@dataclass
class EpsilonRule:
    """``kind="sqrt"``: eps = coefficient * beta^(1/2).
    ``kind="target_radius"``: N = max(1, round(beta |Omega| / (4π/3 eps0^3))), then eps
    solves the volume fraction exactly."""

    kind: str = "sqrt"
    coefficient: float = 0.3
    epsilon0: float = 0.125

    def validate(self, path):
        if self.kind not in ("sqrt", "target_radius"):
            raise ConfigError(f"{path}.kind: must be 'sqrt' or 'target_radius'")
        _positive(self.coefficient, "coefficient", path)
        _positive(self.epsilon0, "epsilon0", path)

    def rule(self, domain: DomainSpec):
        if self.kind == "sqrt":
            return lambda bb: self.coefficient * math.sqrt(bb)

        def target(bb):
            n = max(1, round(bb * domain.volume / (FOUR_PI_3 * self.epsilon0**3)))
            return (bb * domain.volume / (FOUR_PI_3 * n)) ** (1.0 / 3.0)
        return target


@dataclass
class StudyBlock:
    seed: int = 0
    epsilon: float | None = None
    n: int | None = None
    beta_bar: float | None = None
    centers: list | None = None
    eta: list | None = None
    eta2: list | None = None
    epsilons: list | None = None
    separations: list | None = None
    deltas: list | None = None
    order: int = 2
    pair_cutoff: float | None = None
    max_pairs: int = 200
    sample_pairs: int = 500
    derivative_orders: list = field(default_factory=lambda: [0, 1, 2])
    n_sources: int = 4
    min_sep: float | None = None
    margin: float | None = None
    beta_bars: list | None = None
    samples: int = 200
    epsilon_rule: EpsilonRule = field(default_factory=EpsilonRule)

    def validate(self, path):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"{path}.seed: must be an integer")
        for name in ("epsilon", "beta_bar", "pair_cutoff", "min_sep", "margin"):
            _positive(getattr(self, name), name, path, allow_none=True)
        if self.n is not None and (not isinstance(self.n, int) or self.n < 0):
            raise ConfigError(f"{path}.n: must be a non-negative integer")
        if self.order not in (0, 1, 2):
            raise ConfigError(f"{path}.order: must be 0, 1 or 2")
        if not isinstance(self.samples, int) or self.samples < 2:
            raise ConfigError(f"{path}.samples: must be an integer >= 2")
        for name in ("epsilons", "separations", "deltas", "beta_bars"):
            v = getattr(self, name)
            if v is not None:
                if not isinstance(v, list) or not v:
                    raise ConfigError(f"{path}.{name}: must be a non-empty list")
                for i, x in enumerate(v):
                    _positive(x, f"{name}[{i}]", path)
        if any(o not in (0, 1, 2) for o in self.derivative_orders):
            raise ConfigError(f"{path}.derivative_orders: entries must be 0, 1 or 2")
        for name in ("eta", "eta2"):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, list) and len(v) == 3):
                raise ConfigError(f"{path}.{name}: must be a list of three numbers")
        if self.centers is not None:
            for i, c in enumerate(self.centers):
                if not (isinstance(c, list) and len(c) == 3):
                    raise ConfigError(f"{path}.centers[{i}]: must be a list of three numbers")


@dataclass
class OutputBlock:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["json", "csv"])

    def validate(self, path):
        bad = [f for f in self.formats if f not in ("json", "csv", "text")]
        if bad:
            raise ConfigError(f"{path}.formats: unknown format(s) {bad}")


@dataclass
class RunConfig:
    domain: DomainBlock = field(default_factory=DomainBlock)
    discretization: DiscretizationBlock = field(default_factory=DiscretizationBlock)
    study: StudyBlock = field(default_factory=StudyBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, cls, "")
        study = d.get("study", {})
        if not isinstance(study, dict):
            raise ConfigError("study: expected an object")
        study = dict(study)
        rule = study.pop("epsilon_rule", {})
        _check_keys(study, StudyBlock, "study")
        rule_obj = _build(EpsilonRule, rule, "study.epsilon_rule")
        try:
            sb = StudyBlock(**study, epsilon_rule=rule_obj)
        except TypeError as err:
            raise ConfigError(f"study: {err}") from err
        sb.validate("study")
        return cls(_build(DomainBlock, d.get("domain", {}), "domain"),
                   _build(DiscretizationBlock, d.get("discretization", {}), "discretization"),
                   sb,
                   _build(OutputBlock, d.get("output", {}), "output"))

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
