"""Pipeline configuration: defaults, file loading (JSON or YAML) and range checks."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .alignment import LMParams, ResidualWeights
from .contact_graph import GraphParams
from .matching import MatchWeights
from .validation import ValidationParams


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    scene: str | None = None
    cad_db: str | None = None
    out: str | None = None
    seed: int = 0
    top_k: int = 10
    jobs: int = 1
    # thresholds
    a_th: float = -0.9
    b_th: float = 0.5
    plane_inlier_tol: float = 0.01
    penetration_tol: float = 0.01
    # matching / alignment weights
    w_size: float = 1.0
    w_planes: float = 1.0
    w_bias: float = 0.2
    sigma_b: tuple[float, float] = (1.0, 1.0)
    sigma_p: tuple[float, float] = (1.0, 1.0)
    area_mode: str = "containment"
    # solver budgets
    lm_max_iter: int = 100
    csp_max_steps: int = 1000
    csp_restarts: int = 5
    # outputs
    dump_matching: bool = False
    trace_lm: bool = False
    urdf_compat: bool = False
    joint_table: dict | None = field(default=None)

    def __post_init__(self):
        self.sigma_b = tuple(float(v) for v in self.sigma_b)
        self.sigma_p = tuple(float(v) for v in self.sigma_p)
        self.validate()

    def validate(self) -> None:
        checks = [
            (-1.0 <= self.a_th <= 0.0, "a_th must lie in [-1, 0]"),
            (0.0 < self.b_th <= 1.0, "b_th must lie in (0, 1]"),
            (self.plane_inlier_tol > 0, "plane_inlier_tol must be positive"),
            (self.penetration_tol >= 0, "penetration_tol must be non-negative"),
            (min(self.w_size, self.w_planes, self.w_bias) >= 0, "matching weights must be non-negative"),
            (len(self.sigma_b) == 2 and len(self.sigma_p) == 2, "sigma_b and sigma_p need two entries"),
            (min(self.sigma_b + self.sigma_p) >= 0, "sigma weights must be non-negative"),
            (self.area_mode in ("containment", "symmetric"), "area_mode must be containment or symmetric"),
            (self.top_k >= 1, "top_k must be at least 1"),
            (self.jobs >= 1, "jobs must be at least 1"),
            (self.lm_max_iter >= 1 and self.csp_max_steps >= 1 and self.csp_restarts >= 1,
             "solver budgets must be at least 1"),
            (isinstance(self.seed, int), "seed must be an integer"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    # -- conversions ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sigma_b"] = list(self.sigma_b)
        d["sigma_p"] = list(self.sigma_p)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        data = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
        return cls.from_dict(data or {})

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    # -- stage parameters -------------------------------------------------

    def graph_params(self) -> GraphParams:
        return GraphParams(a_th=self.a_th, b_th=self.b_th, plane_inlier_tol=self.plane_inlier_tol)

    def match_weights(self) -> MatchWeights:
        return MatchWeights(self.w_size, self.w_planes, self.w_bias)

    def residual_weights(self) -> ResidualWeights:
        return ResidualWeights(self.sigma_b, self.sigma_p, self.area_mode)

    def lm_params(self) -> LMParams:
        return LMParams(max_iter=self.lm_max_iter)

    def validation_params(self) -> ValidationParams:
        return ValidationParams(b_th=self.b_th, a_th=self.a_th, penetration_tol=self.penetration_tol,
                                plane_inlier_tol=self.plane_inlier_tol, max_steps=self.csp_max_steps,
                                restarts=self.csp_restarts, seed=self.seed)
