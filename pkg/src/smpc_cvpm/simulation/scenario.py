"""Scenario files: JSON with explicit units, validated against a versioned schema.

Lateral coordinate convention: ``d = 0`` is the centre of the rightmost
lane and lane ``i`` is centred at ``i * lane_width``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import List, Optional, Union

import jsonschema
import numpy as np

from ..planners import PlannerConfig
from ..safe_sets import Geometry
from ..uncertainty import TruncatedGaussian
from ..vehicle_models import ActuatorBox, EgoState, ObstacleModel, ObstacleState

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Scenario file failed validation; ``fields`` names the offending entries."""

    def __init__(self, message: str, fields=()):
        super().__init__(message)
        self.fields = list(fields)


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("scenario.schema.json").read_text())


@dataclass(frozen=True)
class Road:
    lanes: int = 3
    lane_width: float = 3.5
    # (s_start, curvature) pairs sorted by s_start; piecewise constant
    curvature: tuple = ((0.0, 0.0),)

    @property
    def edges(self):
        return -0.5 * self.lane_width, (self.lanes - 0.5) * self.lane_width

    def lane_centre(self, i: int) -> float:
        return i * self.lane_width

    def curvature_at(self, s: float) -> float:
        k = self.curvature[0][1]
        for s0, kappa in self.curvature:
            if s >= s0:
                k = kappa
        return k


@dataclass
class ObstacleSpec:
    id: str
    init: ObstacleState
    model: ObstacleModel
    behavior: str = "model"
    seed: int = 0
    states: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None


@dataclass
class Scenario:
    id: str
    T: float
    N_sim: int
    road: Road
    ego_init: EgoState
    ego_ref: EgoState
    planner: PlannerConfig
    obstacles: List[ObstacleSpec] = field(default_factory=list)
    description: str = ""

    @property
    def anticipated(self) -> bool:
        """True when every obstacle follows its own prediction model."""
        return all(o.behavior == "model" for o in self.obstacles)

    @property
    def geometry(self) -> Geometry:
        return self.planner.geometry

    def config_at(self, s: float) -> PlannerConfig:
        kappa = self.road.curvature_at(s)
        return self.planner if kappa == self.planner.curvature else replace(self.planner, curvature=kappa)


def _diag(vals, n):
    v = np.asarray(vals, dtype=float)
    return np.diag(v) if v.ndim == 1 else v.reshape(n, n)


def _tg(spec, n):
    if spec is None:
        return None
    std = np.broadcast_to(np.asarray(spec.get("std", 0.0), dtype=float), (n,))
    bound = np.broadcast_to(np.asarray(spec.get("bound", np.inf), dtype=float), (n,))
    return TruncatedGaussian(np.zeros(n), np.diag(std ** 2), -bound, bound)


def _ego(d) -> EgoState:
    return EgoState(float(d.get("s", 0.0)), float(d.get("d", 0.0)), float(d.get("phi", 0.0)),
                    float(d.get("v", 0.0)))


def _obs_state(d) -> ObstacleState:
    return ObstacleState(float(d.get("s", 0.0)), float(d.get("vs", 0.0)), float(d.get("d", 0.0)),
                         float(d.get("vd", 0.0)))


def _semantic_checks(doc: dict):
    errors = []
    N_sim = doc["N_sim"]
    road = doc.get("road", {})
    lane_width = road.get("lane_width", 3.5)
    ego = doc.get("ego", {})
    if ego.get("width", 1.8) >= lane_width:
        errors.append(("ego.width", "ego width must be smaller than the lane width"))
    seen = set()
    for i, ob in enumerate(doc.get("obstacles", [])):
        oid = ob["id"]
        if oid in seen:
            errors.append((f"obstacles[{i}].id", f"duplicate obstacle id {oid!r}"))
        seen.add(oid)
        if ob.get("model", {}).get("width", 1.8) >= lane_width:
            errors.append((f"obstacles[{i}].model.width", f"obstacle {oid!r} wider than a lane"))
        beh = ob["behavior"]
        if beh["type"] == "recorded" and len(beh["states"]) != N_sim + 1:
            errors.append((f"obstacles[{i}].behavior.states",
                           f"obstacle {oid!r}: recorded list has {len(beh['states'])} entries, "
                           f"expected N_sim+1 = {N_sim + 1}"))
        if beh["type"] == "scripted" and len(beh["inputs"]) != N_sim:
            errors.append((f"obstacles[{i}].behavior.inputs",
                           f"obstacle {oid!r}: scripted list has {len(beh['inputs'])} entries, "
                           f"expected N_sim = {N_sim}"))
    pl = doc.get("planner", {})
    if pl.get("a_min", -8.0) >= pl.get("a_max", 3.0):
        errors.append(("planner.a_min", "a_min must be below a_max"))
    if pl.get("delta_min", -0.4) >= pl.get("delta_max", 0.4):
        errors.append(("planner.delta_min", "delta_min must be below delta_max"))
    return errors


def parse_scenario(doc: dict, source: str = "<dict>") -> Scenario:
    """Validate a decoded scenario document and build the ``Scenario``."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errs = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errs:
        fields = [".".join(str(p) for p in e.absolute_path) or "<root>" for e in errs]
        msgs = [f"{f}: {e.message}" for f, e in zip(fields, errs)]
        raise ScenarioError(f"{source}: schema violation\n  " + "\n  ".join(msgs), fields)
    sem = _semantic_checks(doc)
    if sem:
        raise ScenarioError(f"{source}: invalid scenario\n  " + "\n  ".join(f"{f}: {m}" for f, m in sem),
                            [f for f, _ in sem])

    T = float(doc["T"])
    rd = doc.get("road", {})
    curv = tuple(sorted((float(c["s_start"]), float(c["kappa"])) for c in rd.get("curvature", [])))
    road = Road(int(rd.get("lanes", 3)), float(rd.get("lane_width", 3.5)), curv or ((0.0, 0.0),))
    ego = doc.get("ego", {})
    ego_init = _ego(ego.get("init", {}))
    ego_ref = _ego(ego.get("ref", {"v": ego_init.v}))
    pl = doc.get("planner", {})
    geom = Geometry(float(ego.get("length", 4.5)), float(ego.get("width", 1.8)),
                    float(pl.get("margin", 0.5)), float(pl.get("consider_range", 80.0)))
    box = ActuatorBox(float(pl.get("a_min", -8.0)), float(pl.get("a_max", 3.0)),
                      float(pl.get("delta_min", -0.4)), float(pl.get("delta_max", 0.4)))
    lo, hi = road.edges
    cfg = PlannerConfig(
        N=int(pl.get("N", 15)), T=T,
        Q=_diag(pl.get("Q", [0.0, 0.1, 1.0, 0.05]), 4),
        R=_diag(pl.get("R", [0.05, 1.0]), 2),
        P=None if pl.get("P") is None else _diag(pl["P"], 4),
        beta=float(pl.get("beta", 0.9)), xi_ref=ego_ref, box=box,
        road_min=lo, road_max=hi, v_max=float(pl.get("v_max", 40.0)), geometry=geom,
        curvature=road.curvature_at(ego_init.s), wheelbase=float(ego.get("wheelbase", 2.9)))

    obstacles = []
    for ob in doc.get("obstacles", []):
        init = _obs_state(ob["init"])
        m = ob.get("model", {})
        ref = _obs_state(m["ref"]) if "ref" in m else ObstacleState(0.0, init.vs_do, init.d_do, 0.0)
        model = ObstacleModel.build(
            T, ref, q=m.get("q", (0.0, 0.5, 0.5, 0.5)), r=m.get("r", (1.0, 1.0)),
            u_min=m.get("u_min", (-3.0, -1.5)), u_max=m.get("u_max", (2.0, 1.5)),
            length=float(m.get("length", 4.5)), width=float(m.get("width", 1.8)),
            w=_tg(m.get("w", {"std": [0.2, 0.05], "bound": [0.4, 0.1]}), 2),
            v=_tg(m.get("v", {"std": [0.02, 0.02, 0.01, 0.01], "bound": [0.05, 0.05, 0.02, 0.02]}), 4))
        beh = ob["behavior"]
        spec = ObstacleSpec(str(ob["id"]), init, model, beh["type"], int(beh.get("seed", 0)))
        if beh["type"] == "recorded":
            spec.states = np.asarray(beh["states"], dtype=float)
        elif beh["type"] == "scripted":
            spec.inputs = np.asarray(beh["inputs"], dtype=float)
        obstacles.append(spec)
    return Scenario(str(doc["id"]), T, int(doc["N_sim"]), road, ego_init, ego_ref, cfg, obstacles,
                    str(doc.get("description", "")))


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read and validate a scenario file; raises ``ScenarioError`` naming the path and fields."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario ({exc.strerror or exc})", ["<file>"]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})", ["<file>"]) from exc
    return parse_scenario(doc, str(path))


def bundled_scenarios() -> List[Path]:
    """Paths of the scenario files shipped with the package."""
    root = resources.files("smpc_cvpm").joinpath("scenarios")
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def bundled(name: str) -> Path:
    for p in bundled_scenarios():
        if p.stem == name:
            return p
    raise FileNotFoundError(f"no bundled scenario named {name!r}")
