"""Cavity scenarios and the JSON configuration schema.

A configuration document has four sections::

    {
      "scenario": {"kind": "force_driven", "n": 32,
                   "body_force": {"matrix": [[0, 300], [-300, 0]], "offset": [-150, 150]},
                   "boundary_values": {"top": [0, 0]}, "reference": null},
      "model":    {"kind": "bingham", "Bi": 14.142135623730951},
      "solver":   {"algorithm": "fista_star", "gradTol": 1e-6, "stokesTol": 1e-12, ...},
      "output":   {"directory": "out", "window_fraction": 0.001}
    }

plus optional ``compare`` and ``adapt`` sections used by the matching
subcommands. Body forces are affine, ``f(x) = matrix @ x + offset``;
Dirichlet data is constant per side of the unit square.
"""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .constitutive import ConstitutiveModel
from .fem import assemble, load_vector
from .mesh import TAGS, CoarseMesh, FineMesh, build_structured_cavity, refine_midpoints
from .optim import SolverConfig

FLUX_TOL = 1e-10
FORCE_MAGNITUDE = 300.0
FORCE_DRIVEN_BI = 10.0 * math.sqrt(2.0)
LID_DRIVEN_BI = 20.0
# corners belong to the first side listed, so the lid ends take wall data
SIDE_PRIORITY = ("left", "right", "bottom", "top")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


class ScenarioKind(str, enum.Enum):
    FORCE_DRIVEN = "force_driven"
    LID_DRIVEN = "lid_driven"
    CUSTOM = "custom"


@dataclass(frozen=True)
class AffineForce:
    matrix: tuple = ((0.0, 0.0), (0.0, 0.0))
    offset: tuple = (0.0, 0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ np.asarray(self.matrix).T + np.asarray(self.offset)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.matrix) or np.any(self.offset))

    def to_dict(self) -> dict:
        return {"matrix": [list(r) for r in self.matrix], "offset": list(self.offset)}


def rotational_force(magnitude: float = FORCE_MAGNITUDE) -> AffineForce:
    """``magnitude * (x2 - 1/2, 1/2 - x1)``."""
    a = float(magnitude)
    return AffineForce(((0.0, a), (-a, 0.0)), (-0.5 * a, 0.5 * a))


@dataclass(frozen=True, eq=False)
class Scenario:
    kind: ScenarioKind
    n: int
    model: ConstitutiveModel
    body_force: AffineForce
    boundary_values: dict = field(default_factory=dict)
    reference: str | None = None

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def boundary_velocity(self, points: np.ndarray) -> np.ndarray:
        """Dirichlet data at boundary points; sides without data are no-slip."""
        points = np.atleast_2d(points)
        out = np.zeros((len(points), 2))
        assigned = np.zeros(len(points), dtype=bool)
        for side in SIDE_PRIORITY:
            on = _on_side(points, side) & ~assigned
            out[on] = self.boundary_values.get(side, (0.0, 0.0))
            assigned |= on
        return out

    def load(self, fine: FineMesh) -> np.ndarray:
        return load_vector(None if self.body_force.is_zero else self.body_force, fine)

    def meshes(self) -> tuple[CoarseMesh, FineMesh]:
        coarse = build_structured_cavity(self.n)
        return coarse, refine_midpoints(coarse)

    def operators(self, coarse: CoarseMesh, fine: FineMesh | None = None):
        fine = refine_midpoints(coarse) if fine is None else fine
        return assemble(fine, coarse, self.boundary_velocity)

    def net_flux(self, fine: FineMesh | None = None) -> float:
        """Integral of u_D . n over the boundary (exact for the P1 trace)."""
        if fine is None:
            fine = refine_midpoints(build_structured_cavity(self.n))
        edges = fine.boundary_edges
        a, b = fine.vertices[edges[:, 0]], fine.vertices[edges[:, 1]]
        ua, ub = self.boundary_velocity(a), self.boundary_velocity(b)
        t = b - a
        normal = np.column_stack([t[:, 1], -t[:, 0]])  # length-scaled
        mid = 0.5 * (a + b)
        normal *= np.sign(np.einsum("ij,ij->i", normal, mid - 0.5))[:, None]
        return float(np.sum(np.einsum("ij,ij->i", 0.5 * (ua + ub), normal)))

    def to_dict(self) -> dict:
        return {
            "scenario": {
                "kind": self.kind.value, "n": self.n,
                "body_force": self.body_force.to_dict(),
                "boundary_values": {k: list(v) for k, v in sorted(self.boundary_values.items())},
                "reference": self.reference,
            },
            "model": self.model.to_dict(),
        }


def _on_side(points, side):
    x, y = points[:, 0], points[:, 1]
    tol = 1e-12
    return {"left": np.abs(x) <= tol, "right": np.abs(x - 1) <= tol,
            "bottom": np.abs(y) <= tol, "top": np.abs(y - 1) <= tol}[side]


def force_driven(n: int = 32, Bi: float = FORCE_DRIVEN_BI, kind: str = "bingham",
                 r: float = 2.0, magnitude: float = FORCE_MAGNITUDE) -> Scenario:
    return Scenario(ScenarioKind.FORCE_DRIVEN, n, ConstitutiveModel(kind, Bi, r),
                    rotational_force(magnitude), {})


def lid_driven(n: int = 32, Bi: float = LID_DRIVEN_BI, kind: str = "bingham",
               r: float = 2.0) -> Scenario:
    return Scenario(ScenarioKind.LID_DRIVEN, n, ConstitutiveModel(kind, Bi, r),
                    AffineForce(), {"top": (1.0, 0.0)})


SCENARIO_KEYS = {"kind", "n", "body_force", "boundary_values", "reference"}
MODEL_KEYS = {"kind", "Bi", "r"}
SOLVER_KEYS = {"algorithm", "gradTol", "stokesTol", "max_iterations", "restart",
               "primal_mode", "L0", "eta", "rho", "s"}
OUTPUT_KEYS = {"directory", "window_fraction", "vtk"}
COMPARE_KEYS = {"algorithms", "Bi", "n", "scenarios"}
ADAPT_KEYS = {"cycles", "percentile"}
SECTIONS = {"scenario": SCENARIO_KEYS, "model": MODEL_KEYS, "solver": SOLVER_KEYS,
            "output": OUTPUT_KEYS, "compare": COMPARE_KEYS, "adapt": ADAPT_KEYS}

DEFAULT_OUTPUT = {"directory": "out", "window_fraction": 0.001, "vtk": True}
DEFAULT_ADAPT = {"cycles": 3, "percentile": 60.0}
DEFAULT_COMPARE = {"algorithms": ["alg2", "ista_star", "fista_star", "fista_star+restart"],
                   "Bi": [2.0, 20.0], "n": [16, 32], "scenarios": ["lid_driven"]}


def _check_keys(section: str, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(section, "must be an object")
    allowed = SECTIONS[section]
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}", f"unknown field; allowed: {sorted(allowed)}")


def _number(path, value, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return kind(value)


def _vector(path, value, shape):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected numbers of shape {shape}") from None
    if arr.shape != shape or not np.all(np.isfinite(arr)):
        raise ConfigError(path, f"expected finite numbers of shape {shape}, got {value!r}")
    return arr


def scenario_from_dict(doc: dict) -> Scenario:
    """Build a scenario from the ``scenario`` and ``model`` sections."""
    sdoc = doc.get("scenario", {})
    mdoc = doc.get("model", {})
    _check_keys("scenario", sdoc)
    _check_keys("model", mdoc)
    try:
        kind = ScenarioKind(str(sdoc.get("kind", "force_driven")).lower())
    except ValueError:
        raise ConfigError("scenario.kind", f"expected one of {[k.value for k in ScenarioKind]}, "
                          f"got {sdoc.get('kind')!r}") from None
    n = _number("scenario.n", sdoc.get("n", 32), int)
    if n < 1:
        raise ConfigError("scenario.n", f"must be >= 1, got {n}")

    default_bi = LID_DRIVEN_BI if kind is ScenarioKind.LID_DRIVEN else FORCE_DRIVEN_BI
    Bi = _number("model.Bi", mdoc.get("Bi", default_bi))
    r = _number("model.r", mdoc.get("r", 2.0))
    try:
        model = ConstitutiveModel(mdoc.get("kind", "bingham"), Bi, r)
    except ValueError as exc:
        field_name = "model.kind" if "model" in str(exc) else ("model.r" if "exponent" in str(exc)
                                                               else "model.Bi")
        raise ConfigError(field_name, str(exc)) from None

    if "body_force" in sdoc and sdoc["body_force"] is not None:
        bf = sdoc["body_force"]
        if not isinstance(bf, dict) or set(bf) - {"matrix", "offset"}:
            raise ConfigError("scenario.body_force", "expected {'matrix': 2x2, 'offset': 2}")
        mat = _vector("scenario.body_force.matrix", bf.get("matrix", [[0, 0], [0, 0]]), (2, 2))
        off = _vector("scenario.body_force.offset", bf.get("offset", [0, 0]), (2,))
        force = AffineForce(tuple(map(tuple, mat.tolist())), tuple(off.tolist()))
    elif kind is ScenarioKind.FORCE_DRIVEN:
        force = rotational_force()
    else:
        force = AffineForce()

    if "boundary_values" in sdoc and sdoc["boundary_values"] is not None:
        bv_doc = sdoc["boundary_values"]
        if not isinstance(bv_doc, dict):
            raise ConfigError("scenario.boundary_values", "expected an object keyed by side")
        bv = {}
        for side, val in bv_doc.items():
            if side not in TAGS:
                raise ConfigError(f"scenario.boundary_values.{side}",
                                  f"unknown side; expected one of {list(TAGS)}")
            bv[side] = tuple(_vector(f"scenario.boundary_values.{side}", val, (2,)).tolist())
    elif kind is ScenarioKind.LID_DRIVEN:
        bv = {"top": (1.0, 0.0)}
    else:
        bv = {}

    ref = sdoc.get("reference")
    if ref is not None and not isinstance(ref, str):
        raise ConfigError("scenario.reference", "expected a path string or null")
    sc = Scenario(kind, n, model, force, bv, ref)
    flux = sc.net_flux()
    if abs(flux) > FLUX_TOL:
        raise ConfigError("scenario.boundary_values",
                          f"net boundary flux {flux:.3e} violates incompressibility")
    return sc


def build_scenario(source) -> Scenario:
    """Scenario from a config document, a JSON string, or a kind name."""
    if isinstance(source, Scenario):
        return source
    if isinstance(source, str):
        source = json.loads(source) if source.lstrip().startswith("{") else {"scenario": {"kind": source}}
    return scenario_from_dict(source)


def solver_from_dict(doc: dict) -> SolverConfig:
    sdoc = doc.get("solver", {})
    _check_keys("solver", sdoc)
    names = {"gradTol": "grad_tol", "stokesTol": "stokes_tol"}
    kwargs = {}
    for key, val in sdoc.items():
        if key in ("algorithm", "primal_mode"):
            kwargs[key] = val
        elif key == "restart":
            if not isinstance(val, bool):
                raise ConfigError("solver.restart", f"expected true/false, got {val!r}")
            kwargs[key] = val
        else:
            kwargs[names.get(key, key)] = _number(f"solver.{key}", val,
                                                 int if key == "max_iterations" else float)
    if "stokes_tol" not in kwargs and "grad_tol" in kwargs:
        kwargs["stokes_tol"] = min(1e-12, 1e-3 * kwargs["grad_tol"])
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        if msg.startswith("solver."):
            key = msg.split()[0][len("solver."):]
            key = {v: k for k, v in names.items()}.get(key, key)
            raise ConfigError(f"solver.{key}", msg) from None
        culprit = "algorithm" if "algorithm" in msg else "primal_mode"
        raise ConfigError(f"solver.{culprit}", msg) from None


def output_from_dict(doc: dict) -> dict:
    odoc = doc.get("output", {})
    _check_keys("output", odoc)
    out = {**DEFAULT_OUTPUT, **odoc}
    w = _number("output.window_fraction", out["window_fraction"])
    if w <= 0:
        raise ConfigError("output.window_fraction", "must be > 0")
    out["window_fraction"] = w
    return out


def section(doc: dict, name: str, defaults: dict) -> dict:
    sub = doc.get(name, {})
    _check_keys(name, sub)
    return {**defaults, **sub}


def validate(doc: dict) -> None:
    """Check every known section; raise :class:`ConfigError` on the first problem."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    for key in doc:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section; allowed: {sorted(SECTIONS)}")
    scenario_from_dict(doc)
    solver_from_dict(doc)
    output_from_dict(doc)


def scenario_to_json(sc: Scenario) -> str:
    return json.dumps(sc.to_dict(), indent=2, sort_keys=True)


def apply_override(doc: dict, dotted: str, raw: str) -> dict:
    """Return a copy of ``doc`` with ``a.b.c=value`` applied; values parse as JSON."""
    if "." not in dotted:
        raise ConfigError(dotted, "override path must look like section.field")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(doc)
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot descend into a non-object")
    node[parts[-1]] = value
    return out
