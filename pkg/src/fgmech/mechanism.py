"""Planar mechanism data model: points, rigid bodies, relative coordinates.

A mechanism is described by named points (fixed anchors or mobile points whose
Cartesian coordinates become generalized coordinates), rigid bodies connecting
pairs of points, and optional relative coordinates (currently: the absolute
angle of a link). The module assembles the constant mass matrix, the gravity
load vector and the coordinate bookkeeping shared by every other module.

Conventions:
  - mobile points occupy two consecutive slots (x, y) in declaration order,
    relative coordinates one slot each, appended after all points;
  - gravity acts along -y;
  - masses in kg, lengths in meters, angles in radians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError

GRAVITY_DEFAULT = 9.8  # m/s^2

# Diagonal regularization for relative coordinates that carry no inertia,
# keeping the mass matrix invertible.
MASS_EPSILON = 1e-8  # kg*m^2

INERTIA_UNIFORM_ROD = "uniform-rod"
INERTIA_POINT_MASSES = "point-masses-at-ends"
INERTIA_ROTATIONAL = "rotational-on-relative-coord"
INERTIA_MODELS = (INERTIA_UNIFORM_ROD, INERTIA_POINT_MASSES, INERTIA_ROTATIONAL)


@dataclass(frozen=True)
class PointDef:
    """A named mechanism point; fixed points carry coordinates, mobile ones live in q."""

    id: str
    fixed: bool = False
    xy: tuple[float, float] | None = None

    def __post_init__(self):
        if self.fixed and self.xy is None:
            raise ConfigurationError(f"fixed point {self.id!r} needs coordinates")
        if not self.fixed and self.xy is not None:
            raise ConfigurationError(f"mobile point {self.id!r} must not carry coordinates")
        if self.xy is not None:
            object.__setattr__(self, "xy", (float(self.xy[0]), float(self.xy[1])))


@dataclass(frozen=True)
class BodyDef:
    """A rigid link between two points with a mass distribution model."""

    endpoints: tuple[str, str]
    length: float
    mass: float
    inertia_model: str = INERTIA_UNIFORM_ROD

    def __post_init__(self):
        object.__setattr__(self, "endpoints", (str(self.endpoints[0]), str(self.endpoints[1])))
        if self.length <= 0.0:
            raise ConfigurationError(f"body {self.endpoints}: length must be > 0")
        if self.mass < 0.0:
            raise ConfigurationError(f"body {self.endpoints}: mass must be >= 0")
        if self.inertia_model not in INERTIA_MODELS:
            raise ConfigurationError(f"unknown inertia model {self.inertia_model!r}")


@dataclass(frozen=True)
class RelativeCoordDef:
    """A scalar relative coordinate (absolute link angle) appended to q.

    ``attached_body`` is an index into the mechanism's body list. When that
    body declares ``rotational-on-relative-coord`` inertia, the coordinate
    carries the body's rotational inertia about its fixed pivot
    (``inertia_about_pivot`` overrides the uniform-rod default m*L^2/3).
    """

    id: str
    attached_body: int
    kind: str = "absolute-angle"
    inertia_about_pivot: float | None = None
    applied_torque_slot: bool = False

    def __post_init__(self):
        if self.kind != "absolute-angle":
            raise ConfigurationError(f"unknown relative coordinate kind {self.kind!r}")


@dataclass(frozen=True)
class MechanismDef:
    """Static description of a planar mechanism."""

    points: tuple[PointDef, ...]
    bodies: tuple[BodyDef, ...]
    relative_coords: tuple[RelativeCoordDef, ...] = ()
    dof_idxs: tuple[int, ...] = ()
    extra_constraints: tuple[dict, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "relative_coords", tuple(self.relative_coords))
        object.__setattr__(self, "dof_idxs", tuple(int(i) for i in self.dof_idxs))
        object.__setattr__(
            self, "extra_constraints", tuple(dict(c) for c in self.extra_constraints)
        )
        self._validate()

    def _validate(self):
        ids = [p.id for p in self.points]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate point ids")
        byid = {p.id: p for p in self.points}
        for b in self.bodies:
            for pid in b.endpoints:
                if pid not in byid:
                    raise ConfigurationError(f"body endpoint {pid!r} is not a declared point")
            if b.endpoints[0] == b.endpoints[1]:
                raise ConfigurationError("body endpoints must differ")
        rc_ids = [rc.id for rc in self.relative_coords]
        if len(set(rc_ids)) != len(rc_ids) or set(rc_ids) & set(ids):
            raise ConfigurationError("relative coordinate ids must be unique")
        for rc in self.relative_coords:
            if not 0 <= rc.attached_body < len(self.bodies):
                raise ConfigurationError(f"relative coordinate {rc.id!r}: bad body index")
            body = self.bodies[rc.attached_body]
            if all(byid[pid].fixed for pid in body.endpoints):
                raise ConfigurationError(
                    f"relative coordinate {rc.id!r} is attached to a fully fixed body"
                )
        for bi, b in enumerate(self.bodies):
            if b.inertia_model == INERTIA_ROTATIONAL:
                owners = [rc for rc in self.relative_coords if rc.attached_body == bi]
                if not owners:
                    raise ConfigurationError(
                        "rotational-on-relative-coord body has no relative coordinate"
                    )
                if not any(byid[pid].fixed for pid in b.endpoints):
                    raise ConfigurationError(
                        "rotational inertia needs a fixed pivot endpoint"
                    )

    def point(self, pid: str) -> PointDef:
        for p in self.points:
            if p.id == pid:
                return p
        raise KeyError(pid)


@dataclass(frozen=True)
class CoordinateLayout:
    """Index bookkeeping for the dependent coordinate vector q.

    ``point_slots`` maps mobile point id -> (ix, iy); ``rel_slots`` maps
    relative coordinate id -> index. ``dof_idxs`` selects the independent
    coordinates z inside q; ``m`` is the number of scalar constraints.
    """

    n: int
    m: int
    point_slots: dict[str, tuple[int, int]]
    rel_slots: dict[str, int]
    dof_idxs: tuple[int, ...]

    @property
    def d(self) -> int:
        return len(self.dof_idxs)

    @property
    def f(self) -> int:
        return self.n - self.m

    def __post_init__(self):
        idxs = self.dof_idxs
        if len(set(idxs)) != len(idxs):
            raise ConfigurationError("dof indices must be unique")
        for i in idxs:
            if not 0 <= i < self.n:
                raise ConfigurationError(f"dof index {i} outside [0, {self.n})")


def build_layout(mech: MechanismDef, m: int | None = None) -> CoordinateLayout:
    """Assign q slots: mobile points first (declaration order), then relative coords."""
    point_slots: dict[str, tuple[int, int]] = {}
    k = 0
    for p in mech.points:
        if not p.fixed:
            point_slots[p.id] = (k, k + 1)
            k += 2
    rel_slots = {rc.id: k + i for i, rc in enumerate(mech.relative_coords)}
    n = k + len(mech.relative_coords)
    if m is None:
        from .constraints import count_constraints

        m = count_constraints(mech)
    return CoordinateLayout(
        n=n, m=m, point_slots=point_slots, rel_slots=rel_slots, dof_idxs=mech.dof_idxs
    )


def pack_dofs(q: np.ndarray, layout: CoordinateLayout) -> np.ndarray:
    """Gather the independent coordinates z = q({idxs})."""
    q = np.asarray(q, dtype=float)
    return q[..., list(layout.dof_idxs)]


def scatter_dofs(q: np.ndarray, layout: CoordinateLayout, z: np.ndarray) -> np.ndarray:
    """Write z values into a copy of q at the dof slots."""
    out = np.array(q, dtype=float, copy=True)
    out[..., list(layout.dof_idxs)] = z
    return out


def _body_slot_info(mech: MechanismDef, layout: CoordinateLayout, body: BodyDef):
    """Return ((slots_i, slots_j), (fixed_xy_i, fixed_xy_j)) for a body's endpoints."""
    slots, fixed_xy = [], []
    for pid in body.endpoints:
        p = mech.point(pid)
        if p.fixed:
            slots.append(None)
            fixed_xy.append(np.asarray(p.xy, dtype=float))
        else:
            slots.append(layout.point_slots[pid])
            fixed_xy.append(None)
    return slots, fixed_xy


def assemble_mass_matrix(mech: MechanismDef, layout: CoordinateLayout) -> np.ndarray:
    """Assemble the constant symmetric mass matrix over the layout's coordinates.

    Uniform rods contribute the consistent 4x4 endpoint block (rows/columns of
    fixed endpoints dropped); point-mass bodies lump m/2 on each endpoint;
    rotational bodies put their inertia about the pivot on the attached
    relative coordinate. Relative coordinates left without inertia receive
    ``MASS_EPSILON`` so the matrix stays positive definite; a point coordinate
    with zero inertia is a configuration error.
    """
    n = layout.n
    M = np.zeros((n, n))
    rc_by_body = {rc.attached_body: rc for rc in mech.relative_coords}
    for bi, body in enumerate(mech.bodies):
        slots, _ = _body_slot_info(mech, layout, body)
        if body.inertia_model == INERTIA_ROTATIONAL:
            rc = rc_by_body.get(bi)
            if rc is None:
                raise ConfigurationError("rotational body without relative coordinate")
            inertia = rc.inertia_about_pivot
            if inertia is None:
                inertia = body.mass * body.length**2 / 3.0
            k = layout.rel_slots[rc.id]
            M[k, k] += inertia
            continue
        if body.inertia_model == INERTIA_UNIFORM_ROD:
            diag, off = body.mass / 3.0, body.mass / 6.0
        else:  # point masses at the ends
            diag, off = body.mass / 2.0, 0.0
        si, sj = slots
        for s in (si, sj):
            if s is not None:
                M[s[0], s[0]] += diag
                M[s[1], s[1]] += diag
        if si is not None and sj is not None and off:
            for a, b in ((si[0], sj[0]), (si[1], sj[1])):
                M[a, b] += off
                M[b, a] += off
    for k in layout.rel_slots.values():
        if M[k, k] == 0.0:
            M[k, k] = MASS_EPSILON
    if n and np.linalg.eigvalsh(M).min() <= 0.0:
        raise ConfigurationError(
            "singular mass matrix: some coordinate carries no inertia"
        )
    return M


def assemble_gravity_forces(
    mech: MechanismDef,
    layout: CoordinateLayout,
    g: float,
    q: np.ndarray,
) -> np.ndarray:
    """Consistent nodal gravity loads for gravity ``g`` acting along -y.

    Rod and point-mass bodies put -m*g/2 on each mobile endpoint's y slot;
    rotational bodies put the gravity torque about the pivot,
    -m*g*(L/2)*cos(theta), on the relative coordinate slot. Supports a leading
    batch dimension on ``q``.
    """
    q = np.asarray(q, dtype=float)
    F = np.zeros(q.shape[:-1] + (layout.n,))
    rc_by_body = {rc.attached_body: rc for rc in mech.relative_coords}
    for bi, body in enumerate(mech.bodies):
        if body.mass == 0.0:
            continue
        if body.inertia_model == INERTIA_ROTATIONAL:
            rc = rc_by_body[bi]
            k = layout.rel_slots[rc.id]
            theta = q[..., k]
            F[..., k] += -body.mass * g * (body.length / 2.0) * np.cos(theta)
            continue
        slots, _ = _body_slot_info(mech, layout, body)
        for s in slots:
            if s is not None:
                F[..., s[1]] += -body.mass * g / 2.0
    return F


class MassModel:
    """Constant mass matrix plus the configuration-dependent gravity load."""

    def __init__(self, mech: MechanismDef, layout: CoordinateLayout, g: float = GRAVITY_DEFAULT):
        self.mech = mech
        self.layout = layout
        self.g = float(g)
        self.M = assemble_mass_matrix(mech, layout)
        self.M_inv = np.linalg.inv(self.M)

    def gravity(self, q: np.ndarray) -> np.ndarray:
        return assemble_gravity_forces(self.mech, self.layout, self.g, q)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def mechanism_to_dict(mech: MechanismDef) -> dict:
    """Canonical dictionary form (stable field ordering) of a mechanism."""
    return {
        "points": [
            {"id": p.id, "fixed": p.fixed, "xy": list(p.xy) if p.xy is not None else None}
            for p in mech.points
        ],
        "bodies": [
            {
                "endpoints": list(b.endpoints),
                "length": b.length,
                "mass": b.mass,
                "inertia_model": b.inertia_model,
            }
            for b in mech.bodies
        ],
        "relative_coords": [
            {
                "id": rc.id,
                "kind": rc.kind,
                "attached_body": rc.attached_body,
                "inertia_about_pivot": rc.inertia_about_pivot,
                "applied_torque_slot": rc.applied_torque_slot,
            }
            for rc in mech.relative_coords
        ],
        "dof_idxs": list(mech.dof_idxs),
        "constraints": [dict(c) for c in mech.extra_constraints],
    }


def mechanism_from_dict(data: dict) -> MechanismDef:
    """Parse the canonical dictionary form, with field-level diagnostics."""
    if not isinstance(data, dict):
        raise InputError("mechanism document must be a JSON object")
    for key in ("points", "bodies"):
        if key not in data:
            raise InputError(f"mechanism document is missing the {key!r} section")
    try:
        points = tuple(
            PointDef(
                id=str(p["id"]),
                fixed=bool(p.get("fixed", False)),
                xy=tuple(p["xy"]) if p.get("xy") is not None else None,
            )
            for p in data["points"]
        )
        bodies = tuple(
            BodyDef(
                endpoints=tuple(b["endpoints"]),
                length=float(b["length"]),
                mass=float(b["mass"]),
                inertia_model=str(b.get("inertia_model", INERTIA_UNIFORM_ROD)),
            )
            for b in data["bodies"]
        )
        rel = tuple(
            RelativeCoordDef(
                id=str(r["id"]),
                kind=str(r.get("kind", "absolute-angle")),
                attached_body=int(r["attached_body"]),
                inertia_about_pivot=(
                    float(r["inertia_about_pivot"])
                    if r.get("inertia_about_pivot") is not None
                    else None
                ),
                applied_torque_slot=bool(r.get("applied_torque_slot", False)),
            )
            for r in data.get("relative_coords", ())
        )
        mech = MechanismDef(
            points=points,
            bodies=bodies,
            relative_coords=rel,
            dof_idxs=tuple(int(i) for i in data.get("dof_idxs", ())),
            extra_constraints=tuple(data.get("constraints", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed mechanism document: {exc!r}") from exc
    except ConfigurationError as exc:
        raise InputError(f"invalid mechanism: {exc}") from exc
    return mech


def save_mechanism(mech: MechanismDef, path) -> None:
    with open(path, "w") as fh:
        json.dump(mechanism_to_dict(mech), fh, indent=2)
        fh.write("\n")


def load_mechanism(path) -> MechanismDef:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read mechanism file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    return mechanism_from_dict(data)
