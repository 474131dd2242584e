"""Signed-distance shapes, velocity fields, and the benchmark case catalog."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DELTA",
    "Sphere",
    "Box",
    "sdf",
    "VelocityField",
    "ConstantVelocity",
    "LinearVelocity",
    "RotationVelocity",
    "NormalVelocity",
    "CompositeVelocity",
    "PiecewiseVelocity",
    "TestCase",
    "ShapeVanished",
    "CASES",
    "get_case",
    "case_names",
    "exact_solution",
    "dirichlet_evaluator",
    "velocity_eval",
    "rotation_z",
    "custom_case",
    "shapes_from_spec",
    "velocity_from_text",
]

DELTA = 1e-12


class ShapeVanished(ValueError):
    pass


# -- shapes ----------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def distance(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def with_radius(self, r: float) -> "Sphere":
        return Sphere(self.center, r)

    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius ** 3


@dataclass(frozen=True)
class Box:
    """Axis-aligned cube ``max_i |x_i - c_i| <= r``."""

    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("half-width must be positive")

    def distance(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(np.asarray(x, dtype=float) - np.asarray(self.center)) - self.radius
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def with_radius(self, r: float) -> "Box":
        return Box(self.center, r)

    def volume(self) -> float:
        return (2.0 * self.radius) ** 3


Shape = Sphere | Box


def sdf(shape: Shape, x: np.ndarray) -> np.ndarray:
    """Signed distance, positive outside and negative inside."""
    return shape.distance(x)


def rotation_z(theta: float) -> np.ndarray:
    """Counter-clockwise rotation by ``theta`` about the x3-axis."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- velocity fields -------------------------------------------------------

def _unit(grad: np.ndarray, delta: float) -> np.ndarray:
    g = np.asarray(grad, dtype=float)
    return g / np.sqrt(np.einsum("...i,...i->...", g, g) + delta * delta)[..., None]


class VelocityField:
    """``v(x, t, grad u)`` evaluated row-wise on point arrays."""

    needs_gradient: bool = False

    def __call__(self, x, t, grad=None, delta=DELTA) -> np.ndarray:
        raise NotImplementedError

    def pieces(self) -> list[tuple[float, float, "VelocityField"]]:
        return [(-np.inf, np.inf, self)]


@dataclass(frozen=True)
class ConstantVelocity(VelocityField):
    value: tuple[float, float, float]

    def __call__(self, x, t, grad=None, delta=DELTA):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.value, dtype=float), x.shape).copy()


@dataclass(frozen=True)
class LinearVelocity(VelocityField):
    """``v(x) = A x + b``."""

    matrix: np.ndarray
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __call__(self, x, t, grad=None, delta=DELTA):
        x = np.asarray(x, dtype=float)
        return x @ np.asarray(self.matrix).T + np.asarray(self.offset)


def RotationVelocity(rate: float = np.pi) -> LinearVelocity:
    """``v = rate (x2, -x1, 0)``: clockwise about +x3 with angular speed ``rate``."""
    A = np.array([[0.0, rate, 0.0], [-rate, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return LinearVelocity(A)


@dataclass(frozen=True)
class NormalVelocity(VelocityField):
    """``v = coef * grad u / |grad u|_delta``."""

    coef: float = 1.0
    needs_gradient = True

    def __call__(self, x, t, grad=None, delta=DELTA):
        if grad is None:
            raise ValueError("normal velocity needs the level-set gradient")
        return self.coef * _unit(grad, delta)


@dataclass(frozen=True)
class CompositeVelocity(VelocityField):
    parts: tuple[VelocityField, ...]

    @property
    def needs_gradient(self):
        return any(p.needs_gradient for p in self.parts)

    def __call__(self, x, t, grad=None, delta=DELTA):
        return sum(p(x, t, grad, delta) for p in self.parts)


@dataclass(frozen=True)
class PiecewiseVelocity(VelocityField):
    """Velocity switching in time; piece ``i`` is active on ``(t_i, t_{i+1}]``.

    The first piece also covers its left endpoint.
    """

    breaks: tuple[float, ...]
    fields: tuple[VelocityField, ...]

    def __post_init__(self):
        if len(self.breaks) != len(self.fields) + 1:
            raise ValueError("need one more break than fields")
        if any(b <= a for a, b in zip(self.breaks, self.breaks[1:])):
            raise ValueError("breaks must be strictly increasing")

    @property
    def needs_gradient(self):
        return any(f.needs_gradient for f in self.fields)

    def active(self, t: float) -> VelocityField:
        b = self.breaks
        if t < b[0] or t > b[-1]:
            raise ValueError(f"time {t} outside the velocity schedule [{b[0]}, {b[-1]}]")
        i = int(np.searchsorted(b, t, side="left")) - 1
        return self.fields[max(i, 0)]

    def __call__(self, x, t, grad=None, delta=DELTA):
        return self.active(t)(x, t, grad, delta)

    def pieces(self):
        return list(zip(self.breaks[:-1], self.breaks[1:], self.fields))


def velocity_eval(vf: VelocityField, x, t, grad=None, delta=DELTA) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = None if grad is None else np.atleast_2d(np.asarray(grad, dtype=float))
    return vf(x, t, g, delta)


# -- cases -----------------------------------------------------------------

@dataclass(frozen=True)
class TestCase:
    name: str
    description: str
    shape: Shape
    velocity: VelocityField
    T: float
    exact: Callable[[np.ndarray, float], np.ndarray] = field(repr=False)
    has_exact: bool = True

    __test__ = False  # not a pytest class

    def initial(self, x: np.ndarray) -> np.ndarray:
        return sdf(self.shape, x)


def _translated(shape: Shape, displacement: Callable[[float], np.ndarray]):
    def u(x, t):
        return sdf(shape, np.asarray(x, dtype=float) - displacement(t))
    return u


def _rotated(shape: Shape, rate: float, erosion: float = 0.0):
    def u(x, t):
        r = shape.radius - erosion * t
        if r <= 0:
            raise ShapeVanished(f"shape vanished at t={t}")
        x = np.asarray(x, dtype=float)
        return sdf(shape.with_radius(r), x @ rotation_z(rate * t).T)
    return u


def _offset(shape: Shape, speed: float):
    def u(x, t):
        return sdf(shape, x) - speed * t
    return u


def _eroded(shape: Shape, speed: float):
    def u(x, t):
        r = shape.radius - speed * t
        if r <= 0:
            raise ShapeVanished(f"shape vanished at t={t}")
        return sdf(shape.with_radius(r), x)
    return u


def _piecewise_displacement(breaks, values):
    breaks = np.asarray(breaks, dtype=float)
    values = np.asarray(values, dtype=float)

    def disp(t):
        if t < breaks[0] - 1e-14 or t > breaks[-1] + 1e-14:
            raise ValueError(f"time {t} outside the velocity schedule")
        lengths = np.clip(t - breaks[:-1], 0.0, np.diff(breaks))
        return lengths @ values
    return disp


def _make_catalog() -> dict[str, TestCase]:
    low = (-0.5, -0.5, -0.5)
    off = (0.625, 0.0, 0.0)
    origin = (0.0, 0.0, 0.0)
    v_tr = ConstantVelocity((2.0, 2.0, 2.0))
    rot = RotationVelocity(np.pi)
    out = NormalVelocity(1.0)
    inn = NormalVelocity(-1.0)
    rot_shrink = CompositeVelocity((rot, NormalVelocity(-0.1)))
    cases = []
    for tag, kind, word in (("S", Sphere, "sphere"), ("C", Box, "cube")):
        s_low, s_off = kind(low, 0.5), kind(off, 0.5)
        s_half, s_one = kind(origin, 0.5), kind(origin, 1.0)
        t_tr = 2.0 if tag == "S" else 0.5
        cases += [
            TestCase("T" + tag, f"translation of the {word}", s_low, v_tr, t_tr,
                     _translated(s_low, lambda t: 2.0 * t * np.ones(3))),
            TestCase("R" + tag, f"rotation of the {word}", s_off, rot, 2.0, _rotated(s_off, np.pi)),
            TestCase("E" + tag, f"expansion of the {word}", s_half, out, 0.5, _offset(s_half, 1.0)),
            TestCase("S" + tag, f"shrinking of the {word}", s_one, inn, 0.5, _eroded(s_one, 1.0)),
            TestCase("RS" + tag, f"rotation and shrinking of the {word}", s_off, rot_shrink, 1.0,
                     _rotated(s_off, np.pi, 0.1)),
        ]
        # reversible translation: out along (2,2,2) until t=1, then back
        breaks = (0.0, 1.0, 2.0)
        vals = ((2.0, 2.0, 2.0), (-2.0, -2.0, -2.0))
        cases.append(TestCase(
            "TR" + tag, f"reversible translation of the {word}", s_low,
            PiecewiseVelocity(breaks, tuple(ConstantVelocity(v) for v in vals)), 2.0,
            _translated(s_low, _piecewise_displacement(breaks, vals))))
        # reversible rotation: half a turn clockwise, then back
        rbreaks = (0.0, 1.0, 2.0)
        cases.append(TestCase(
            "RR" + tag, f"reversible rotation of the {word}", s_off,
            PiecewiseVelocity(rbreaks, (RotationVelocity(np.pi), RotationVelocity(-np.pi))), 2.0,
            _rotated_piecewise(s_off)))
    return {c.name: c for c in cases}


def _rotated_piecewise(shape: Shape):
    def u(x, t):
        angle = np.pi * (t if t <= 1.0 else 2.0 - t)
        return sdf(shape, np.asarray(x, dtype=float) @ rotation_z(angle).T)
    return u


CASES: dict[str, TestCase] = _make_catalog()


def case_names() -> list[str]:
    return list(CASES)


def get_case(name: str, T: float | None = None) -> TestCase:
    """Look up a catalog case, optionally with a different final time."""
    try:
        case = CASES[name.upper()]
    except KeyError:
        raise KeyError(f"unknown case {name!r}; valid cases: {', '.join(CASES)}") from None
    if T is not None:
        if not T > 0:
            raise ValueError("final time must be positive")
        case = TestCase(case.name, case.description, case.shape, case.velocity, float(T), case.exact)
    return case


def exact_solution(case: TestCase | str, x: np.ndarray, t: float) -> np.ndarray:
    if isinstance(case, str):
        case = get_case(case)
    return case.exact(np.asarray(x, dtype=float), float(t))


def dirichlet_evaluator(case: TestCase | str) -> Callable[[np.ndarray, float], np.ndarray]:
    if isinstance(case, str):
        case = get_case(case)
    return lambda x, t: case.exact(np.asarray(x, dtype=float), float(t))


def custom_case(name: str, shape: Shape, velocity: VelocityField, T: float,
                exact: Callable[[np.ndarray, float], np.ndarray] | None = None) -> TestCase:
    """A user-defined case; without ``exact`` only reversibility metrics apply."""
    if exact is None:
        def missing(x, t):
            raise NotImplementedError(f"case {name} has no closed-form solution")
        return TestCase(name, "custom", shape, velocity, float(T), missing, has_exact=False)
    return TestCase(name, "custom", shape, velocity, float(T), exact)


def shapes_from_spec(kind: str, center: Sequence[float], radius: float) -> Shape:
    kinds = {"sphere": Sphere, "box": Box, "cube": Box}
    if kind not in kinds:
        raise ValueError(f"unknown shape {kind!r}; use sphere or box")
    return kinds[kind](tuple(float(c) for c in center), float(radius))


def velocity_from_text(text: str, shape: Shape) -> tuple[VelocityField, Callable | None]:
    """Parse ``const:vx,vy,vz``, ``rot:rate``, ``normal:coef`` or ``rot:rate+normal:coef``.

    Returns the field and, where one is known in closed form for ``shape``,
    its exact solution.
    """
    parts: dict[str, list[float]] = {}
    for token in text.replace(" ", "").split("+"):
        kind, _, args = token.partition(":")
        if kind not in ("const", "rot", "normal") or kind in parts or not args:
            raise ValueError(f"cannot parse velocity term {token!r}; "
                             "use const:vx,vy,vz, rot:rate, normal:coef joined by '+'")
        try:
            parts[kind] = [float(a) for a in args.split(",")]
        except ValueError:
            raise ValueError(f"non-numeric velocity argument in {token!r}") from None
        if len(parts[kind]) != (3 if kind == "const" else 1):
            raise ValueError(f"wrong number of arguments in {token!r}")
    fields: list[VelocityField] = []
    if "const" in parts:
        fields.append(ConstantVelocity(tuple(parts["const"])))
    if "rot" in parts:
        fields.append(RotationVelocity(parts["rot"][0]))
    if "normal" in parts:
        fields.append(NormalVelocity(parts["normal"][0]))
    vf = fields[0] if len(fields) == 1 else CompositeVelocity(tuple(fields))

    c = parts.get("normal", [0.0])[0]
    exact = None
    if set(parts) == {"const"}:
        v = np.asarray(parts["const"])
        exact = _translated(shape, lambda t: t * v)
    elif set(parts) <= {"rot", "normal"} and c <= 0:
        exact = _rotated(shape, parts.get("rot", [0.0])[0], -c)
    elif set(parts) == {"normal"}:
        exact = _offset(shape, c)
    return vf, exact
