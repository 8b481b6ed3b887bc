"""Wheel yaw installation designs and their symmetry-reduced parameterizations.

Leg order everywhere in the package is FR, FL, RR, RL. Angles are radians
internally; degrees appear only at the file/CLI boundary.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

ANGLE_LIMIT = math.pi / 2
LEG_NAMES = ("FR", "FL", "RR", "RL")


class DesignBoundsError(ValueError):
    pass


class CouplingMode(str, enum.Enum):
    COUPLED_1D = "Coupled1D"
    SYMMETRIC_2D = "Symmetric2D"
    FULL_4D = "Full4D"

    @property
    def d_free(self) -> int:
        return {"Coupled1D": 1, "Symmetric2D": 2, "Full4D": 4}[self.value]

    @classmethod
    def parse(cls, value: "str | CouplingMode") -> "CouplingMode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown coupling mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class DesignVector:
    psi_fr: float
    psi_fl: float
    psi_rr: float
    psi_rl: float

    def __post_init__(self):
        for name, val in zip(("psi_fr", "psi_fl", "psi_rr", "psi_rl"), self.as_array()):
            _check_angle(name, val)

    def as_array(self) -> np.ndarray:
        return np.array([self.psi_fr, self.psi_fl, self.psi_rr, self.psi_rl], dtype=float)

    @classmethod
    def from_array(cls, angles) -> "DesignVector":
        a = [float(x) for x in angles]
        if len(a) != 4:
            raise ValueError(f"a design has 4 angles, got {len(a)}")
        return cls(*a)

    def mirrored(self) -> "DesignVector":
        """Reflect about the sagittal plane: swap left/right legs and negate."""
        return DesignVector(-self.psi_fl, -self.psi_fr, -self.psi_rl, -self.psi_rr)

    def degrees(self) -> list[float]:
        return [math.degrees(x) for x in self.as_array()]


def _check_angle(name: str, value: float) -> None:
    if not math.isfinite(value) or abs(value) > ANGLE_LIMIT:
        raise DesignBoundsError(
            f"{name}={value!r} rad is outside [-pi/2, pi/2]"
        )


REDUCED_NAMES = {
    CouplingMode.COUPLED_1D: ("psi",),
    CouplingMode.SYMMETRIC_2D: ("psi_front", "psi_rear"),
    CouplingMode.FULL_4D: ("psi_fr", "psi_fl", "psi_rr", "psi_rl"),
}


def _reduced_array(reduced, mode: CouplingMode) -> np.ndarray:
    r = np.atleast_1d(np.asarray(reduced, dtype=float))
    if r.shape != (mode.d_free,):
        raise ValueError(f"{mode.value} expects {mode.d_free} angle(s), got shape {r.shape}")
    for name, val in zip(REDUCED_NAMES[mode], r):
        _check_angle(name, float(val))
    return r


def expand_design(reduced, mode: "CouplingMode | str") -> DesignVector:
    """Map the free angles of a coupling mode onto all four wheels.

    Coupled1D takes ``psi`` and yields ``(-psi, psi, psi, -psi)``;
    Symmetric2D takes ``(psi_front, psi_rear)`` and yields
    ``(-psi_front, psi_front, psi_rear, -psi_rear)``, so Coupled1D is its
    diagonal; Full4D is the identity.
    """
    mode = CouplingMode.parse(mode)
    r = _reduced_array(reduced, mode)
    if mode is CouplingMode.COUPLED_1D:
        psi = r[0]
        return DesignVector(-psi, psi, psi, -psi)
    if mode is CouplingMode.SYMMETRIC_2D:
        front, rear = r
        return DesignVector(-front, front, rear, -rear)
    return DesignVector(*r)


def reduce_design(design: DesignVector, mode: "CouplingMode | str") -> np.ndarray:
    """Read back the free coordinates; raises if the design breaks the coupling."""
    mode = CouplingMode.parse(mode)
    a = design.as_array()
    if mode is CouplingMode.COUPLED_1D:
        out = np.array([a[1]])
    elif mode is CouplingMode.SYMMETRIC_2D:
        out = np.array([a[1], a[2]])
    else:
        out = a.copy()
    if expand_design(out, mode) != design:
        raise ValueError(f"design {design} does not satisfy the {mode.value} coupling")
    return out


def to_unit_cube(reduced, mode: "CouplingMode | str") -> np.ndarray:
    mode = CouplingMode.parse(mode)
    r = _reduced_array(reduced, mode)
    return (r + ANGLE_LIMIT) / (2 * ANGLE_LIMIT)


def from_unit_cube(point, mode: "CouplingMode | str") -> np.ndarray:
    mode = CouplingMode.parse(mode)
    x = np.atleast_1d(np.asarray(point, dtype=float))
    if x.shape != (mode.d_free,):
        raise ValueError(f"{mode.value} expects a point in [0,1]^{mode.d_free}, got shape {x.shape}")
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DesignBoundsError(f"unit-cube point {x.tolist()} outside [0, 1]")
    # clip guards the last ulp so the result never leaves the angle box
    return np.clip(x * (2 * ANGLE_LIMIT) - ANGLE_LIMIT, -ANGLE_LIMIT, ANGLE_LIMIT)


def design_to_record(design: DesignVector, mode: "CouplingMode | str") -> dict:
    """Flat ``{mode, angles_deg}`` record used in configs and logs."""
    mode = CouplingMode.parse(mode)
    return {"mode": mode.value, "angles_deg": [math.degrees(x) for x in reduce_design(design, mode)]}


def design_from_record(record: dict) -> tuple[DesignVector, CouplingMode]:
    mode = CouplingMode.parse(record["mode"])
    angles = np.radians(np.asarray(record["angles_deg"], dtype=float))
    return expand_design(angles, mode), mode


def design_from_degrees(degrees, mode: "CouplingMode | str | None" = None) -> DesignVector:
    """Build a design from a CLI-style list of degrees.

    With no mode, the count picks it: 1 -> Coupled1D, 2 -> Symmetric2D,
    4 -> Full4D.
    """
    vals = [float(x) for x in np.atleast_1d(degrees)]
    if mode is None:
        by_count = {1: CouplingMode.COUPLED_1D, 2: CouplingMode.SYMMETRIC_2D, 4: CouplingMode.FULL_4D}
        if len(vals) not in by_count:
            raise ValueError(f"expected 1, 2 or 4 angles in degrees, got {len(vals)}")
        mode = by_count[len(vals)]
    return expand_design(np.radians(vals), mode)
