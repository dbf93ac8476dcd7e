"""Operator application/inversion and the scalar functionals of the flow.

Everything here is a pure function of an immutable manifold: the quadratic
energy E[u] = <u, P u>, the normalized energy E_f, the constraint factor
alpha keeping E conserved along the flow, the flow velocity potential phi,
the dissipation F2 = <phi, P phi>, and Sobolev-type quotients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .manifold import DiscreteManifold, integrate

__all__ = [
    "EnergyReport",
    "apply_P",
    "solve_P",
    "energy_report",
    "velocity_potential",
    "f2",
    "quotient_F",
    "quotient_min_estimate",
]


def apply_P(man: DiscreteManifold, u: np.ndarray) -> np.ndarray:
    """Apply the discrete operator to a nodal field."""
    return man.apply(man.check_field(u))


def solve_P(man: DiscreteManifold, rhs: np.ndarray) -> np.ndarray:
    """Invert the discrete operator (Green-function convolution)."""
    return man.solve(man.check_field(rhs))


@dataclass(frozen=True)
class EnergyReport:
    """Scalar functionals of a positive conformal factor u against a weight f.

    ``E`` is the operator energy, ``conf_volume`` the conformal volume
    integral of u^p_crit, ``f_mass`` the f-weighted version, ``E_f`` the
    normalized energy E / f_mass^((n-4)/n), ``alpha`` the constraint factor
    (2/(n-4)) E / f_mass, and ``quotient_F`` the Sobolev-type quotient
    E / conf_volume^((n-4)/n).
    """

    E: float
    conf_volume: float
    f_mass: float
    E_f: float
    alpha: float
    quotient_F: float


def _require_positive(man: DiscreteManifold, values: np.ndarray, name: str) -> np.ndarray:
    arr = man.check_field(values)
    if np.min(arr) <= 0.0:
        node = int(np.argmin(arr))
        raise ValueError(f"{name} must be positive; min {arr[node]:g} at node {node}")
    return arr


def energy_report(man: DiscreteManifold, u: np.ndarray, f: np.ndarray) -> EnergyReport:
    """Evaluate all scalar functionals for positive u and positive weight f."""
    u = _require_positive(man, u, "u")
    f = _require_positive(man, f, "f")
    coeffs = man.coeffs
    E = man.inner(u, man.apply(u))
    u_p = u**coeffs.p_crit
    conf_volume = float(np.dot(man.weights, u_p))
    f_mass = float(np.dot(man.weights, f * u_p))
    exponent = (coeffs.n - 4) / coeffs.n
    return EnergyReport(
        E=E,
        conf_volume=conf_volume,
        f_mass=f_mass,
        E_f=E / f_mass**exponent,
        alpha=(2.0 / (coeffs.n - 4)) * E / f_mass,
        quotient_F=E / conf_volume**exponent,
    )


def velocity_potential(
    man: DiscreteManifold, u: np.ndarray, f: np.ndarray, alpha: float
) -> np.ndarray:
    """Velocity potential phi = -u + ((n-4)/2) P^{-1}(alpha f u^q_exp).

    When ``alpha`` is the constraint value of ``u``, phi satisfies the exact
    discrete orthogonality <u, P phi> = 0.
    """
    u = _require_positive(man, u, "u")
    f = man.check_field(f)
    source = man.coeffs.half_nm4 * alpha * f * u**man.coeffs.q_exp
    return man.solve(source) - u


def f2(man: DiscreteManifold, u: np.ndarray, f: np.ndarray, alpha: float) -> float:
    """Dissipation F2 = <phi, P phi> >= 0; zero iff phi vanishes."""
    phi = velocity_potential(man, u, f, alpha)
    return man.inner(phi, man.apply(phi))


def quotient_F(man: DiscreteManifold, h: np.ndarray) -> float:
    """Sobolev-type quotient <h, P h> / (integral |h|^p_crit)^((n-4)/n)."""
    h = man.check_field(h)
    denom = integrate(man, np.abs(h) ** man.coeffs.p_crit)
    if denom == 0.0:
        raise ValueError("trial field is identically zero")
    return man.inner(h, man.apply(h)) / denom ** ((man.coeffs.n - 4) / man.coeffs.n)


def quotient_min_estimate(
    man: DiscreteManifold, trials: Sequence[np.ndarray]
) -> float:
    """Minimum Sobolev-type quotient over a nonempty family of trial fields.

    The result is an upper bound on the infimum quotient of the background.
    """
    if len(trials) == 0:
        raise ValueError("need at least one trial field")
    return min(quotient_F(man, h) for h in trials)
