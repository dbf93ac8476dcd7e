"""Concentration-profile test functions and low-energy initial data.

Builds the cutoff peak profile u_eps = chi_delta(d) (eps^2 + d^2)^(-(n-4)/2)
on backgrounds with an exact chart (sphere geodesic polar angle, flat circle
coordinate), the corrected profile u_hat solving
P u_hat = B_n eps^4 chi_delta(d) (eps^2 + d^2)^(-(n+4)/2), the Green-function
mass estimate at a pole, and initial-data candidates whose normalized energy
is certified against the round-sphere threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .manifold import (
    CircleProductManifold,
    DiscreteManifold,
    SphereManifold,
    integrate,
    sphere_volume,
)
from .paneitz import EnergyReport, energy_report, quotient_F

__all__ = [
    "BubbleParams",
    "BubbleFamily",
    "GreenExpansion",
    "AsymptoticRow",
    "Certificate",
    "InitialDataError",
    "cutoff",
    "standard_bubble",
    "corrected_bubble",
    "sphere_quotient_asymptotic",
    "green_mass",
    "initial_data_candidate",
    "q_sphere_reference",
    "write_asymptotics_csv",
    "write_certificates_csv",
]


class InitialDataError(RuntimeError):
    """Candidate initial data rejected; carries the failing certificate."""

    def __init__(self, message: str, certificate: "Certificate"):
        super().__init__(message)
        self.certificate = certificate


@dataclass(frozen=True)
class BubbleParams:
    """Concentration point (chart coordinate), scale eps, and cutoff radius
    delta with 0 < eps < delta and the support B_{2 delta} inside the chart."""

    x0: float
    eps: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.eps < self.delta):
            raise ValueError(
                f"need 0 < eps < delta, got eps={self.eps}, delta={self.delta}"
            )


@dataclass(frozen=True)
class BubbleFamily:
    params: BubbleParams
    u_eps: np.ndarray
    u_hat: np.ndarray
    v_eps: np.ndarray
    report: EnergyReport
    source: np.ndarray      # right side of the corrected-profile equation


@dataclass(frozen=True)
class GreenExpansion:
    green: np.ndarray
    singular_coeff: float
    mass_beta: float
    fit_residual: float
    window: tuple[float, float]
    node_index: int


@dataclass(frozen=True)
class AsymptoticRow:
    eps: float
    value: float
    reference: float
    rel_gap: float


@dataclass(frozen=True)
class Certificate:
    """Energy certificate of a candidate: the normalized energy, the
    round-sphere threshold q(S^n) / (max f)^((n-4)/n), their margin, cone
    data extrema, the measured oscillation of f over the profile support,
    and (when a Green expansion is supplied) the predicted leading
    mass correction -beta * integral(u^q) / integral(u^p)."""

    eps: float
    E_f: float
    threshold: float
    margin: float
    min_u0: float
    min_Pu0: float
    f_oscillation: float
    predicted_mass_correction: float | None = None


def q_sphere_reference(n: int) -> float:
    """Extremal quotient of the round n-sphere, n(n-4)(n^2-4)/16 * vol^(4/n)."""
    return n * (n - 4) * (n**2 - 4) / 16.0 * sphere_volume(n) ** (4.0 / n)


def cutoff(delta: float, r: float | np.ndarray) -> float | np.ndarray:
    """C^2 cutoff: 1 for r <= delta, 0 for r >= 2 delta, quintic smoothstep
    in between (midpoint value 1/2)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r_arr = np.asarray(r, dtype=float)
    tau = np.clip((r_arr - delta) / delta, 0.0, 1.0)
    out = 1.0 - tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)
    return out if isinstance(r, np.ndarray) else float(out)


def _chart_distance(man: DiscreteManifold, x0: float) -> np.ndarray:
    """Distance from x0 in the manifold's exact chart coordinate."""
    if isinstance(man, SphereManifold):
        if abs(x0) > 1e-12 and abs(x0 - math.pi) > 1e-12:
            raise ValueError(
                "sphere profiles must concentrate at a pole (x0 = 0 or pi); "
                f"got x0 = {x0}"
            )
        return np.abs(man.theta - x0)
    if isinstance(man, CircleProductManifold):
        raw = np.abs(man.s - x0 % man.L)
        return np.minimum(raw, man.L - raw)
    raise ValueError(f"manifold kind {man.kind!r} has no exact chart for profiles")


def _check_chart(man: DiscreteManifold, params: BubbleParams) -> np.ndarray:
    if isinstance(man, SphereManifold):
        if 2.0 * params.delta >= math.pi:
            raise ValueError("support 2*delta must stay below the chart scale pi")
    elif isinstance(man, CircleProductManifold):
        if 2.0 * params.delta > man.L / 2.0:
            raise ValueError("support 2*delta must fit in half the circle length")
    return _chart_distance(man, params.x0)


def standard_bubble(man: DiscreteManifold, params: BubbleParams) -> np.ndarray:
    """Cutoff concentration profile chi_delta(d) / (eps^2 + d^2)^((n-4)/2)."""
    d = _check_chart(man, params)
    n = man.coeffs.n
    return cutoff(params.delta, d) * (params.eps**2 + d**2) ** (-(n - 4) / 2.0)


def corrected_bubble(
    man: DiscreteManifold, params: BubbleParams, f: np.ndarray | None = None
) -> BubbleFamily:
    """Solve the corrected profile P u_hat = B_n eps^4 chi_delta / (eps^2+d^2)^((n+4)/2).

    The right side is nonnegative, so u_hat lies in the cone by construction;
    its pointwise positivity is checked because discrete inverse positivity is
    a measured property, not an assumption.
    """
    d = _check_chart(man, params)
    n = man.coeffs.n
    u_eps = standard_bubble(man, params)
    source = (
        man.coeffs.B_n
        * params.eps**4
        * cutoff(params.delta, d)
        * (params.eps**2 + d**2) ** (-(n + 4) / 2.0)
    )
    u_hat = man.solve(source)
    if np.min(u_hat) <= 0.0:
        node = int(np.argmin(u_hat))
        raise RuntimeError(
            f"corrected profile lost positivity: min u_hat = {u_hat[node]:g} at "
            f"node {node} (under-resolved inverse)"
        )
    f_field = np.ones(man.node_count) if f is None else man.check_field(f)
    report = energy_report(man, u_hat, f_field)
    return BubbleFamily(
        params=params,
        u_eps=u_eps,
        u_hat=u_hat,
        v_eps=u_hat - u_eps,
        report=report,
        source=source,
    )


def sphere_quotient_asymptotic(
    man: SphereManifold, eps_list, delta: float, x0: float = 0.0
) -> list[AsymptoticRow]:
    """Table of B_n eps^4 (integral u_eps^p_crit)^(4/n) against the measured
    extremal quotient of the constant function; eps >= delta is rejected."""
    if not isinstance(man, SphereManifold):
        raise ValueError("quotient asymptotics require the sphere kind")
    coeffs = man.coeffs
    reference = quotient_F(man, np.ones(man.node_count))
    rows = []
    for eps in eps_list:
        params = BubbleParams(x0=x0, eps=float(eps), delta=delta)
        u = standard_bubble(man, params)
        mass = integrate(man, u**coeffs.p_crit)
        value = coeffs.B_n * eps**4 * mass ** (4.0 / coeffs.n)
        rows.append(
            AsymptoticRow(
                eps=float(eps),
                value=value,
                reference=reference,
                rel_gap=abs(value - reference) / reference,
            )
        )
    return rows


def green_mass(
    man: SphereManifold,
    x0: float = 0.0,
    window: tuple[float, float] = (0.35, 1.0),
    residual_threshold: float = 0.02,
) -> GreenExpansion:
    """Discrete Green function at the node nearest x0 and its singular fit.

    Solves for the field dual to a unit point mass and fits
    a * d^(4-n) + b on the annulus ``window`` (staying away from the pole and
    the chart edge); returns the fitted singular coefficient (target c_n) and
    the mass ratio beta = b / c_n.  Raises if the relative fit residual
    exceeds ``residual_threshold`` (under-resolution signal).
    """
    if not isinstance(man, SphereManifold):
        raise ValueError("green_mass requires the sphere kind (singular chart fit)")
    node = int(np.argmin(np.abs(man.theta - x0)))
    delta_field = np.zeros(man.node_count)
    delta_field[node] = 1.0 / man.weights[node]
    green = man.solve(delta_field)
    d = np.abs(man.theta - man.theta[node])
    r1, r2 = window
    if not (0.0 < r1 < r2 < math.pi):
        raise ValueError(f"fit window must satisfy 0 < r1 < r2 < pi, got {window}")
    mask = (d >= r1) & (d <= r2)
    if int(mask.sum()) < 8:
        raise ValueError("fit window contains fewer than 8 nodes")
    design = np.column_stack([d[mask] ** (4.0 - man.coeffs.n), np.ones(int(mask.sum()))])
    coef, *_ = np.linalg.lstsq(design, green[mask], rcond=None)
    fitted = design @ coef
    residual = float(
        np.sqrt(np.mean((green[mask] - fitted) ** 2) / np.mean(green[mask] ** 2))
    )
    if residual > residual_threshold:
        raise RuntimeError(
            f"green-function fit residual {residual:g} exceeds threshold "
            f"{residual_threshold:g}; increase resolution or adjust the window"
        )
    return GreenExpansion(
        green=green,
        singular_coeff=float(coef[0]),
        mass_beta=float(coef[1]) / man.coeffs.c_n,
        fit_residual=residual,
        window=(r1, r2),
        node_index=node,
    )


def initial_data_candidate(
    man: DiscreteManifold,
    f: np.ndarray,
    params: BubbleParams,
    require_margin: bool = True,
    green: GreenExpansion | None = None,
    flatness_tol: float = 1e-3,
) -> tuple[np.ndarray, Certificate]:
    """Corrected-profile initial data with an energy certificate.

    ``params.x0`` must locate a maximum of f.  For n >= 6 the sampled f must
    be flat over the profile support: its relative oscillation on B_{2 delta}
    may not exceed ``flatness_tol`` (in dimension five no condition is
    needed).  The certificate records E_f, the threshold
    q(S^n)/(max f)^((n-4)/n), their margin, and the cone extrema; a
    nonpositive margin raises InitialDataError unless ``require_margin`` is
    false.
    """
    f = man.check_field(f)
    if np.min(f) <= 0.0:
        raise ValueError("f must be positive")
    d = _check_chart(man, params)
    node0 = int(np.argmin(d))
    f_max = float(np.max(f))
    if f[node0] < (1.0 - 1e-8) * f_max:
        raise ValueError(
            f"x0 = {params.x0:g} is not a maximum point of f "
            f"(f(x0) = {f[node0]:g} < max f = {f_max:g})"
        )
    support = d <= 2.0 * params.delta
    f_osc = float((np.max(f[support]) - np.min(f[support])) / f_max)
    if man.coeffs.n >= 6 and f_osc > flatness_tol:
        raise ValueError(
            f"f oscillates by {f_osc:g} over the profile support; the "
            f"flatness requirement ({flatness_tol:g}) for n >= 6 fails"
        )
    fam = corrected_bubble(man, params, f)
    coeffs = man.coeffs
    threshold = q_sphere_reference(coeffs.n) / f_max ** ((coeffs.n - 4) / coeffs.n)
    margin = threshold - fam.report.E_f
    correction = None
    if green is not None:
        correction = -green.mass_beta * (
            integrate(man, fam.u_eps**coeffs.q_exp)
            / integrate(man, fam.u_eps**coeffs.p_crit)
        )
    cert = Certificate(
        eps=params.eps,
        E_f=fam.report.E_f,
        threshold=threshold,
        margin=margin,
        min_u0=float(np.min(fam.u_hat)),
        min_Pu0=float(np.min(fam.source)),
        f_oscillation=f_osc,
        predicted_mass_correction=correction,
    )
    if require_margin and margin <= 0.0:
        raise InitialDataError(
            f"candidate rejected: E_f = {cert.E_f:.6g} does not beat the "
            f"threshold {cert.threshold:.6g} (margin {margin:.3g}); decrease "
            f"eps or increase resolution",
            cert,
        )
    return fam.u_hat, cert


def write_asymptotics_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("eps,value,reference,rel_gap\n")
        for r in rows:
            fh.write(
                f"{r.eps:.17g},{r.value:.17g},{r.reference:.17g},{r.rel_gap:.17g}\n"
            )


def write_certificates_csv(certs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("eps,E_f,threshold,margin,min_u0,min_Pu0\n")
        for c in certs:
            fh.write(
                f"{c.eps:.17g},{c.E_f:.17g},{c.threshold:.17g},"
                f"{c.margin:.17g},{c.min_u0:.17g},{c.min_Pu0:.17g}\n"
            )
