"""Discretized background manifolds with quadrature and a positive Paneitz operator.

Backgrounds are restricted to symmetry classes where the fourth-order
conformally covariant (Paneitz) operator reduces exactly to one dimension:

* ``SphereManifold`` -- the round sphere S^n acting on axisymmetric (zonal)
  functions h(theta), discretized with Gauss-Jacobi quadrature in cos(theta)
  and a Gegenbauer (zonal harmonic) spectral basis.  The operator is diagonal
  on that basis.
* ``CircleProductManifold`` -- an Einstein cross-section times a flat circle,
  acting on functions of the circle coordinate.  The operator is a
  constant-coefficient Fourier multiplier.
* ``MatrixManifold`` -- an arbitrary weighted node set with a dense operator
  matrix loaded from a text file, used for property tests on generic
  symmetric positive operators.

All kinds expose the same surface: positive quadrature ``weights``, a
``background`` record of curvature scalars, and ``apply``/``solve`` for the
operator.  Manifolds are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import roots_jacobi

__all__ = [
    "ManifoldError",
    "CoeffTable",
    "Background",
    "DiscreteManifold",
    "SphereManifold",
    "CircleProductManifold",
    "MatrixManifold",
    "EinsteinProductData",
    "EINSTEIN_PRESETS",
    "build_sphere_axisym",
    "build_einstein_circle_product",
    "load_matrix_manifold",
    "integrate",
    "lp_norm",
    "gegenbauer_values",
    "sphere_volume",
    "sphere_multiplier",
]

SPHERE_AXISYM = "sphere-axisym"
EINSTEIN_CIRCLE_PRODUCT = "einstein-circle-product"
MATRIX_LOADED = "matrix-loaded"


class ManifoldError(ValueError):
    """Invalid manifold construction or operator data."""


def sphere_volume(m: int) -> float:
    """Surface measure of the unit m-sphere, 2 pi^((m+1)/2) / Gamma((m+1)/2)."""
    return 2.0 * math.pi ** ((m + 1) / 2) / math.gamma((m + 1) / 2)


@dataclass(frozen=True)
class CoeffTable:
    """Dimension-dependent coefficients of the fourth-order conformal operator.

    ``a_n`` and ``b_pb`` are the scalar/Ricci gradient-term coefficients of
    the operator, ``B_n`` the bubble source normalization, ``c_n`` the
    biharmonic Green-function singular coefficient, ``omega_nm1`` the surface
    measure of S^(n-1).  ``p_crit = 2n/(n-4)`` is the critical integrability
    exponent and ``q_exp = (n+4)/(n-4)`` the nonlinearity power.
    """

    n: int
    a_n: float
    b_pb: float
    B_n: float
    c_n: float
    omega_nm1: float
    p_crit: float
    q_exp: float

    @classmethod
    def for_dimension(cls, n: int) -> "CoeffTable":
        if n < 5:
            raise ManifoldError(f"dimension must be >= 5, got {n}")
        omega = sphere_volume(n - 1)
        return cls(
            n=n,
            a_n=((n - 2) ** 2 + 4) / (2.0 * (n - 1) * (n - 2)),
            b_pb=-4.0 / (n - 2),
            B_n=float(n * (n - 4) * (n**2 - 4)),
            c_n=1.0 / (2.0 * (n - 2) * (n - 4) * omega),
            omega_nm1=omega,
            p_crit=2.0 * n / (n - 4),
            q_exp=(n + 4.0) / (n - 4.0),
        )

    @property
    def half_nm4(self) -> float:
        """The operator's zeroth-order normalization (n-4)/2."""
        return (self.n - 4) / 2.0


@dataclass(frozen=True)
class Background:
    """Curvature scalars of the background: scalar curvature ``R0``, the
    Ricci component along the reduced direction ``Ric_dir``, and the
    background Q-curvature ``Q0``."""

    R0: float
    Ric_dir: float
    Q0: float


def gegenbauer_values(k_max: int, lam: float, x: np.ndarray) -> np.ndarray:
    """Table of Gegenbauer polynomials C_k^lam(x) for k = 0..k_max.

    Uses the stable three-term recurrence
    ``k C_k = 2(k+lam-1) x C_{k-1} - (k+2lam-2) C_{k-2}``.
    Returns an array of shape (len(x), k_max+1).
    """
    x = np.asarray(x, dtype=float)
    table = np.empty((x.size, k_max + 1))
    table[:, 0] = 1.0
    if k_max >= 1:
        table[:, 1] = 2.0 * lam * x
    for k in range(2, k_max + 1):
        table[:, k] = (
            2.0 * (k + lam - 1.0) * x * table[:, k - 1]
            - (k + 2.0 * lam - 2.0) * table[:, k - 2]
        ) / k
    return table


def sphere_multiplier(n: int, k: np.ndarray | int) -> np.ndarray | float:
    """Spectral multiplier of the operator on degree-k zonal harmonics of S^n:
    (k(k+n-1) + n(n-2)/4) (k(k+n-1) + (n-4)(n+2)/4)."""
    lam_hat = np.asarray(k, dtype=float) * (np.asarray(k, dtype=float) + n - 1)
    out = (lam_hat + n * (n - 2) / 4.0) * (lam_hat + (n - 4) * (n + 2) / 4.0)
    return out if isinstance(k, np.ndarray) else float(out)


class DiscreteManifold:
    """Common surface of all discretized backgrounds.

    Attributes
    ----------
    kind : str
        One of ``sphere-axisym``, ``einstein-circle-product``,
        ``matrix-loaded``.
    coeffs : CoeffTable
    background : Background
    weights : ndarray
        Strictly positive quadrature weights encoding the volume measure.
    volume : float
        Total volume, equal to ``weights.sum()``.
    """

    kind: str = "abstract"

    def __init__(self, coeffs: CoeffTable, background: Background, weights: np.ndarray):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or weights.size == 0:
            raise ManifoldError("weights must be a nonempty 1-D array")
        if not np.all(weights > 0.0):
            raise ManifoldError("quadrature weights must be strictly positive")
        self.coeffs = coeffs
        self.background = background
        self.weights = weights
        self.volume = float(weights.sum())

    @property
    def node_count(self) -> int:
        return self.weights.size

    def check_field(self, values: np.ndarray) -> np.ndarray:
        """Validate a nodal field against this manifold and return it as float64."""
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 0:
            arr = np.full(self.node_count, float(arr))
        if arr.shape != (self.node_count,):
            raise ManifoldError(
                f"field length {arr.shape} incompatible with {self.node_count} nodes"
            )
        if not np.all(np.isfinite(arr)):
            raise ManifoldError("field contains non-finite entries")
        return arr

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """Weighted inner product <u, v> = sum_i w_i u_i v_i."""
        return float(np.dot(self.weights * u, v))

    def apply(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def solve(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SphereManifold(DiscreteManifold):
    """Round S^n restricted to zonal functions h(theta).

    Nodes are Gauss-Jacobi points in x = cos(theta) for the weight
    (1-x^2)^((n-2)/2); quadrature weights carry the omega_{n-1} sin^{n-1}
    measure factor and sum to vol(S^n) exactly.  The operator is diagonal on
    the weighted-orthonormal Gegenbauer basis stored in ``basis``; the
    constant mode is deflated analytically in ``apply``/``solve`` so constant
    fields are mapped at machine precision despite the k^4 multiplier growth.
    """

    kind = SPHERE_AXISYM

    def __init__(self, n: int, K: int):
        if n < 5:
            raise ManifoldError(f"sphere dimension must be >= 5, got {n}")
        if K < 4:
            raise ManifoldError(f"need at least 4 modes, got K={K}")
        coeffs = CoeffTable.for_dimension(n)
        x, w_gj = roots_jacobi(K, (n - 2) / 2.0, (n - 2) / 2.0)
        # order nodes by increasing polar angle (north pole first)
        order = np.argsort(-x)
        x = x[order]
        w = coeffs.omega_nm1 * w_gj[order]
        background = Background(
            R0=float(n * (n - 1)),
            Ric_dir=float(n - 1),
            Q0=n * (n**2 - 4) / 8.0,
        )
        super().__init__(coeffs, background, w)
        self.mode_count = K
        self.cos_theta = x
        self.theta = np.arccos(np.clip(x, -1.0, 1.0))
        lam = (n - 1) / 2.0
        V = gegenbauer_values(K - 1, lam, x)
        norms = np.sqrt(np.einsum("i,ik->k", w, V * V))
        E = V / norms
        # re-orthonormalize against the discrete weighted inner product; the
        # k^4 multiplier growth amplifies any Gram defect, so push it to eps
        gram = E.T @ (w[:, None] * E)
        L = np.linalg.cholesky(gram)
        self.basis = solve_triangular(L, E.T, lower=True).T
        # column 0 of V is identically 1, so basis[:, 0] is the exact
        # constant 1/sqrt(vol); apply/solve rely on that for deflation
        self.multipliers = sphere_multiplier(n, np.arange(K))
        self._const = float(self.basis[0, 0])

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Spectral coefficients <e_k, u> with the constant mode deflated."""
        c = np.empty(self.mode_count)
        c[0] = np.dot(self.weights, values) * self._const
        residual = values - c[0] * self._const
        c[1:] = (self.weights * residual) @ self.basis[:, 1:]
        return c

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        return self.basis @ coeffs

    def apply(self, values: np.ndarray) -> np.ndarray:
        c = self.analyze(values)
        return self.synthesize(self.multipliers * c)

    def solve(self, values: np.ndarray) -> np.ndarray:
        c = self.analyze(values)
        return self.synthesize(c / self.multipliers)


@dataclass(frozen=True)
class EinsteinProductData:
    """Constants of an Einstein cross-section times a circle: total dimension
    ``n``, scalar curvature ``R0``, Ricci along the circle ``Ric_dir``,
    background Q-curvature ``Q0``, and cross-section volume."""

    n: int
    R0: float
    Ric_dir: float
    Q0: float
    cross_volume: float


EINSTEIN_PRESETS: dict[str, EinsteinProductData] = {
    # S^4 x S^1: R = 12, |Ric|^2 = 36, Q = 89/8 - 8 = 25/8, vol(S^4) = 8 pi^2/3
    "s4xs1": EinsteinProductData(
        n=5, R0=12.0, Ric_dir=0.0, Q0=25.0 / 8.0, cross_volume=sphere_volume(4)
    ),
}


class CircleProductManifold(DiscreteManifold):
    """Einstein cross-section times a circle of length L, reduced to functions
    of the circle coordinate.

    The operator acts as the Fourier multiplier
    ``P(k) = k^4 + (a_n R0 + b_pb Ric_dir) k^2 + ((n-4)/2) Q0`` on modes
    ``k = 2 pi m / L``; construction rejects data whose symbol is not
    strictly positive on the represented modes.
    """

    kind = EINSTEIN_CIRCLE_PRODUCT

    def __init__(self, data: EinsteinProductData, L: float, K: int):
        if K < 4:
            raise ManifoldError(f"need at least 4 Fourier nodes, got K={K}")
        if L <= 0:
            raise ManifoldError("circle length must be positive")
        coeffs = CoeffTable.for_dimension(data.n)
        background = Background(R0=data.R0, Ric_dir=data.Ric_dir, Q0=data.Q0)
        w = np.full(K, data.cross_volume * L / K)
        super().__init__(coeffs, background, w)
        self.L = float(L)
        self.cross_volume = float(data.cross_volume)
        self.s = np.arange(K) * (L / K)
        self.wavenumbers = 2.0 * math.pi * np.fft.rfftfreq(K, d=L / K)
        quad_coeff = coeffs.a_n * data.R0 + coeffs.b_pb * data.Ric_dir
        self.multipliers = (
            self.wavenumbers**4
            + quad_coeff * self.wavenumbers**2
            + coeffs.half_nm4 * data.Q0
        )
        if np.min(self.multipliers) <= 0.0:
            k_bad = float(self.wavenumbers[int(np.argmin(self.multipliers))])
            raise ManifoldError(
                f"non-coercive symbol: P(k) = {np.min(self.multipliers):g} <= 0 "
                f"at k = {k_bad:g}"
            )

    def apply(self, values: np.ndarray) -> np.ndarray:
        return np.fft.irfft(np.fft.rfft(values) * self.multipliers, n=self.node_count)

    def solve(self, values: np.ndarray) -> np.ndarray:
        return np.fft.irfft(np.fft.rfft(values) / self.multipliers, n=self.node_count)


class MatrixManifold(DiscreteManifold):
    """Arbitrary weighted node set with a dense operator matrix.

    The operator matrix ``P`` (acting on nodal values) must be self-adjoint
    in the weighted inner product, i.e. diag(w) P symmetric, and positive
    definite; the solver uses a Cholesky factorization of the quadratic-form
    matrix.
    """

    kind = MATRIX_LOADED

    def __init__(
        self,
        n: int,
        weights: np.ndarray,
        P: np.ndarray,
        R0: float | None = None,
        Ric_dir: float | None = None,
        Q0: float | None = None,
    ):
        if n < 5:
            raise ManifoldError(f"dimension must be >= 5, got {n}")
        P = np.asarray(P, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] != weights.size:
            raise ManifoldError("operator matrix shape incompatible with weights")
        coeffs = CoeffTable.for_dimension(n)
        form = weights[:, None] * P
        scale = max(1.0, float(np.max(np.abs(form))))
        if float(np.max(np.abs(form - form.T))) > 1e-10 * scale:
            raise ManifoldError(
                "asymmetric operator: matrix is not self-adjoint in the weighted "
                "inner product (tolerance 1e-10)"
            )
        form = 0.5 * (form + form.T)
        eigmin = float(np.linalg.eigvalsh(form).min())
        if eigmin <= 0.0:
            raise ManifoldError(
                f"operator not positive definite: smallest eigenvalue estimate {eigmin:g}"
            )
        # derive/validate Q0 from the operator image of the constant
        p_one = P @ np.ones(weights.size)
        q0_implied = 2.0 / (n - 4) * float(np.dot(weights, p_one) / weights.sum())
        if Q0 is not None and abs(Q0 - q0_implied) > 1e-8 * max(1.0, abs(Q0)):
            raise ManifoldError(
                f"declared Q0 = {Q0:g} inconsistent with operator "
                f"(P applied to 1 implies Q0 = {q0_implied:g})"
            )
        background = Background(
            R0=1.0 if R0 is None else R0,
            Ric_dir=0.0 if Ric_dir is None else Ric_dir,
            Q0=q0_implied if Q0 is None else Q0,
        )
        super().__init__(coeffs, background, weights)
        self.P = P
        self.form = form
        self._cho = cho_factor(form)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.P @ values

    def solve(self, values: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, self.weights * values)


def build_sphere_axisym(n: int, K: int) -> SphereManifold:
    """Round S^n restricted to axisymmetric functions with K Gauss nodes/modes.

    Parameters
    ----------
    n : int
        Sphere dimension, n >= 5.
    K : int
        Number of quadrature nodes, equal to the number of zonal modes
        (square transform); K >= 4.
    """
    return SphereManifold(n, K)


def build_einstein_circle_product(
    base: str | EinsteinProductData, L: float, K: int
) -> CircleProductManifold:
    """Einstein cross-section times a circle of length L with K Fourier nodes.

    ``base`` is either a preset name (``"s4xs1"``) or an
    :class:`EinsteinProductData` record.  Construction fails if the operator
    symbol is not strictly positive on every represented mode.
    """
    if isinstance(base, str):
        try:
            data = EINSTEIN_PRESETS[base]
        except KeyError:
            raise ManifoldError(
                f"unknown preset {base!r}; available: {sorted(EINSTEIN_PRESETS)}"
            ) from None
    else:
        data = base
    return CircleProductManifold(data, L, K)


_MATRIX_SCALAR_KEYS = ("n", "N", "R0", "Ric_dir", "Q0")


def _tokenize_matrix_file(text: str) -> list[str]:
    tokens: list[str] = []
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        tokens.extend(body.split())
    return tokens


def load_matrix_manifold(path) -> MatrixManifold:
    """Load a MatrixLoaded manifold from a structured text file.

    The file holds whitespace-separated tokens with ``#`` comments.  Keys
    ``n`` and ``N`` must precede ``weights`` (N reals) and ``P`` (N*N reals,
    row-major); ``R0``, ``Ric_dir`` and ``Q0`` are optional scalars.  The
    operator must be self-adjoint in the weighted inner product and positive
    definite; a declared ``Q0`` must match the operator applied to the
    constant function.
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = _tokenize_matrix_file(fh.read())
    values: dict[str, object] = {}
    i = 0

    def take(count: int, key: str) -> np.ndarray:
        nonlocal i
        if i + count > len(tokens):
            raise ManifoldError(f"unexpected end of file while reading {key!r}")
        try:
            block = np.array([float(t) for t in tokens[i : i + count]])
        except ValueError as exc:
            raise ManifoldError(f"non-numeric data in {key!r}: {exc}") from None
        i += count
        return block

    while i < len(tokens):
        key = tokens[i]
        i += 1
        if key in values:
            raise ManifoldError(f"duplicate key {key!r}")
        if key in _MATRIX_SCALAR_KEYS:
            values[key] = float(take(1, key)[0])
        elif key == "weights":
            if "N" not in values:
                raise ManifoldError("'N' must precede 'weights'")
            values[key] = take(int(values["N"]), key)
        elif key == "P":
            if "N" not in values:
                raise ManifoldError("'N' must precede 'P'")
            N = int(values["N"])
            values[key] = take(N * N, key).reshape(N, N)
        else:
            raise ManifoldError(f"unknown key {key!r} in manifold file")
    for required in ("n", "N", "weights", "P"):
        if required not in values:
            raise ManifoldError(f"missing required key {required!r}")
    return MatrixManifold(
        n=int(values["n"]),
        weights=values["weights"],
        P=values["P"],
        R0=values.get("R0"),
        Ric_dir=values.get("Ric_dir"),
        Q0=values.get("Q0"),
    )


def integrate(man: DiscreteManifold, h: np.ndarray) -> float:
    """Quadrature integral of a nodal field over the manifold."""
    return float(np.dot(man.weights, man.check_field(h)))


def lp_norm(man: DiscreteManifold, h: np.ndarray, p: float) -> float:
    """L^p norm (integral of |h|^p) ** (1/p); requires p >= 1."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    h = man.check_field(h)
    return float(np.dot(man.weights, np.abs(h) ** p) ** (1.0 / p))
