"""The two-parameter Dirac adversarial game.

Source and target are point masses at ``x_s`` and ``x_t``; the encoder and the
discriminator each own one scalar.  With a = theta_d * theta_e the smoothed
objective is

    d(a) = g f(a x_s) + (1-g) f(-a x_s) + g f(-a x_t) + (1-g) f(a x_t),
    f(t) = log sigmoid(t),

which the discriminator ascends and the encoder descends.  g = 1 is plain
DANN.  The equilibrium is the origin.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import asdict, dataclass, field

import numpy as np

DIVERGENCE_LIMIT = 1e6
ORDERS = ("disc_first", "encoder_first")


@dataclass(frozen=True)
class DiracGame:
    x_s: float
    x_t: float
    theta_e: float = 0.0
    theta_d: float = 0.0

    @property
    def delta(self) -> float:
        return self.x_s - self.x_t


@dataclass(frozen=True)
class GdScheme:
    kind: str = "alternating"
    eta: float = 0.1
    n_d: int = 1
    n_e: int = 1
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("simultaneous", "alternating"):
            raise ValueError(f"unknown scheme {self.kind!r}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.n_d < 1 or self.n_e < 1:
            raise ValueError("n_d and n_e must be at least 1")
        if not 0.5 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0.5, 1]")


@dataclass
class EigenReport:
    eigenvalues: tuple[complex, complex]
    spectral_radius: float
    eta_threshold: float | None
    alpha: float | None

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[z.real, z.imag] for z in self.eigenvalues],
            "spectral_radius": self.spectral_radius,
            "eta_threshold": self.eta_threshold,
            "alpha": self.alpha,
        }


@dataclass
class Trajectory:
    step: list[int] = field(default_factory=list)
    theta_e: list[float] = field(default_factory=list)
    theta_d: list[float] = field(default_factory=list)
    diverged: bool = False

    def append(self, t: int, e: float, d: float) -> None:
        self.step.append(t)
        self.theta_e.append(e)
        self.theta_d.append(d)

    @property
    def distance(self) -> np.ndarray:
        return np.hypot(self.theta_e, self.theta_d)

    def rows(self):
        for t, e, d, r in zip(self.step, self.theta_e, self.theta_d, self.distance):
            yield t, e, d, float(r)


# -- linearisation -------------------------------------------------------------


def jacobian_sim(x_s: float, x_t: float, eta: float, gamma: float = 1.0) -> np.ndarray:
    """Jacobian of one simultaneous step at the equilibrium."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    b = eta * (2 * gamma - 1) * (x_s - x_t) / 2
    return np.array([[1.0, -b], [b, 1.0]])


def jacobian_alt(x_s, x_t, eta, n_d=1, n_e=1, gamma=1.0, order: str = "encoder_first") -> np.ndarray:
    """Jacobian of one alternating round (n_e encoder and n_d discriminator steps).

    ``encoder_first`` gives the closed form
    [[1, -eta n_e k D/2], [eta n_d k D/2, 1 - eta^2 n_d n_e k^2 D^2/4]] with
    k = 2 gamma - 1 and D = x_s - x_t.  ``disc_first`` is the product in the
    other order; both share trace and determinant.
    """
    if eta <= 0 or n_d < 1 or n_e < 1:
        raise ValueError("eta must be positive and n_d, n_e >= 1")
    if not 0.5 < gamma <= 1:
        raise ValueError("gamma must lie in (0.5, 1]")
    k = 2 * gamma - 1
    c = eta * k * (x_s - x_t) / 2
    if order == "encoder_first":
        return np.array([[1.0, -n_e * c], [n_d * c, 1.0 - n_d * n_e * c * c]])
    if order == "disc_first":
        return np.array([[1.0 - n_d * n_e * c * c, -n_e * c], [n_d * c, 1.0]])
    raise ValueError(f"unknown order {order!r}")


def eigenvalues_2x2(m) -> tuple[complex, complex]:
    (a, b), (c, d) = np.asarray(m, dtype=np.float64)
    tr, det = a + d, a * d - b * c
    root = cmath.sqrt(tr * tr - 4 * det)
    return (tr + root) / 2, (tr - root) / 2


def spectral_radius(eigs) -> float:
    return max(abs(complex(z)) for z in eigs)


def alpha(x_s, x_t, eta, n_d=1, n_e=1, gamma=1.0) -> float:
    return (2 * gamma - 1) / 2 * math.sqrt(n_d * n_e) * eta * abs(x_s - x_t)


def eta_threshold(x_s, x_t, n_d=1, n_e=1, gamma=1.0) -> float:
    """Largest step size keeping the alternating Jacobian on the unit circle."""
    if x_s == x_t:
        return math.inf
    return 4.0 / (math.sqrt(n_d * n_e) * abs(x_s - x_t)) / (2 * gamma - 1)


def eigen_report(game: DiracGame, scheme: GdScheme, order: str = "encoder_first") -> EigenReport:
    if scheme.kind == "simultaneous":
        eigs = eigenvalues_2x2(jacobian_sim(game.x_s, game.x_t, scheme.eta, scheme.gamma))
        return EigenReport(eigs, spectral_radius(eigs), None, None)
    jac = jacobian_alt(game.x_s, game.x_t, scheme.eta, scheme.n_d, scheme.n_e, scheme.gamma, order)
    eigs = eigenvalues_2x2(jac)
    return EigenReport(
        eigs,
        spectral_radius(eigs),
        eta_threshold(game.x_s, game.x_t, scheme.n_d, scheme.n_e, scheme.gamma),
        alpha(game.x_s, game.x_t, scheme.eta, scheme.n_d, scheme.n_e, scheme.gamma),
    )


# -- exact dynamics ------------------------------------------------------------


def _fprime(t: float) -> float:
    # d/dt log sigmoid(t) = 1 / (1 + e^t), written to avoid overflow
    if t > 0:
        z = math.exp(-t)
        return z / (1.0 + z)
    return 1.0 / (1.0 + math.exp(t))


def objective(game: DiracGame, gamma: float, theta_e: float, theta_d: float) -> float:
    def f(t):
        return -math.log1p(math.exp(-t)) if t > -30 else t - math.log1p(math.exp(t))

    a = theta_d * theta_e
    xs, xt = game.x_s, game.x_t
    return gamma * f(a * xs) + (1 - gamma) * f(-a * xs) + gamma * f(-a * xt) + (1 - gamma) * f(a * xt)


def dobjective_da(game: DiracGame, gamma: float, a: float) -> float:
    xs, xt = game.x_s, game.x_t
    return (
        gamma * xs * _fprime(a * xs)
        - (1 - gamma) * xs * _fprime(-a * xs)
        - gamma * xt * _fprime(-a * xt)
        + (1 - gamma) * xt * _fprime(a * xt)
    )


def encoder_step(game: DiracGame, gamma: float, eta: float, e: float, d: float) -> float:
    return e - eta * d * dobjective_da(game, gamma, d * e)


def disc_step(game: DiracGame, gamma: float, eta: float, e: float, d: float) -> float:
    return d + eta * e * dobjective_da(game, gamma, d * e)


def simulate_training(game: DiracGame, scheme: GdScheme, steps: int, init=None, order: str = "disc_first") -> Trajectory:
    """Iterate the exact gradient dynamics; one recorded step is one round.

    Alternating rounds run n_d discriminator ascents and n_e encoder descents
    in the given order.  A trajectory whose parameters leave
    ``DIVERGENCE_LIMIT`` (or turn non-finite) is cut and flagged.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if order not in ORDERS:
        raise ValueError(f"unknown order {order!r}")
    e, d = (game.theta_e, game.theta_d) if init is None else map(float, init)
    g, eta = scheme.gamma, scheme.eta
    traj = Trajectory()
    traj.append(0, e, d)
    for t in range(1, steps + 1):
        if scheme.kind == "simultaneous":
            grad = dobjective_da(game, g, d * e)
            e, d = e - eta * d * grad, d + eta * e * grad
        else:
            if order == "encoder_first":
                for _ in range(scheme.n_e):
                    e = encoder_step(game, g, eta, e, d)
            for _ in range(scheme.n_d):
                d = disc_step(game, g, eta, e, d)
            if order == "disc_first":
                for _ in range(scheme.n_e):
                    e = encoder_step(game, g, eta, e, d)
        if not (math.isfinite(e) and math.isfinite(d)) or max(abs(e), abs(d)) > DIVERGENCE_LIMIT:
            traj.diverged = True
            break
        traj.append(t, e, d)
    return traj


def scheme_dict(scheme: GdScheme) -> dict:
    return asdict(scheme)
