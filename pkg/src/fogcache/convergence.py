"""Federated SGD on strongly convex quadratics with known optimum.

Clients hold ``f_n(theta) = 1/2 (theta - c_n)^T diag(a_n) (theta - c_n)`` and
take noisy local gradient steps; every ``X`` steps the weighted average is
broadcast. Because the optimum, curvature bounds and heterogeneity gap are
closed-form, the one-step contraction inequality and the O(1/t) bound for the
decaying schedule ``phi_t = b / (t + a)`` can be checked numerically.

Time is 1-based: ``theta_bar_1`` is the start point, step ``t`` uses ``phi_t``
and produces ``v_bar_{t+1}``, and the clients synchronize after steps
``X, 2X, ...``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .fedcompress import kmeans_quantize

TRUNCATION = 6.0  # noise is a normal truncated at +-6 std, rescaled to unit variance


class ScheduleError(ValueError):
    """The learning-rate schedule violates a precondition of the bounds."""


def _truncnorm_var(c: float) -> float:
    pdf = math.exp(-c * c / 2) / math.sqrt(2 * math.pi)
    mass = math.erf(c / math.sqrt(2))
    return 1.0 - 2 * c * pdf / mass


NOISE_SCALE = 1.0 / math.sqrt(_truncnorm_var(TRUNCATION))


def sample_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Zero-mean, unit-variance noise with support within +-TRUNCATION * NOISE_SCALE."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > TRUNCATION
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > TRUNCATION
    return z * NOISE_SCALE


@dataclass
class QuadraticClient:
    center: np.ndarray
    curvature: np.ndarray  # diagonal of the Hessian
    sigma: float  # total std of the gradient noise vector
    weight: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.curvature = np.broadcast_to(
            np.asarray(self.curvature, dtype=np.float64), self.center.shape
        ).copy()
        if np.any(self.curvature <= 0):
            raise ValueError("curvature must be positive")
        if self.sigma < 0 or self.weight < 0:
            raise ValueError("sigma and weight must be non-negative")

    @property
    def dim(self) -> int:
        return self.center.size

    def loss(self, theta) -> float:
        d = np.asarray(theta) - self.center
        return float(0.5 * np.sum(self.curvature * d * d))

    def grad(self, theta) -> np.ndarray:
        return self.curvature * (np.asarray(theta) - self.center)


def _check_weights(clients):
    p = np.array([c.weight for c in clients])
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("client weights must sum to 1")
    return p


def curvature_bounds(clients) -> tuple:
    """(mu, beta): the smallest and largest Hessian eigenvalue over all clients."""
    allc = np.concatenate([c.curvature for c in clients])
    return float(allc.min()), float(allc.max())


def optimum(clients) -> tuple:
    """Global minimizer theta* of sum_n p_n f_n and the gap Phi = sum_n p_n f_n(theta*)."""
    p = _check_weights(clients)
    A = np.array([c.curvature for c in clients])
    C = np.array([c.center for c in clients])
    theta = (p[:, None] * A * C).sum(axis=0) / (p[:, None] * A).sum(axis=0)
    phi = float(sum(pn * c.loss(theta) for pn, c in zip(p, clients)))
    return theta, phi


def random_instance(seed, num_clients: int, dim: int = 5, spread: float = 1.0,
                    sigma: float = 0.5, anisotropic: bool = False,
                    mu: float = 1.0, beta: float = 1.0) -> list:
    """Heterogeneous clients with random centers, weights and noise levels."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(num_clients, 2.0))
    clients = []
    for n in range(num_clients):
        center = rng.normal(0.0, spread, size=dim)
        if anisotropic:
            curv = rng.uniform(mu, beta, size=dim)
            curv[0], curv[-1] = mu, beta
        else:
            curv = np.full(dim, mu)
        s = sigma * rng.uniform(0.5, 1.5)
        clients.append(QuadraticClient(center, curv, s, float(p[n])))
    return clients


@dataclass(frozen=True)
class DecayingSchedule:
    """phi_t = b / (t + a)."""

    a: float
    b: float

    def __call__(self, t):
        return self.b / (np.asarray(t, dtype=np.float64) + self.a)


def standard_schedule(mu: float, beta: float, X: int) -> DecayingSchedule:
    """b = 2/mu and the smallest a meeting phi_1 <= 1/(4 beta) and a >= X - 1."""
    b = 2.0 / mu
    return DecayingSchedule(max(4.0 * beta * b - 1.0, X - 1.0), b)


def check_schedule(phi: np.ndarray, mu: float, beta: float, X: int) -> None:
    if np.any(phi <= 0):
        raise ScheduleError("learning rates must be positive")
    if np.any(np.diff(phi) > 0):
        raise ScheduleError("learning rate must be non-increasing")
    if phi[0] > min(1.0 / mu, 1.0 / (4.0 * beta)) * (1 + 1e-12):
        raise ScheduleError(f"phi_1={phi[0]} exceeds min(1/mu, 1/(4 beta))")
    if phi.size > X and np.any(phi[:-X] > 2.0 * phi[X:] * (1 + 1e-12)):
        raise ScheduleError("need phi_t <= 2 phi_{t+X}")


@dataclass
class TheoremTrace:
    t: np.ndarray  # 1..T
    phi: np.ndarray
    sq_theta: np.ndarray  # (R, T) ||theta_bar_t - theta*||^2 per replica
    sq_v: np.ndarray  # (R, T) ||v_bar_{t+1} - theta*||^2 per replica
    mu: float
    beta: float
    X: int
    sigma2_term: float  # sum p_n^2 sigma_n^2
    phi_gap: float  # Phi
    G2: float
    schedule: Optional[DecayingSchedule] = None
    label: str = "exact"

    @property
    def replicas(self) -> int:
        return self.sq_theta.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return self.sq_theta.mean(axis=0)

    @property
    def delta_se(self) -> np.ndarray:
        return self.sq_theta.std(axis=0, ddof=1) / math.sqrt(self.replicas)

    @property
    def v_next(self) -> np.ndarray:
        return self.sq_v.mean(axis=0)

    def H(self, scale: float = 1.0) -> float:
        h = self.sigma2_term + 6 * self.beta * self.phi_gap + 8 * (self.X - 1) ** 2 * self.G2
        return scale * h

    def theorem1_rhs(self, h_scale: float = 1.0) -> np.ndarray:
        return (1 - self.mu * self.phi) * self.delta + self.phi ** 2 * self.H(h_scale)

    @property
    def rho(self) -> float:
        if self.schedule is None:
            raise ScheduleError("the O(1/t) bound needs a decaying schedule b/(t+a)")
        a, b = self.schedule.a, self.schedule.b
        if b * self.mu <= 1:
            raise ScheduleError("need b > 1/mu")
        return max(b * b * self.H() / (b * self.mu - 1), (a + 1) * self.delta[0])

    def theorem2_bound(self) -> np.ndarray:
        return self.rho / (self.schedule.a + self.t)

    def rows(self) -> list:
        """(t, delta, theorem1_lhs, theorem1_rhs, theorem2_bound) per step."""
        b2 = self.theorem2_bound() if self.schedule is not None else np.full(self.t.size, np.nan)
        return list(zip(self.t.tolist(), self.delta.tolist(), self.v_next.tolist(),
                        self.theorem1_rhs().tolist(), b2.tolist()))


def run_fedsgd(clients: Sequence[QuadraticClient], X: int, Y: int, schedule,
               seed: int = 0, replicas: int = 200, theta0=None,
               clusters: Optional[int] = None) -> TheoremTrace:
    """Simulate Y periods of X noisy local steps with weighted averaging.

    ``schedule`` is a :class:`DecayingSchedule` or an explicit array of the
    ``X * Y`` learning rates. ``clusters`` quantizes every uploaded delta
    with a k-means codebook (an empirical variant the bounds do not cover).
    Replica ``r`` draws its noise from ``default_rng([seed, r])``.
    """
    if X < 1 or Y < 1 or replicas < 2:
        raise ValueError("need X >= 1, Y >= 1 and at least two replicas")
    p = _check_weights(clients)
    mu, beta = curvature_bounds(clients)
    T = X * Y
    t = np.arange(1, T + 1)
    if isinstance(schedule, DecayingSchedule):
        phi = schedule(t)
        sched = schedule
    else:
        phi = np.asarray(schedule, dtype=np.float64)
        sched = None
        if phi.shape != (T,):
            raise ScheduleError(f"need {T} learning rates, got {phi.shape}")
    check_schedule(phi, mu, beta, X)

    theta_star, gap = optimum(clients)
    A = np.array([c.curvature for c in clients])
    C = np.array([c.center for c in clients])
    d = C.shape[1]
    N = len(clients)
    coord_std = np.array([c.sigma for c in clients]) / math.sqrt(d)  # per coordinate
    start = theta_star if theta0 is None else np.asarray(theta0, dtype=np.float64)

    noise = np.stack([sample_noise(np.random.default_rng([seed, r]), (T, N, d))
                      for r in range(replicas)])
    noise *= coord_std[None, None, :, None]

    theta = np.broadcast_to(start, (replicas, N, d)).copy()
    synced = theta[:, 0, :].copy()
    sq_theta = np.empty((replicas, T))
    sq_v = np.empty((replicas, T))
    gmax = 0.0
    for i in range(T):
        g = A * (theta - C)
        gmax = max(gmax, float(np.sqrt((g * g).sum(axis=-1)).max()))
        tbar = np.einsum("n,rnd->rd", p, theta)
        sq_theta[:, i] = ((tbar - theta_star) ** 2).sum(axis=-1)
        v = theta - phi[i] * (g + noise[:, i])
        vbar = np.einsum("n,rnd->rd", p, v)
        sq_v[:, i] = ((vbar - theta_star) ** 2).sum(axis=-1)
        if (i + 1) % X == 0:
            if clusters is not None:
                vbar = synced + _quantized_mean(v - synced[:, None, :], p, clusters, seed)
            theta = np.broadcast_to(vbar[:, None, :], v.shape).copy()
            synced = vbar
        else:
            theta = v
    tail = TRUNCATION * NOISE_SCALE * float(np.max(coord_std)) * math.sqrt(d)
    G2 = (gmax + tail) ** 2
    return TheoremTrace(
        t=t, phi=phi, sq_theta=sq_theta, sq_v=sq_v, mu=mu, beta=beta, X=X,
        sigma2_term=float(np.sum(p ** 2 * np.array([c.sigma for c in clients]) ** 2)),
        phi_gap=gap, G2=G2, schedule=sched,
        label="exact" if clusters is None else f"quantized-k{clusters}",
    )


def _quantized_mean(deltas: np.ndarray, p: np.ndarray, k: int, seed: int) -> np.ndarray:
    R, N, d = deltas.shape
    out = np.zeros((R, d))
    for r in range(R):
        for n in range(N):
            cb = kmeans_quantize(deltas[r, n], min(k, d), seed)
            out[r] += p[n] * cb.decode()
    return out


@dataclass
class BoundReport:
    holds: np.ndarray  # per step
    lhs: np.ndarray
    rhs: np.ndarray
    tolerance: np.ndarray

    @property
    def all_hold(self) -> bool:
        return bool(self.holds.all())

    @property
    def violations(self) -> int:
        return int((~self.holds).sum())


def _float_slack(x: np.ndarray) -> np.ndarray:
    return 1e-12 * np.maximum(1.0, np.abs(x))


def check_theorem1(trace: TheoremTrace, h_scale: float = 1.0, n_se: float = 3.0) -> BoundReport:
    """E||v_bar_{t+1} - theta*||^2 <= (1 - mu phi_t) Delta_t + phi_t^2 H at every step.

    The comparison is paired per replica: the mean of lhs - rhs must not
    exceed ``n_se`` standard errors of that difference.
    """
    H = trace.H(h_scale)
    diff = trace.sq_v - ((1 - trace.mu * trace.phi) * trace.sq_theta + trace.phi ** 2 * H)
    se = diff.std(axis=0, ddof=1) / math.sqrt(trace.replicas)
    rhs = trace.theorem1_rhs(h_scale)
    tol = n_se * se + _float_slack(rhs)
    return BoundReport(diff.mean(axis=0) <= tol, trace.v_next, rhs, tol)


def check_theorem2(trace: TheoremTrace, n_se: float = 3.0) -> BoundReport:
    """Delta_t <= rho / (a + t) at every recorded step."""
    if trace.schedule is None:
        raise ScheduleError("the O(1/t) bound needs a decaying schedule b/(t+a)")
    bound = trace.theorem2_bound()
    tol = n_se * trace.delta_se + _float_slack(bound)
    return BoundReport(trace.delta - bound <= tol, trace.delta, bound, tol)
