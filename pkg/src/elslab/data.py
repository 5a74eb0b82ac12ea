"""Deterministic multi-domain toy datasets and environment-label corruption."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import standard_normal, substream


@dataclass(frozen=True)
class DomainDataset:
    """Points with a class label, the true environment and the observed one.

    ``num_domains`` is the number of environment labels the discriminator sees;
    after :func:`random_partition` it differs from the number of true domains.
    """

    x: np.ndarray
    y: np.ndarray
    env_true: np.ndarray
    env_observed: np.ndarray
    num_domains: int
    source_domains: tuple[int, ...]
    target_domains: tuple[int, ...]

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.y) == len(self.env_true) == len(self.env_observed) == n):
            raise ValueError("all per-point arrays must have the same length")
        if set(self.source_domains) & set(self.target_domains):
            raise ValueError("source and target domains overlap")
        if n and self.env_observed.max() >= self.num_domains:
            raise ValueError("observed environment label exceeds num_domains")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def true_domains(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.source_domains) | set(self.target_domains)))

    def mask(self, domains) -> np.ndarray:
        return np.isin(self.env_true, list(domains))

    def subset(self, index) -> "DomainDataset":
        return replace(
            self, x=self.x[index], y=self.y[index], env_true=self.env_true[index], env_observed=self.env_observed[index]
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(self.dim)] + ["class", "env_true", "env_observed"])
        for xi, yi, et, eo in zip(self.x, self.y, self.env_true, self.env_observed):
            w.writerow([format(float(v), ".17g") for v in xi] + [int(yi), int(et), int(eo)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, source_domains, target_domains, num_domains: int | None = None) -> "DomainDataset":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("x"))
        arr = np.array(body, dtype=np.float64).reshape(len(body), len(header))
        env_obs = arr[:, d + 2].astype(np.int64)
        return cls(
            x=arr[:, :d],
            y=arr[:, d].astype(np.int64),
            env_true=arr[:, d + 1].astype(np.int64),
            env_observed=env_obs,
            num_domains=num_domains if num_domains is not None else int(env_obs.max()) + 1,
            source_domains=tuple(source_domains),
            target_domains=tuple(target_domains),
        )


@dataclass(frozen=True)
class CircleConfig:
    n_domains: int = 30
    points_per_domain: int = 100
    ring_radius: float = 1.0
    radial_noise: float = 0.05
    label_margin: float = 0.2
    n_source: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 2:
            raise ValueError("n_domains must be at least 2")
        if self.radial_noise <= 0:
            raise ValueError("radial_noise must be positive")
        if self.points_per_domain % 2:
            raise ValueError("points_per_domain must be even for balanced classes")
        if not 1 <= self.n_source < self.n_domains:
            raise ValueError("need at least one source and one target domain")


def circle_arc(i: int, n_domains: int) -> tuple[float, float]:
    """Angular interval of domain ``i`` (0-based); domains sweep from angle pi down to 0."""
    width = math.pi / n_domains
    center = math.pi * (1 - (i + 0.5) / n_domains)
    return center - width / 2, center + width / 2


def gen_circle(config: CircleConfig = CircleConfig()) -> DomainDataset:
    """Binary ring classification on a half circle split into angular domains.

    Class 1 sits on the inner ring (radius r - m), class 0 on the outer ring
    (radius r + m), each with Gaussian radial noise.  The first ``n_source``
    domains are sources.
    """
    rng = substream(config.seed, "data")
    n, k = config.points_per_domain, config.n_domains
    xs, ys, envs = [], [], []
    for i in range(k):
        lo, hi = circle_arc(i, k)
        angle = rng.uniform(lo, hi, size=n)
        y = np.repeat([1, 0], n // 2)
        base = np.where(y == 1, config.ring_radius - config.label_margin, config.ring_radius + config.label_margin)
        radius = base + config.radial_noise * standard_normal(rng, n)
        xs.append(np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1))
        ys.append(y)
        envs.append(np.full(n, i))
    env = np.concatenate(envs)
    return DomainDataset(
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        env_true=env,
        env_observed=env.copy(),
        num_domains=k,
        source_domains=tuple(range(config.n_source)),
        target_domains=tuple(range(config.n_source, k)),
    )


def gen_two_gaussians(mu_s, mu_t, sigma: float, n_per_domain: int, seed: int = 0) -> DomainDataset:
    """Two isotropic Gaussian domains; class = first coordinate above the midpoint of the means."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu_s = np.atleast_1d(np.asarray(mu_s, dtype=np.float64))
    mu_t = np.atleast_1d(np.asarray(mu_t, dtype=np.float64))
    if mu_s.shape != mu_t.shape:
        raise ValueError("means must have the same dimension")
    rng = substream(seed, "data")
    d = mu_s.size
    x = np.concatenate(
        [mu_s + sigma * standard_normal(rng, (n_per_domain, d)), mu_t + sigma * standard_normal(rng, (n_per_domain, d))]
    )
    mid = 0.5 * (mu_s[0] + mu_t[0])
    env = np.repeat([0, 1], n_per_domain)
    return DomainDataset(
        x=x,
        y=(x[:, 0] > mid).astype(np.int64),
        env_true=env,
        env_observed=env.copy(),
        num_domains=2,
        source_domains=(0,),
        target_domains=(1,),
    )


def gen_disjoint_support(offset: float, n_per_domain: int, seed: int = 0) -> DomainDataset:
    """Domain 0 ~ U[0, 1], domain 1 ~ U[1 + offset, 2 + offset] (1-D)."""
    if offset <= 0:
        raise ValueError("offset must be positive")
    rng = substream(seed, "data")
    u0 = rng.uniform(0.0, 1.0, size=n_per_domain)
    u1 = rng.uniform(0.0, 1.0, size=n_per_domain)
    x = np.concatenate([u0, 1.0 + offset + u1])[:, None]
    env = np.repeat([0, 1], n_per_domain)
    return DomainDataset(
        x=x,
        y=(np.concatenate([u0, u1]) > 0.5).astype(np.int64),
        env_true=env,
        env_observed=env.copy(),
        num_domains=2,
        source_domains=(0,),
        target_domains=(1,),
    )


def random_partition(ds: DomainDataset, m_prime: int, seed: int = 0, max_tries: int = 100) -> DomainDataset:
    """Replace observed environments by a uniform random assignment to m_prime groups."""
    if m_prime < 2:
        raise ValueError("m_prime must be at least 2")
    rng = substream(seed, "partition")
    for _ in range(max_tries):
        obs = rng.integers(0, m_prime, size=len(ds))
        if len(np.unique(obs)) == m_prime:
            return replace(ds, env_observed=obs, num_domains=m_prime)
    raise RuntimeError(f"could not draw a partition with all {m_prime} groups non-empty")


def partial_labels(ds: DomainDataset, fraction_known: float, seed: int = 0) -> DomainDataset:
    """Keep the true environment on a seeded fraction of points; relabel the rest
    uniformly among the wrong environments."""
    if not 0 <= fraction_known <= 1:
        raise ValueError("fraction_known must lie in [0, 1]")
    rng = substream(seed, "labels")
    n, m = len(ds), ds.num_domains
    known = np.zeros(n, dtype=bool)
    known[rng.permutation(n)[: int(round(fraction_known * n))]] = True
    shift = rng.integers(1, m, size=n)  # 1..m-1, never the identity
    wrong = (ds.env_true + shift) % m
    return replace(ds, env_observed=np.where(known, ds.env_true, wrong))
