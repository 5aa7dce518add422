"""Synthetic Gaussian benchmark with heterogeneous local nulls.

Agent ``k`` draws nulls from ``N(mu_k, I_d)`` where the centroids sit on a
circle of radius ``delta`` in the plane spanned by two orthogonal unit
vectors ``u`` (first half of the coordinates) and ``v`` (second half). For
three agents this is an equilateral triangle. Novelties for every agent come
from ``N(mu_alt, I_d)`` with a sparse shift of ``sqrt(2 ln d)`` on the first
five coordinates.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class SynthConfig:
    d: int = 20
    K: int = 3
    delta: float = 0.0
    pi0: float = 0.9
    n_train_total: int = 3000
    n_test_total: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.d < 5:
            raise InvalidInputError(f"d must be at least 5, got {self.d}")
        if self.K < 1:
            raise InvalidInputError(f"K must be at least 1, got {self.K}")
        if not 0 <= self.pi0 <= 1:
            raise InvalidInputError(f"pi0 must lie in [0, 1], got {self.pi0}")
        if self.n_train_total < self.K or self.n_test_total < 0:
            raise InvalidInputError("sample totals too small for the number of agents")


@dataclass(frozen=True)
class AgentDataset:
    """One agent's null sample and labelled test sample (labels are for scoring only)."""

    agent_id: int
    nulls: np.ndarray
    tests: np.ndarray
    is_novelty: np.ndarray

    @property
    def n(self) -> int:
        return self.nulls.shape[0]

    @property
    def m(self) -> int:
        return self.tests.shape[0]


def basis(d: int) -> tuple[np.ndarray, np.ndarray]:
    """The unit vectors ``u`` and ``v`` supported on complementary coordinate halves."""
    if d < 2:
        raise InvalidInputError(f"d must be at least 2, got {d}")
    h = d // 2
    u = np.zeros(d)
    v = np.zeros(d)
    u[:h] = 1 / math.sqrt(h)
    v[h:] = 1 / math.sqrt(d - h)
    return u, v


def centroids(d: int = 20, K: int = 3, delta: float = 0.0) -> np.ndarray:
    """``K`` null means, equally spaced on the radius-``delta`` circle in span{u, v}.

    ``K = 3`` gives ``delta*u``, ``delta*(-u/2 + v*sqrt(3)/2)`` and
    ``delta*(-u/2 - v*sqrt(3)/2)``.
    """
    u, v = basis(d)
    out = np.empty((K, d))
    for k in range(K):
        if K == 3:
            # exact trig values so the triangle is symmetric to the last bit
            c, s = [(1.0, 0.0), (-0.5, math.sqrt(3) / 2), (-0.5, -math.sqrt(3) / 2)][k]
        else:
            angle = 2 * math.pi * k / K
            c, s = math.cos(angle), math.sin(angle)
        out[k] = delta * (c * u + s * v)
    return out


def novelty_mean(d: int = 20) -> np.ndarray:
    if d < 5:
        raise InvalidInputError(f"d must be at least 5, got {d}")
    mu = np.zeros(d)
    mu[:5] = math.sqrt(2 * math.log(d))
    return mu


def split_counts(total: int, parts: int) -> list[int]:
    """Largest-remainder split of ``total`` into ``parts`` near-equal integers."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def null_count(m: int, pi0: float) -> int:
    return math.floor(Fraction(str(pi0)) * m)


def generate(config: SynthConfig) -> list[AgentDataset]:
    """Draw every agent's dataset from independent Philox streams."""
    mus = centroids(config.d, config.K, config.delta)
    mu_alt = novelty_mean(config.d)
    n_counts = split_counts(config.n_train_total, config.K)
    m_counts = split_counts(config.n_test_total, config.K)
    streams = np.random.SeedSequence(config.seed).spawn(config.K)

    agents = []
    for k in range(config.K):
        rng = np.random.Generator(np.random.Philox(streams[k]))
        n, m = n_counts[k], m_counts[k]
        m0 = null_count(m, config.pi0)
        nulls = mus[k] + rng.standard_normal((n, config.d))
        test_nulls = mus[k] + rng.standard_normal((m0, config.d))
        novelties = mu_alt + rng.standard_normal((m - m0, config.d))
        labels = np.concatenate([np.zeros(m0, dtype=bool), np.ones(m - m0, dtype=bool)])
        perm = rng.permutation(m)
        tests = np.vstack([test_nulls, novelties])[perm]
        agents.append(AgentDataset(agent_id=k, nulls=nulls, tests=tests, is_novelty=labels[perm]))
    return agents


def to_csv(agents: list[AgentDataset]) -> str:
    """One row per point: agent, role (null/test), label (0 null, 1 novelty), features."""
    if not agents:
        raise InvalidInputError("no agents to export")
    d = agents[0].nulls.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "role", "label"] + [f"x{i}" for i in range(d)])
    for a in agents:
        for row in a.nulls:
            w.writerow([a.agent_id, "null", 0] + [repr(float(x)) for x in row])
        for row, lab in zip(a.tests, a.is_novelty):
            w.writerow([a.agent_id, "test", int(lab)] + [repr(float(x)) for x in row])
    return buf.getvalue()
