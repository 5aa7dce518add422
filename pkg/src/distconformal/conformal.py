"""Conformal p-values, Benjamini-Hochberg, FastLSU and error metrics.

P-values are kept as exact fractions ``k / (l + 1)`` so that the distributed
FastLSU iteration and a centralized BH run on the pooled vector agree bit
for bit. Floats passed by callers are read as the decimal they print as
(``0.1`` means ``1/10``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError

_INT64_SAFE = 1 << 62


def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer, Rational)):
        return Fraction(x)
    if isinstance(x, (float, np.floating)):
        if not np.isfinite(x):
            raise InvalidInputError(f"non-finite value {x!r}")
        return Fraction(repr(float(x)))
    if isinstance(x, str):
        return Fraction(x)
    raise InvalidInputError(f"cannot interpret {x!r} as a rational number")


def _check_alpha(alpha) -> Fraction:
    a = as_fraction(alpha)
    if not 0 < a < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    return a


@dataclass(frozen=True)
class PValueVector:
    """Empirical p-values ``counts / (cal_size + 1)`` of one agent's tests."""

    agent_id: int
    counts: np.ndarray
    cal_size: int
    test_index: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        index = np.asarray(self.test_index, dtype=np.int64)
        if counts.shape != index.shape or counts.ndim != 1:
            raise InvalidInputError("counts and test_index must be 1-d and equally long")
        if counts.size and (counts.min() < 1 or counts.max() > self.cal_size + 1):
            raise InvalidInputError("p-value numerators must lie in 1..cal_size+1")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "test_index", index)

    @property
    def denominator(self) -> int:
        return self.cal_size + 1

    @property
    def pvals(self) -> np.ndarray:
        return self.counts / self.denominator

    def __len__(self) -> int:
        return len(self.counts)

    def fraction(self, i: int) -> Fraction:
        return Fraction(int(self.counts[i]), self.denominator)


@dataclass(frozen=True)
class RejectionSet:
    rejected: frozenset
    threshold: Fraction = Fraction(0)

    def __len__(self) -> int:
        return len(self.rejected)

    def for_agent(self, agent_id: int) -> "RejectionSet":
        return RejectionSet(frozenset(r for r in self.rejected if r[0] == agent_id), self.threshold)


@dataclass(frozen=True)
class ErrorMetrics:
    false_discoveries: int
    rejections: int
    true_discoveries: int
    novelties: int

    @property
    def fdp(self) -> float:
        return self.false_discoveries / max(self.rejections, 1)

    @property
    def power(self) -> float:
        return self.true_discoveries / self.novelties if self.novelties else 0.0

    def __add__(self, other: "ErrorMetrics") -> "ErrorMetrics":
        return ErrorMetrics(
            self.false_discoveries + other.false_discoveries,
            self.rejections + other.rejections,
            self.true_discoveries + other.true_discoveries,
            self.novelties + other.novelties,
        )


def empirical_pvalue(test_score: float, calibration_scores: Sequence[float]) -> Fraction:
    """``(1 + #{calibration >= test}) / (l + 1)``; ties count against the test point."""
    cal = np.asarray(calibration_scores, dtype=np.float64)
    if cal.size == 0:
        raise InvalidInputError("calibration set is empty")
    return Fraction(1 + int(np.count_nonzero(cal >= test_score)), cal.size + 1)


def empirical_pvalues(test_scores, calibration_scores, agent_id: int = 0, test_index=None) -> PValueVector:
    """Vectorized :func:`empirical_pvalue` for a whole test sample."""
    cal = np.sort(np.asarray(calibration_scores, dtype=np.float64))
    tst = np.asarray(test_scores, dtype=np.float64)
    if cal.size == 0:
        raise InvalidInputError("calibration set is empty")
    if np.isnan(cal).any() or np.isnan(tst).any():
        raise InvalidInputError("scores must not be NaN")
    n_ge = cal.size - np.searchsorted(cal, tst, side="left")
    if test_index is None:
        test_index = np.arange(tst.size)
    return PValueVector(agent_id=agent_id, counts=1 + n_ge, cal_size=cal.size, test_index=test_index)


class _Pool:
    """Concatenated p-values as exact numerator/denominator pairs."""

    def __init__(self, agent, index, num, den):
        self.agent = agent
        self.index = index
        self.num = num
        self.den = den

    @classmethod
    def from_vectors(cls, vectors: Sequence[PValueVector]) -> "_Pool":
        vectors = list(vectors)
        if not vectors:
            return cls(*(np.zeros(0, dtype=np.int64) for _ in range(4)))
        return cls(
            np.concatenate([np.full(len(v), v.agent_id, dtype=np.int64) for v in vectors]),
            np.concatenate([v.test_index for v in vectors]),
            np.concatenate([v.counts for v in vectors]),
            np.concatenate([np.full(len(v), v.denominator, dtype=np.int64) for v in vectors]),
        )

    @classmethod
    def from_values(cls, values: Iterable) -> "_Pool":
        fr = [as_fraction(p) for p in values]
        for p in fr:
            if not 0 < p <= 1:
                raise InvalidInputError(f"p-value {p} outside (0, 1]")
        num = np.array([p.numerator for p in fr], dtype=object)
        den = np.array([p.denominator for p in fr], dtype=object)
        if fr and max(max(num), max(den)) < (1 << 30):
            num, den = num.astype(np.int64), den.astype(np.int64)
        n = len(fr)
        return cls(np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64), num, den)

    def __len__(self) -> int:
        return len(self.num)

    def _exact(self, bound: int) -> bool:
        if self.num.dtype == object or len(self) == 0:
            return self.num.dtype != object
        return int(self.num.max()) * bound < _INT64_SAFE and int(self.den.max()) * bound < _INT64_SAFE

    def below(self, alpha: Fraction, r: int, total: int) -> np.ndarray:
        """Mask of p-values ``<= alpha * r / total``."""
        a, b = alpha.numerator, alpha.denominator
        if self._exact(max(b * total, a * max(r, 1))):
            return self.num * (b * total) <= self.den * (a * r)
        num = self.num.astype(object)
        den = self.den.astype(object)
        return np.asarray(num * (b * total) <= den * (a * r), dtype=bool)

    def sorted_order(self) -> np.ndarray:
        if self.num.dtype != object and (len(self) == 0 or int(self.den.max()) < (1 << 26)):
            return np.argsort(self.num / self.den, kind="stable")
        keys = [Fraction(int(n), int(d)) for n, d in zip(self.num, self.den)]
        return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)

    def rejection_set(self, mask: np.ndarray, threshold: Fraction) -> RejectionSet:
        pairs = zip(self.agent[mask].tolist(), self.index[mask].tolist())
        return RejectionSet(frozenset(pairs), threshold)


def _as_pool(pvals) -> _Pool:
    if isinstance(pvals, PValueVector):
        return _Pool.from_vectors([pvals])
    pvals = list(pvals)
    if pvals and all(isinstance(v, PValueVector) for v in pvals):
        return _Pool.from_vectors(pvals)
    return _Pool.from_values(pvals)


def bh_procedure(pvals, alpha) -> RejectionSet:
    """Benjamini-Hochberg step-up at level ``alpha``.

    ``pvals`` may be a plain sequence of numbers (identified as agent 0,
    position ``i``), a :class:`PValueVector`, or a list of vectors which are
    pooled. Rejects every p-value ``<= alpha * k / m`` where ``k`` is the
    largest rank whose ordered p-value clears its step line.
    """
    alpha = _check_alpha(alpha)
    pool = _as_pool(pvals)
    m = len(pool)
    if m == 0:
        raise InvalidInputError("no p-values given")
    order = pool.sorted_order()
    ranks = np.arange(1, m + 1)
    a, b = alpha.numerator, alpha.denominator
    num, den = pool.num[order], pool.den[order]
    if pool._exact(max(b * m, a * m)):
        ok = num * (b * m) <= den * (a * ranks)
    else:
        ok = np.asarray(num.astype(object) * (b * m) <= den.astype(object) * (a * ranks.astype(object)), dtype=bool)
    hits = np.flatnonzero(ok)
    k_hat = int(hits[-1]) + 1 if hits.size else 0
    threshold = alpha * k_hat / m
    return pool.rejection_set(pool.below(alpha, k_hat, m), threshold)


@dataclass(frozen=True)
class FastLSURound:
    local_counts: tuple[int, ...]
    global_count: int


@dataclass(frozen=True)
class FastLSULog:
    """Scalars exchanged by FastLSU, one entry per round.

    Round 0 is the set-up exchange of test-sample sizes that establishes the
    total ``M``; every later round carries the local rejection counts at the
    current threshold and their sum. The last round is the confirmation
    round that detects the fixed point.
    """

    rounds: tuple[FastLSURound, ...] = field(default_factory=tuple)

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def count_rounds(self) -> int:
        return max(len(self.rounds) - 1, 0)

    @property
    def global_counts(self) -> list[int]:
        return [r.global_count for r in self.rounds]


def fastlsu(vectors: Sequence[PValueVector], alpha) -> tuple[RejectionSet, FastLSULog]:
    """Distributed fixed-point search for the pooled BH threshold.

    Starting from ``R_0 = M`` every agent counts its p-values below
    ``alpha * R_t / M``; the sum is ``R_{t+1}``. The iteration stops when the
    count repeats, at which point the rejections coincide with BH applied to
    the pooled p-values.
    """
    alpha = _check_alpha(alpha)
    vectors = list(vectors)
    if not vectors:
        raise InvalidInputError("need at least one agent")
    pools = [_Pool.from_vectors([v]) for v in vectors]
    sizes = tuple(len(v) for v in vectors)
    total = sum(sizes)
    if total == 0:
        raise InvalidInputError("no p-values across agents")

    rounds = [FastLSURound(sizes, total)]
    r_prev = total
    while True:
        counts = tuple(int(np.count_nonzero(p.below(alpha, r_prev, total))) for p in pools)
        r_next = sum(counts)
        rounds.append(FastLSURound(counts, r_next))
        if r_next > r_prev:
            raise AssertionError(f"FastLSU count increased from {r_prev} to {r_next}")
        if r_next == r_prev:
            break
        r_prev = r_next

    threshold = alpha * r_prev / total
    rejected = frozenset()
    for p in pools:
        rejected |= p.rejection_set(p.below(alpha, r_prev, total), threshold).rejected
    return RejectionSet(rejected, threshold), FastLSULog(tuple(rounds))


def _bits(n: int) -> int:
    """``ceil(log2(n + 1))`` for ``n >= 0``."""
    return int(n).bit_length()


def round_bits(m: int, K: int) -> int:
    """Bits one agent moves per FastLSU round: its local count out, the global count in."""
    return _bits(m) + _bits(K * m)


def fastlsu_comm_bound(m: int, K: int) -> int:
    """Worst-case bits per agent: ``K*m`` rounds of :func:`round_bits`."""
    if m < 1 or K < 1:
        raise InvalidInputError(f"need m >= 1 and K >= 1, got m={m}, K={K}")
    return K * m * round_bits(m, K)


def fastlsu_actual_comm(log: FastLSULog | int, m: int, K: int) -> int:
    """Bits one agent actually moved for a logged run (set-up and confirmation included)."""
    n_rounds = log if isinstance(log, int) else log.n_rounds
    return n_rounds * round_bits(m, K)


def score_metrics(rejections: RejectionSet, truth: Mapping[tuple[int, int], bool]) -> ErrorMetrics:
    """Count false and true discoveries against hidden novelty labels.

    ``truth`` maps every tested ``(agent_id, test_index)`` to True for a
    novelty; power is taken over all novelties in ``truth``.
    """
    v = 0
    t = 0
    for key in rejections.rejected:
        try:
            novel = truth[key]
        except KeyError:
            raise InvalidInputError(f"rejected hypothesis {key} has no ground-truth label") from None
        if novel:
            t += 1
        else:
            v += 1
    n_novel = sum(1 for x in truth.values() if x)
    return ErrorMetrics(false_discoveries=v, rejections=v + t, true_discoveries=t, novelties=n_novel)


def metrics_from_labels(rejected_mask: np.ndarray, is_novelty: np.ndarray) -> ErrorMetrics:
    """Array form of :func:`score_metrics` for a single agent."""
    rejected_mask = np.asarray(rejected_mask, dtype=bool)
    is_novelty = np.asarray(is_novelty, dtype=bool)
    t = int(np.count_nonzero(rejected_mask & is_novelty))
    v = int(np.count_nonzero(rejected_mask & ~is_novelty))
    return ErrorMetrics(v, v + t, t, int(np.count_nonzero(is_novelty)))
