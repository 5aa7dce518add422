"""In-process simulation of K agents testing for novelties together.

Four regimes are provided:

* ``B2``: every agent runs local conformal novelty detection on its full
  data and BH at ``alpha / K``. Nothing is transmitted.
* ``B3``: the same local p-values, combined by FastLSU at level ``alpha``.
  Only rejection counts travel.
* ``ME``: model exchange. Each agent cuts its data into K disjoint blocks.
  Block ``r`` trains the model sent to agent ``r``; the agent's own block is
  kept for its local model, calibration and testing. Test points are scored
  by the maximum of the local score and the remote surrogates, and FastLSU
  runs at level ``alpha``.
* ``ME-conservative``: no blocks. Every agent broadcasts one model trained on
  all its data and applies BH locally at ``alpha / K``.

Every exchanged model is serialized and decoded again, so the ledger holds
the true payload length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np

from .conformal import (
    ErrorMetrics,
    FastLSULog,
    PValueVector,
    RejectionSet,
    _check_alpha,
    bh_procedure,
    empirical_pvalues,
    fastlsu,
    score_metrics,
)
from .datagen import AgentDataset
from .errors import InsufficientDataError, InvalidInputError
from .quantization import FASTLSU, MODEL, CommLedger, QuantSpec, dequantize, deserialize, quantize_model, serialize
from .scoring import ForestConfig, PUDataset, ScoreModel, build_pu_dataset, composite_scores, train_score_model

COORDINATOR = 0

# stream tags for seed derivation
_SPLIT, _PU, _TRAIN = 1, 2, 3
_FULL = -1


class Method(str, Enum):
    B2 = "B2"
    B3 = "B3"
    ME = "ME"
    ME_CONSERVATIVE = "ME-conservative"

    @property
    def exchanges_models(self) -> bool:
        return self in (Method.ME, Method.ME_CONSERVATIVE)

    @classmethod
    def parse(cls, text: str) -> "Method":
        for m in cls:
            if m.value.lower() == text.strip().lower():
                return m
        raise InvalidInputError(f"unknown method {text!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class EpisodeConfig:
    K: int = 3
    alpha: Fraction = Fraction(1, 10)
    method: Method = Method.ME
    quant: QuantSpec = QuantSpec()
    forest: ForestConfig = ForestConfig()
    train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise InvalidInputError(f"K must be at least 1, got {self.K}")
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))
        object.__setattr__(self, "method", Method(self.method))
        if self.quant.quantized and not self.method.exchanges_models:
            raise InvalidInputError(f"quantization does not apply to {self.method.value}, which sends no models")
        if not 0 < self.train_fraction < 1:
            raise InvalidInputError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class Block:
    """Indices of one block of an agent's nulls and tests.

    ``block_id == r`` designates the block for agent ``r``; the block whose id
    equals the owner's id is kept locally.
    """

    owner: int
    block_id: int
    null_index: np.ndarray
    test_index: np.ndarray

    @property
    def reserved(self) -> bool:
        return self.owner == self.block_id


@dataclass
class AgentState:
    agent_id: int
    blocks: list[Block]
    local_model: ScoreModel | None = None
    surrogates: dict[int, ScoreModel] = field(default_factory=dict)


@dataclass(frozen=True)
class TrialOutcome:
    method: Method
    per_agent: tuple[ErrorMetrics, ...]
    global_metrics: ErrorMetrics
    ledger: CommLedger
    rejections: RejectionSet
    fastlsu_log: FastLSULog | None = None
    tested: tuple[int, ...] = ()  # tests evaluated per agent
    payload_bytes: dict = field(default_factory=dict)  # (sender, receiver) -> bytes

    @property
    def rounds(self) -> int:
        return self.fastlsu_log.n_rounds if self.fastlsu_log is not None else 0

    @property
    def fdp(self) -> float:
        return self.global_metrics.fdp

    @property
    def power(self) -> float:
        return self.global_metrics.power

    @property
    def comm_kb(self) -> float:
        return self.ledger.kb()


def _seed(*parts: int) -> int:
    ss = np.random.SeedSequence([p % (1 << 64) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_blocks(agent: AgentDataset, K: int, seed: int = 0) -> list[Block]:
    """Seeded shuffle, then round-robin into K blocks starting at the reserved one.

    Block sizes differ by at most one; leftovers go to the agent's own block
    first, then to the following ids cyclically.
    """
    if K < 1:
        raise InvalidInputError(f"K must be at least 1, got {K}")
    n, m = agent.n, agent.m
    if n // K < 4 or m // K < 1:
        raise InsufficientDataError(
            f"agent {agent.agent_id}: {n} nulls and {m} tests cannot fill {K} blocks "
            "(each needs at least 4 nulls and 1 test)"
        )
    rng = np.random.Generator(np.random.Philox(_seed(seed, _SPLIT, agent.agent_id)))
    null_perm = rng.permutation(n)
    test_perm = rng.permutation(m)
    start = agent.agent_id % K
    blocks = []
    for r in range(K):
        pos = (r - start) % K
        blocks.append(
            Block(
                owner=agent.agent_id,
                block_id=r,
                null_index=np.sort(null_perm[pos::K]),
                test_index=np.sort(test_perm[pos::K]),
            )
        )
    return blocks


class Trial:
    """Data and trained models of one trial, shared across methods.

    Models depend only on the data, the forest settings, the train fraction
    and the seed, so a single trial can serve every method and every
    quantization level without retraining.
    """

    def __init__(self, agents: Sequence[AgentDataset], K: int, forest: ForestConfig, train_fraction: float, seed: int):
        if len(agents) != K:
            raise InvalidInputError(f"expected {K} agents, got {len(agents)}")
        if any(a.agent_id != i for i, a in enumerate(agents)):
            raise InvalidInputError("agent ids must be 0..K-1 in order")
        self.agents = list(agents)
        self.K = K
        self.forest = forest
        self.train_fraction = train_fraction
        self.seed = seed
        self._blocks: dict[int, list[Block]] = {}
        self._pu: dict[tuple[int, int], PUDataset] = {}
        self._models: dict[tuple[int, int], ScoreModel] = {}

    @classmethod
    def for_config(cls, config: EpisodeConfig, agents: Sequence[AgentDataset]) -> "Trial":
        return cls(agents, config.K, config.forest, config.train_fraction, config.seed)

    def matches(self, config: EpisodeConfig) -> bool:
        return (
            config.K == self.K
            and config.forest == self.forest
            and config.train_fraction == self.train_fraction
            and config.seed == self.seed
        )

    def blocks(self, a: int) -> list[Block]:
        if a not in self._blocks:
            self._blocks[a] = split_blocks(self.agents[a], self.K, self.seed)
        return self._blocks[a]

    def pu_data(self, a: int, r: int = _FULL) -> PUDataset:
        """PU dataset of agent ``a``'s block ``r``, or of its full data for ``r = -1``."""
        key = (a, r)
        if key not in self._pu:
            ag = self.agents[a]
            if r == _FULL:
                nulls, tests = ag.nulls, ag.tests
            else:
                b = self.blocks(a)[r]
                nulls, tests = ag.nulls[b.null_index], ag.tests[b.test_index]
            self._pu[key] = build_pu_dataset(nulls, tests, self.train_fraction, _seed(self.seed, _PU, a, r))
        return self._pu[key]

    def model(self, a: int, r: int = _FULL) -> ScoreModel:
        key = (a, r)
        if key not in self._models:
            self._models[key] = train_score_model(self.pu_data(a, r), self.forest, _seed(self.seed, _TRAIN, a, r))
        return self._models[key]

    def training_rows(self, a: int, r: int = _FULL) -> set[tuple[int, str, int]]:
        """Identity of every point that can influence model ``(a, r)``: its whole block."""
        if r == _FULL:
            ag = self.agents[a]
            return {(a, "null", i) for i in range(ag.n)} | {(a, "test", i) for i in range(ag.m)}
        b = self.blocks(a)[r]
        return {(a, "null", int(i)) for i in b.null_index} | {(a, "test", int(i)) for i in b.test_index}

    def test_index(self, a: int, r: int = _FULL) -> np.ndarray:
        if r == _FULL:
            return np.arange(self.agents[a].m)
        return self.blocks(a)[r].test_index


def _trial(config: EpisodeConfig, agents: Sequence[AgentDataset], trial: Trial | None) -> Trial:
    if trial is None:
        return Trial.for_config(config, agents)
    if not trial.matches(config):
        raise InvalidInputError("trial context was built for a different configuration")
    return trial


def _transmit(model: ScoreModel, quant: QuantSpec) -> tuple[ScoreModel, int]:
    """Quantize, serialize, decode. Returns the receiver's surrogate and the payload length."""
    payload = serialize(quantize_model(model, quant))
    return dequantize(deserialize(payload)), len(payload)


def _pvalues(trial: Trial, a: int, r: int, local: ScoreModel, remotes: Sequence[ScoreModel]) -> PValueVector:
    data = trial.pu_data(a, r)
    cal = composite_scores(local, remotes, data.calibration)
    tst = composite_scores(local, remotes, data.tests)
    return empirical_pvalues(tst, cal, agent_id=a, test_index=trial.test_index(a, r))


def _record_fastlsu(ledger: CommLedger, log: FastLSULog, vectors: Sequence[PValueVector]) -> None:
    """Each agent sends its count to the coordinator and receives the global count, every round.

    The coordinator's own scalars never leave it.
    """
    total = sum(len(v) for v in vectors)
    for _ in log.rounds:
        for v in vectors:
            if v.agent_id == COORDINATOR:
                continue
            ledger.record(v.agent_id, COORDINATOR, FASTLSU, int(len(v)).bit_length())
            ledger.record(COORDINATOR, v.agent_id, FASTLSU, int(total).bit_length())


def _outcome(
    method: Method,
    trial: Trial,
    rejections: RejectionSet,
    tested: Sequence[np.ndarray],
    ledger: CommLedger,
    log: FastLSULog | None = None,
    payloads: dict | None = None,
) -> TrialOutcome:
    per_agent = []
    for a, idx in enumerate(tested):
        truth = {(a, int(i)): bool(trial.agents[a].is_novelty[i]) for i in idx}
        per_agent.append(score_metrics(rejections.for_agent(a), truth))
    total = sum(per_agent[1:], per_agent[0])
    return TrialOutcome(
        method=method,
        per_agent=tuple(per_agent),
        global_metrics=total,
        ledger=ledger,
        rejections=rejections,
        fastlsu_log=log,
        tested=tuple(len(i) for i in tested),
        payload_bytes=payloads or {},
    )


def _local_bh(vectors: Sequence[PValueVector], level: Fraction) -> RejectionSet:
    """Independent BH per agent. The set's threshold records the nominal level,
    since every agent realizes its own cutoff."""
    rejected: frozenset = frozenset()
    for v in vectors:
        if len(v):
            rejected |= bh_procedure(v, level).rejected
    return RejectionSet(rejected, level)


def run_b2(config: EpisodeConfig, agents: Sequence[AgentDataset], trial: Trial | None = None) -> TrialOutcome:
    """Zero communication: full-data local detection and BH at ``alpha / K``."""
    trial = _trial(config, agents, trial)
    vectors = [_pvalues(trial, a, _FULL, trial.model(a), ()) for a in range(config.K)]
    rej = _local_bh(vectors, config.alpha / config.K)
    return _outcome(Method.B2, trial, rej, [trial.test_index(a) for a in range(config.K)], CommLedger())


def run_b3(config: EpisodeConfig, agents: Sequence[AgentDataset], trial: Trial | None = None) -> TrialOutcome:
    """Full-data local p-values pooled through FastLSU at ``alpha``."""
    trial = _trial(config, agents, trial)
    vectors = [_pvalues(trial, a, _FULL, trial.model(a), ()) for a in range(config.K)]
    rej, log = fastlsu(vectors, config.alpha)
    ledger = CommLedger()
    _record_fastlsu(ledger, log, vectors)
    return _outcome(Method.B3, trial, rej, [trial.test_index(a) for a in range(config.K)], ledger, log)


def _check_hygiene(trial: Trial, sent: dict[tuple[int, int], set]) -> None:
    """No point of any agent's reserved block may reach a model sent to someone else."""
    reserved = set()
    for j in range(trial.K):
        reserved |= trial.training_rows(j, j)
    for (a, j), rows in sent.items():
        leaked = rows & reserved
        if leaked:
            raise AssertionError(f"model {a}->{j} was trained on reserved points, e.g. {next(iter(leaked))}")


def run_model_exchange(
    config: EpisodeConfig, agents: Sequence[AgentDataset], trial: Trial | None = None
) -> TrialOutcome:
    """Block-wise model exchange followed by FastLSU across agents."""
    trial = _trial(config, agents, trial)
    K = config.K
    ledger = CommLedger()
    states = [AgentState(a, trial.blocks(a)) for a in range(K)]
    payloads, sent = {}, {}
    for a in range(K):
        for j in range(K):
            if a == j:
                continue
            surrogate, size = _transmit(trial.model(a, j), config.quant)
            states[j].surrogates[a] = surrogate
            ledger.record_bytes(a, j, MODEL, size)
            payloads[(a, j)] = size
            sent[(a, j)] = trial.training_rows(a, j)
    _check_hygiene(trial, sent)

    vectors = []
    for j, st in enumerate(states):
        st.local_model = trial.model(j, j)
        remotes = [st.surrogates[a] for a in sorted(st.surrogates)]
        vectors.append(_pvalues(trial, j, j, st.local_model, remotes))
    rej, log = fastlsu(vectors, config.alpha)
    _record_fastlsu(ledger, log, vectors)
    tested = [trial.test_index(j, j) for j in range(K)]
    return _outcome(Method.ME, trial, rej, tested, ledger, log, payloads)


def run_conservative(
    config: EpisodeConfig, agents: Sequence[AgentDataset], trial: Trial | None = None
) -> TrialOutcome:
    """Unsplit broadcast of full-data models, then BH locally at ``alpha / K``."""
    trial = _trial(config, agents, trial)
    K = config.K
    ledger = CommLedger()
    payloads = {}
    surrogates = {}
    for a in range(K):
        if K == 1:
            break
        surrogate, size = _transmit(trial.model(a), config.quant)
        surrogates[a] = surrogate
        for j in range(K):
            if j != a:
                ledger.record_bytes(a, j, MODEL, size)
                payloads[(a, j)] = size
    vectors = []
    for j in range(K):
        remotes = [surrogates[a] for a in sorted(surrogates) if a != j]
        vectors.append(_pvalues(trial, j, _FULL, trial.model(j), remotes))
    rej = _local_bh(vectors, config.alpha / K)
    tested = [trial.test_index(j) for j in range(K)]
    return _outcome(Method.ME_CONSERVATIVE, trial, rej, tested, ledger, payloads=payloads)


_RUNNERS = {
    Method.B2: run_b2,
    Method.B3: run_b3,
    Method.ME: run_model_exchange,
    Method.ME_CONSERVATIVE: run_conservative,
}


def run_episode(config: EpisodeConfig, agents: Sequence[AgentDataset], trial: Trial | None = None) -> TrialOutcome:
    return _RUNNERS[config.method](config, agents, trial)
