"""Monte Carlo sweeps over the distribution shift or the quantization level.

Each trial draws a fresh synthetic dataset and runs every requested method on
it, so methods are compared on common random numbers and share trained
models. Trial seeds come from a hash chain over (master seed, axis index,
trial index); results are keyed by trial, so the output does not depend on
the order in which worker processes finish.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .conformal import fastlsu_actual_comm, fastlsu_comm_bound
from .datagen import SynthConfig, generate, to_csv
from .errors import DistConformalError, InvalidInputError
from .network import EpisodeConfig, Method, Trial, run_episode
from .quantization import FASTLSU, QuantSpec
from .scoring import ForestConfig

AXES = ("delta", "bits")
ALL_AGENTS = "all"
CSV_COLUMNS = [
    "axis", "method", "mean_fdr", "std_fdr", "mean_power", "std_power", "mean_comm_kb", "std_comm_kb", "trials",
]


class SweepError(DistConformalError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    axis: str = "delta"
    values: tuple = (0.0, 0.5, 1.0, 2.0, 3.0, 4.0)
    methods: tuple[Method, ...] = (Method.B2, Method.B3, Method.ME)
    trials: int = 100
    episode: EpisodeConfig = EpisodeConfig()
    data: SynthConfig = SynthConfig(delta=2.0)
    output: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.axis not in AXES:
            raise InvalidInputError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise InvalidInputError("sweep needs at least one value")
        if self.trials < 1:
            raise InvalidInputError(f"trials must be at least 1, got {self.trials}")
        if not self.methods:
            raise InvalidInputError("sweep needs at least one method")
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        if self.data.K != self.episode.K:
            raise InvalidInputError(f"data has {self.data.K} agents but episodes expect {self.episode.K}")
        if self.axis == "bits":
            vals = tuple(v if isinstance(v, QuantSpec) else QuantSpec.parse(str(v)) for v in self.values)
        else:
            vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)

    def label(self, value) -> str:
        return value.label if isinstance(value, QuantSpec) else repr(float(value))


@dataclass(frozen=True)
class TrialRecord:
    axis: str
    method: Method
    trial: int
    seed: int
    fdp: float
    power: float
    comm_kb: float
    rounds: int = 0
    fastlsu_bits: int = 0  # most bits any agent moved for FastLSU
    fastlsu_bound: int = 0


@dataclass(frozen=True)
class AggregateRow:
    axis: str
    method: str
    mean_fdr: float
    std_fdr: float
    mean_power: float
    std_power: float
    mean_comm_kb: float
    std_comm_kb: float
    trials: int


def trial_seed(master: int, axis_index: int, trial: int) -> int:
    ss = np.random.SeedSequence([master % (1 << 64), axis_index, trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _record(axis: str, method: Method, trial: int, seed: int, outcome, K: int) -> TrialRecord:
    bits = bound = 0
    if outcome.fastlsu_log is not None:
        m_max = max(outcome.tested)
        bits = fastlsu_actual_comm(outcome.fastlsu_log, m_max, K)
        bound = fastlsu_comm_bound(m_max, K)
        per_agent = max(
            (outcome.ledger.sent_bits(a, FASTLSU) + outcome.ledger.received_bits(a, FASTLSU) for a in range(1, K)),
            default=0,
        )
        if per_agent > bits:
            raise AssertionError(f"ledger shows {per_agent} FastLSU bits for one agent, log allows {bits}")
    return TrialRecord(
        axis=axis, method=method, trial=trial, seed=seed,
        fdp=outcome.fdp, power=outcome.power, comm_kb=outcome.comm_kb,
        rounds=outcome.rounds, fastlsu_bits=bits, fastlsu_bound=bound,
    )


def _run_job(spec: SweepSpec, axis_index: int, trial: int) -> list[TrialRecord]:
    seed = trial_seed(spec.episode.seed, axis_index, trial)
    value = spec.values[axis_index]
    try:
        if spec.axis == "delta":
            data = replace(spec.data, delta=value, seed=seed)
            quants = {m: (spec.episode.quant if m.exchanges_models else QuantSpec()) for m in spec.methods}
            settings = [(spec.label(value), m, quants[m]) for m in spec.methods]
        else:
            data = replace(spec.data, seed=seed)
            settings = []
            for m in spec.methods:
                if m.exchanges_models:
                    settings.append((spec.label(value), m, value))
                elif axis_index == 0:
                    settings.append((ALL_AGENTS, m, QuantSpec()))
        agents = generate(data)
        base = replace(spec.episode, seed=seed, quant=QuantSpec(), method=Method.B2)
        ctx = Trial.for_config(base, agents)
        out = []
        for label, method, quant in settings:
            cfg = replace(base, method=method, quant=quant)
            out.append(_record(label, method, trial, seed, run_episode(cfg, agents, ctx), spec.episode.K))
        return out
    except DistConformalError as exc:
        raise SweepError(f"trial {trial} at {spec.axis}={spec.label(value)} (seed {seed}) failed: {exc}") from exc


def run_trials(spec: SweepSpec) -> list[TrialRecord]:
    """Every per-trial record of the sweep, in (axis, trial) order."""
    jobs = [(i, t) for i in range(len(spec.values)) for t in range(spec.trials)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = {job: pool.submit(_run_job, spec, *job) for job in jobs}
            results = {job: f.result() for job, f in futures.items()}
    else:
        results = {job: _run_job(spec, *job) for job in jobs}
    return [rec for job in jobs for rec in results[job]]


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def aggregate(records: Sequence[TrialRecord], spec: SweepSpec | None = None) -> list[AggregateRow]:
    """Mean and sample standard deviation per (axis value, method)."""
    groups: dict[tuple[str, Method], list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.axis, r.method), []).append(r)
    axis_order = [spec.label(v) for v in spec.values] if spec else []
    method_order = list(Method)

    def key(k):
        axis, method = k
        pos = axis_order.index(axis) if axis in axis_order else len(axis_order)
        return (pos, axis, method_order.index(method))

    rows = []
    for k in sorted(groups, key=key):
        recs = sorted(groups[k], key=lambda r: r.trial)
        fdp = np.array([r.fdp for r in recs])
        power = np.array([r.power for r in recs])
        kb = np.array([r.comm_kb for r in recs])
        rows.append(
            AggregateRow(
                axis=k[0], method=k[1].value,
                mean_fdr=float(fdp.mean()), std_fdr=_std(fdp),
                mean_power=float(power.mean()), std_power=_std(power),
                mean_comm_kb=float(kb.mean()), std_comm_kb=_std(kb),
                trials=len(recs),
            )
        )
    return rows


def run_sweep(spec: SweepSpec) -> list[AggregateRow]:
    rows = aggregate(run_trials(spec), spec)
    if spec.output:
        fmt = "markdown" if spec.output.endswith(".md") else "csv"
        with open(spec.output, "w", newline="") as fh:
            fh.write(emit_table(rows, fmt))
    return rows


def emit_table(rows: Sequence[AggregateRow], format: str = "csv") -> str:
    """CSV with full precision, or a markdown table of ``mean ± std`` cells.

    Communication is in kilobytes of 1000 bytes; spreads are sample standard
    deviations over trials.
    """
    if not rows:
        raise InvalidInputError("no rows to emit")
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([
                r.axis, r.method,
                f"{r.mean_fdr:.6f}", f"{r.std_fdr:.6f}",
                f"{r.mean_power:.6f}", f"{r.std_power:.6f}",
                f"{r.mean_comm_kb:.6f}", f"{r.std_comm_kb:.6f}",
                r.trials,
            ])
        return buf.getvalue()
    if format == "markdown":
        lines = [
            "| axis | method | FDR | power | comm (kb, 1 kb = 1000 B) | trials |",
            "|---|---|---|---|---|---|",
        ]
        for r in rows:
            lines.append(
                f"| {r.axis} | {r.method} | {r.mean_fdr:.2f} ± {r.std_fdr:.2f} | "
                f"{r.mean_power:.2f} ± {r.std_power:.2f} | {r.mean_comm_kb:.1f} ± {r.std_comm_kb:.1f} | {r.trials} |"
            )
        return "\n".join(lines) + "\n"
    raise InvalidInputError(f"unknown format {format!r}; use csv or markdown")


# -- command line -------------------------------------------------------------

_RUN_DEFAULTS = {
    "sweep": "delta",
    "values": None,
    "methods": "B2,B3,ME",
    "agents": "3",
    "alpha": "0.1",
    "trials": "100",
    "seed": "0",
    "d": "20",
    "pi0": "0.9",
    "train_frac": "0.5",
    "trees": "100",
    "max_depth": str(ForestConfig().max_depth),
    "min_leaf": str(ForestConfig().min_leaf),
    "delta": "2.0",
    "bits": "none",
    "n_train": "3000",
    "n_test": "1000",
    "workers": "1",
    "out": None,
    "format": None,
}
_DEFAULT_VALUES = {"delta": "0,0.5,1.0,2.0,3.0,4.0", "bits": "none,6,4,2,1"}


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_config(path: str | None) -> dict[str, str]:
    """Key-value settings from the ``[run]`` section of an INI file; keys match the long flags."""
    if not path:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise InvalidInputError(f"cannot read config file {path}")
    if not cp.has_section("run"):
        raise InvalidInputError(f"config file {path} has no [run] section")
    out = {}
    for k, v in cp.items("run"):
        key = k.replace("-", "_")
        if key not in _RUN_DEFAULTS:
            raise InvalidInputError(f"unknown config key {k!r}")
        out[key] = v
    return out


def spec_from_settings(s: dict[str, str | None]) -> SweepSpec:
    K = int(s["agents"])
    forest = ForestConfig(n_trees=int(s["trees"]), max_depth=int(s["max_depth"]), min_leaf=int(s["min_leaf"]))
    episode = EpisodeConfig(
        K=K,
        alpha=Fraction(s["alpha"]),
        quant=QuantSpec.parse(s["bits"]),
        forest=forest,
        train_fraction=float(s["train_frac"]),
        seed=int(s["seed"]),
    )
    data = SynthConfig(
        d=int(s["d"]), K=K, delta=float(s["delta"]), pi0=float(s["pi0"]),
        n_train_total=int(s["n_train"]), n_test_total=int(s["n_test"]),
    )
    values = s["values"] or _DEFAULT_VALUES.get(s["sweep"], "")
    return SweepSpec(
        axis=s["sweep"],
        values=tuple(_split_list(values)),
        methods=tuple(Method.parse(m) for m in _split_list(s["methods"])),
        trials=int(s["trials"]),
        episode=episode,
        data=data,
        output=s["out"],
        workers=int(s["workers"]),
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distconformal", description="Distributed conformal novelty detection sweeps.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a delta or bits sweep and print/write the aggregate table")
    run.add_argument("--config", help="INI file with a [run] section; flags override it")
    run.add_argument("--sweep", choices=AXES)
    run.add_argument("--values", help="comma list, e.g. 0,2,4 or none,6,4,2,1")
    run.add_argument("--methods", help="comma list from B2,B3,ME,ME-conservative")
    run.add_argument("--agents", help="number of agents K")
    run.add_argument("--alpha")
    run.add_argument("--trials")
    run.add_argument("--seed", help="master seed")
    run.add_argument("--d", help="dimension")
    run.add_argument("--pi0")
    run.add_argument("--train-frac", dest="train_frac")
    run.add_argument("--trees")
    run.add_argument("--max-depth", dest="max_depth")
    run.add_argument("--min-leaf", dest="min_leaf")
    run.add_argument("--delta", help="shift used by a bits sweep")
    run.add_argument("--bits", help="quantization used by a delta sweep")
    run.add_argument("--n-train", dest="n_train")
    run.add_argument("--n-test", dest="n_test")
    run.add_argument("--workers")
    run.add_argument("--out", help="output file; stdout when omitted")
    run.add_argument("--format", choices=("csv", "markdown"))

    ex = sub.add_parser("export-data", help="write one synthetic dataset as CSV")
    ex.add_argument("--d", type=int, default=20)
    ex.add_argument("--agents", type=int, default=3)
    ex.add_argument("--delta", type=float, default=0.0)
    ex.add_argument("--pi0", type=float, default=0.9)
    ex.add_argument("--n-train", type=int, default=3000)
    ex.add_argument("--n-test", type=int, default=1000)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--out", help="output file; stdout when omitted")
    return p


def _write(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export-data":
            cfg = SynthConfig(
                d=args.d, K=args.agents, delta=args.delta, pi0=args.pi0,
                n_train_total=args.n_train, n_test_total=args.n_test, seed=args.seed,
            )
            _write(to_csv(generate(cfg)), args.out)
            return 0

        settings = dict(_RUN_DEFAULTS)
        settings.update(_load_config(args.config))
        for k in _RUN_DEFAULTS:
            v = getattr(args, k, None)
            if v is not None:
                settings[k] = v
        fmt = settings["format"] or ("markdown" if (settings["out"] or "").endswith(".md") else "csv")
        spec = spec_from_settings(settings)
        rows = aggregate(run_trials(replace(spec, output=None)), spec)
        _write(emit_table(rows, fmt), spec.output)
        return 0
    except (DistConformalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
