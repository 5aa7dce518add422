import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from distconformal.datagen import SynthConfig
from distconformal.errors import InvalidInputError
from distconformal.experiments import (
    CSV_COLUMNS,
    AggregateRow,
    SweepError,
    SweepSpec,
    aggregate,
    emit_table,
    main,
    run_sweep,
    run_trials,
    trial_seed,
)
from distconformal.network import EpisodeConfig, Method
from distconformal.scoring import ForestConfig

TINY_DATA = SynthConfig(n_train_total=240, n_test_total=60)
TINY_EP = EpisodeConfig(forest=ForestConfig(n_trees=5))


def tiny(**kw):
    return SweepSpec(**{"trials": 2, "data": TINY_DATA, "episode": TINY_EP, **kw})


def row(axis="2.0", method="ME", **kw):
    base = dict(mean_fdr=0.0823, std_fdr=0.031, mean_power=0.9901, std_power=0.012,
                mean_comm_kb=1576.94, std_comm_kb=3.21, trials=100)
    base.update(kw)
    return AggregateRow(axis=axis, method=method, **base)


def test_emit_csv_one_row():
    lines = emit_table([row()], "csv").splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 2
    assert lines[1].startswith("2.0,ME,0.082300,")


def test_emit_markdown_formatting():
    text = emit_table([row(axis="none"), row(axis="1", mean_comm_kb=79.44)], "markdown")
    lines = text.splitlines()
    assert lines[0].startswith("| axis | method | FDR | power |")
    assert "| none | ME | 0.08 ± 0.03 | 0.99 ± 0.01 | 1576.9 ± 3.2 | 100 |" in lines
    assert "79.4 ± 3.2" in lines[3]


def test_emit_rejects_empty_and_unknown_format():
    with pytest.raises(InvalidInputError):
        emit_table([], "csv")
    with pytest.raises(InvalidInputError):
        emit_table([row()], "json")


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        tiny(trials=0)
    with pytest.raises(InvalidInputError):
        tiny(values=())
    with pytest.raises(InvalidInputError):
        tiny(axis="alpha")
    with pytest.raises(InvalidInputError):
        tiny(data=replace(TINY_DATA, K=4))


def test_delta_sweep_layout():
    spec = tiny(trials=1, methods=(Method.B2, Method.B3, Method.ME))
    rows = run_sweep(spec)
    assert len(rows) == 18
    assert [(r.axis, r.method) for r in rows[:3]] == [("0.0", "B2"), ("0.0", "B3"), ("0.0", "ME")]
    assert all(r.std_fdr == r.std_power == r.std_comm_kb == 0 for r in rows)
    assert all(r.trials == 1 for r in rows)


def test_bits_sweep_layout():
    spec = tiny(axis="bits", values=("none", 6, 4, 2, 1), methods=(Method.B2, Method.B3, Method.ME))
    rows = run_sweep(spec)
    me = [r for r in rows if r.method == "ME"]
    assert [r.axis for r in me] == ["none", "6", "4", "2", "1"]
    assert [(r.axis, r.method) for r in rows if r.method != "ME"] == [("all", "B2"), ("all", "B3")]
    kb = [r.mean_comm_kb for r in me]
    assert all(a > b for a, b in zip(kb, kb[1:]))


def test_trial_seeds_are_distinct():
    seeds = {trial_seed(0, i, t) for i in range(6) for t in range(100)}
    assert len(seeds) == 600
    assert trial_seed(1, 0, 0) != trial_seed(0, 0, 0)


def test_std_is_sample_std():
    recs = run_trials(tiny(values=(2.0,), methods=(Method.B3,), trials=3))
    rows = aggregate(recs)
    assert rows[0].std_power == pytest.approx(np.std([r.power for r in recs], ddof=1))
    assert rows[0].mean_fdr == pytest.approx(np.mean([r.fdp for r in recs]))


def test_reproducible_and_order_independent(tmp_path):
    spec = tiny(values=(0.0, 2.0), methods=(Method.B3, Method.ME))
    a = emit_table(run_sweep(spec))
    b = emit_table(run_sweep(spec))
    c = emit_table(run_sweep(replace(spec, workers=2)))
    assert a == b == c


def test_adding_a_method_leaves_other_rows_unchanged():
    a = run_sweep(tiny(values=(2.0,), methods=(Method.B3,)))
    b = run_sweep(tiny(values=(2.0,), methods=(Method.B2, Method.B3)))
    assert a[0] == [r for r in b if r.method == "B3"][0]


def test_errors_report_the_failing_seed():
    spec = tiny(data=replace(TINY_DATA, n_train_total=30), trials=1)
    with pytest.raises(SweepError, match="seed"):
        run_trials(spec)


def test_fastlsu_records_within_bound():
    recs = run_trials(tiny(values=(2.0,), methods=(Method.B3, Method.ME)))
    assert all(0 < r.fastlsu_bits <= r.fastlsu_bound for r in recs)


# -- command line -----------------------------------------------------------------------

ARGS = ["--trials", "1", "--n-train", "240", "--n-test", "60", "--trees", "5"]


def test_cli_run_csv(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["run", "--values", "0,2", "--methods", "B2,ME", *ARGS, "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [(r["axis"], r["method"]) for r in rows] == [("0.0", "B2"), ("0.0", "ME"), ("2.0", "B2"), ("2.0", "ME")]


def test_cli_markdown_to_stdout(capsys):
    assert main(["run", "--sweep", "bits", "--values", "none,1", "--methods", "ME", *ARGS, "--format", "markdown"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("| axis |") and "| 1 | ME |" in text


def test_cli_config_file_with_flag_override(tmp_path, capsys):
    conf = tmp_path / "sweep.ini"
    conf.write_text("[run]\nsweep = delta\nvalues = 1.0\nmethods = B3\ntrials = 2\nn-train = 240\nn-test = 60\ntrees = 5\n")
    assert main(["run", "--config", str(conf), "--trials", "1"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 1 and rows[0]["trials"] == "1" and rows[0]["method"] == "B3"


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["run", "--methods", "B9", *ARGS]) != 0
    assert "error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) != 0
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\ncolour = blue\n")
    assert main(["run", "--config", str(bad)]) != 0
    assert main(["run", "--sweep", "bits", "--values", "0", *ARGS]) != 0
    with pytest.raises(SystemExit) as ei:
        main(["run", "--sweep", "sideways"])
    assert ei.value.code != 0


def test_cli_export_data(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["export-data", "--d", "5", "--n-train", "30", "--n-test", "9", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "agent,role,label,x0,x1,x2,x3,x4" and len(lines) == 40
