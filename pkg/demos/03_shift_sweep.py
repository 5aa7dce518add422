"""
A small shift sweep
===================

Moves the agents' null centroids apart and watches FDR and power. Ten trials
keep this to well under a minute; the command-line tool runs the full
hundred-trial version.
"""

from distconformal import Method, SweepSpec, emit_table, run_sweep

spec = SweepSpec(
    axis="delta",
    values=(0.0, 2.0, 4.0),
    methods=(Method.B2, Method.B3, Method.ME, Method.ME_CONSERVATIVE),
    trials=10,
)
print(emit_table(run_sweep(spec), "markdown"))

bits = SweepSpec(axis="bits", values=("none", 4, 1), methods=(Method.B3, Method.ME), trials=10)
print(emit_table(run_sweep(bits), "markdown"))
