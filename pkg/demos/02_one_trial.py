"""
One trial, four regimes
=======================

Draw the three-agent Gaussian benchmark with shifted nulls, then run the
zero-communication baseline (B2), FastLSU on local p-values (B3), block-wise
model exchange (ME) at several bit widths, and the unsplit broadcast regime.
All regimes share one set of trained forests.
"""

from dataclasses import replace

from distconformal import EpisodeConfig, Method, QuantSpec, SynthConfig, Trial, generate, run_episode

agents = generate(SynthConfig(delta=2.0, seed=1))
for a in agents:
    print(f"agent {a.agent_id}: {a.n} nulls, {a.m} tests, {a.is_novelty.sum()} novelties")

base = EpisodeConfig(seed=1)
trial = Trial.for_config(base, agents)

print(f"\n{'regime':<22}{'FDP':>7}{'power':>8}{'kb':>10}{'rounds':>8}")
runs = [(m.value, replace(base, method=m)) for m in (Method.B2, Method.B3)]
for b in ("none", "6", "2", "1"):
    runs.append((f"ME bits={b}", replace(base, method=Method.ME, quant=QuantSpec.parse(b))))
runs.append(("ME-conservative", replace(base, method=Method.ME_CONSERVATIVE)))

for name, cfg in runs:
    out = run_episode(cfg, agents, trial)
    print(f"{name:<22}{out.fdp:>7.3f}{out.power:>8.3f}{out.comm_kb:>10.2f}{out.rounds:>8}")

# where the ME bytes go
out = run_episode(replace(base, method=Method.ME, quant=QuantSpec(1)), agents, trial)
print("\nper-agent traffic (bytes):", out.ledger.by_agent())
