"""
FastLSU versus pooled BH
========================

Two agents hold p-values they will not share. FastLSU passes rejection
counts back and forth until the count stops moving, and lands on exactly the
set BH would reject if the p-values were pooled.
"""

import numpy as np

from distconformal import PValueVector, bh_procedure, fastlsu, fastlsu_actual_comm, fastlsu_comm_bound

# p-values are k / (l + 1); here l = 99 so counts read as hundredths
a = PValueVector(0, np.array([1, 40]), 99, np.arange(2))
b = PValueVector(1, np.array([3, 90]), 99, np.arange(2))

rej, log = fastlsu([a, b], 0.2)
for t, r in enumerate(log.rounds):
    print(f"round {t}: local {r.local_counts} -> global {r.global_count}")
print("FastLSU rejects", sorted(rej.rejected))
print("pooled BH rejects", sorted(bh_procedure([a, b], 0.2).rejected))

# bits moved per agent, against the worst case
print("bits per agent:", fastlsu_actual_comm(log, 2, 2), "bound:", fastlsu_comm_bound(2, 2))

# a bigger random check
rng = np.random.default_rng(0)
vecs = [PValueVector(j, rng.integers(1, 201, 300), 199, np.arange(300)) for j in range(3)]
for v in vecs:
    v.counts[:30] = 1  # a few strong signals per agent
rej, log = fastlsu(vecs, 0.1)
print(len(rej), "rejections in", log.n_rounds, "rounds; matches BH:", rej.rejected == bh_procedure(vecs, 0.1).rejected)
