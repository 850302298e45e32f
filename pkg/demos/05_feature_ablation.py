"""Which features buy the most sample efficiency?

For each feature subset, search for the smallest suspect set that is still
rejected at alpha. Doubling from 10 and then bisecting to 10 samples keeps
the number of evaluated sizes small.
"""
from _common import workspace
from diffusion_di import experiments as ex

cfg, ws = workspace()
out = ex.ablate_features(cfg, ex.DEFAULT_ABLATIONS, trials=200, workspace=ws)
for label, r in out.items():
    tried = ", ".join(f"{n}:{v.mean_p:.1e}" for n, v in sorted(r["verdicts"].items()))
    print(f"{label:20s} min |P| {r['min_size']}   ({tried})")
