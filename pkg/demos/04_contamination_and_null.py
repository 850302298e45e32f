"""Mixed and member-free suspect sets.

A suspect set that is half non-members should still be flagged once it is
large enough. A suspect set with no members at all should not be flagged.
"""
from _common import workspace
from diffusion_di import experiments as ex

cfg, ws = workspace()
run = ex.contamination_run(cfg, trials=200, workspace=ws)
print("mean p by non-member ratio (rows) and |P| (columns)")
print("ratio " + "".join(f"{n:>10d}" for n in run["sizes"]))
for r in run["ratios"]:
    print(f"{r:5.2f} " + "".join(f"{run['verdicts'][r][n].mean_p:10.2e}" for n in run["sizes"]))

null = ex.false_positive_run(cfg, trials=1000, workspace=ws)
print(f"member-free suspect set, |P|={null['size']}: mean p {null['mean_p']:.3f}, "
      f"rejected in {100 * null['reject_rate']:.1f}% of trials")
