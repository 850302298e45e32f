"""Set-level verification: how large must the suspect set be?

For every suspect-set size the pipeline draws |P| members and |U| validation
samples, scores them out of fold and runs a one-tailed Welch test. Mean p
over the trials is the verdict; below alpha means the set was trained on.
The second half compares that test with the simpler set-level attack that
flags a set when its highest score crosses a 1%-FPR threshold.
"""
from _common import workspace
from diffusion_di import experiments as ex

cfg, ws = workspace()
sweep = ex.sweep_sample_size(cfg, trials=200, workspace=ws)
for n in sweep["sizes"]:
    v = sweep["verdicts"][n]
    lo, hi = v.ci95
    print(f"|P|={n:4d}  mean p {v.mean_p:.2e}  CI [{lo:.2e}, {hi:.2e}]  {'reject' if v.reject else 'inconclusive'}")
print("mean p decreasing with |P| (up to CI overlap):", sweep["monotone"])

sP, sU, _, _ = ex.pool_kfold_scores(cfg, ws)
for size in (2, 5, 10):
    r = ex.set_level_comparison(sP, sU, size, seed=cfg.seed)
    print(f"sets of {size:2d}: t-test power {r['cdi_power']:.3f}  vs  max-score attack TPR {r['set_level_tpr']:.3f}")
