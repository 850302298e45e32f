"""Per-sample membership attacks are weak on their own.

Each extracted feature is used as a stand-alone attack (lower value means
"member"). Even on an overfit model the TPR at 1% FPR stays low, which is
the motivation for aggregating signals over a whole set.
"""
from _common import workspace
from diffusion_di import experiments as ex

cfg, ws = workspace()
ws.features()
res = ex.mia_evaluation(cfg, ws)
print(f"{'feature':28s} {'AUC':>6s} {'TPR@1%':>7s} {'acc':>6s}")
for name, m in sorted(res.items(), key=lambda kv: -kv[1]["auc"]):
    print(f"{name:28s} {m['auc']:6.3f} {m['tpr_at_1pct_fpr']:7.3f} {m['accuracy']:6.3f}")
