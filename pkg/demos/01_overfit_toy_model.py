"""Train the toy diffusion model and measure how much it memorised.

Dataset inference needs the suspect set to leave a trace in the model. Here
the trace is deliberate: a small denoiser trained for many steps on a few
hundred 8x8 digits. The member/held-out loss gap printed at the end is the
overfitting dial that every later demo depends on.

    python demos/01_overfit_toy_model.py [section.key=value ...]
"""
from _common import workspace

cfg, ws = workspace()
split = ws.splits
print(f"train set {len(split.train)}, suspect pool {len(split.P)}, validation pool {len(split.U)}, "
      f"held-out pool {len(split.N)}")
ks = split.distribution_check
print(f"P vs U pixel-mean KS test: statistic {ks['ks_statistic']:.3f}, p {ks['ks_pvalue']:.3f}")

_, _, payload = ws.train()
ov = payload["extra"]["overfitting"]
print(f"trained {cfg.training.steps} steps in {payload['extra']['train_seconds']:.0f}s")
print(f"loss at t={ov['t']}: members {ov['member_loss']:.4f}, held-out {ov['heldout_loss']:.4f}, "
      f"gap {ov['gap']:.4f}, Cohen's d {ov['cohens_d']:.2f}")
