"""Distribution of per-parameter sign-agreement probabilities mid-unlearning.

Per-example gradients of a batch give a noise variance for each parameter;
the resulting agreement probabilities fall into three groups: likely
disagreeing (< 0.35), uncertain (0.35 to 0.65) and likely agreeing (> 0.65).
"""

from dataclasses import replace

from unlearnlab.harness import ExperimentConfig, execute_run, prepare_seed

cfg = replace(ExperimentConfig(), seeds=[0], mia_kinds=["entropy"], probe_bins=20)
split, theta0, theta_ideal = prepare_seed(cfg, seed=0)
rec = execute_run(cfg, 0, "SRL", "focus", split, theta0, theta_ideal)

total = sum(rec.agree_hist)
print(f"{total} parameters, probed at the first batch of epoch {(cfg.unlearn_epochs + 1) // 2}")
for i, count in enumerate(rec.agree_hist):
    lo = i / len(rec.agree_hist)
    bar = "#" * round(60 * count / max(rec.agree_hist))
    print(f"  [{lo:.2f}, {lo + 0.05:.2f})  {count:5d}  {bar}")
print("regimes:", rec.regimes)
