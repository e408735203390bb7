# %% [markdown]
# # Frozen vs static LoRA vs generated LoRA
#
# All three modes share a benchmark, a pretrained backbone and the GRPO
# settings in `copra.ablation.BASE`; only the trainable parameters differ.
# One seed takes roughly ten minutes on a single core. Set `SEEDS` to
# `(0, 1, 2, 3)` to reproduce the acceptance run.

# %%
import numpy as np
import torch

from copra import ablation

torch.set_num_threads(1)
SEEDS = (0,)
WORK = "/tmp/copra_ablation"

results = {s: ablation.run_seed(s, WORK) for s in SEEDS}

# %% frame-level AUC after each stage
for s, r in results.items():
    for m in ablation.MODES:
        a = r[m]["auc"]
        print(f"seed {s} {m:12s} s1 {a['s1']:.4f}  s2 {a['s2']:.4f}  s3 {a['s3']:.4f}")
    print("  ordering holds:", ablation.ordering_holds(r))

# %% which anomaly types each mode separates
for s, r in results.items():
    for m in ablation.MODES:
        print(s, m, {k: round(v, 3) for k, v in r[m]["per_type"].items()})

# %% does the accuracy reward climb during training?
for s, r in results.items():
    for m in ("static_lora", "copra"):
        acc = np.asarray(r[m]["accuracy"])
        k = min(50, len(acc) // 2)
        print(s, m, f"first {k}: {acc[:k].mean():.3f}  last {k}: {acc[-k:].mean():.3f}",
              "rises" if ablation.accuracy_rises(list(acc), k) else "flat")

# %% the shared latent p_global switched off
off = ablation.run_mode(SEEDS[0], WORK, "copra", **{"generator.use_global_latent": False})
print("with p_global", results[SEEDS[0]]["copra"]["auc"]["s3"], "without", off["auc"]["s3"])
