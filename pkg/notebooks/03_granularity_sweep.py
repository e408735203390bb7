# %% [markdown]
# # How often to regenerate the adapter
#
# A trained generator is applied at every parameter-generation granularity,
# from one adapter per segment up to one per video. Coarser chunks cost fewer
# generator calls; this shows what they cost in AUC. Reuses the artifacts
# of `02_three_mode_ablation.py` when they exist.

# %%
import torch

from copra import ablation, runner
from copra.pipeline import GRANULARITIES

torch.set_num_threads(1)
SEED, WORK = 0, "/tmp/copra_ablation"

cfg, d = ablation.prepare(SEED, WORK)
cfg = ablation.config(SEED, "copra")
backbone, _ = runner.load_backbone(d / "backbone.ckpt", cfg)
policy, _ = runner.run_train(cfg, backbone, d / "data")
labels = runner.frame_labels_of(cfg, d / "data")

# %%
for g in GRANULARITIES:
    res = runner.run_infer(cfg, backbone, policy, d / "data", granularity=g)
    rep = runner.evaluate(runner.tracks_of(res), labels, runner.stamp(cfg, "infer"))
    t = res.timing
    print(f"{g:12s} s3 AUC {rep.auc['s3']:.4f}  AP {rep.ap['s3']:.4f}  "
          f"generator {t['parameter_generation']:.2f}s  generation {t['adapted_generation']:.2f}s")
