# %% [markdown]
# # Quickstart: one tiny run end to end
#
# Generates a small synthetic benchmark, pretrains a micro backbone, trains a
# parameter generator with GRPO and scores the test split. Runs in well under
# a minute on one CPU core; the numbers are only meant to show the plumbing.

# %%
import tempfile
from pathlib import Path

import torch

from copra import runner
from copra.config import RunConfig

torch.set_num_threads(1)
work = Path(tempfile.mkdtemp(prefix="copra_quick_"))

cfg = RunConfig.from_dict(dict(
    seed=0,
    dataset=dict(n_videos=24, min_frames=60, max_frames=160, pretrain_videos=16),
    backbone=dict(n_layers=2, d_model=32, n_heads=2, prompt="compact", max_response_tokens=16),
    pretrain=dict(steps=60, batch_size=8),
    lora=dict(rank=2, alpha=4.0),
    generator=dict(internal_dim=32, n_heads=4),
    grpo=dict(G=4, lr=1e-3, max_new_tokens=10),
))

# %% synthetic videos and the supervised warm start
runner.run_synth(cfg, work / "data")
backbone, pre = runner.run_pretrain(cfg, work / "data")
print("pretrain steps", pre.steps, "held-out", pre.heldout)

# %% GRPO on the generator; the backbone stays frozen
policy, logs = runner.run_train(cfg, backbone.freeze(), work / "data")
print(len(logs), "updates; last accuracy reward", logs[-1]["accuracy_mean"])

# %% three-stage scoring and frame-level metrics
res = runner.run_infer(cfg, backbone, policy, work / "data")
report = runner.evaluate(runner.tracks_of(res), runner.frame_labels_of(cfg, work / "data"),
                         runner.stamp(cfg, "infer"))
print(report.to_text())
