"""
Four-stage desk run
===================

Stage 1 captions, stage 2 detection on teacher-forced caption features,
stage 3 joint training, stage 4 adds the SCST reward term. Pass a scale
factor to shorten every stage, e.g. ``python 03_desk_run.py 0.1``.
"""
import sys
import time

import torch

from panelcap.datagen import in_memory_split
from panelcap.pipeline import PanelCapModel, evaluate_model
from panelcap.training import DESK_SCHEDULE, StageConfig, run_stage

scale = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
train = in_memory_split(800, 42, split="train")
test = in_memory_split(100, 42, split="test")

torch.manual_seed(42)
model = PanelCapModel()
for stage in (1, 2, 3, 4):
    keys = dict(DESK_SCHEDULE[stage])
    keys["steps"] = max(1, int(keys["steps"] * scale))
    cfg = StageConfig.from_mapping(stage, keys)
    t0 = time.time()
    state = run_stage(cfg, model, train, log_every=0)
    ev = evaluate_model(model, test)
    print(f"stage {stage}: {cfg.steps:5d} steps {time.time() - t0:6.1f}s  loss {state.history[-1]['loss']:.3f}  "
          f"mAP {ev['map']:.3f}  mAP@0.5 {ev['map50']:.3f}  BLEU-4 {ev['bleu4']:5.1f}  "
          f"parse {ev['parse_rate']:.2f}  R {ev['reward']:.3f}")

print(ev["predictions"][0]["raw_output"])
