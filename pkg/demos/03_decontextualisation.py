# Full objective against the context-reliant control on the trap corpus.
# STEPS and SEEDS env vars shorten the run; the acceptance setting is
# STEPS=2000 SEEDS=0,1,2 (about 15 min on one core).

# %%
import os
from pathlib import Path

import numpy as np
import torch

from vino.cli import attention_overlay
from vino.config import ExperimentConfig
from vino.encoder import attention_map
from vino.experiment import CorpusSpec, make_corpus, run_experiment, summarize
from vino.training import model_from_checkpoint, to_tensor
from vino.videodata import write_image

steps = int(os.environ.get("STEPS", 200))
seeds = [int(s) for s in os.environ.get("SEEDS", "0").split(",")]
out = Path(__file__).parent / "out" / "experiment"

# %%
cfg = ExperimentConfig()
cfg.run.steps = steps
cfg.run.checkpoint_every = 0
results = run_experiment(cfg, seeds, out)
print(summarize(results))

# %% last-layer CLS attention of each arm on one held-out frame
_, images, _ = make_corpus(CorpusSpec(heldout_frames=1), seeds[0])
for arm in ("vino", "control"):
    model, _ = model_from_checkpoint(out / f"seed{seeds[0]}_{arm}" / "checkpoint_last.pt")
    with torch.no_grad():
        amap = attention_map(model(to_tensor(images[:1])))
    overlay, _ = attention_overlay(images[0], amap)
    write_image(out / f"attention_{arm}.png", overlay)
    r, c = np.unravel_index(amap.argmax(), amap.shape)
    print(arm, "attention peak at patch", (int(r), int(c)))
