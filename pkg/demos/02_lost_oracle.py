# LOST on keys that know the answer, then on a randomly initialised encoder.
# With two-valued foreground keys the seed lands on the sprite and the box
# covers it; random keys give a baseline for the trained models.

# %%
import numpy as np

from vino.config import ExperimentConfig
from vino.discovery import corloc, lost
from vino.experiment import CorpusSpec, make_corpus
from vino.maskops import bbox_of_mask
from vino.training import build_models, evaluate_corloc, indicator_keys
from vino.videodata import SyntheticSceneConfig, generate_synthetic_video

# %% oracle keys, one sprite per image
preds, gts = [], []
for s in range(50):
    video = generate_synthetic_video(SyntheticSceneConfig(num_frames=1, num_sprites=1, sprite_size=(16, 30), seed=s))
    mask = video.annotations[0][0].grid
    keys, grid = indicator_keys(mask, 4)
    preds.append(lost(keys, grid, 4))
    gts.append([bbox_of_mask(mask)])
print("oracle CorLoc", corloc(preds, gts).corloc)

# %% untrained encoder on the held-out frames of the trap corpus
_, images, boxes = make_corpus(CorpusSpec(heldout_frames=60), seed=0)
_, teacher, _, _ = build_models(ExperimentConfig())
print("random-init CorLoc", round(evaluate_corloc(teacher, images, boxes).corloc, 1))
