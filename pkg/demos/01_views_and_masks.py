# Views of one tube: what the teacher sees, what each object-conditioned
# student view keeps, and where the local crops land.
# Run with `python3 demos/01_views_and_masks.py`; images go to demos/out/views.

# %%
from pathlib import Path

import numpy as np

from vino.config import ExperimentConfig
from vino.maskops import object_conditioned_mask, union_mask
from vino.videodata import SyntheticSceneConfig, generate_synthetic_video, sample_tube, write_image
from vino.viewgen import build_tube_views

out = Path(__file__).parent / "out" / "views"
out.mkdir(parents=True, exist_ok=True)

# %% a scene with three sprites over a panning textured background
video = generate_synthetic_video(SyntheticSceneConfig(num_frames=60, num_sprites=3, seed=7, ego_velocity=(3.0, 1.0)))
print(len(video.frames), "frames of", video.frames[0].shape)

# %% mask algebra on the first frame
masks = [m.grid for m in video.annotations[0]]
m_union = union_mask(masks)
for k, m in enumerate(masks):
    keep = object_conditioned_mask(m_union, m)
    # background and object k survive, the other sprites are blanked
    print(f"object {k}: keeps {keep.mean():.2f} of the frame, area {m.sum()} px")

# %% every view family for one tube
cfg = ExperimentConfig()
tube = sample_tube(video, cfg.data.T, cfg.data.stride, np.random.default_rng(0))
views = build_tube_views(tube, cfg.views, np.random.default_rng(1))
print("teacher frames", sorted(views.teacher_views), "fallbacks", sorted(views.fallback_views))
print(len(views.student_masked_views), "object views,", len(views.local_views), "local views")

for t, img in views.teacher_views.items():
    write_image(out / f"teacher_t{t}.png", img)
for t, k, img in views.student_masked_views:
    write_image(out / f"student_t{t}_k{k}.png", img)
for lv in views.local_views[:6]:
    write_image(out / f"local_t{lv.t}_r{lv.r}.png", lv.image)
print("wrote", len(list(out.glob("*.png"))), "images to", out)
