import dataclasses

import numpy as np
import pytest
import torch

from vino.config import ExperimentConfig
from vino.encoder import EncoderConfig, VisionTransformer
from vino.videodata import SpriteSpec, SyntheticSceneConfig, generate_synthetic_video

# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def tiny_encoder_config(**kw) -> EncoderConfig:
    base = dict(
        patch_size=8,
        embed_dim=16,
        depth=1,
        num_heads=2,
        head_output_dim=16,
        mlp_ratio=1.0,
        head_hidden_dim=16,
        head_bottleneck_dim=8,
        image_size=32,
    )
    base.update(kw)
    return EncoderConfig(**base)


def tiny_experiment(steps=3, seed=0, **run) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.encoder = tiny_encoder_config()
    cfg.views.global_size = 32
    cfg.views.local_size = 16
    cfg.views.n_local = 2
    cfg.data.T = 2
    cfg.data.stride = 2
    cfg.run.steps = steps
    cfg.run.seed = seed
    cfg.run.checkpoint_every = 0
    cfg.run.prefetch = 0
    for k, v in run.items():
        setattr(cfg.run, k, v)
    cfg.synth.num_frames = 12
    cfg.synth.num_sprites = 2
    return cfg.validate()


def tiny_model(dtype=torch.float64, seed=0, **kw) -> VisionTransformer:
    torch.manual_seed(seed)
    return VisionTransformer(tiny_encoder_config(**kw)).to(dtype)


def fd_check(model, loss_fn, n_coords=20, h=1e-5, seed=0):
    """Max relative error between autograd and central differences on random coordinates."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    for _ in range(n_coords):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        j = int(rng.integers(sizes[i]))
        p = params[i]
        flat = p.data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
        num = (up - down) / (2 * h)
        ana = p.grad.view(-1)[j].item()
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def same_tree(a, b) -> bool:
    """Exact equality of nested dataclasses, dicts and lists of tensors, arrays and scalars."""
    if dataclasses.is_dataclass(a):
        return type(a) is type(b) and all(same_tree(getattr(a, f.name), getattr(b, f.name)) for f in dataclasses.fields(a))
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(same_tree(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return type(a) is type(b) and len(a) == len(b) and all(same_tree(x, y) for x, y in zip(a, b))
    if isinstance(a, torch.Tensor):
        return isinstance(b, torch.Tensor) and a.dtype == b.dtype and torch.equal(a, b)
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


@pytest.fixture
def small_video():
    cfg = SyntheticSceneConfig(num_frames=12, num_sprites=2, seed=3)
    return generate_synthetic_video(cfg)


@pytest.fixture
def two_sprite_video():
    sprites = [
        SpriteSpec(x=4, y=4, size=12, vx=1.0, shape="square", color=(0.9, 0.1, 0.1)),
        SpriteSpec(x=40, y=36, size=14, vx=-1.0, vy=0.5, shape="disc", color=(0.1, 0.2, 0.9)),
    ]
    cfg = SyntheticSceneConfig(num_frames=40, sprites=sprites, seed=5)
    return generate_synthetic_video(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
