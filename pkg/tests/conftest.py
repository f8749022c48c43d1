import dataclasses

import numpy as np
import pytest
import torch

from cftgan import config, data

torch.set_num_threads(1)


def mini_config(**overrides) -> config.RunConfig:
    """A deliberately tiny geometry so network tests run in milliseconds."""
    base = dataclasses.replace(
        config.preset("toy"),
        frames=4, height=8, width=8,
        canvas_size=10, canvas_frames=6,
        word_dim=8, mixture_centers=3, embed_dim=6, cond_dim=8, noise_dim=8,
        caption_channels=4, widths=(16, 8, 8, 8),
        batch_size=2, total_iters=50, checkpoint_every=10,
    )
    return dataclasses.replace(base, **overrides).validate()


def spread_specs(cfg: config.RunConfig, n: int = 8) -> list[data.SyntheticSpec]:
    """n clip specs whose captions differ in color, background, shape, motion."""
    specs = []
    i = 0
    for color in data.SHAPE_COLORS:
        for bg in data.BG_COLORS:
            specs.append(data.SyntheticSpec(
                cfg.canvas_size, cfg.canvas_frames, data.SHAPES[i % 3],
                color, bg, data.GRID_MOTIONS[i % 4]))
            i += 1
    return specs[:n]


@pytest.fixture(scope="session")
def mini_cfg() -> config.RunConfig:
    return mini_config()


@pytest.fixture(scope="session")
def mini_corpus_dir(tmp_path_factory):
    cfg = mini_config()
    root = tmp_path_factory.mktemp("corpus")
    rng_specs = spread_specs(cfg)
    data.write_corpus(root, rng_specs, seed=7)
    return root


@pytest.fixture(scope="session")
def mini_clips(mini_cfg):
    rng = np.random.default_rng(7)
    return [data.generate_synthetic_sample(s, rng) for s in spread_specs(mini_cfg)]
