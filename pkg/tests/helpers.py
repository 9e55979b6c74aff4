"""Shared test fixtures: tiny configs, batches and parameter randomisation."""

import numpy as np

from trajcast.config import Config
from trajcast.model import collate, init_params
from trajcast.scene import generate_synthetic, normalize

TINY = dict(hidden=8, heads=2, ffn_hidden=8, K=2, T_h=4, T_f=3, dropout=0.0, precision="f64")


def tiny_config(**changes) -> Config:
    return Config(**{**TINY, **changes}).validate()


def tiny_batch(n_scenes=2, agents=(2, 3), seed=0, T_h=4, T_f=3, late=0.0):
    scenes = generate_synthetic(seed, n_scenes, n_agents_range=agents, T_h=T_h, T_f=T_f, late_appearance_prob=late)
    return collate([normalize(s) for s in scenes])



def randomize(params, rng, scale=0.5):
    """Replace zero-initialised biases and unit gains so every parameter matters in checks."""
    for name, t in params.items():
        if name.endswith((".bias", ".gamma", ".beta")):
            t.data[...] = rng.normal(size=t.shape) * scale + (1.0 if name.endswith(".gamma") else 0.0)
    return params
