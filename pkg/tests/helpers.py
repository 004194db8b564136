"""Small shared builders for decoder-level tests."""

from dataclasses import replace

import numpy as np
import torch

from clfusion.camera import default_rig
from clfusion.decoder import (
    DecoderConfig,
    MaskMode,
    TrainSample,
    build_model,
    encode_dn_queries,
    gaussian_bias,
)
from clfusion.features import RenderConfig, render_feature_grids
from clfusion.polg import PolgConfig, generate_object_list
from clfusion.scene import SceneGenConfig, sample_random_scene

RIG = default_rig(grid=(4, 8))
TINY = DecoderConfig(d_model=16, n_heads=2, n_layers=2, n_learnable_queries=6, n_dn_groups=2)


def tiny_config(**kw) -> DecoderConfig:
    return replace(TINY, **kw)


def tiny_model(cfg=TINY, seed=0, dtype=torch.float64):
    return build_model(cfg, RIG, seed=seed, dtype=dtype)


def make_samples(cfg, n=2, n_objects=(2, 4), seed=0, polg=PolgConfig(seed=1)):
    out = []
    rng = np.random.default_rng(seed)
    for k in range(n):
        s = sample_random_scene(SceneGenConfig(n_objects=n_objects), seed * 100 + k)
        keys = render_feature_grids(s, RIG, RenderConfig(splat_gain=2.0), seed=k).keys()
        res = generate_object_list(s, polg)
        dn = None
        if cfg.uses_dn and len(res.objects):
            dn = encode_dn_queries(res.objects, res.targets(), cfg.n_dn_groups, s.bounds, rng)
        bias = gaussian_bias(RIG, res.objects, cfg) if cfg.use_gaussian_bias else None
        out.append(TrainSample(keys, s.objects, dn, bias, s.bounds))
    return out


def keys_tensor(samples, dtype=torch.float64):
    return torch.as_tensor(np.stack([s.keys for s in samples]), dtype=dtype)


def bias_tensor(samples, dtype=torch.float64):
    return torch.as_tensor(np.stack([s.bias for s in samples]), dtype=dtype)


__all__ = ["RIG", "TINY", "MaskMode", "tiny_config", "tiny_model", "make_samples", "keys_tensor",
           "bias_tensor"]
