"""Central finite differences against autograd on the full training loss."""

import numpy as np
import torch

from clfusion.decoder import MaskMode, scene_losses

from helpers import make_samples, tiny_config, tiny_model

H = 1e-5
PER_TENSOR = 10  # sampled entries per parameter tensor
# eps*|loss|/H is ~1e-10 here; below this magnitude the difference quotient is rounding noise
FLOOR = 1e-5


def test_loss_gradients_match_finite_differences():
    cfg = tiny_config(d_model=8, n_heads=2, ffn_dim=16, n_layers=2, n_learnable_queries=4,
                      n_dn_groups=1, use_gaussian_bias=True, mask_mode=MaskMode.NOMASK_QDN)
    model = tiny_model(cfg, seed=1, dtype=torch.float64)
    samples = make_samples(cfg, n=1, n_objects=(2, 2), seed=3)
    assert len(samples[0].dn) >= 1

    def loss():
        return scene_losses(model, samples)[0]

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    worst = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            grad = p.grad.view(-1)
            idx = rng.choice(flat.numel(), min(PER_TENSOR, flat.numel()), replace=False)
            errs = []
            for i in idx:
                keep = flat[i].item()
                flat[i] = keep + H
                up = loss().item()
                flat[i] = keep - H
                down = loss().item()
                flat[i] = keep
                fd = (up - down) / (2 * H)
                an = grad[i].item()
                errs.append(abs(fd - an) / max(abs(fd), abs(an), FLOOR))
            worst[name] = max(errs)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, bad
