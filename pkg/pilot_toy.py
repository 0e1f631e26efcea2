"""Pilot: full-length toy runs to validate clustering quality."""
import json
import sys
import time

import numpy as np

from gedi.train import TrainConfig, DataConfig, run_training
from gedi.model import ModelConfig
from gedi.objectives import LossWeights
from gedi.sampling import SgldConfig, DamConfig
from gedi.data import AugmentConfig


def make_cfg(kind, seed, iters1=2000, iters2=7000, sgld_steps=20, dam_steps=10,
             w=(1.0, 1 / 400, 1000.0, 500.0), no_stage1=False):
    return TrainConfig(
        model=ModelConfig(input_dim=2, latent_dim=2, num_prototypes=2,
                          encoder_widths=(100, 100), projector_hidden=4),
        data=DataConfig(kind=kind, n_train=1000, n_test=1000, seed=seed),
        iters1=iters1, iters2=iters2, batch_size=400, lr=1e-3,
        weights=LossWeights(w_gen=w[0], w_nf=w[1], w_di_aug=w[2], w_di_dam=w[3]),
        sgld=SgldConfig(steps=sgld_steps), dam=DamConfig(radius=0.03, steps=dam_steps),
        augment=AugmentConfig(gaussian_noise_std=0.03),
        no_stage1=no_stage1,
        seed=seed, log_every=1000, eval_every=1000,
    )


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "circles"
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    sgld_steps = int(sys.argv[3]) if len(sys.argv) > 3 else 20
    cfg = make_cfg(which, seed, sgld_steps=sgld_steps)
    t0 = time.time()
    model, metrics, final = run_training(cfg)
    print(f"{which} seed={seed} sgld={sgld_steps}: {time.time()-t0:.0f}s final={final}")
    for r in metrics.records:
        if r.get("stage") == "eval":
            print(" eval", r["iteration"], round(r["nmi"], 3))
