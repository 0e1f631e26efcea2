"""Named experiment configurations.

Toy presets follow the synthetic-data protocol (batch 400, Adam 1e-3,
7000 joint-training iterations, Gaussian-noise views, DAM radius 0.03
with 10 steps); addition presets follow the digit protocol (batch 60,
Adam 1e-4, epochs split evenly between the two stages).
"""

from __future__ import annotations

from .data import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights
from .sampling import DamConfig, SgldConfig
from .train import DataConfig, TrainConfig

TOY_ITERS1 = 2000
TOY_ITERS2 = 7000

# ablation name -> (loss weights, flags)
TOY_VARIANTS = {
    "gedi": {},
    "swav-only": {"weights": LossWeights(w_gen=0.0, w_nf=0.0, w_di_aug=1000.0, w_di_dam=0.0), "no_stage1": True},
    "jem-only": {"weights": LossWeights(w_gen=1.0, w_nf=0.0, w_di_aug=0.0, w_di_dam=0.0)},
    "no-nf": {"no_nf": True},
    "no-nf-no-stage1": {"no_nf": True, "no_stage1": True},
    "no-nf-2enc": {"no_nf": True, "two_encoders": True},
}

ADDITION_EPOCHS = {100: 100, 1000: 30, 10000: 5}


def toy_preset(dataset: str, variant: str = "gedi", seed: int = 0, t_steps: int = 10) -> TrainConfig:
    if dataset not in ("moons", "circles"):
        raise ConfigError(f"unknown toy dataset {dataset!r}")
    if variant not in TOY_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(TOY_VARIANTS)}")
    overrides = dict(TOY_VARIANTS[variant])
    cfg = TrainConfig(
        model=ModelConfig(input_dim=2, latent_dim=2, num_prototypes=2, encoder_widths=(100, 100), projector_hidden=4),
        data=DataConfig(kind=dataset, n_train=1000, n_test=1000, seed=seed),
        iters1=TOY_ITERS1,
        iters2=TOY_ITERS2,
        batch_size=400,
        lr=1e-3,
        weights=overrides.pop("weights", LossWeights(w_gen=1.0, w_nf=1.0 / 400, w_di_aug=1000.0, w_di_dam=500.0)),
        sgld=SgldConfig(steps=20),
        dam=DamConfig(radius=0.03, steps=t_steps),
        augment=AugmentConfig(gaussian_noise_std=0.03),
        seed=seed,
        **overrides,
    )
    return cfg


def addition_preset(
    n_triplets: int = 100,
    constraint: bool = True,
    gedi: bool = True,
    seed: int = 0,
    data_root: str | None = None,
    epochs: int | None = None,
) -> TrainConfig:
    """Digit-addition runs. ``gedi=False`` keeps only the constraint loss,
    which reproduces the representational-collapse baseline."""
    if epochs is None:
        if n_triplets not in ADDITION_EPOCHS:
            raise ConfigError(f"no default epoch count for N={n_triplets}; pass epochs explicitly")
        epochs = ADDITION_EPOCHS[n_triplets]
    batch = 60
    batches_per_epoch = max(1, (3 * n_triplets) // batch)
    total_iters = epochs * batches_per_epoch
    iters1 = total_iters // 2 if gedi else 0
    iters2 = total_iters - iters1

    if gedi:
        weights = LossWeights(w_gen=1.0, w_nf=1.0 / batch, w_di_aug=1000.0, w_di_dam=500.0, w_nesy=3000.0 if constraint else 0.0)
    else:
        weights = LossWeights(w_gen=0.0, w_nf=0.0, w_di_aug=0.0, w_di_dam=0.0, w_nesy=3000.0)

    return TrainConfig(
        model=ModelConfig(
            input_dim=784, latent_dim=128, num_prototypes=10,
            encoder_widths=(512, 256), projector_hidden=256,
        ),
        data=DataConfig(kind="addition", num_triplets=n_triplets, data_root=data_root, seed=seed),
        iters1=iters1,
        iters2=iters2,
        batch_size=batch,
        lr=1e-4,
        weights=weights,
        sgld=SgldConfig(steps=10),
        dam=DamConfig(radius=0.03, steps=10),
        augment=AugmentConfig(gaussian_noise_std=0.3, crop=True, max_shift=4, jitter_prob=0.1, grayscale_prob=0.1),
        nesy_on=constraint,
        no_stage1=not gedi,
        seed=seed,
        log_every=50,
        eval_every=250,
    )


def get_preset(name: str, seed: int = 0, t_steps: int = 10, data_root: str | None = None) -> TrainConfig:
    """Resolve ``<dataset>-<variant>`` or ``addition-n<N>[-...]`` names."""
    parts = name.split("-")
    if parts[0] in ("moons", "circles"):
        variant = "-".join(parts[1:]) or "gedi"
        return toy_preset(parts[0], variant, seed=seed, t_steps=t_steps)
    if parts[0] == "addition":
        if len(parts) < 2 or not parts[1].startswith("n"):
            raise ConfigError("addition presets are named addition-n<N>[-no-constraint|-constraint-only]")
        n = int(parts[1][1:])
        tail = "-".join(parts[2:])
        if tail in ("", "constraint"):
            return addition_preset(n, constraint=True, gedi=True, seed=seed, data_root=data_root)
        if tail == "no-constraint":
            return addition_preset(n, constraint=False, gedi=True, seed=seed, data_root=data_root)
        if tail == "constraint-only":
            return addition_preset(n, constraint=True, gedi=False, seed=seed, data_root=data_root)
        raise ConfigError(f"unknown addition preset suffix {tail!r}")
    raise ConfigError(f"unknown preset {name!r}")


def preset_names() -> list[str]:
    names = []
    for ds in ("moons", "circles"):
        for variant in TOY_VARIANTS:
            names.append(f"{ds}-{variant}" if variant != "gedi" else f"{ds}-gedi")
    for n in ADDITION_EPOCHS:
        names += [f"addition-n{n}", f"addition-n{n}-no-constraint", f"addition-n{n}-constraint-only"]
    return names
