import json

import numpy as np
import pytest

from gedi.checkpoint import load_checkpoint, save_checkpoint
from gedi.data import AugmentConfig, Dataset, write_mnist_idx
from gedi.errors import ConfigError, ContractViolation, FormatError
from gedi.model import GediModel, ModelConfig
from gedi.objectives import LossWeights
from gedi.sampling import DamConfig, Diagnostics, ReplayBuffer, SgldConfig
from gedi.train import (
    DataConfig,
    RunMetrics,
    TrainConfig,
    TrainState,
    build_datasets,
    run_training,
    stage1_pretrain,
    stage2_train,
)


def tiny_cfg(**kw):
    base = dict(
        model=ModelConfig(input_dim=2, latent_dim=2, num_prototypes=2, encoder_widths=(16, 16), projector_hidden=4),
        data=DataConfig(kind="moons", n_train=200, n_test=200, seed=0),
        iters1=5,
        iters2=8,
        batch_size=64,
        lr=1e-3,
        weights=LossWeights(w_gen=1.0, w_nf=1.0 / 64, w_di_aug=1000.0, w_di_dam=500.0),
        sgld=SgldConfig(steps=3),
        dam=DamConfig(radius=0.03, steps=2),
        augment=AugmentConfig(gaussian_noise_std=0.03),
        seed=0,
        log_every=1,
        eval_every=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def fresh_state(seed=0, capacity=500, triplets=None):
    return TrainState(
        rng=np.random.default_rng(seed),
        buffer=ReplayBuffer(capacity=capacity),
        metrics=RunMetrics(),
        diagnostics=Diagnostics(),
        triplets=triplets,
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(batch_size=1)
    with pytest.raises(ConfigError):
        tiny_cfg(iters1=-1)
    with pytest.raises(ConfigError):
        tiny_cfg(nesy_on=True, batch_size=64)  # not a multiple of 3


def test_config_round_trip_through_json(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = TrainConfig.from_json(path)
    assert back.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_fields():
    d = tiny_cfg().to_dict()
    d["mystery_knob"] = 7
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(d)


def test_no_nf_ablation_equals_zero_weight_config():
    ablated = tiny_cfg(no_nf=True).expand_ablations()
    explicit = tiny_cfg()
    explicit.weights.w_nf = 0.0
    explicit.no_nf = True
    assert ablated.weights.to_dict() == explicit.weights.to_dict()
    assert ablated.to_dict() == explicit.expand_ablations().to_dict()


def test_stage1_zero_iterations_leaves_model_unchanged():
    cfg = tiny_cfg(iters1=0)
    model = GediModel(cfg.model, np.random.default_rng(0))
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    train, _, _ = build_datasets(cfg)
    stage1_pretrain(model, train, cfg, fresh_state())
    after = model.state_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def two_cluster_1d(n=400, seed=0):
    rng = np.random.default_rng(seed)
    points = np.concatenate([rng.normal(-1.0, 0.1, n // 2), rng.normal(1.0, 0.1, n // 2)])[:, None]
    labels = np.repeat([0, 1], n // 2)
    return Dataset(points, labels)


def test_stage1_learns_density_ordering():
    # after PCD pretraining, held-out data scores above uniform noise
    cfg = TrainConfig(
        model=ModelConfig(input_dim=1, latent_dim=2, num_prototypes=2, encoder_widths=(32,), projector_hidden=4),
        data=DataConfig(kind="moons"),  # unused; we call stage1 directly
        iters1=400,
        iters2=0,
        batch_size=64,
        lr=1e-3,
        sgld=SgldConfig(steps=10, step_size=0.1, noise_std=0.05, clamp_low=-1.5, clamp_high=1.5),
        seed=0,
        log_every=100,
    )
    train = two_cluster_1d(seed=1)
    held_out = two_cluster_1d(seed=2)
    model = GediModel(cfg.model, np.random.default_rng(0))
    state = fresh_state(seed=3)
    stage1_pretrain(model, train, cfg, state)
    rng = np.random.default_rng(4)
    noise = rng.uniform(-1.5, 1.5, size=(400, 1))
    f_data = model.energy_logdensity(held_out.points).values.mean()
    f_noise = model.energy_logdensity(noise).values.mean()
    assert f_data > f_noise

    # the generative loss trends downward over training
    losses = [r["loss_gen"] for r in state.metrics.records if "loss_gen" in r]
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_stage2_weights_only_di_aug_runs_without_sampler():
    cfg = tiny_cfg(weights=LossWeights(w_gen=0.0, w_nf=0.0, w_di_aug=1000.0, w_di_dam=0.0), iters1=0, iters2=4)
    train, test, _ = build_datasets(cfg)
    model = GediModel(cfg.model, np.random.default_rng(0))
    state = fresh_state()
    stage2_train(model, train, test, cfg, state)
    assert len(state.buffer) == 0  # SGLD never ran
    assert all("gen" not in r for r in state.metrics.records if r.get("stage") == "stage2")


def test_stage2_jem_only_runs_without_views():
    cfg = tiny_cfg(weights=LossWeights(w_gen=1.0, w_nf=0.0, w_di_aug=0.0, w_di_dam=0.0), iters1=2, iters2=4)
    train, test, _ = build_datasets(cfg)
    model = GediModel(cfg.model, np.random.default_rng(0))
    state = fresh_state()
    stage1_pretrain(model, train, cfg, state)
    stage2_train(model, train, test, cfg, state)
    records = [r for r in state.metrics.records if r.get("stage") == "stage2"]
    assert records and all("di_aug" not in r for r in records)


def test_run_training_end_to_end_deterministic(tmp_path):
    cfg = tiny_cfg(eval_every=4)
    _, metrics_a, final_a = run_training(tiny_cfg(eval_every=4))
    _, metrics_b, final_b = run_training(tiny_cfg(eval_every=4))

    def strip(records):
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]

    assert strip(metrics_a.records) == strip(metrics_b.records)
    assert final_a == final_b


def test_run_training_writes_outputs(tmp_path):
    out = tmp_path / "run"
    run_training(tiny_cfg(), out_dir=out)
    assert (out / "resolved_config.json").exists()
    assert (out / "metrics.jsonl").exists()
    assert (out / "checkpoint.gedi").exists()
    # resolved config alone reproduces the run
    cfg2 = TrainConfig.from_json(out / "resolved_config.json")
    _, metrics2, final2 = run_training(cfg2)
    lines = RunMetrics.read_jsonl(out / "metrics.jsonl")
    final_line = [r for r in lines if r.get("stage") == "final"][0]
    assert final_line["nmi"] == pytest.approx(final2["nmi"], abs=1e-12)


# -- checkpointing -----------------------------------------------------------------


def test_checkpoint_model_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg()
    model = GediModel(cfg.model, np.random.default_rng(7))
    path = tmp_path / "model.gedi"
    save_checkpoint(path, model)
    restored = load_checkpoint(path).build_model()
    for key, value in model.state_arrays().items():
        assert np.array_equal(value, restored.state_arrays()[key]), key


def test_checkpoint_rejects_mismatched_model_config(tmp_path):
    cfg = tiny_cfg()
    model = GediModel(cfg.model, np.random.default_rng(8))
    path = tmp_path / "model.gedi"
    save_checkpoint(path, model)
    other = GediModel(ModelConfig(input_dim=3, latent_dim=2, num_prototypes=2, encoder_widths=(16, 16), projector_hidden=4), np.random.default_rng(9))
    with pytest.raises(ContractViolation):
        load_checkpoint(path).restore_model(other)


def test_checkpoint_detects_truncation_and_corruption(tmp_path):
    cfg = tiny_cfg()
    model = GediModel(cfg.model, np.random.default_rng(10))
    path = tmp_path / "model.gedi"
    save_checkpoint(path, model)
    blob = path.read_bytes()

    truncated = tmp_path / "trunc.gedi"
    truncated.write_bytes(blob[:-7])
    with pytest.raises(FormatError):
        load_checkpoint(truncated)

    corrupted = tmp_path / "corrupt.gedi"
    broken = bytearray(blob)
    broken[len(broken) // 2] ^= 0x55
    corrupted.write_bytes(bytes(broken))
    with pytest.raises(FormatError):
        load_checkpoint(corrupted)


def test_checkpoint_resume_equals_uninterrupted_run(tmp_path):
    cfg = tiny_cfg(iters1=0, iters2=2, eval_every=0)
    train, test, _ = build_datasets(cfg)

    # continuous path: 2 iterations then 1 more with live state
    model_a = GediModel(cfg.model, np.random.default_rng(cfg.seed))
    state_a = fresh_state(seed=cfg.seed)
    adam_a = stage2_train(model_a, train, test, cfg, state_a)
    cfg3 = tiny_cfg(iters1=0, iters2=3, eval_every=0)
    stage2_train(model_a, train, test, cfg3, state_a, adam=adam_a, start_iteration=3)

    # round-trip path: 2 iterations, save, restore everything, 1 more
    model_b = GediModel(cfg.model, np.random.default_rng(cfg.seed))
    state_b = fresh_state(seed=cfg.seed)
    adam_b = stage2_train(model_b, train, test, cfg, state_b)
    path = tmp_path / "resume.gedi"
    save_checkpoint(path, model_b, optimizers={"stage2": adam_b}, buffer=state_b.buffer, rng=state_b.rng)

    ckpt = load_checkpoint(path)
    model_c = GediModel(cfg.model, np.random.default_rng(99))
    ckpt.restore_model(model_c)
    adam_c = ckpt.restore_optimizer("stage2", model_c.parameters())
    state_c = fresh_state(seed=123)
    state_c.buffer = ckpt.restore_buffer()
    state_c.rng = ckpt.restore_rng()
    stage2_train(model_c, train, test, cfg3, state_c, adam=adam_c, start_iteration=3)

    for key, value in model_a.state_arrays().items():
        assert np.array_equal(value, model_c.state_arrays()[key]), key
    last_a = [r for r in state_a.metrics.records if r.get("stage") == "stage2"][-1]
    last_c = [r for r in state_c.metrics.records if r.get("stage") == "stage2"][-1]
    assert last_a["total"] == last_c["total"]


# -- nesy collapse -----------------------------------------------------------------


def digit_idx_root(tmp_path, n=240, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(10), n // 10)
    # images carry a faint class signature plus noise
    base = rng.normal(size=(10, 49))
    imgs = base[labels] + 0.5 * rng.normal(size=(n, 49))
    imgs = np.clip(imgs, -1, 1)
    root = tmp_path / "digits"
    root.mkdir()
    write_mnist_idx(imgs[: n // 2], labels[: n // 2], root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    write_mnist_idx(imgs[n // 2 :], labels[n // 2 :], root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    return root


def test_constraint_only_training_collapses(tmp_path):
    root = digit_idx_root(tmp_path)
    cfg = TrainConfig(
        model=ModelConfig(input_dim=49, latent_dim=8, num_prototypes=10, encoder_widths=(32,), projector_hidden=16),
        data=DataConfig(kind="addition", num_triplets=30, data_root=str(root), seed=0),
        iters1=0,
        iters2=120,
        batch_size=30,
        lr=1e-3,
        weights=LossWeights(w_gen=0, w_nf=0, w_di_aug=0, w_di_dam=0, w_nesy=3000.0),
        nesy_on=True,
        no_stage1=True,
        seed=0,
        log_every=60,
        eval_every=0,
    )
    model, metrics, final = run_training(cfg)
    _, test, _ = build_datasets(cfg)
    assignments = model.assign_clusters(test.points)
    majority = np.bincount(assignments, minlength=10).max() / len(assignments)
    assert majority > 0.9
    assert final["nmi"] <= 0.05


def test_addition_batches_are_triplet_aligned():
    cfg = tiny_cfg()
    points = np.arange(60, dtype=np.float64).reshape(30, 2)
    labels = np.tile([1, 2, 3], 10)
    records = np.tile([1, 2, 3], (10, 1))
    from gedi.data import TripletBatch

    triplets = TripletBatch(points, labels, records)
    train = Dataset(points, labels)
    state = fresh_state(triplets=triplets)
    from gedi.train import draw_batch

    cfg.batch_size = 9
    batch = draw_batch(train, cfg, state)
    assert batch.shape == (9, 2)
    # each group of three rows is one stored triplet block
    for i in range(0, 9, 3):
        rows = batch[i : i + 3]
        start = np.flatnonzero((points == rows[0]).all(axis=1))[0]
        assert start % 3 == 0
        assert np.array_equal(points[start : start + 3], rows)


def test_divergence_aborts_with_dump():
    from gedi.errors import NumericalFailure

    cfg = tiny_cfg(iters1=0, iters2=5, lr=1e50, weights=LossWeights(w_gen=0, w_nf=0, w_di_aug=1e9, w_di_dam=0))
    with pytest.raises(NumericalFailure):
        run_training(cfg)
