"""Two-stage training driver.

Stage 1 fits the energy head by persistent contrastive divergence: SGLD
negatives from the replay buffer, generative loss, Adam on the encoder
and energy vector only. Stage 2 optimizes the full objective: generative
term, decorrelation/invariance term, cluster-prediction terms on both the
stochastic and the manifold-walk views, and optionally the addition
constraint, with prototype columns renormalized after every step.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Graph, Tensor, adam_step, backward, softmax, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Dataset, TripletBatch, augment, gen_circles, gen_moons, load_cache, load_mnist_idx, make_addition_triplets
from .errors import ConfigError, ContractViolation, NumericalFailure
from .evaluate import cluster_accuracy, direct_accuracy, nmi
from .model import GediModel, ModelConfig
from .objectives import LossWeights, loss_di, loss_gen, loss_nesy, loss_nf, sinkhorn, total_loss
from .sampling import DamConfig, Diagnostics, ReplayBuffer, SgldConfig, dam, sgld_sample

DIVERGENCE_LIMIT = 1e6
SINKHORN_WARN = 1e-3


@dataclass
class DataConfig:
    kind: str = "moons"  # moons | circles | addition | cache
    n_train: int = 1000
    n_test: int = 1000
    noise_std: float | None = None
    inner_scale: float = 0.5
    num_triplets: int = 100
    data_root: str | None = None
    cache_path: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "noise_std": self.noise_std,
            "inner_scale": self.inner_scale,
            "num_triplets": self.num_triplets,
            "data_root": self.data_root,
            "cache_path": self.cache_path,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass
class TrainConfig:
    model: ModelConfig
    data: DataConfig
    iters1: int = 0
    iters2: int = 1000
    batch_size: int = 400
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    sgld: SgldConfig = field(default_factory=SgldConfig)
    dam: DamConfig = field(default_factory=DamConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    buffer_capacity: int = 10_000
    covariance_beta: float = 1e-3
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    symmetrize_di: bool = True
    no_nf: bool = False
    no_stage1: bool = False
    two_encoders: bool = False
    nesy_on: bool = False
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500

    def __post_init__(self):
        if self.iters1 < 0 or self.iters2 < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if self.nesy_on and (self.batch_size < 3 or self.batch_size % 3 != 0):
            raise ConfigError("nesy runs need a batch size divisible by 3 (and >= 3)")
        if self.covariance_beta <= 0:
            raise ConfigError("covariance_beta must be positive")

    def expand_ablations(self) -> "TrainConfig":
        """Apply ablation flags to the weight/stage settings they imply."""
        if self.no_nf:
            self.weights.w_nf = 0.0
        if self.no_stage1:
            self.iters1 = 0
        if self.two_encoders:
            self.model.two_encoders = True
        if not self.nesy_on:
            self.weights.w_nesy = 0.0
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "iters1": self.iters1,
            "iters2": self.iters2,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "weights": self.weights.to_dict(),
            "sgld": self.sgld.to_dict(),
            "dam": self.dam.to_dict(),
            "augment": self.augment.to_dict(),
            "buffer_capacity": self.buffer_capacity,
            "covariance_beta": self.covariance_beta,
            "sinkhorn_epsilon": self.sinkhorn_epsilon,
            "sinkhorn_iters": self.sinkhorn_iters,
            "symmetrize_di": self.symmetrize_di,
            "no_nf": self.no_nf,
            "no_stage1": self.no_stage1,
            "two_encoders": self.two_encoders,
            "nesy_on": self.nesy_on,
            "seed": self.seed,
            "log_every": self.log_every,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            kwargs = dict(d)
            kwargs["model"] = ModelConfig.from_dict(d["model"])
            kwargs["data"] = DataConfig.from_dict(d["data"])
            kwargs["weights"] = LossWeights.from_dict(d["weights"])
            kwargs["sgld"] = SgldConfig.from_dict(d["sgld"])
            kwargs["dam"] = DamConfig.from_dict(d["dam"])
            kwargs["augment"] = AugmentConfig.from_dict(d["augment"])
            known = {f: kwargs[f] for f in cls.__dataclass_fields__ if f in kwargs}
            unknown = set(d) - set(cls.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown config fields: {sorted(unknown)}")
            return cls(**known)
        except (KeyError, TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"invalid training config: {err}") from err

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class RunMetrics:
    """Append-only per-iteration records, one dict per logged iteration."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, **record) -> None:
        self.records.append(record)

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str) -> list[dict]:
        with open(path, "r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class TrainState:
    rng: np.random.Generator
    buffer: ReplayBuffer
    metrics: RunMetrics
    diagnostics: Diagnostics
    triplets: TripletBatch | None = None


def build_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset, TripletBatch | None]:
    """Train split, test split, and the triplet grouping for addition runs."""
    d = cfg.data
    if d.kind == "moons":
        noise = 0.05 if d.noise_std is None else d.noise_std
        train = gen_moons(d.n_train, noise, seed=d.seed)
        test = gen_moons(d.n_test, noise, seed=d.seed + 1)
        return train, test, None
    if d.kind == "circles":
        noise = 0.03 if d.noise_std is None else d.noise_std
        train = gen_circles(d.n_train, noise, d.inner_scale, seed=d.seed)
        test = gen_circles(d.n_test, noise, d.inner_scale, seed=d.seed + 1)
        return train, test, None
    if d.kind == "cache":
        if not d.cache_path:
            raise ConfigError("cache data kind requires cache_path")
        train = load_cache(d.cache_path)
        test = train
        return train, test, None
    if d.kind == "addition":
        if not d.data_root:
            raise ConfigError("addition data kind requires data_root with IDX digit files")
        from pathlib import Path

        root = Path(d.data_root)
        train_images, train_labels = _find_idx_pair(root, "train")
        test_images, test_labels = _find_idx_pair(root, "t10k", "test")
        full_train = load_mnist_idx(train_images, train_labels)
        test = load_mnist_idx(test_images, test_labels)
        triplets = make_addition_triplets(full_train, d.num_triplets, seed=d.seed)
        train = Dataset(triplets.images, triplets.labels, {"source": "addition", "seed": d.seed})
        return train, test, triplets
    raise ConfigError(f"unknown data kind {d.kind!r}")


def _find_idx_pair(root, *prefixes):
    for prefix in prefixes:
        for suffix in ("idx3-ubyte", "idx3-ubyte.gz"):
            images = root / f"{prefix}-images-{suffix}"
            labels = root / f"{prefix}-labels-{suffix.replace('idx3', 'idx1')}"
            if images.exists() and labels.exists():
                return images, labels
    raise ConfigError(f"no '{prefixes[0]}-images-idx3-ubyte[.gz]' under {root}")


def default_clamp_bounds(dataset: Dataset, kind: str) -> tuple[float, float]:
    """Images stay in [-1, 1]; toy data uses its bounding box expanded 10%."""
    if kind == "addition" or dataset.dim > 3:
        return -1.0, 1.0
    return dataset.bounding_box(expand=0.10)


def _record(metrics: RunMetrics, **fields) -> None:
    fields["wall_time"] = time.time()
    metrics.add(**fields)


def _dump_divergence(state: TrainState, stage: str, iteration: int, value: float) -> None:
    _record(
        state.metrics,
        stage=stage,
        iteration=iteration,
        event="divergence",
        loss=value,
        **state.diagnostics.to_dict(),
    )
    raise NumericalFailure(f"{stage} diverged at iteration {iteration}: |loss| = {value:.3e} > {DIVERGENCE_LIMIT:.0e}")


def draw_batch(train: Dataset, cfg: TrainConfig, state: TrainState) -> np.ndarray:
    if state.triplets is not None:
        k = cfg.batch_size // 3
        total = state.triplets.num_triplets
        idx = state.rng.choice(total, size=min(k, total), replace=False)
        rows = (3 * idx[:, None] + np.arange(3)[None, :]).ravel()
        return train.points[rows]
    idx = state.rng.choice(train.n, size=min(cfg.batch_size, train.n), replace=False)
    return train.points[idx]


def stage1_pretrain(
    model: GediModel,
    train: Dataset,
    cfg: TrainConfig,
    state: TrainState,
    adam: AdamState | None = None,
    start_iteration: int = 1,
) -> AdamState:
    """Energy-model pretraining; only the (generative) encoder and u move."""
    params = model.generative_parameters()
    if adam is None:
        adam = AdamState(params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    for iteration in range(start_iteration, cfg.iters1 + 1):
        x = draw_batch(train, cfg, state)
        sampled = sgld_sample(model, state.buffer, cfg.sgld, x.shape[0], state.rng, state.diagnostics)
        with Graph() as g:
            value = loss_gen(model, x, sampled)
        loss_value = value.item()
        if not np.isfinite(loss_value) or abs(loss_value) > DIVERGENCE_LIMIT:
            _dump_divergence(state, "stage1", iteration, loss_value)
        zero_grads(params)
        backward(g, value)
        adam_step(params, [p.grad for p in params], adam)
        if iteration % cfg.log_every == 0 or iteration == cfg.iters1:
            _record(state.metrics, stage="stage1", iteration=iteration, loss_gen=loss_value, **state.diagnostics.to_dict())
    return adam


def _di_pair(model: GediModel, w_a: Tensor, w_b: Tensor, cfg: TrainConfig, state: TrainState) -> Tensor:
    """Swapped-prediction loss between two views' embeddings."""
    cos_a = model.prototype_cosines(w_a)
    cos_b = model.prototype_cosines(w_b)
    plan_b = sinkhorn(cos_b.values, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
    if plan_b.marginal_error > SINKHORN_WARN:
        state.diagnostics.sinkhorn_warn_count += 1
    scale = 1.0 / model.temperature
    value = loss_di(cos_a * scale, plan_b)
    if cfg.symmetrize_di:
        plan_a = sinkhorn(cos_a.values, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
        if plan_a.marginal_error > SINKHORN_WARN:
            state.diagnostics.sinkhorn_warn_count += 1
        value = (value + loss_di(cos_b * scale, plan_a)) * 0.5
    return value


def stage2_train(
    model: GediModel,
    train: Dataset,
    test: Dataset,
    cfg: TrainConfig,
    state: TrainState,
    adam: AdamState | None = None,
    start_iteration: int = 1,
) -> AdamState:
    """Joint training of all objective parts on all parameters."""
    params = model.parameters()
    if adam is None:
        adam = AdamState(params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    w = cfg.weights
    for iteration in range(start_iteration, cfg.iters2 + 1):
        x = draw_batch(train, cfg, state)
        x_aug = augment(x, cfg.augment, state.rng)
        x_dam = dam(x, model, cfg.dam, state.rng, state.diagnostics) if w.w_di_dam > 0 else None
        sampled = (
            sgld_sample(model, state.buffer, cfg.sgld, x.shape[0], state.rng, state.diagnostics)
            if w.w_gen > 0
            else None
        )

        with Graph() as g:
            parts: dict[str, Tensor] = {}
            if sampled is not None:
                parts["gen"] = loss_gen(model, x, sampled)
            need_aug = w.w_nf > 0 or w.w_di_aug > 0
            enc_x = model.encode(x)
            w_x = model.project(enc_x)
            if need_aug:
                enc_aug = model.encode(x_aug)
                w_aug = model.project(enc_aug)
                if w.w_nf > 0:
                    parts["nf"] = loss_nf(enc_x, enc_aug, w_x, cfg.covariance_beta)
                if w.w_di_aug > 0:
                    parts["di_aug"] = _di_pair(model, w_x, w_aug, cfg, state)
            if x_dam is not None:
                w_dam = model.project(model.encode(x_dam))
                parts["di_dam"] = _di_pair(model, w_x, w_dam, cfg, state)
            if cfg.nesy_on and w.w_nesy > 0:
                probs = softmax(model.cluster_logits(w_x), axis=1)
                parts["nesy"] = loss_nesy(probs)
            value = total_loss(parts, w)

        loss_value = value.item()
        if not np.isfinite(loss_value) or abs(loss_value) > DIVERGENCE_LIMIT:
            _dump_divergence(state, "stage2", iteration, loss_value)
        zero_grads(params)
        backward(g, value)
        adam_step(params, [p.grad for p in params], adam)
        model.renormalize_prototypes()

        if iteration % cfg.log_every == 0 or iteration == cfg.iters2:
            record = {name: part.item() for name, part in parts.items()}
            _record(
                state.metrics,
                stage="stage2",
                iteration=iteration,
                total=loss_value,
                **record,
                **state.diagnostics.to_dict(),
            )
        if cfg.eval_every and (iteration % cfg.eval_every == 0 or iteration == cfg.iters2):
            snapshot = evaluate_model(model, test)
            _record(state.metrics, stage="eval", iteration=iteration, **snapshot)
    return adam


def evaluate_model(model: GediModel, test: Dataset, chunk: int = 2048) -> dict:
    assignments = []
    for start in range(0, test.n, chunk):
        assignments.append(model.assign_clusters(test.points[start : start + chunk]))
    assignments = np.concatenate(assignments) if assignments else np.empty(0, dtype=int)
    return {
        "nmi": nmi(assignments, test.labels),
        "cluster_accuracy": cluster_accuracy(assignments, test.labels),
        "direct_accuracy": direct_accuracy(assignments, test.labels),
    }


def run_training(cfg: TrainConfig, out_dir: str | None = None) -> tuple[GediModel, RunMetrics, dict]:
    """Full two-stage run; writes resolved config, metrics, and checkpoint
    under ``out_dir`` when given."""
    cfg.expand_ablations()
    train, test, triplets = build_datasets(cfg)
    if cfg.model.input_dim != train.dim:
        raise ConfigError(f"model input_dim {cfg.model.input_dim} does not match data dimension {train.dim}")
    lo, hi = default_clamp_bounds(train, cfg.data.kind)
    cfg.sgld.clamp_low, cfg.sgld.clamp_high = lo, hi

    rng = np.random.default_rng(cfg.seed)
    model = GediModel(cfg.model, rng)
    state = TrainState(
        rng=rng,
        buffer=ReplayBuffer(capacity=cfg.buffer_capacity),
        metrics=RunMetrics(),
        diagnostics=Diagnostics(),
        triplets=triplets,
    )

    optimizers: dict[str, AdamState] = {}
    if cfg.iters1 > 0 and not cfg.no_stage1:
        optimizers["stage1"] = stage1_pretrain(model, train, cfg, state)
    if cfg.iters2 > 0:
        optimizers["stage2"] = stage2_train(model, train, test, cfg, state)

    final = evaluate_model(model, test)
    _record(state.metrics, stage="final", iteration=cfg.iters2, **final)

    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "resolved_config.json", "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        state.metrics.write_jsonl(out / "metrics.jsonl")
        save_checkpoint(
            out / "checkpoint.gedi",
            model,
            optimizers=optimizers,
            buffer=state.buffer,
            rng=state.rng,
            progress={"iters1": cfg.iters1, "iters2": cfg.iters2},
            train_config=cfg.to_dict(),
        )
    return model, state.metrics, final
