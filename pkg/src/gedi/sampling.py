"""SGLD negative sampling with a persistent replay buffer, and the DAM
manifold-walk augmentation.

SGLD chains ascend the model's log unnormalized density with injected
Gaussian noise, are clamped to the data range each step, and persist in a
FIFO replay buffer across parameter updates (persistent contrastive
divergence). DAM repeatedly perturbs each point by a fixed random vector
drawn once from an epsilon-ball and removes the component of the
perturbation along the local density gradient, so every applied
displacement lies in the tangent plane of the density level set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward, frozen
from .errors import ContractViolation


@dataclass
class SgldConfig:
    steps: int = 20
    step_size: float = 1.0
    noise_std: float = 0.01
    reinit_prob: float = 0.05
    clamp_low: float = -1.0
    clamp_high: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.noise_std < 0:
            raise ContractViolation("noise_std must be nonnegative")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ContractViolation("reinit_prob must lie in [0, 1]")
        if self.clamp_low >= self.clamp_high:
            raise ContractViolation("clamp bounds must satisfy low < high")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "step_size": self.step_size,
            "noise_std": self.noise_std,
            "reinit_prob": self.reinit_prob,
            "clamp_low": self.clamp_low,
            "clamp_high": self.clamp_high,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SgldConfig":
        return cls(
            steps=int(d["steps"]),
            step_size=float(d["step_size"]),
            noise_std=float(d["noise_std"]),
            reinit_prob=float(d["reinit_prob"]),
            clamp_low=float(d["clamp_low"]),
            clamp_high=float(d["clamp_high"]),
        )


@dataclass
class DamConfig:
    radius: float = 0.03
    steps: int = 10
    grad_floor: float = 1e-8
    fresh_delta_per_step: bool = False

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractViolation("radius must be positive")
        if self.steps < 0:
            raise ContractViolation("steps must be >= 0")

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "steps": self.steps,
            "grad_floor": self.grad_floor,
            "fresh_delta_per_step": self.fresh_delta_per_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DamConfig":
        return cls(
            radius=float(d["radius"]),
            steps=int(d["steps"]),
            grad_floor=float(d.get("grad_floor", 1e-8)),
            fresh_delta_per_step=bool(d.get("fresh_delta_per_step", False)),
        )


@dataclass
class Diagnostics:
    """Counters surfaced in the metrics log."""

    reinit_count: int = 0
    nan_chain_count: int = 0
    dam_skip_count: int = 0
    sinkhorn_warn_count: int = 0

    def to_dict(self) -> dict:
        return {
            "reinit_count": self.reinit_count,
            "nan_chain_count": self.nan_chain_count,
            "dam_skip_count": self.dam_skip_count,
            "sinkhorn_warn_count": self.sinkhorn_warn_count,
        }


class ReplayBuffer:
    """FIFO store of sampler chain states; draws are uniform over contents."""

    def __init__(self, capacity: int = 10_000, dim: int | None = None):
        if capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._states: np.ndarray | None = None
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def push(self, states: np.ndarray) -> None:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2:
            raise ContractViolation("push expects an (n, d) batch")
        if self._states is None:
            self.dim = states.shape[1]
            self._states = np.empty((self.capacity, self.dim))
        if states.shape[1] != self.dim:
            raise ContractViolation(f"state dimension {states.shape[1]} != buffer dimension {self.dim}")
        for row in states:
            self._states[self._next] = row
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ContractViolation("draw from empty buffer; caller should reinitialize")
        idx = rng.integers(0, self._size, size=count)
        return self._states[idx].copy()

    def contents(self) -> np.ndarray:
        if self._states is None:
            return np.empty((0, 0))
        return self._states[: self._size].copy()

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "size": self._size, "next": self._next}

    def load(self, meta: dict, states: np.ndarray) -> None:
        self.capacity = int(meta["capacity"])
        self._size = int(meta["size"])
        self._next = int(meta["next"])
        states = np.asarray(states, dtype=np.float64)
        if self._size:
            self.dim = states.shape[1]
            self._states = np.empty((self.capacity, self.dim))
            self._states[: self._size] = states
        else:
            self._states = None


def input_gradient(model, x: np.ndarray) -> np.ndarray:
    """d f / d x for the model's log unnormalized density, parameters frozen.

    Uses the model's closed-form path when it provides one; otherwise
    differentiates through the graph.
    """
    fast = getattr(model, "energy_input_gradient", None)
    if fast is not None:
        return fast(x)
    with frozen(model.parameters()):
        t = Tensor(x, requires_grad=True)
        with Graph() as g:
            score = model.energy_logdensity(t).sum()
        backward(g, score)
    return t.grad if t.grad is not None else np.zeros_like(np.asarray(x, dtype=np.float64))


def sgld_sample(
    model,
    buffer: ReplayBuffer,
    cfg: SgldConfig,
    batch_size: int,
    rng: np.random.Generator,
    diagnostics: Diagnostics | None = None,
) -> np.ndarray:
    """Draw a detached batch of negatives by short-run Langevin ascent.

    Chains start from the buffer with probability 1 - reinit_prob (uniform
    over the clamp box otherwise), run ``cfg.steps`` of
    x <- x + step_size * grad f(x) + noise_std * N(0, I) with clamping, and
    their final states are written back to the buffer. Chains that go
    non-finite are reinitialized and counted.
    """
    dim = model.config.input_dim
    uniform = rng.uniform(cfg.clamp_low, cfg.clamp_high, size=(batch_size, dim))
    reinit = rng.uniform(size=batch_size) < cfg.reinit_prob
    if len(buffer) == 0:
        x = uniform
        reinit = np.ones(batch_size, dtype=bool)
    else:
        x = buffer.draw(batch_size, rng)
        x[reinit] = uniform[reinit]
    if diagnostics is not None:
        diagnostics.reinit_count += int(reinit.sum())

    for _ in range(cfg.steps):
        grad = input_gradient(model, x)
        noise = rng.normal(size=x.shape) if cfg.noise_std > 0 else 0.0
        x = x + cfg.step_size * grad + cfg.noise_std * noise
        bad = ~np.isfinite(x).all(axis=1)
        if bad.any():
            if diagnostics is not None:
                diagnostics.nan_chain_count += int(bad.sum())
            x[bad] = rng.uniform(cfg.clamp_low, cfg.clamp_high, size=(int(bad.sum()), dim))
        np.clip(x, cfg.clamp_low, cfg.clamp_high, out=x)

    buffer.push(x)
    return x.copy()


def sample_in_ball(radius: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the solid ball of the given radius."""
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    r = radius * rng.uniform() ** (1.0 / dim)
    return r * direction


def dam(
    x_batch: np.ndarray,
    model,
    cfg: DamConfig,
    rng: np.random.Generator,
    diagnostics: Diagnostics | None = None,
) -> np.ndarray:
    """Walk each point along the density manifold for ``cfg.steps`` moves.

    One perturbation is drawn from the epsilon-ball and reused at every
    step (the fresh_delta_per_step toggle redraws it instead). Each move
    adds the perturbation minus its projection onto the local gradient of
    the log unnormalized density; since only the gradient's direction
    enters, the walk is invariant to positive rescaling of the density.
    Points where the gradient norm falls below ``grad_floor`` take the raw
    perturbation for that step (counted as skips).
    """
    x = np.array(x_batch, dtype=np.float64, copy=True)
    if x.ndim != 2:
        raise ContractViolation("dam expects an (n, d) batch")
    delta0 = sample_in_ball(cfg.radius, x.shape[1], rng)
    delta = delta0
    for _ in range(cfg.steps):
        if cfg.fresh_delta_per_step:
            delta = sample_in_ball(cfg.radius, x.shape[1], rng)
        grad = input_gradient(model, x + delta[None, :])
        norms_sq = (grad * grad).sum(axis=1)
        ok = np.sqrt(norms_sq) >= cfg.grad_floor
        if diagnostics is not None:
            diagnostics.dam_skip_count += int((~ok).sum())
        coef = np.zeros_like(norms_sq)
        coef[ok] = (grad[ok] @ delta) / norms_sq[ok]
        x = x + delta[None, :] - coef[:, None] * grad
        delta = delta0
    return x
