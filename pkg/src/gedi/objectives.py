"""Loss terms for joint generative/discriminative training.

All losses are written for minimization:

- ``loss_nf``: Gaussian KL pushing the embedding covariance toward the
  identity plus a squared-distance term making latents invariant to
  augmentation.
- ``loss_di``: cross-entropy of one view's cluster predictions against
  Sinkhorn-balanced soft assignments computed from the other view. The
  uniformity/entropy pressure lives inside the Sinkhorn regularizer, and
  no gradient flows through the assignments.
- ``loss_infonce``: standard temperature-scaled contrastive objective over
  paired embeddings.
- ``loss_gen``: persistent-contrastive-divergence surrogate whose gradient
  raises the energy score of data and lowers it on sampled negatives.
- ``loss_nesy``: negative log-probability that consecutive digit triplets
  satisfy first + second = third.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, clip_min, log_softmax, logdet_psd, logsumexp, mean, sum_, trace, batch_covariance
from .errors import ContractViolation

# (a, b) digit pairs with a + b <= 9; one triple (a, b, a+b) per pair.
ADMISSIBLE_PAIRS: tuple[tuple[int, int], ...] = tuple(
    (a, b) for a in range(10) for b in range(10) if a + b <= 9
)

NESY_LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    """Scalar weights combining the loss terms; all must be nonnegative."""

    w_gen: float = 1.0
    w_nf: float = 1.0 / 400.0
    w_di_aug: float = 1000.0
    w_di_dam: float = 500.0
    w_nesy: float = 0.0

    def __post_init__(self):
        for name in ("w_gen", "w_nf", "w_di_aug", "w_di_dam", "w_nesy"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("w_gen", "w_nf", "w_di_aug", "w_di_dam", "w_nesy")}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class TransportPlan:
    """Soft cluster assignments on the transport polytope.

    Rows sum to 1/n and columns to 1/c (uniform marginals); ``marginal_error``
    is the largest deviation observed after the configured iterations.
    """

    q: np.ndarray
    marginal_error: float
    iterations: int

    def validate(self, tol: float = 1e-6) -> None:
        n, c = self.q.shape
        if np.any(self.q < 0):
            raise ContractViolation("transport plan has negative entries")
        if np.abs(self.q.sum(axis=1) - 1.0 / n).max() > tol or np.abs(self.q.sum(axis=0) - 1.0 / c).max() > tol:
            raise ContractViolation("transport plan marginals are not uniform")


def sinkhorn(scores: np.ndarray, epsilon: float = 0.05, iters: int = 3) -> TransportPlan:
    """Entropically regularized assignment with uniform marginals.

    Alternates row and column scalings of exp(scores / epsilon) in the log
    domain (max-subtraction included, so large scores cannot overflow).
    The result is treated as a constant: no gradients flow through it.
    """
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    if iters < 1:
        raise ContractViolation("iters must be >= 1")
    scores = np.asarray(scores.values if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ContractViolation("scores must be finite")
    n, c = scores.shape
    log_k = scores / epsilon
    log_k -= log_k.max()
    log_row_target = -np.log(n)
    log_col_target = -np.log(c)
    u = np.zeros(n)
    v = np.zeros(c)
    for _ in range(iters):
        u = log_row_target - _logsumexp_np(log_k + v[None, :], axis=1)
        v = log_col_target - _logsumexp_np(log_k + u[:, None], axis=0)
    q = np.exp(log_k + u[:, None] + v[None, :])
    err = max(
        np.abs(q.sum(axis=1) - 1.0 / n).max(),
        np.abs(q.sum(axis=0) - 1.0 / c).max(),
    )
    return TransportPlan(q=q, marginal_error=float(err), iterations=iters)


def _logsumexp_np(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def loss_nf(enc_x: Tensor, enc_x_aug: Tensor, w: Tensor, beta: float) -> Tensor:
    """Decorrelation KL plus augmentation-invariance penalty.

    KL(N(0, Sigma) || N(0, I)) = (tr Sigma - h - log|Sigma|) / 2 with
    Sigma the unnormalized batch covariance of the embeddings ``w``, plus
    0.5 * sum_i ||enc(x_i) - enc(x_i')||^2. Zero exactly when Sigma = I
    and the two latent batches coincide.
    """
    sigma = batch_covariance(w, beta)
    h = sigma.values.shape[0]
    kl = (trace(sigma) - float(h) - logdet_psd(sigma)) * 0.5
    diff = as_tensor(enc_x) - as_tensor(enc_x_aug)
    return kl + 0.5 * sum_(diff * diff)


def loss_di(logits_p: Tensor, plan: TransportPlan | np.ndarray) -> Tensor:
    """Cross-entropy of cluster predictions against fixed Sinkhorn targets.

    Row i of the plan scaled by n is a distribution over clusters; the loss
    averages its cross-entropy with the softmax of ``logits_p`` over the
    batch. Symmetrization over swapped views happens in the trainer.
    """
    q = plan.q if isinstance(plan, TransportPlan) else np.asarray(plan)
    logits_p = as_tensor(logits_p)
    if logits_p.values.shape != q.shape:
        raise ContractViolation(f"logits shape {logits_p.values.shape} does not match plan shape {q.shape}")
    log_p = log_softmax(logits_p, axis=1)
    return -sum_(Tensor(q) * log_p)


def loss_infonce(w: Tensor, w_aug: Tensor, temperature: float) -> Tensor:
    """Contrastive objective over paired embedding batches.

    Anchor i scores every augmented embedding j by dot product / temperature;
    the positive is j = i.
    """
    w = as_tensor(w)
    w_aug = as_tensor(w_aug)
    n = w.values.shape[0]
    if n == 0:
        raise ContractViolation("empty batch")
    sims = w_aug @ w.T * (1.0 / temperature)  # entry (j, i): sim(w'_j, w_i)
    positives = trace(sims)
    denominators = logsumexp(sims, axis=0)
    return (sum_(denominators) - positives) * (1.0 / n)


def loss_gen(model, real_batch, sampled_batch) -> Tensor:
    """PCD surrogate: mean f(sampled) - mean f(real), negatives detached."""
    real = np.asarray(real_batch.values if isinstance(real_batch, Tensor) else real_batch)
    fake = np.asarray(sampled_batch.values if isinstance(sampled_batch, Tensor) else sampled_batch)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ContractViolation("empty batch")
    f_real = model.energy_logdensity(Tensor(real))
    f_fake = model.energy_logdensity(Tensor(fake))
    return mean(f_fake) - mean(f_real)


def constraint_prob(p1: Tensor, p2: Tensor, p3: Tensor) -> Tensor:
    """Probability that digit distributions satisfy first + second = third.

    Inputs are (k, 10) rows of per-digit probabilities; the result is a
    (k,) tensor of sum_{a+b=c} p1(a) p2(b) p3(c) over the 55 admissible
    (a, b, c) triples, differentiable in all three inputs.
    """
    p1, p2, p3 = as_tensor(p1), as_tensor(p2), as_tensor(p3)
    for p in (p1, p2, p3):
        if p.values.ndim != 2 or p.values.shape[1] != 10:
            raise ContractViolation("digit distributions must have shape (k, 10)")
        if np.any(p.values < -1e-12) or np.abs(p.values.sum(axis=1) - 1.0).max() > 1e-9:
            raise ContractViolation("digit distributions must be nonnegative and sum to 1")
    total = None
    for a in range(10):
        # c = a + b: probability mass of p2 shifted up by a, truncated at 9
        shift = np.zeros((10, 10))
        for b in range(10 - a):
            shift[b, a + b] = 1.0
        term = p1[:, a : a + 1] * (p2 @ Tensor(shift))
        total = term if total is None else total + term
    return sum_(total * p3, axis=1)


def loss_nesy(class_probs: Tensor) -> Tensor:
    """Mean negative log-probability of the addition constraint per triplet.

    ``class_probs`` has 3k rows grouped consecutively per triplet. The log
    argument is floored at 1e-12 so constraint-violating one-hot inputs
    yield a large finite loss instead of -inf.
    """
    class_probs = as_tensor(class_probs)
    rows = class_probs.values.shape[0]
    if rows == 0 or rows % 3 != 0:
        raise ContractViolation(f"batch of {rows} rows is not divisible by 3")
    p1 = class_probs[0::3]
    p2 = class_probs[1::3]
    p3 = class_probs[2::3]
    probs = constraint_prob(p1, p2, p3)
    return -mean(clip_min(probs, NESY_LOG_FLOOR).log())


def total_loss(parts: dict[str, Tensor | float], weights: LossWeights) -> Tensor:
    """Weighted sum of whichever loss components the caller computed."""
    pairs = (
        ("gen", weights.w_gen),
        ("nf", weights.w_nf),
        ("di_aug", weights.w_di_aug),
        ("di_dam", weights.w_di_dam),
        ("nesy", weights.w_nesy),
    )
    total: Tensor | None = None
    for name, weight in pairs:
        part = parts.get(name)
        if part is None or weight == 0.0:
            continue
        term = as_tensor(part) * weight
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
