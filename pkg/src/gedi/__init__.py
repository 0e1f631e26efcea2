"""Joint energy-based generative and self-supervised discriminative
training over a shared encoder, with manifold-walk augmentation,
Sinkhorn-balanced cluster assignment, and a digit-addition constraint."""

from ._tuning import tune_allocator

tune_allocator()

from . import autodiff, data, evaluate, model, objectives, sampling, train  # noqa: E402

__all__ = ["autodiff", "data", "evaluate", "model", "objectives", "sampling", "train"]
__version__ = "0.1.0"
