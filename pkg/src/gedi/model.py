"""The GEDI network: encoder, projector head, prototype layer, energy head.

The encoder is a LeakyReLU MLP mapping inputs to an h-dimensional latent
space. The projector (one hidden layer, batch-normalized) maps latents to
embeddings on the unit sphere. Cluster logits are cosine similarities
between embeddings and the unit-norm prototype columns of U, scaled by a
temperature. The energy head scores log unnormalized density
f(x) = u . enc(x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNorm, Tensor, l2_normalize, leaky_relu, log_softmax, softmax
from .errors import ContractViolation


@dataclass
class ModelConfig:
    input_dim: int
    latent_dim: int = 2
    num_prototypes: int = 2
    encoder_widths: tuple[int, ...] = (100, 100)
    projector_hidden: int = 4
    temperature: float = 0.1
    leaky_slope: float = 0.2
    two_encoders: bool = False

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        dims = (self.input_dim, self.latent_dim, self.num_prototypes, self.projector_hidden, *self.encoder_widths)
        if any(d <= 0 for d in dims):
            raise ContractViolation(f"all dimensions must be positive: {self}")
        if self.temperature <= 0:
            raise ContractViolation("temperature must be positive")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "num_prototypes": self.num_prototypes,
            "encoder_widths": list(self.encoder_widths),
            "projector_hidden": self.projector_hidden,
            "temperature": self.temperature,
            "leaky_slope": self.leaky_slope,
            "two_encoders": self.two_encoders,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            latent_dim=int(d["latent_dim"]),
            num_prototypes=int(d["num_prototypes"]),
            encoder_widths=tuple(d["encoder_widths"]),
            projector_hidden=int(d["projector_hidden"]),
            temperature=float(d["temperature"]),
            leaky_slope=float(d["leaky_slope"]),
            two_encoders=bool(d.get("two_encoders", False)),
        )


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, slope: float = 0.2):
        # He initialization adjusted for the LeakyReLU slope
        scale = np.sqrt(2.0 / ((1.0 + slope**2) * in_dim))
        self.weight = Tensor(rng.normal(0.0, scale, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Mlp:
    """LeakyReLU MLP; the final layer is linear."""

    def __init__(self, dims: tuple[int, ...], rng: np.random.Generator, slope: float):
        self.slope = slope
        self.layers = [Linear(dims[i], dims[i + 1], rng, slope) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def head_input_gradient(self, x: np.ndarray, head: np.ndarray) -> np.ndarray:
        """d(self(x) @ head)/dx in closed form; the samplers' hot path.

        Matches the reverse-mode result exactly (same operations, no graph
        bookkeeping).
        """
        a = np.asarray(x, dtype=np.float64)
        scales = []
        for layer in self.layers[:-1]:
            h = a @ layer.weight.values
            h += layer.bias.values
            s = (h > 0) * (1.0 - self.slope)
            s += self.slope
            h *= s
            scales.append(s)
            a = h
        g = np.broadcast_to(self.layers[-1].weight.values @ head, (x.shape[0], self.layers[-1].weight.values.shape[0]))
        for layer, s in zip(reversed(self.layers[:-1]), reversed(scales)):
            g = (g * s) @ layer.weight.values.T
        return np.ascontiguousarray(g)


class Projector:
    """One hidden layer with batch normalization, batch-normalized output,
    final L2 normalization onto the unit sphere."""

    def __init__(self, latent_dim: int, hidden: int, rng: np.random.Generator, slope: float):
        self.slope = slope
        self.fc1 = Linear(latent_dim, hidden, rng, slope)
        self.bn1 = BatchNorm(hidden)
        self.fc2 = Linear(hidden, latent_dim, rng, slope)
        self.bn2 = BatchNorm(latent_dim)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = leaky_relu(self.bn1(self.fc1(x), training), self.slope)
        out = self.bn2(self.fc2(h), training)
        return l2_normalize(out, axis=1)

    def parameters(self) -> list[Tensor]:
        return self.fc1.parameters() + self.bn1.parameters() + self.fc2.parameters() + self.bn2.parameters()


class GediModel:
    """Shared-encoder model with discriminative and generative heads.

    ``two_encoders`` keeps a second, parameter-independent encoder of the
    same architecture for the energy head, so the generative and
    discriminative objectives stop sharing representation parameters.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        dims = (config.input_dim, *config.encoder_widths, config.latent_dim)
        self.encoder = Mlp(dims, rng, config.leaky_slope)
        self.gen_encoder = Mlp(dims, rng, config.leaky_slope) if config.two_encoders else None
        self.projector = Projector(config.latent_dim, config.projector_hidden, rng, config.leaky_slope)
        u_init = rng.normal(size=(config.latent_dim, config.num_prototypes))
        u_init /= np.linalg.norm(u_init, axis=0, keepdims=True)
        self.prototypes = Tensor(u_init, requires_grad=True)
        self.energy_vector = Tensor(np.zeros(config.latent_dim), requires_grad=True)
        self.temperature = config.temperature

    # -- forward paths ---------------------------------------------------------

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.values.ndim != 2 or x.values.shape[1] != self.config.input_dim:
            raise ContractViolation(
                f"expected batch of shape (n, {self.config.input_dim}), got {x.values.shape}"
            )
        return x

    def encode(self, x, training: bool = True) -> Tensor:
        """Latent batch (n, h). Deterministic given parameters and mode."""
        return self.encoder(self._check_input(x))

    def embed(self, x, training: bool = True) -> Tensor:
        """Embedding batch (n, h) with unit-norm rows."""
        return self.projector(self.encode(x, training), training)

    def project(self, latents: Tensor, training: bool = True) -> Tensor:
        return self.projector(latents, training)

    def prototype_cosines(self, w: Tensor) -> Tensor:
        """Cosine similarity of each embedding row against each prototype column."""
        return w @ self.prototypes

    def cluster_logits(self, w: Tensor) -> Tensor:
        """(n, c) logits: cosine similarity / temperature."""
        return self.prototype_cosines(w) * (1.0 / self.temperature)

    def class_log_probs(self, x, training: bool = True) -> Tensor:
        return log_softmax(self.cluster_logits(self.embed(x, training)), axis=1)

    def class_probs(self, x, training: bool = True) -> Tensor:
        return softmax(self.cluster_logits(self.embed(x, training)), axis=1)

    def energy_logdensity(self, x, encoded: Tensor | None = None) -> Tensor:
        """Per-sample log unnormalized density f(x) = u . enc(x), shape (n,)."""
        if encoded is None:
            enc = self.gen_encoder if self.gen_encoder is not None else self.encoder
            encoded = enc(self._check_input(x))
        return encoded @ self.energy_vector

    def energy_input_gradient(self, x: np.ndarray) -> np.ndarray:
        """Closed-form d f / d x; equal to differentiating energy_logdensity."""
        enc = self.gen_encoder if self.gen_encoder is not None else self.encoder
        return enc.head_input_gradient(np.asarray(x, dtype=np.float64), self.energy_vector.values)

    # -- parameters --------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() + self.projector.parameters()
        params += [self.prototypes, self.energy_vector]
        if self.gen_encoder is not None:
            params += self.gen_encoder.parameters()
        return params

    def generative_parameters(self) -> list[Tensor]:
        """Parameters trained during energy-model pretraining: encoder + u."""
        enc = self.gen_encoder if self.gen_encoder is not None else self.encoder
        return enc.parameters() + [self.energy_vector]

    def renormalize_prototypes(self) -> None:
        """Rescale each prototype column to unit norm (applied after optimizer steps)."""
        u = self.prototypes.values
        u /= np.linalg.norm(u, axis=0, keepdims=True)

    # -- evaluation helpers --------------------------------------------------------

    def assign_clusters(self, x) -> np.ndarray:
        """Hard cluster assignment per sample, evaluation mode."""
        logits = self.cluster_logits(self.embed(x, training=False))
        return np.argmax(logits.values, axis=1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named flat view of every parameter and batch-norm statistic."""
        arrays: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.encoder.layers):
            arrays[f"encoder.{i}.weight"] = layer.weight.values
            arrays[f"encoder.{i}.bias"] = layer.bias.values
        if self.gen_encoder is not None:
            for i, layer in enumerate(self.gen_encoder.layers):
                arrays[f"gen_encoder.{i}.weight"] = layer.weight.values
                arrays[f"gen_encoder.{i}.bias"] = layer.bias.values
        proj = self.projector
        for name, lin in (("fc1", proj.fc1), ("fc2", proj.fc2)):
            arrays[f"projector.{name}.weight"] = lin.weight.values
            arrays[f"projector.{name}.bias"] = lin.bias.values
        for name, bn in (("bn1", proj.bn1), ("bn2", proj.bn2)):
            arrays[f"projector.{name}.gamma"] = bn.gamma.values
            arrays[f"projector.{name}.beta"] = bn.beta.values
            arrays[f"projector.{name}.running_mean"] = bn.running_mean
            arrays[f"projector.{name}.running_var"] = bn.running_var
        arrays["prototypes"] = self.prototypes.values
        arrays["energy_vector"] = self.energy_vector.values
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ContractViolation(f"parameter sections do not match: {sorted(missing)}")
        for name, arr in own.items():
            incoming = np.asarray(arrays[name], dtype=arr.dtype)
            if incoming.shape != arr.shape:
                raise ContractViolation(f"shape mismatch for {name}: {incoming.shape} vs {arr.shape}")
            arr[...] = incoming
