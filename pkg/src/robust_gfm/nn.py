"""GCN layers, the variational encoder head and first-order optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class VariationalEncoder:
    """Bias-free L-layer GCN with linear mean / log-variance heads."""

    layers: list[Tensor]
    mu_head: Tensor
    logvar_head: Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int = 64, num_layers: int = 2, seed: int = 0) -> "VariationalEncoder":
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden] * num_layers
        layers = [
            Tensor(glorot(rng, dims[i], dims[i + 1]), requires_grad=True, name=f"gcn{i}")
            for i in range(num_layers)
        ]
        mu = Tensor(glorot(rng, hidden, hidden), requires_grad=True, name="mu_head")
        logvar = Tensor(glorot(rng, hidden, hidden) * 0.1, requires_grad=True, name="logvar_head")
        return cls(layers, mu, logvar)

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.mu_head.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"gcn{i}", w) for i, w in enumerate(self.layers)]
        return named + [("mu_head", self.mu_head), ("logvar_head", self.logvar_head)]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def frozen_copy(self) -> "VariationalEncoder":
        """Copy whose tensors are constants (no gradient tracking)."""
        return VariationalEncoder(
            [Tensor(w.data.copy(), name=w.name) for w in self.layers],
            Tensor(self.mu_head.data.copy(), name="mu_head"),
            Tensor(self.logvar_head.data.copy(), name="logvar_head"),
        )


def gcn_forward(X, A_norm, encoder: VariationalEncoder) -> Tensor:
    """H^{l+1} = ReLU(A_norm H^l W^l) for every layer."""
    X, A_norm = ag.as_tensor(X), ag.as_tensor(A_norm)
    if not (np.all(np.isfinite(X.data)) and np.all(np.isfinite(A_norm.data))):
        raise NonFiniteError("non-finite input to gcn_forward")
    h = X
    for w in encoder.layers:
        if h.shape[1] != w.shape[0]:
            raise ag.ShapeError(f"layer expects width {w.shape[0]}, got {h.shape[1]}")
        h = ag.relu(A_norm @ (h @ w))
    return h


def encode_variational(X, A_norm, encoder: VariationalEncoder) -> tuple[Tensor, Tensor]:
    for name, p in encoder.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"non-finite parameter {name}")
    hidden = gcn_forward(X, A_norm, encoder)
    mu = hidden @ encoder.mu_head
    logvar = ag.clamp(hidden @ encoder.logvar_head, LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, seed) -> Tensor:
    """Z = mu + exp(logvar / 2) * eps, eps drawn from a seeded normal generator."""
    mu, logvar = ag.as_tensor(mu), ag.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ag.ShapeError("mu and logvar shapes differ")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(mu.shape)
    return mu + ag.exp(logvar * 0.5) * eps


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    kind: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class Optimizer:
    """In-place SGD / Adam over named parameters."""

    params: dict[str, Tensor]
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        cfg = self.config
        for name, p in self.params.items():
            g = p.grad
            if cfg.kind == "sgd":
                p.data -= cfg.lr * g
                continue
            b1, b2 = cfg.betas
            m = self._m.get(name, np.zeros_like(p.data))
            v = self._v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1**self.step_count)
            v_hat = v / (1 - b2**self.step_count)
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(params: dict[str, Tensor], config: OptimizerConfig, state: Optimizer | None = None) -> Optimizer:
    """Apply one update using the gradients stored on ``params``; returns the optimizer state."""
    opt = state if state is not None else Optimizer(params, config)
    opt.step()
    return opt
