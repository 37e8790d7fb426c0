"""Routing-by-agreement aggregation of attention heads.

Head outputs become input capsules, every input capsule votes for every
output capsule, and the votes are merged by either simple routing (softmax
over dot-product agreement logits, squashed capsules) or EM routing (output
capsules as Gaussians with activation probabilities). Routing runs for each
sequence position independently; leading axes are treated as batch axes.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.errors import ConfigurationError, DimensionError
from app.models.experiment import Aggregator, RoutingConfig
from app.numeric import (
    Tensor,
    expand_dims,
    log,
    logistic,
    logsumexp,
    maximum,
    reduce_sum,
    reshape,
    scale,
    softmax,
    sqrt,
    square,
    tanh,
)

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-12
NORM_EPS = 1e-24
ACTIVATION_FLOOR = 1e-300
GAUSSIAN_CONSTANT = (1.0 + math.log(2.0 * math.pi)) / 2.0


@dataclass
class CapsuleParams:
    w_f: Tensor  # [H, d, d_in]
    b_f: Tensor  # [H, d_in]
    w_vote: Tensor  # [H, N, d_in, d_out]
    beta_a: Optional[Tensor] = None  # [N]
    beta_mu: Optional[Tensor] = None  # [N]

    @classmethod
    def initialize(cls, config: RoutingConfig, rng: np.random.Generator) -> "CapsuleParams":
        heads, capsules = config.input_capsules, config.output_capsules
        w_f = Tensor(rng.normal(0.0, 1.0 / math.sqrt(config.d_model), (heads, config.d_model, config.d_in)), requires_grad=True)
        b_f = Tensor(np.zeros((heads, config.d_in)), requires_grad=True)
        w_vote = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(config.d_in), (heads, capsules, config.d_in, config.d_out)), requires_grad=True
        )
        if config.kind is Aggregator.EM:
            return cls(w_f, b_f, w_vote, Tensor(np.zeros(capsules), requires_grad=True), Tensor(np.zeros(capsules), requires_grad=True))
        return cls(w_f, b_f, w_vote)

    def validate(self, config: RoutingConfig) -> None:
        heads, capsules, d_in, d_out = config.input_capsules, config.output_capsules, config.d_in, config.d_out
        expected = {
            "w_f": (self.w_f.shape, (heads, config.d_model, d_in)),
            "b_f": (self.b_f.shape, (heads, d_in)),
            "w_vote": (self.w_vote.shape, (heads, capsules, d_in, d_out)),
        }
        for name, (actual, wanted) in expected.items():
            if actual != wanted:
                raise ConfigurationError(f"capsule parameter {name} has shape {actual}, config needs {wanted}")
        has_betas = self.beta_a is not None and self.beta_mu is not None
        if has_betas != (config.kind is Aggregator.EM):
            raise ConfigurationError("beta_a and beta_mu are present exactly when routing kind is em")
        if has_betas and (self.beta_a.shape != (capsules,) or self.beta_mu.shape != (capsules,)):
            raise ConfigurationError(f"betas must have shape {(capsules,)}")

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        named = {f"{prefix}w_f": self.w_f, f"{prefix}b_f": self.b_f, f"{prefix}w_vote": self.w_vote}
        if self.beta_a is not None:
            named[f"{prefix}beta_a"] = self.beta_a
            named[f"{prefix}beta_mu"] = self.beta_mu
        return named


@dataclass
class RoutingState:
    votes: np.ndarray  # [..., H, N, d_out]
    agreement: np.ndarray  # C, [..., H, N]
    logits: Optional[np.ndarray] = None  # B (simple)
    mu: Optional[np.ndarray] = None
    sigma2: Optional[np.ndarray] = None
    activation: Optional[np.ndarray] = None
    cost: Optional[np.ndarray] = None
    agreement_history: List[np.ndarray] = field(default_factory=list)


def build_input_capsules(o_hat: Tensor, params: CapsuleParams) -> Tensor:
    """Capsule h at each position is tanh(Ô_j W_f[h] + b_f[h]); shape [..., J, H, d_in]."""
    heads, d_model, d_in = params.w_f.shape
    if o_hat.ndim < 2 or o_hat.shape[-1] != d_model:
        raise DimensionError(f"head outputs must be [..., J, {d_model}], got {o_hat.shape}")
    # [..., J, 1, d, 1] * [H, d, d_in], summed over d; every position is computed on its own
    rows = expand_dims(expand_dims(o_hat, -2), -1)
    return tanh(reduce_sum(rows * params.w_f, axis=-2) + params.b_f)


def compute_votes(capsules: Tensor, params: CapsuleParams) -> Tensor:
    """V[h][n] = capsule_h W_vote[h][n]; shape [..., H, N, d_out]."""
    heads, n_out, d_in, d_out = params.w_vote.shape
    if capsules.shape[-2:] != (heads, d_in):
        raise DimensionError(f"input capsules must end in {(heads, d_in)}, got {capsules.shape}")
    # [..., H, 1, d_in, 1] * [H, N, d_in, d_out], summed over d_in
    rows = expand_dims(expand_dims(capsules, -2), -1)
    return reduce_sum(rows * params.w_vote, axis=-2)


def output_capsule(agreement: Tensor, votes: Tensor) -> Tensor:
    """Agreement-weighted mean of the votes for every output capsule; shape [..., N, d_out]."""
    if agreement.shape != votes.shape[:-1]:
        raise DimensionError(f"agreement {agreement.shape} does not match votes {votes.shape}")
    weighted = reduce_sum(votes * expand_dims(agreement, -1), axis=-3)
    total = maximum(reduce_sum(agreement, axis=-2), DENOMINATOR_FLOOR)
    return weighted / expand_dims(total, -1)


def squash(s: Tensor) -> Tensor:
    """Rescale to norm |s|^2 / (1 + |s|^2) along the last axis; zero stays zero."""
    squared_norm = reduce_sum(square(s), axis=-1, keepdims=True)
    return s * sqrt(squared_norm, eps=NORM_EPS) / (squared_norm + 1.0)


def simple_routing(votes: Tensor, iterations: int) -> Tuple[Tensor, RoutingState]:
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    logits = Tensor(np.zeros(votes.shape[:-1]))
    history = []
    for _ in range(iterations):
        agreement = softmax(logits, axis=-1)
        capsules = squash(output_capsule(agreement, votes))
        logits = logits + reduce_sum(votes * expand_dims(capsules, -3), axis=-1)
        history.append(agreement.data)
    state = RoutingState(
        votes=votes.data, agreement=agreement.data, logits=logits.data, agreement_history=history
    )
    return capsules, state


def em_m_step(
    votes: Tensor,
    agreement: Tensor,
    beta_a: Tensor,
    beta_mu: Tensor,
    inverse_temperature: float,
    epsilon_var: float = 1e-6,
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Fit mean, variance, cost and activation of every output capsule with C held fixed."""
    total = reduce_sum(agreement, axis=-2)
    weight = expand_dims(agreement, -1)
    mu = output_capsule(agreement, votes)
    spread = reduce_sum(square(votes - expand_dims(mu, -3)) * weight, axis=-3)
    sigma2 = maximum(spread / expand_dims(maximum(total, DENOMINATOR_FLOOR), -1), epsilon_var)
    cost = reduce_sum(scale(log(sigma2), 0.5) + GAUSSIAN_CONSTANT, axis=-1) * total
    activation = logistic(scale(beta_a - beta_mu * total - cost, inverse_temperature))
    return mu, sigma2, cost, activation


def em_e_step(votes: Tensor, mu: Tensor, sigma2: Tensor, activation: Tensor, density: str = "product") -> Tensor:
    """Re-assign every vote: C[h][n] proportional to A_n P(V[h][n] | capsule n), normalized over n.

    ``density="product"`` multiplies per-dimension Gaussian densities;
    ``"sum"`` adds them. Both are evaluated in the log domain, and the
    normalization is a softmax, so it never divides by zero.
    """
    variance = expand_dims(sigma2, -3)
    squared = square(votes - expand_dims(mu, -3))
    per_dim = scale(log(scale(variance, 2.0 * math.pi)), -0.5) - squared / scale(variance, 2.0)
    if density == "product":
        log_density = reduce_sum(per_dim, axis=-1)
    elif density == "sum":
        log_density = logsumexp(per_dim, axis=-1)
    else:
        raise ConfigurationError(f"unknown EM density {density!r}")
    log_activation = log(maximum(activation, ACTIVATION_FLOOR))
    return softmax(log_density + expand_dims(log_activation, -2), axis=-1)


def em_routing(
    votes: Tensor, config: RoutingConfig, beta_a: Tensor, beta_mu: Tensor
) -> Tuple[Tensor, Tensor, RoutingState]:
    n_out = votes.shape[-2]
    if len(config.lambda_schedule) != config.iterations:
        raise ConfigurationError("lambda schedule length must equal the iteration count")
    if beta_a.shape != (n_out,) or beta_mu.shape != (n_out,):
        raise DimensionError(f"betas must have shape {(n_out,)}, got {beta_a.shape} and {beta_mu.shape}")

    agreement = Tensor(np.full(votes.shape[:-1], 1.0 / n_out))
    history = []
    for inverse_temperature in config.lambda_schedule:
        mu, sigma2, cost, activation = em_m_step(votes, agreement, beta_a, beta_mu, inverse_temperature, config.epsilon_var)
        agreement = em_e_step(votes, mu, sigma2, activation, config.em_density)
        history.append(agreement.data)

    capsules = expand_dims(activation, -1) * mu
    state = RoutingState(
        votes=votes.data,
        agreement=agreement.data,
        mu=mu.data,
        sigma2=sigma2.data,
        activation=activation.data,
        cost=cost.data,
        agreement_history=history,
    )
    return capsules, activation, state


def aggregate_routing(o_hat: Tensor, params: CapsuleParams, config: RoutingConfig, with_state: bool = False):
    """Route the head outputs at every position and concatenate the N output capsules into [..., J, d]."""
    params.validate(config)
    votes = compute_votes(build_input_capsules(o_hat, params), params)
    if config.kind is Aggregator.SIMPLE:
        capsules, state = simple_routing(votes, config.iterations)
    else:
        capsules, _, state = em_routing(votes, config, params.beta_a, params.beta_mu)
    output = reshape(capsules, (*o_hat.shape[:-1], config.d_model))
    return (output, state) if with_state else output
