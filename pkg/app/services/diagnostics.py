"""Finite-difference checks of attention followed by each aggregation kind."""
import logging
from typing import Dict, Union

import numpy as np

from app.models.experiment import Aggregator, RoutingConfig, parse_aggregator
from app.nn import AttentionParams, CapsuleParams, multi_head_attention
from app.numeric import Tensor, grad_check_parameters, reduce_sum

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
# central differences at h=1e-5 resolve a gradient to about 1e-11 absolute;
# coordinates below this floor are held to GRADCHECK_TOLERANCE * GRADIENT_FLOOR
GRADIENT_FLOOR = 1e-6


def aggregation_gradcheck(
    kind: Union[str, Aggregator],
    seed: int,
    d_model: int = 8,
    heads: int = 2,
    output_capsules: int = 2,
    length: int = 3,
    iterations: int = 2,
) -> Dict[str, float]:
    """Max relative gradient error per tensor for loss = sum(attention(x) * R) with a fixed random R.

    Relative errors use a denominator of at least GRADIENT_FLOOR.
    """
    kind = parse_aggregator(kind)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(length, d_model)), requires_grad=True)
    attention = AttentionParams.initialize(d_model, heads, rng, with_output=not kind.routed)
    routing = capsules = None
    if kind.routed:
        routing = RoutingConfig(
            kind=kind, input_capsules=heads, output_capsules=output_capsules,
            iterations=iterations, d_model=d_model,
        )
        capsules = CapsuleParams.initialize(routing, rng)
        if capsules.beta_a is not None:
            capsules.beta_a.data = rng.normal(size=output_capsules)
            capsules.beta_mu.data = rng.normal(scale=0.1, size=output_capsules)
    weights = Tensor(rng.normal(size=(length, d_model)))

    def loss() -> Tensor:
        return reduce_sum(multi_head_attention(x, x, x, attention, kind, capsules, routing) * weights)

    parameters = {"input": x, **attention.named_parameters("attention.")}
    if capsules is not None:
        parameters.update(capsules.named_parameters("capsules."))
    errors = grad_check_parameters(loss, parameters, floor=GRADIENT_FLOOR)
    logger.info(f"gradcheck {kind.value} (seed {seed}): worst relative error {max(errors.values()):.3e}")
    return errors
