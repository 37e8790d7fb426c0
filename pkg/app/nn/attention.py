"""Multi-head scaled dot-product attention with a pluggable head aggregation step."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from app.errors import ConfigurationError, DimensionError
from app.models.experiment import Aggregator, RoutingConfig, parse_aggregator
from app.nn.routing import CapsuleParams, aggregate_routing
from app.numeric import Tensor, expand_dims, getitem, matmul, reshape, scale, softmax, swapaxes

logger = logging.getLogger(__name__)


@dataclass
class AttentionParams:
    w_q: Tensor  # [H, d, d/H]
    w_k: Tensor
    w_v: Tensor
    w_o: Optional[Tensor] = None  # [d, d]; linear aggregation only

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]

    @classmethod
    def initialize(cls, d_model: int, heads: int, rng: np.random.Generator, with_output: bool = True) -> "AttentionParams":
        if heads <= 0 or d_model % heads:
            raise ConfigurationError(f"{heads} heads do not divide d_model={d_model}")
        std = 1.0 / math.sqrt(d_model)
        shape = (heads, d_model, d_model // heads)
        w_q = Tensor(rng.normal(0.0, std, shape), requires_grad=True)
        w_k = Tensor(rng.normal(0.0, std, shape), requires_grad=True)
        w_v = Tensor(rng.normal(0.0, std, shape), requires_grad=True)
        w_o = Tensor(rng.normal(0.0, std, (d_model, d_model)), requires_grad=True) if with_output else None
        return cls(w_q, w_k, w_v, w_o)

    def validate(self) -> None:
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape) or self.w_q.ndim != 3:
            raise DimensionError(
                f"head projections must share one [H, d, d/H] shape, got {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}"
            )
        if self.heads * self.d_head != self.d_model:
            raise ConfigurationError(f"{self.heads} heads of width {self.d_head} do not tile d_model={self.d_model}")
        if self.w_o is not None and self.w_o.shape != (self.d_model, self.d_model):
            raise DimensionError(f"W_O must be {(self.d_model, self.d_model)}, got {self.w_o.shape}")

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        named = {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k, f"{prefix}w_v": self.w_v}
        if self.w_o is not None:
            named[f"{prefix}w_o"] = self.w_o
        return named


@dataclass
class HeadOutputs:
    per_head: Tensor  # [..., H, J, d/H]
    concat: Tensor  # [..., J, d], heads in index order

    def head(self, h: int) -> Tensor:
        return getitem(self.per_head, (Ellipsis, h, slice(None), slice(None)))


def project_heads(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams):
    """Per-head projections, each shaped [..., H, rows, d/H]."""
    params.validate()
    for label, x in (("Q", q), ("K", k), ("V", v)):
        if x.ndim < 2 or x.shape[-1] != params.d_model:
            raise DimensionError(f"{label} must be [..., rows, {params.d_model}], got {x.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"K and V must have the same rows, got {k.shape} and {v.shape}")
    q_h = matmul(expand_dims(q, -3), params.w_q)
    k_h = matmul(expand_dims(k, -3), params.w_k)
    v_h = matmul(expand_dims(v, -3), params.w_v)
    return q_h, k_h, v_h


def attention_weights(q_h: Tensor, k_h: Tensor, logit_bias: Optional[np.ndarray] = None) -> Tensor:
    """Row-stochastic softmax(Q K^T / sqrt(dk) + bias) over the key axis."""
    d_head = q_h.shape[-1]
    if k_h.shape[-1] != d_head:
        raise DimensionError(f"query width {q_h.shape} and key width {k_h.shape} differ")
    logits = scale(matmul(q_h, swapaxes(k_h, -1, -2)), 1.0 / math.sqrt(d_head))
    if logit_bias is not None:
        logits = logits + Tensor(logit_bias)
    return softmax(logits, axis=-1)


def scaled_dot_attention(q_h: Tensor, k_h: Tensor, v_h: Tensor, logit_bias: Optional[np.ndarray] = None) -> Tensor:
    if k_h.shape[-2] != v_h.shape[-2]:
        raise DimensionError(f"keys {k_h.shape} and values {v_h.shape} differ in length")
    return matmul(attention_weights(q_h, k_h, logit_bias), v_h)


def concat_heads(o_heads: Tensor) -> HeadOutputs:
    *lead, heads, rows, d_head = o_heads.shape
    concat = reshape(swapaxes(o_heads, -3, -2), (*lead, rows, heads * d_head))
    return HeadOutputs(per_head=o_heads, concat=concat)


def aggregate_linear(heads: HeadOutputs, w_o: Tensor) -> Tensor:
    d_model = heads.concat.shape[-1]
    if w_o.shape != (d_model, d_model):
        raise DimensionError(f"W_O must be {(d_model, d_model)} for head outputs {heads.concat.shape}, got {w_o.shape}")
    return matmul(heads.concat, w_o)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: AttentionParams,
    aggregator: Union[str, Aggregator] = Aggregator.LINEAR,
    capsules: Optional[CapsuleParams] = None,
    routing: Optional[RoutingConfig] = None,
    logit_bias: Optional[np.ndarray] = None,
) -> Tensor:
    """Attention over all heads followed by the chosen aggregation; output is [..., J, d]."""
    kind = parse_aggregator(aggregator)
    q_h, k_h, v_h = project_heads(q, k, v, params)
    heads = concat_heads(scaled_dot_attention(q_h, k_h, v_h, logit_bias))

    if kind is Aggregator.LINEAR:
        if params.w_o is None:
            raise ConfigurationError("linear aggregation needs W_O")
        return aggregate_linear(heads, params.w_o)

    if capsules is None or routing is None:
        raise ConfigurationError(f"{kind.value} aggregation needs capsule parameters and a routing config")
    if routing.input_capsules != params.heads:
        raise ConfigurationError(f"routing expects {routing.input_capsules} input capsules, attention has {params.heads} heads")
    return aggregate_routing(heads.concat, capsules, routing.model_copy(update={"kind": kind}))
