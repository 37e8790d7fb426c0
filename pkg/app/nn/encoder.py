"""Pre-norm encoder stack with per-layer aggregator choice and a mean-pooled MLP classifier."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from app.errors import CheckpointError, DataError
from app.models.experiment import Aggregator, EncoderConfig, RoutingConfig, parse_aggregator
from app.nn.attention import AttentionParams, multi_head_attention
from app.nn.routing import CapsuleParams
from app.numeric import Tensor, expand_dims, gather_rows, matmul, reduce_mean, reduce_sum, relu, reshape, sqrt, square, tanh

logger = logging.getLogger(__name__)

MASKED_LOGIT = -1e9
LAYER_NORM_EPS = 1e-5


def aggregation_parameter_delta(d_model: int, heads: int, output_capsules: int, kind: Union[str, Aggregator]) -> int:
    """Parameters a routed layer adds over linear aggregation: f_h maps, vote matrices, betas, minus W_O."""
    kind = parse_aggregator(kind)
    if not kind.routed:
        return 0
    d_in, d_out = d_model // heads, d_model // output_capsules
    routed = heads * (d_model * d_in + d_in) + heads * output_capsules * d_in * d_out
    if kind is Aggregator.EM:
        routed += 2 * output_capsules
    return routed - d_model * d_model


def _weight(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    centered = x - reduce_mean(x, axis=-1, keepdims=True)
    variance = reduce_mean(square(centered), axis=-1, keepdims=True)
    return centered / sqrt(variance, eps=LAYER_NORM_EPS) * gain + bias


def padding_bias(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """Additive attention logits: 0 on real keys, -1e9 on padding; shaped to broadcast over heads and queries."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    bias = np.where(mask, 0.0, MASKED_LOGIT)
    return np.expand_dims(bias, (-2, -3))


@dataclass
class EncoderLayer:
    aggregator: Aggregator
    attention: AttentionParams
    capsules: Optional[CapsuleParams]
    routing: Optional[RoutingConfig]
    norm_attention_gain: Tensor
    norm_attention_bias: Tensor
    norm_ffn_gain: Tensor
    norm_ffn_bias: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor

    @classmethod
    def initialize(cls, config: EncoderConfig, layer: int, rng: np.random.Generator) -> "EncoderLayer":
        d, width = config.d_model, config.ffn_width
        aggregator = config.per_layer_aggregator[layer]
        routing = config.routing_for(layer)
        attention = AttentionParams.initialize(d, config.heads, rng, with_output=not aggregator.routed)
        capsules = CapsuleParams.initialize(routing, rng) if routing is not None else None
        return cls(
            aggregator=aggregator,
            attention=attention,
            capsules=capsules,
            routing=routing,
            norm_attention_gain=Tensor(np.ones(d), requires_grad=True),
            norm_attention_bias=_zeros(d),
            norm_ffn_gain=Tensor(np.ones(d), requires_grad=True),
            norm_ffn_bias=_zeros(d),
            w_1=_weight(rng, d, (d, width)),
            b_1=_zeros(width),
            w_2=_weight(rng, width, (width, d)),
            b_2=_zeros(d),
        )

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        named = self.attention.named_parameters(f"{prefix}attention.")
        if self.capsules is not None:
            named.update(self.capsules.named_parameters(f"{prefix}capsules."))
        named.update({
            f"{prefix}norm_attention.gain": self.norm_attention_gain,
            f"{prefix}norm_attention.bias": self.norm_attention_bias,
            f"{prefix}norm_ffn.gain": self.norm_ffn_gain,
            f"{prefix}norm_ffn.bias": self.norm_ffn_bias,
            f"{prefix}ffn.w_1": self.w_1,
            f"{prefix}ffn.b_1": self.b_1,
            f"{prefix}ffn.w_2": self.w_2,
            f"{prefix}ffn.b_2": self.b_2,
        })
        return named

    def __call__(self, x: Tensor, logit_bias: Optional[np.ndarray] = None) -> Tensor:
        h = layer_norm(x, self.norm_attention_gain, self.norm_attention_bias)
        x = x + multi_head_attention(h, h, h, self.attention, self.aggregator, self.capsules, self.routing, logit_bias)
        h = layer_norm(x, self.norm_ffn_gain, self.norm_ffn_bias)
        return x + matmul(relu(matmul(h, self.w_1) + self.b_1), self.w_2) + self.b_2


@dataclass
class ClassifierHead:
    w_hidden: Tensor  # [d, d]
    b_hidden: Tensor
    w_out: Tensor  # [d, classes]
    b_out: Tensor

    @classmethod
    def initialize(cls, d_model: int, num_classes: int, rng: np.random.Generator) -> "ClassifierHead":
        return cls(
            w_hidden=_weight(rng, d_model, (d_model, d_model)),
            b_hidden=_zeros(d_model),
            w_out=_weight(rng, d_model, (d_model, num_classes)),
            b_out=_zeros(num_classes),
        )

    def named_parameters(self, prefix: str = "classifier.") -> Dict[str, Tensor]:
        return {
            f"{prefix}w_hidden": self.w_hidden,
            f"{prefix}b_hidden": self.b_hidden,
            f"{prefix}w_out": self.w_out,
            f"{prefix}b_out": self.b_out,
        }

    def __call__(self, pooled: Tensor) -> Tensor:
        """Logits [..., classes] for pooled states [..., d]; a single [d] vector gives [classes]."""
        rows = expand_dims(pooled, 0) if pooled.ndim == 1 else pooled
        logits = matmul(tanh(matmul(rows, self.w_hidden) + self.b_hidden), self.w_out) + self.b_out
        return reshape(logits, (logits.shape[-1],)) if pooled.ndim == 1 else logits


def mean_pool(states: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over positions; with a mask, the mean over real positions only."""
    if mask is None:
        return reduce_mean(states, axis=-2)
    weights = np.asarray(mask, dtype=np.float64)
    counts = weights.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DataError("every sequence needs at least one real position")
    return reduce_sum(states * Tensor(weights[..., None]), axis=-2) / Tensor(counts)


class EncoderModel:
    """Token + position embeddings, ``layers`` encoder blocks, mean pooling and an MLP classifier.

    Parameters are drawn from ``rng`` in registration order: embeddings, then
    each layer (attention, capsules, feed-forward), then the classifier.
    """

    def __init__(self, config: EncoderConfig, vocab_size: int, max_len: int, num_classes: int, rng: np.random.Generator):
        self.config = config
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.num_classes = num_classes
        d = config.d_model
        self.token_embedding = Tensor(rng.normal(0.0, 1.0, (vocab_size, d)), requires_grad=True)
        self.position_embedding = (
            Tensor(rng.normal(0.0, 1.0, (max_len, d)), requires_grad=True) if config.positional_embeddings else None
        )
        self.layers: List[EncoderLayer] = [EncoderLayer.initialize(config, layer, rng) for layer in range(config.layers)]
        self.classifier = ClassifierHead.initialize(d, num_classes, rng)

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {"embedding.tokens": self.token_embedding}
        if self.position_embedding is not None:
            named["embedding.positions"] = self.position_embedding
        for index, layer in enumerate(self.layers):
            named.update(layer.named_parameters(f"layers.{index}."))
        named.update(self.classifier.named_parameters())
        return named

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.named_parameters().values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters().items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(arrays) != set(named):
            missing = sorted(set(named) - set(arrays))
            extra = sorted(set(arrays) - set(named))
            raise CheckpointError(f"checkpoint tensors do not match the model (missing {missing}, unexpected {extra})")
        for name, tensor in named.items():
            array = np.asarray(arrays[name], dtype=np.float64)
            if array.shape != tensor.shape:
                raise CheckpointError(f"tensor {name} has shape {array.shape}, model needs {tensor.shape}")
            tensor.data = array.copy()

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise DataError(f"token ids must be integers, got dtype {tokens.dtype}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise DataError(f"token ids must lie in [0, {self.vocab_size}), got range [{tokens.min()}, {tokens.max()}]")
        length = tokens.shape[-1]
        if length > self.max_len:
            raise DataError(f"sequence length {length} exceeds max_len={self.max_len}")
        x = gather_rows(self.token_embedding, tokens)
        if self.position_embedding is not None:
            x = x + gather_rows(self.position_embedding, np.arange(length))
        return x

    def encode(self, tokens: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
        """States [..., J, d] for token ids [..., J]; ``mask`` marks real (non-padding) positions."""
        x = self.embed(tokens)
        bias = padding_bias(mask)
        for layer in self.layers:
            x = layer(x, bias)
        return x

    def classify(self, states: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.classifier(mean_pool(states, mask))

    def __call__(self, tokens: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.classify(self.encode(tokens, mask), mask)
