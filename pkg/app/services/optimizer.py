"""Adam with bias correction and global-norm gradient clipping over named tensors."""
import logging
import math
from typing import Dict, Mapping

import numpy as np

from app.errors import NumericError
from app.models.experiment import OptimizerConfig
from app.numeric import Tensor

logger = logging.getLogger(__name__)


def global_norm(parameters: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in parameters.values() if t.grad is not None))


def clip_gradients(parameters: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_norm(parameters)
    if not math.isfinite(norm):
        raise NumericError(f"gradient norm is not finite ({norm})")
    if norm > max_norm:
        factor = max_norm / norm
        for tensor in parameters.values():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * factor
    return norm


class Adam:
    def __init__(self, parameters: Mapping[str, Tensor], config: OptimizerConfig):
        self.parameters = dict(parameters)
        self.config = config
        self.step_count = 0
        self._first: Dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in self.parameters.items()}
        self._second: Dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in self.parameters.items()}

    def zero_grad(self) -> None:
        for tensor in self.parameters.values():
            tensor.zero_grad()

    def step(self) -> float:
        """Clip, then apply one update; returns the pre-clip gradient norm."""
        cfg = self.config
        norm = clip_gradients(self.parameters, cfg.clip_norm)
        self.step_count += 1
        first_correction = 1.0 - cfg.beta1 ** self.step_count
        second_correction = 1.0 - cfg.beta2 ** self.step_count
        for name, tensor in self.parameters.items():
            if tensor.grad is None:
                continue
            m = self._first[name] = cfg.beta1 * self._first[name] + (1.0 - cfg.beta1) * tensor.grad
            v = self._second[name] = cfg.beta2 * self._second[name] + (1.0 - cfg.beta2) * tensor.grad * tensor.grad
            if cfg.learning_rate == 0.0:
                continue
            update = (m / first_correction) / (np.sqrt(v / second_correction) + cfg.epsilon)
            tensor.data = tensor.data - cfg.learning_rate * update
        return norm
