"""Central finite-difference checks against tape gradients."""
import logging
from typing import Callable, Dict, Mapping

import numpy as np

from app.errors import ContractError, NumericError
from app.numeric.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
RELATIVE_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_FLOOR) -> float:
    denominator = np.maximum(floor, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denominator))


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {value.shape}")
    result = value.item()
    if not np.isfinite(result):
        raise NumericError("grad_check: non-finite function value while probing")
    return result


def central_differences(f: Callable[[], Tensor], array: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Perturb ``array`` in place, one coordinate at a time, and restore it."""
    numeric = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        upper = _scalar(f())
        array[index] = original - h
        lower = _scalar(f())
        array[index] = original
        numeric[index] = (upper - lower) / (2.0 * h)
    return numeric


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_STEP) -> float:
    """Max over coordinates of |analytic - central difference| / max(1e-8, |central difference|)."""
    leaf = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    _scalar(loss)
    tape.backward(loss)
    analytic = leaf.grad

    point = leaf.data.copy()
    numeric = central_differences(lambda: f(Tensor(point)), point, h)
    error = relative_error(analytic, numeric)
    logger.debug(f"grad_check over {x.size} coordinates: max relative error {error:.3e}")
    return error


def grad_check_parameters(
    f: Callable[[], Tensor],
    parameters: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    floor: float = RELATIVE_FLOOR,
) -> Dict[str, float]:
    """Check every named leaf ``f`` closes over; returns the max relative error per name.

    ``floor`` bounds the denominator of the relative error from below, so
    coordinates whose gradient is below it are compared in absolute terms.
    """
    for tensor in parameters.values():
        tensor.requires_grad = True
        tensor.grad = None
    with Tape() as tape:
        loss = f()
    _scalar(loss)
    tape.backward(loss)

    errors = {}
    for name, tensor in parameters.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = central_differences(f, tensor.data, h)
        errors[name] = relative_error(analytic, numeric, floor)
    logger.debug(f"grad_check over {len(errors)} parameters: worst {max(errors.values()):.3e}")
    return errors
