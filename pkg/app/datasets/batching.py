"""Right-padded mini-batches and an optional background prefetcher."""
import logging
import queue
import threading
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from app.datasets.synth_tasks import Example
from app.errors import ContractError, DataError

logger = logging.getLogger(__name__)

PAD_ID = 0


@dataclass
class Batch:
    tokens: np.ndarray  # [B, J] int64, right-padded with PAD_ID
    mask: np.ndarray  # [B, J] bool, True on real positions
    labels: np.ndarray  # [B] int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def collate(examples: Sequence[Example]) -> Batch:
    if not examples:
        raise DataError("cannot build a batch from zero examples")
    if any(not example.tokens for example in examples):
        raise DataError("every example needs at least one token")
    width = max(len(example.tokens) for example in examples)
    tokens = np.full((len(examples), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for row, example in enumerate(examples):
        tokens[row, : len(example.tokens)] = example.tokens
        mask[row, : len(example.tokens)] = True
    labels = np.array([example.label for example in examples], dtype=np.int64)
    return Batch(tokens=tokens, mask=mask, labels=labels)


def batch_order(size: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Index groups for one pass; shuffled when ``rng`` is given, the last group may be short."""
    if batch_size <= 0:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    order = rng.permutation(size) if rng is not None else np.arange(size)
    return [order[start:start + batch_size] for start in range(0, size, batch_size)]


def iterate_batches(examples: Sequence[Example], order: Sequence[np.ndarray]) -> Iterator[Batch]:
    for indices in order:
        yield collate([examples[int(i)] for i in indices])


_DONE = object()


class BatchPrefetcher:
    """Collate batches on a worker thread into a bounded queue.

    The order is fixed before the thread starts, so the batches seen by the
    consumer are identical to ``iterate_batches`` over the same order.
    """

    def __init__(self, examples: Sequence[Example], order: Sequence[np.ndarray], depth: int = 2):
        if depth <= 0:
            raise ContractError(f"prefetch depth must be positive, got {depth}")
        self._examples = examples
        self._order = list(order)
        self._queue: "queue.Queue" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._fill, name="batch-prefetch", daemon=True)

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self) -> None:
        try:
            for batch in iterate_batches(self._examples, self._order):
                if not self._put(batch):
                    return
        except Exception as exc:
            logger.error(f"Batch prefetch failed: {exc}")
            self._put(exc)
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[Batch]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=1.0)


def batches(examples: Sequence[Example], order: Sequence[np.ndarray], prefetch: int = 0) -> Iterator[Batch]:
    if prefetch > 0:
        return iter(BatchPrefetcher(examples, order, depth=prefetch))
    return iterate_batches(examples, order)
