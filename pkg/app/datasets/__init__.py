from app.datasets.batching import Batch, BatchPrefetcher, batch_order, batches, collate, iterate_batches
from app.datasets.synth_tasks import (
    DatasetSplits,
    Example,
    class_histogram,
    dump_split,
    generate,
    label_oracle,
    load_split,
    validate_spec,
    write_dataset,
)
