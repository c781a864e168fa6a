"""EffiSegNet segmentation: EfficientNet encoder with an additive full-scale decoder."""

from ._core import (
    ConfigError,
    ContractError,
    DataError,
    Error,
    LoadError,
    Model,
    NumericalError,
    ResourceError,
    ShapeError,
    __version__,
    combined_loss,
    confusion_counts,
    dice_loss,
    find_max_batch_size,
    index_dataset,
    load_split,
    lr_at_epoch,
    parameter_table,
    per_image_overlap,
    run_cli,
    score,
    variant_config,
    variants,
)

__all__ = [name for name in dir() if not name.startswith("_")]
