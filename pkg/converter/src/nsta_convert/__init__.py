"""One-shot converter from published ViT checkpoints to NSTA archives."""

__version__ = "0.1.0"

from .convert import (  # noqa: F401
    ConvertError,
    MissingSourceTensor,
    NameMap,
    ShapeMismatch,
    WriteFailure,
    convert_checkpoint,
    load_name_map,
)
