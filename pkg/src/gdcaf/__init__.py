"""Graph dual-stream convolutional attention fusion for precipitation nowcasting."""

__version__ = "0.1.0"

from .model import GDCAF, ModelConfig  # noqa: E402

__all__ = ["GDCAF", "ModelConfig", "__version__"]
