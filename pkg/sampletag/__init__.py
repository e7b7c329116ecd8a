"""Sample-level deep CNNs with squeeze-and-excitation for music auto-tagging."""

__version__ = "0.1.0"

from sampletag.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from sampletag.errors import SampletagError  # noqa: E402
from sampletag.model import Network, build  # noqa: E402
