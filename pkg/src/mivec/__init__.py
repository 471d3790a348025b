"""Multi-view video coding with one explicit view and an implicit network for the rest."""

from .bitstream.codec import CodecConfig, EncodeReport, decode_sequence, decode_views, encode_sequence, salvage_explicit
from .bitstream.container import BitstreamContainer
from .errors import (
    BackendError,
    ConfigurationError,
    CorruptModelError,
    CorruptStreamError,
    LoadError,
    MivecError,
    TrainingDivergedError,
    ValidationError,
)
from .explicit2d import ExplicitCodecConfig
from .inrnet import ImplicitModel, ModelConfig
from .seqdata import CameraParams, MultiViewSequence, generate_synthetic, load_sequence, save_frames
from .training import TrainConfig

__version__ = "0.1.0"
