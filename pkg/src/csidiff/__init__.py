"""Fixed-rate MIMO CSI compression with a VQ encoder and a conditional diffusion decoder."""
from .data import ChannelConfig, CsiSample, Dataset, generate_dataset, generate_sample
from .baseline import BaselineCodec, BaselineConfig
from .diffusion import NoiseSchedule, cosine_schedule, ddim_sample
from .evaluate import RDPoint, evaluate, rd_sweep
from .model import DiffusionCodec
from .networks import ModelConfig
from .training import TrainingConfig, load_checkpoint, load_codec, train
from .transform import from_angular_delay, nmse, nmse_db, to_angular_delay

__all__ = [
    "ChannelConfig", "CsiSample", "Dataset", "generate_dataset", "generate_sample",
    "NoiseSchedule", "cosine_schedule", "ddim_sample", "DiffusionCodec", "ModelConfig",
    "from_angular_delay", "nmse", "nmse_db", "to_angular_delay",
    "BaselineCodec", "BaselineConfig", "RDPoint", "evaluate", "rd_sweep",
    "TrainingConfig", "load_checkpoint", "load_codec", "train",
]
__version__ = "0.1.0"
